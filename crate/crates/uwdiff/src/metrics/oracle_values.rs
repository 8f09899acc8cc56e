//! Frozen reference-metric values. Generated by tools/oracle_gen.py;
//! regenerate with `python3 tools/oracle_gen.py` after touching the
//! fixtures or metric definitions. Do not edit by hand.

/// Pixel sums of each (pred, ref) fixture image.
pub const FIXTURE_CHECKSUMS: [[f64; 2]; 10] = [
    [1526.884, 1526.884],
    [1421.5529411764708, 1228.8],
    [1542.5202020202019, 1529.4797979797981],
    [1531.5846153846155, 1510.4846153846156],
    [1525.7791666666667, 1524.3361344537816],
    [1508.549504950495, 1529.185],
    [1211.4232283464567, 1250.6],
    [1540.359375, 1536.126984126984],
    [1532.1031746031745, 1539.8968253968253],
    [1545.9276018099547, 1526.7741935483873],
];

pub const EXPECTED_PSNR: [f64; 10] = [
    100.0,
    24.04840395556061,
    4.734724238304163,
    7.868161505389317,
    8.442667073087017,
    8.6617415552682,
    18.154527315353704,
    9.52964872868346,
    7.757017409641954,
    7.79575420739047,
];

pub const EXPECTED_SSIM: [f64; 10] = [
    1.0,
    0.9894799575212189,
    -0.9842651572912477,
    0.23297617954949634,
    0.13410052787850898,
    0.1703816466716036,
    0.9533669624505648,
    0.3100236884300466,
    -0.046063554722114625,
    -0.02803105458039995,
];

/// UIQM of [pred, ref] per fixture pair.
pub const EXPECTED_UIQM: [[f64; 2]; 10] = [
    [3.366142233258883, 3.366142233258883],
    [0.0, 0.0],
    [3.915098520273186, 4.127097277663905],
    [2.8473197332684825, 2.863864374460089],
    [3.7622220895001814, 3.8338898673607447],
    [3.2889719741524424, 3.8741937553178833],
    [2.597733544810052, 2.580123492921874],
    [3.345578644466457, 3.580406666098589],
    [3.4160761659592995, 3.1599815613024242],
    [3.6520423695889406, 3.526409173303749],
];

/// UCIQE of [pred, ref] per fixture pair.
pub const EXPECTED_UCIQE: [[f64; 2]; 10] = [
    [0.5364648197245092, 0.5364648197245092],
    [1.4045254645498008e-05, 1.4556111155566415e-05],
    [0.47802017175059514, 0.49394588230504066],
    [0.4828577129660573, 0.5014151781851172],
    [0.5307198424919792, 0.528268990111295],
    [0.5023240179317487, 0.49954432584807273],
    [0.34084078910975024, 0.3561738640283727],
    [0.5262880638699494, 0.531380090197162],
    [0.5258939911797434, 0.5310050057018254],
    [0.515567552226105, 0.5232457590355931],
];
