//! UCIQE: weighted sum of chroma standard deviation, luminance contrast,
//! and mean saturation in CIELab (weights 0.4680 / 0.2745 / 0.2576).
//!
//! sRGB input is linearized, converted through XYZ (D65), and mapped to Lab.
//! L is normalized by 100 and a/b by 110 before the statistics; luminance
//! contrast is the spread between the top and bottom percentile means.

use crate::{Error, Result};
use ndarray::ArrayView3;

const W_SIGMA_C: f64 = 0.4680;
const W_CON_L: f64 = 0.2745;
const W_MU_S: f64 = 0.2576;

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB in `[0,1]` -> (L, a, b) with D65 white.
pub fn srgb_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (rl, gl, bl) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    let (xn, yn, zn) = (0.95047, 1.0, 1.08883);
    let (fx, fy, fz) = (lab_f(x / xn), lab_f(y / yn), lab_f(z / zn));
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// UCIQE of an `[H, W, 3]` RGB image in `[0, 1]`.
pub fn uciqe(img: &ArrayView3<f64>) -> Result<f64> {
    let (sigma_c, con_l, mu_s) = components(img)?;
    Ok(W_SIGMA_C * sigma_c + W_CON_L * con_l + W_MU_S * mu_s)
}

/// The three UCIQE terms `(sigma_c, con_l, mu_s)` before weighting.
pub(crate) fn components(img: &ArrayView3<f64>) -> Result<(f64, f64, f64)> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Contract(format!(
            "uciqe expects [H,W,3] RGB, got {:?}",
            img.dim()
        )));
    }
    let n = h * w;
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (ll, aa, bb) = srgb_to_lab(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
            let lhat = ll / 100.0;
            let ahat = aa / 110.0;
            let bhat = bb / 110.0;
            let ch = (ahat * ahat + bhat * bhat).sqrt();
            let denom = (ch * ch + lhat * lhat).sqrt();
            sat_sum += if denom > 0.0 { ch / denom } else { 0.0 };
            lum.push(lhat);
            chroma.push(ch);
        }
    }
    let mu_c = chroma.iter().sum::<f64>() / n as f64;
    let sigma_c =
        (chroma.iter().map(|v| (v - mu_c) * (v - mu_c)).sum::<f64>() / n as f64).sqrt();

    lum.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((0.01 * n as f64 + 0.5) as usize).max(1);
    let bottom = lum[..k].iter().sum::<f64>() / k as f64;
    let top = lum[n - k..].iter().sum::<f64>() / k as f64;
    let con_l = top - bottom;

    let mu_s = sat_sum / n as f64;
    Ok((sigma_c, con_l, mu_s))
}
