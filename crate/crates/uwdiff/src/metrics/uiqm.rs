//! UIQM: colorfulness (UICM), sharpness (UISM), and contrast (UIConM)
//! combined with the standard weights 0.0282 / 0.2953 / 3.5753.
//!
//! Statistics run on the 0..255 intensity scale. Block measures use 8x8
//! tiles, full tiles only, and skip degenerate tiles so logarithms stay
//! finite. The companion oracle in `tools/oracle_gen.py` pins every one of
//! these choices; frozen agreement values live in `oracle_values.rs`.

use crate::{Error, Result};
use ndarray::{Array2, ArrayView3};

const W_UICM: f64 = 0.0282;
const W_UISM: f64 = 0.2953;
const W_UICONM: f64 = 3.5753;
const ALPHA_TRIM: f64 = 0.1;
const BLOCK: usize = 8;

/// Alpha-trimmed mean plus population second moment about that mean.
fn trimmed_stats(values: &mut Vec<f64>) -> (f64, f64) {
    let n = values.len();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t = (ALPHA_TRIM * n as f64) as usize;
    let kept = &values[t..n - t];
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    (mu, var)
}

fn uicm(r: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut rg: Vec<f64> = r.iter().zip(g.iter()).map(|(rv, gv)| rv - gv).collect();
    let mut yb: Vec<f64> = r
        .iter()
        .zip(g.iter())
        .zip(b.iter())
        .map(|((rv, gv), bv)| (rv + gv) / 2.0 - bv)
        .collect();
    let (mu_rg, var_rg) = trimmed_stats(&mut rg);
    let (mu_yb, var_yb) = trimmed_stats(&mut yb);
    -0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (var_rg + var_yb).sqrt()
}

fn reflect_idx(mut p: isize, n: isize) -> usize {
    loop {
        if p < 0 {
            p = -p - 1;
        } else if p >= n {
            p = 2 * n - p - 1;
        } else {
            return p as usize;
        }
    }
}

/// Separable correlation along one axis with reflect boundaries.
fn correlate_axis(img: &Array2<f64>, weights: &[f64], axis: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let radius = weights.len() / 2;
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in weights.iter().enumerate() {
                let off = j as isize - radius as isize;
                let (sy, sx) = if axis == 0 {
                    (reflect_idx(y as isize + off, h as isize), x)
                } else {
                    (y, reflect_idx(x as isize + off, w as isize))
                };
                acc += kv * img[[sy, sx]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Sobel gradient magnitude: derivative [-1,0,1] along one axis, smoothing
/// [1,2,1] along the other, reflect boundaries.
fn sobel_magnitude(img: &Array2<f64>) -> Array2<f64> {
    let dy = correlate_axis(&correlate_axis(img, &[-1.0, 0.0, 1.0], 0), &[1.0, 2.0, 1.0], 1);
    let dx = correlate_axis(&correlate_axis(img, &[-1.0, 0.0, 1.0], 1), &[1.0, 2.0, 1.0], 0);
    let mut out = Array2::<f64>::zeros(img.dim());
    ndarray::Zip::from(&mut out)
        .and(&dy)
        .and(&dx)
        .for_each(|o, &a, &b| *o = a.hypot(b));
    out
}

/// Log-ratio block measure: `2/(k1*k2) * sum ln(max/min)` over full 8x8
/// tiles, skipping tiles whose minimum is not positive.
fn eme(img: &Array2<f64>) -> f64 {
    let (h, w) = img.dim();
    let (k1, k2) = (h / BLOCK, w / BLOCK);
    let mut sum = 0.0;
    for by in 0..k1 {
        for bx in 0..k2 {
            let mut mx = f64::NEG_INFINITY;
            let mut mn = f64::INFINITY;
            for y in by * BLOCK..(by + 1) * BLOCK {
                for x in bx * BLOCK..(bx + 1) * BLOCK {
                    mx = mx.max(img[[y, x]]);
                    mn = mn.min(img[[y, x]]);
                }
            }
            if mn > 0.0 {
                sum += (mx / mn).ln();
            }
        }
    }
    2.0 / (k1 * k2) as f64 * sum
}

fn uism(r: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let edge = |c: &Array2<f64>| {
        let s = sobel_magnitude(c);
        eme(&(&s * c))
    };
    0.299 * edge(r) + 0.587 * edge(g) + 0.114 * edge(b)
}

/// Michelson-contrast entropy over 8x8 tiles of the luma plane:
/// `-1/(k1*k2) * sum m*ln(m)` with `m = (max-min)/(max+min)`.
fn uiconm(gray: &Array2<f64>) -> f64 {
    let (h, w) = gray.dim();
    let (k1, k2) = (h / BLOCK, w / BLOCK);
    let mut sum = 0.0;
    for by in 0..k1 {
        for bx in 0..k2 {
            let mut mx = f64::NEG_INFINITY;
            let mut mn = f64::INFINITY;
            for y in by * BLOCK..(by + 1) * BLOCK {
                for x in bx * BLOCK..(bx + 1) * BLOCK {
                    mx = mx.max(gray[[y, x]]);
                    mn = mn.min(gray[[y, x]]);
                }
            }
            let denom = mx + mn;
            if denom > 0.0 && mx > mn {
                let m = (mx - mn) / denom;
                sum += m * m.ln();
            }
        }
    }
    -sum / (k1 * k2) as f64
}

/// UIQM of an `[H, W, 3]` RGB image in `[0, 1]`.
pub fn uiqm(img: &ArrayView3<f64>) -> Result<f64> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Contract(format!(
            "uiqm expects [H,W,3] RGB, got {:?}",
            img.dim()
        )));
    }
    if h < BLOCK || w < BLOCK {
        return Err(Error::Contract(format!(
            "uiqm needs at least one {BLOCK}x{BLOCK} block, image is {h}x{w}"
        )));
    }
    let chan = |i: usize| img.index_axis(ndarray::Axis(2), i).mapv(|v| v * 255.0);
    let (r, g, b) = (chan(0), chan(1), chan(2));
    let gray = 0.299 * &r + 0.587 * &g + 0.114 * &b;
    Ok(W_UICM * uicm(&r, &g, &b) + W_UISM * uism(&r, &g, &b) + W_UICONM * uiconm(&gray))
}
