//! Windowed SSIM with an 11x11 Gaussian weighting (sigma 1.5).
//!
//! Matches the common reference formulation: Gaussian-filtered local moments
//! with symmetric boundary handling, population covariance, K1=0.01,
//! K2=0.03, and a border crop of half the window before averaging.

use crate::{Error, Result};
use ndarray::{Array2, ArrayView2, ArrayView3};

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const SIGMA: f64 = 1.5;
const TRUNCATE: f64 = 3.5;

fn gaussian_kernel() -> Vec<f64> {
    let radius = (TRUNCATE * SIGMA + 0.5) as usize; // 5 -> 11-tap window
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (SIGMA * SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Symmetric reflection (`d c b a | a b c d | d c b a`) for out-of-range
/// positions.
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

/// Separable correlation with reflect boundaries.
fn filter_sep(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let radius = kernel.len() / 2;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let sy = reflect_idx(y as isize + j as isize - radius as isize, h as isize);
                acc += kv * img[[sy, x]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                let sx = reflect_idx(x as isize + j as isize - radius as isize, w as isize);
                acc += kv * tmp[[y, sx]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// SSIM of two single-channel images in `[0, peak]`.
pub fn ssim_channel(pred: &ArrayView2<f64>, reference: &ArrayView2<f64>, peak: f64) -> Result<f64> {
    if pred.dim() != reference.dim() {
        return Err(Error::Contract(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            pred.dim(),
            reference.dim()
        )));
    }
    let kernel = gaussian_kernel();
    let win = kernel.len();
    let (h, w) = pred.dim();
    if h < win || w < win {
        return Err(Error::Contract(format!(
            "image {h}x{w} smaller than the {win}x{win} SSIM window"
        )));
    }
    let x = pred.to_owned();
    let y = reference.to_owned();
    let ux = filter_sep(&x, &kernel);
    let uy = filter_sep(&y, &kernel);
    let uxx = filter_sep(&(&x * &x), &kernel);
    let uyy = filter_sep(&(&y * &y), &kernel);
    let uxy = filter_sep(&(&x * &y), &kernel);
    let vx = &uxx - &(&ux * &ux);
    let vy = &uyy - &(&uy * &uy);
    let vxy = &uxy - &(&ux * &uy);

    let c1 = (K1 * peak) * (K1 * peak);
    let c2 = (K2 * peak) * (K2 * peak);
    let pad = win / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for yy in pad..h - pad {
        for xx in pad..w - pad {
            let a1 = 2.0 * ux[[yy, xx]] * uy[[yy, xx]] + c1;
            let a2 = 2.0 * vxy[[yy, xx]] + c2;
            let b1 = ux[[yy, xx]] * ux[[yy, xx]] + uy[[yy, xx]] * uy[[yy, xx]] + c1;
            let b2 = vx[[yy, xx]] + vy[[yy, xx]] + c2;
            sum += (a1 * a2) / (b1 * b2);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// SSIM of two `[H, W, 3]` images in `[0, 1]`: mean of per-channel SSIMs.
pub fn ssim(pred: &ArrayView3<f64>, reference: &ArrayView3<f64>) -> Result<f64> {
    if pred.dim() != reference.dim() {
        return Err(Error::Contract(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            pred.dim(),
            reference.dim()
        )));
    }
    let channels = pred.dim().2;
    let mut acc = 0.0;
    for c in 0..channels {
        acc += ssim_channel(
            &pred.index_axis(ndarray::Axis(2), c),
            &reference.index_axis(ndarray::Axis(2), c),
            1.0,
        )?;
    }
    Ok(acc / channels as f64)
}
