//! Procedural image corpora for self-contained training and verification
//! runs: smooth synthetic "clean" scenes plus parameterized degradations
//! (generic blur+noise, and an underwater-style recipe with red attenuation
//! and a blue-green veil).
//!
//! Everything is deterministic from the supplied RNG, so corpora regenerate
//! bit-identically from a seed.

use crate::data::ImagePair;
use ndarray::{Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Smooth multi-frequency scene in `[0.1, 0.9]`, channels-first `[3,S,S]`.
pub fn clean_image(rng: &mut ChaCha8Rng, side: usize) -> ArrayD<f64> {
    let mut img = ArrayD::zeros(ndarray::IxDyn(&[3, side, side]));
    // shared structure plus per-channel variation, over a few octaves
    let mut comps: Vec<(f64, f64, f64, f64, [f64; 3])> = Vec::new();
    for octave in 0..5 {
        let f = 1.0 + octave as f64 * 1.4;
        let fx = f * (0.4 + 1.2 * rng.gen::<f64>());
        let fy = f * (0.4 + 1.2 * rng.gen::<f64>());
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let amp = 1.0 / (1.0 + octave as f64);
        let mix = [
            0.5 + 0.5 * rng.gen::<f64>(),
            0.5 + 0.5 * rng.gen::<f64>(),
            0.5 + 0.5 * rng.gen::<f64>(),
        ];
        comps.push((fx, fy, phase, amp, mix));
    }
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let mut v = 0.0;
                for (fx, fy, phase, amp, mix) in &comps {
                    let arg = std::f64::consts::TAU
                        * (fx * x as f64 / side as f64 + fy * y as f64 / side as f64)
                        + phase;
                    v += amp * mix[c] * arg.cos();
                }
                img[[c, y, x]] = v;
            }
        }
    }
    // min-max to [0.1, 0.9]
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in img.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-9);
    img.mapv(|v| 0.1 + 0.8 * (v - lo) / span)
}

/// Separable Gaussian blur with reflected boundaries on a `[3,S,S]` image.
pub fn gaussian_blur(img: &ArrayD<f64>, sigma: f64) -> ArrayD<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (2.5 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / norm).collect();

    let sh = img.shape().to_vec();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = img.clone();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + ki as isize - radius, w as isize);
                    acc += kv * img[[ci, y, xx]];
                }
                tmp[[ci, y, x]] = acc;
            }
        }
    }
    let mut out = tmp.clone();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + ki as isize - radius, h as isize);
                    acc += kv * tmp[[ci, yy, x]];
                }
                out[[ci, y, x]] = acc;
            }
        }
    }
    out
}

fn add_noise(img: &mut ArrayD<f64>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    for v in img.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + sigma * n).clamp(0.0, 1.0);
    }
}

/// Generic degradation: Gaussian blur and sensor-style noise, both scaled by
/// `severity` in `[0,1]`.
pub fn degrade_blur_noise(img: &ArrayD<f64>, severity: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let mut out = gaussian_blur(img, 2.2 * severity);
    add_noise(&mut out, 0.10 * severity, rng);
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Underwater-style degradation: wavelength-dependent attenuation (red
/// strongest), a blue-green veil, mild blur, and noise.
pub fn degrade_underwater(img: &ArrayD<f64>, severity: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let s = severity;
    let atten = [1.0 - 0.55 * s, 1.0 - 0.15 * s, 1.0 - 0.10 * s];
    let veil = [0.10, 0.45, 0.55];
    let a = 0.45 * s;
    let mut out = img.clone();
    let sh = out.shape().to_vec();
    for c in 0..3 {
        for y in 0..sh[1] {
            for x in 0..sh[2] {
                let v = out[[c, y, x]] * atten[c];
                out[[c, y, x]] = v * (1.0 - a) + a * veil[c];
            }
        }
    }
    let mut out = gaussian_blur(&out, 1.2 * s);
    add_noise(&mut out, 0.05 * s, rng);
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradeKind {
    BlurNoise,
    Underwater,
}

/// A corpus of `(degraded, clean)` pairs with severities spread over
/// `[0.1, 0.95]` in a deterministic but shuffled order. Pair images are
/// stored height-width-channel like the disk loader produces.
pub fn make_corpus(n: usize, side: usize, seed: u64, kind: DegradeKind) -> Vec<ImagePair> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let clean = clean_image(&mut rng, side);
            let severity = if n == 1 {
                0.5
            } else {
                0.1 + 0.85 * (i as f64 / (n - 1) as f64)
            };
            let degraded = match kind {
                DegradeKind::BlurNoise => degrade_blur_noise(&clean, severity, &mut rng),
                DegradeKind::Underwater => degrade_underwater(&clean, severity, &mut rng),
            };
            ImagePair {
                id: format!("syn{i:04}"),
                raw: chw_to_hwc3(&degraded),
                reference: chw_to_hwc3(&clean),
            }
        })
        .collect()
}

fn chw_to_hwc3(img: &ArrayD<f64>) -> Array3<f64> {
    let sh = img.shape();
    let (h, w) = (sh[1], sh[2]);
    let mut out = Array3::zeros((h, w, 3));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[[y, x, c]] = img[[c, y, x]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn clean_images_are_deterministic_and_in_range() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let x = clean_image(&mut a, 24);
        let y = clean_image(&mut b, 24);
        assert_eq!(x, y);
        assert!(x.iter().all(|&v| (0.1..=0.9).contains(&v)));
        // not constant
        let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
        assert!(hi - lo > 0.5);
    }

    #[test]
    fn blur_preserves_mean_and_smooths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = clean_image(&mut rng, 20);
        let b = gaussian_blur(&x, 1.5);
        let mean_x = x.mean().unwrap();
        let mean_b = b.mean().unwrap();
        assert!((mean_x - mean_b).abs() < 1e-3, "mean drift {}", (mean_x - mean_b).abs());
        let var = |a: &ArrayD<f64>| {
            let m = a.mean().unwrap();
            a.mapv(|v| (v - m) * (v - m)).mean().unwrap()
        };
        assert!(var(&b) < var(&x));
        // zero sigma is the identity
        assert_eq!(gaussian_blur(&x, 0.0), x);
    }

    #[test]
    fn severity_orders_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clean = clean_image(&mut rng, 24);
        let mut last = f64::INFINITY;
        for s in [0.2, 0.5, 0.8] {
            let mut r = ChaCha8Rng::seed_from_u64(8);
            let deg = degrade_blur_noise(&clean, s, &mut r);
            let p = metrics::psnr(&deg.view(), &clean.view(), 1.0).unwrap();
            assert!(p < last, "severity {s}: psnr {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn underwater_recipe_attenuates_red_most() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clean = ArrayD::from_elem(IxDyn(&[3, 16, 16]), 0.8);
        let deg = degrade_underwater(&clean, 0.8, &mut rng);
        let ch_mean = |c: usize| {
            deg.index_axis(ndarray::Axis(0), c).mean().unwrap()
        };
        let (r, g, b) = (ch_mean(0), ch_mean(1), ch_mean(2));
        assert!(r < g && r < b, "red {r} not the most attenuated (g {g}, b {b})");
    }

    #[test]
    fn corpus_is_seed_stable_with_spread_severities() {
        let a = make_corpus(6, 16, 11, DegradeKind::Underwater);
        let b = make_corpus(6, 16, 11, DegradeKind::Underwater);
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.raw, y.raw);
            assert_eq!(x.reference, y.reference);
        }
        // severities produce a clear PSNR spread
        let psnrs: Vec<f64> = a
            .iter()
            .map(|p| {
                metrics::psnr(&p.raw.view().into_dyn(), &p.reference.view().into_dyn(), 1.0)
                    .unwrap()
            })
            .collect();
        let (lo, hi) = psnrs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi - lo > 5.0, "psnr spread {lo}..{hi} too narrow");
    }
}
