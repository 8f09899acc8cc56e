//! Image quality metrics: full-reference PSNR/SSIM, no-reference UIQM/UCIQE,
//! and the PSNR-derived degradation label.
//!
//! UIQM/UCIQE follow the standard underwater IQA formulations; every
//! unstated detail (block sizes, trimming, color conversion) is pinned
//! identically here and in `tools/oracle_gen.py`, which freezes the expected
//! values in `oracle_values.rs`.

pub mod fixtures;
pub mod oracle_values;
mod ssim;
mod uciqe;
mod uiqm;

pub use ssim::{ssim, ssim_channel};
pub use uciqe::{srgb_to_lab, uciqe};
pub use uiqm::uiqm;

use crate::data::ImagePair;
use crate::{Error, Result};
use ndarray::ArrayViewD;

/// PSNR reported for identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB. `peak` is the maximum signal value
/// (1.0 for unit-range images). Symmetric in its arguments; identical
/// images return [`PSNR_CAP_DB`].
pub fn psnr(pred: &ArrayViewD<f64>, reference: &ArrayViewD<f64>, peak: f64) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::Contract(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    if peak <= 0.0 {
        return Err(Error::Contract(format!("psnr peak must be > 0, got {peak}")));
    }
    let mse = pred
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Decomposed UCIQE terms `(sigma_c, con_l, mu_s)` for diagnostics.
pub fn uciqe_components(img: &ndarray::ArrayView3<f64>) -> Result<(f64, f64, f64)> {
    uciqe::components(img)
}

/// Empirical PSNR range of a corpus; anchors the degradation label.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LabelRange {
    pub psnr_min: f64,
    pub psnr_max: f64,
}

impl LabelRange {
    pub fn new(psnr_min: f64, psnr_max: f64) -> Result<Self> {
        if !(psnr_min < psnr_max) {
            return Err(Error::Config(format!(
                "label range requires psnr_min < psnr_max, got [{psnr_min}, {psnr_max}]"
            )));
        }
        Ok(Self { psnr_min, psnr_max })
    }

    /// Observed raw-vs-reference PSNR extremes over a corpus.
    pub fn from_pairs(pairs: &[ImagePair]) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for pair in pairs {
            let p = psnr(
                &pair.raw.view().into_dyn(),
                &pair.reference.view().into_dyn(),
                1.0,
            )?;
            lo = lo.min(p);
            hi = hi.max(p);
        }
        if !(lo < hi) {
            // degenerate corpus (all pairs equally degraded); widen slightly
            lo -= 0.5;
            hi += 0.5;
        }
        LabelRange::new(lo, hi)
    }
}

/// Maps a PSNR to a degradation score: `1 - (psnr - min)/(max - min)`,
/// clamped to `[0, 1]`. Higher means more degraded.
pub fn degradation_from_psnr(psnr_db: f64, range: &LabelRange) -> f64 {
    let d = 1.0 - (psnr_db - range.psnr_min) / (range.psnr_max - range.psnr_min);
    d.clamp(0.0, 1.0)
}

/// Degradation label of a pair from its raw-vs-reference PSNR.
pub fn degradation_label(pair: &ImagePair, range: &LabelRange) -> Result<f64> {
    let p = psnr(
        &pair.raw.view().into_dyn(),
        &pair.reference.view().into_dyn(),
        1.0,
    )?;
    Ok(degradation_from_psnr(p, range))
}

/// One image's metric row; PSNR/SSIM are absent without a reference.
#[derive(Debug, Clone, serde::Serialize)]
pub struct QualityReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uiqm: f64,
    pub uciqe: f64,
}

/// Scores an `[H, W, 3]` image, optionally against a reference.
pub fn quality_report(
    img: &ndarray::ArrayView3<f64>,
    reference: Option<&ndarray::ArrayView3<f64>>,
) -> Result<QualityReport> {
    let (psnr_v, ssim_v) = match reference {
        Some(r) => (
            Some(psnr(&img.clone().into_dyn(), &r.clone().into_dyn(), 1.0)?),
            Some(ssim(img, r)?),
        ),
        None => (None, None),
    };
    Ok(QualityReport {
        psnr: psnr_v,
        ssim: ssim_v,
        uiqm: uiqm(img)?,
        uciqe: uciqe(img)?,
    })
}
