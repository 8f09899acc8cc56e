//! Degradation-aware conditional diffusion for underwater image enhancement.
//!
//! The pipeline has three trainable pieces and a metric suite:
//!
//! * a lightweight dual-stream CNN that regresses a scalar degradation score
//!   from (raw, reference) image pairs ([`estimator`]),
//! * a conditional DDPM whose noise schedule is modulated per sample by the
//!   degradation score ([`schedule`]) and whose noise predictor is a Swin-UNet
//!   with adaptive group normalization and a physically motivated fusion block
//!   in the decoder ([`denoiser`]),
//! * a hybrid training objective combining histogram, perceptual and
//!   contrastive terms ([`losses`]),
//! * full-reference (PSNR/SSIM) and no-reference (UIQM/UCIQE) underwater
//!   image quality measures ([`metrics`]).
//!
//! [`trainer`] orchestrates optimization runs and the ablation harness,
//! [`data`] handles paired corpora, and the `uwdiff` binary exposes the CLI.
//! All numerics are `f64` and fully deterministic under a fixed seed.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod estimator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
