//! Hybrid training objective: differentiable color-histogram KL, perceptual
//! feature distance, and feature-space contrastive cosine, combined as a
//! weighted sum.
//!
//! All cores build onto a [`Graph`] so gradients flow back to the
//! predictions; [`total_loss`] is a value-level convenience wrapper for
//! evaluation. The feature extractor is frozen: either a seeded
//! random-projection conv stack (the default; no pretrained weights are
//! required) or the identity map for tests.

use crate::nn::layers::Conv2d;
use crate::nn::{init, Graph, ParamStore, Session, Var};
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};

/// Histogram bin count.
pub const DEFAULT_BINS: usize = 32;
/// Kernel length scale of the soft binning, in intensity units (about
/// two-thirds of a bin width at 32 bins).
pub const DEFAULT_BANDWIDTH: f64 = 0.02;
/// Additive smoothing applied to both histograms before the log.
pub const HIST_SMOOTHING: f64 = 1e-6;
/// Guard added under the square root of each feature norm.
const NORM_GUARD: f64 = 1e-24;
/// Input normalization applied before the conv feature stack.
pub const FEATURE_NORM_MEAN: f64 = 0.5;
pub const FEATURE_NORM_STD: f64 = 0.5;

/// Weights of the three loss components.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_perc: f64,
    pub lambda_hist: f64,
    pub lambda_contra: f64,
}

impl LossWeights {
    pub fn new(lambda_perc: f64, lambda_hist: f64, lambda_contra: f64) -> Result<Self> {
        let w = Self {
            lambda_perc,
            lambda_hist,
            lambda_contra,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_perc < 0.0 || self.lambda_hist < 0.0 || self.lambda_contra < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_perc == 0.0 && self.lambda_hist == 0.0 && self.lambda_contra == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_perc: 1.0,
            lambda_hist: 0.5,
            lambda_contra: 0.5,
        }
    }
}

/// Evaluated loss components; `total` always equals the weighted sum of the
/// parts, computed in one fixed association order.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossReport {
    pub hist: f64,
    pub perc: f64,
    pub contra: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(hist: f64, perc: f64, contra: f64, w: &LossWeights) -> Self {
        Self {
            hist,
            perc,
            contra,
            total: combine(perc, hist, contra, w),
        }
    }
}

/// The canonical weighted-sum association: `λp·perc + (λh·hist + λc·contra)`.
pub fn combine(perc: f64, hist: f64, contra: f64, w: &LossWeights) -> f64 {
    w.lambda_perc * perc + (w.lambda_hist * hist + w.lambda_contra * contra)
}

/// Frozen feature map used by the perceptual and contrastive terms.
pub enum FeatureExtractor {
    /// Features are the raw pixels; used by property tests.
    Identity,
    /// A seeded, frozen three-stage conv stack with SiLU activations.
    RandomConv(RandomConvFeatures),
}

pub struct RandomConvFeatures {
    params: ParamStore,
    convs: Vec<Conv2d>,
}

impl RandomConvFeatures {
    pub fn new(seed: u64) -> Self {
        let convs = vec![
            Conv2d::new("feat.c1", 3, 8, 3, 2, 1),
            Conv2d::new("feat.c2", 8, 16, 3, 2, 1),
            Conv2d::new("feat.c3", 16, 16, 3, 1, 1),
        ];
        let mut params = ParamStore::new();
        let mut rng = init::seeded_rng(seed);
        for c in &convs {
            c.init(&mut params, &mut rng);
        }
        Self { params, convs }
    }
}

impl FeatureExtractor {
    pub fn identity() -> Self {
        Self::Identity
    }

    pub fn random_conv(seed: u64) -> Self {
        Self::RandomConv(RandomConvFeatures::new(seed))
    }

    /// Maps `[N,C,H,W]` images to feature activations. Frozen: no gradient
    /// reaches the extractor weights.
    pub fn features(&self, g: &Graph, x: Var) -> Var {
        match self {
            Self::Identity => x,
            Self::RandomConv(rc) => {
                let s = Session::new(g, &rc.params, false);
                let mut h = g.scale(
                    g.add_scalar(x, -FEATURE_NORM_MEAN),
                    1.0 / FEATURE_NORM_STD,
                );
                let last = rc.convs.len() - 1;
                for (i, c) in rc.convs.iter().enumerate() {
                    h = c.forward(&s, h);
                    if i < last {
                        h = g.silu(h);
                    }
                }
                h
            }
        }
    }
}

fn as_batched(g: &Graph, x: Var) -> Var {
    let shape = g.shape(x);
    match shape.len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(&shape);
            g.reshape(x, &s)
        }
        4 => x,
        _ => panic!("expected [C,H,W] or [N,C,H,W], got {shape:?}"),
    }
}

fn check_same_shape(g: &Graph, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Contract(format!(
            "loss inputs must share a shape, got {sa:?} vs {sb:?}"
        )));
    }
    Ok(())
}

/// Soft per-row histogram: `x` is `[rows, pixels]`, the result `[rows, bins]`
/// with rows summing to 1. Each pixel is assigned to bins by a softmax over
/// squared distances to the bin centers, scaled by `bandwidth`; as the
/// bandwidth shrinks the assignment approaches hard binning.
pub fn soft_histogram(g: &Graph, x: Var, bins: usize, bandwidth: f64) -> Var {
    let shape = g.shape(x);
    let (rows, px) = (shape[0], shape[1]);
    let x3 = g.reshape(x, &[rows, px, 1]);
    let centers: Vec<f64> = (0..bins).map(|b| (b as f64 + 0.5) / bins as f64).collect();
    let c = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, bins]), centers).unwrap());
    let d = g.sub(x3, c);
    let logits = g.scale(g.mul(d, d), -1.0 / (bandwidth * bandwidth));
    let w = g.softmax_last(logits);
    let h = g.mean_axis_keep(w, 1);
    g.reshape(h, &[rows, bins])
}

/// Sum over RGB channels of the KL divergence between soft histograms of the
/// prediction and the reference, averaged over the batch.
pub fn hist_loss_var(
    g: &Graph,
    pred: Var,
    reference: Var,
    bins: usize,
    bandwidth: f64,
) -> Result<Var> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    if bandwidth <= 0.0 {
        return Err(Error::Config(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let (pred, reference) = (as_batched(g, pred), as_batched(g, reference));
    check_same_shape(g, pred, reference)?;
    let shape = g.shape(pred);
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let rows = n * c;
    let hp = soft_histogram(g, g.reshape(pred, &[rows, h * w]), bins, bandwidth);
    let hq = soft_histogram(g, g.reshape(reference, &[rows, h * w]), bins, bandwidth);
    let p = g.add_scalar(hp, HIST_SMOOTHING);
    let q = g.add_scalar(hq, HIST_SMOOTHING);
    let kl = g.mul(p, g.sub(g.ln(p), g.ln(q)));
    // sum over bins and channels, mean over the batch
    Ok(g.scale(g.sum_all(kl), 1.0 / n as f64))
}

/// Mean absolute difference of frozen feature activations.
pub fn perc_loss_var(
    g: &Graph,
    pred: Var,
    reference: Var,
    extractor: &FeatureExtractor,
) -> Result<Var> {
    let (pred, reference) = (as_batched(g, pred), as_batched(g, reference));
    check_same_shape(g, pred, reference)?;
    let fp = extractor.features(g, pred);
    let fq = extractor.features(g, reference);
    Ok(g.mean_all(g.abs(g.sub(fp, fq))))
}

/// `1 - cos` between the flattened feature vectors of prediction and
/// reference; in `[0, 2]`. Near-zero feature norms are guarded and logged.
pub fn contra_loss_var(
    g: &Graph,
    pred: Var,
    reference: Var,
    extractor: &FeatureExtractor,
) -> Result<Var> {
    let (pred, reference) = (as_batched(g, pred), as_batched(g, reference));
    check_same_shape(g, pred, reference)?;
    let fp = extractor.features(g, pred);
    let fq = extractor.features(g, reference);
    let dot = g.sum_all(g.mul(fp, fq));
    let sp = g.sum_all(g.mul(fp, fp));
    let sq = g.sum_all(g.mul(fq, fq));
    if g.scalar_value(sp) < 1e-18 || g.scalar_value(sq) < 1e-18 {
        log::warn!("contrastive loss saw a near-zero feature vector; cosine guarded to 0");
    }
    let denom = g.mul(
        g.sqrt(g.add_scalar(sp, NORM_GUARD)),
        g.sqrt(g.add_scalar(sq, NORM_GUARD)),
    );
    let cos = g.div(dot, denom);
    Ok(g.add_scalar(g.neg(cos), 1.0))
}

/// Mean squared error; the noise-matching term of the diffusion objective.
pub fn mse_var(g: &Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    g.mean_all(g.mul(d, d))
}

/// The three component nodes plus their weighted sum.
pub struct LossTerms {
    pub total: Var,
    pub hist: Var,
    pub perc: Var,
    pub contra: Var,
}

/// Builds all three components and their weighted sum on the tape.
pub fn total_loss_var(
    g: &Graph,
    pred: Var,
    reference: Var,
    w: &LossWeights,
    extractor: &FeatureExtractor,
    bins: usize,
    bandwidth: f64,
) -> Result<LossTerms> {
    w.validate()?;
    let hist = hist_loss_var(g, pred, reference, bins, bandwidth)?;
    let perc = perc_loss_var(g, pred, reference, extractor)?;
    let contra = contra_loss_var(g, pred, reference, extractor)?;
    let total = g.add(
        g.scale(perc, w.lambda_perc),
        g.add(g.scale(hist, w.lambda_hist), g.scale(contra, w.lambda_contra)),
    );
    Ok(LossTerms {
        total,
        hist,
        perc,
        contra,
    })
}

/// Value-level evaluation of the hybrid loss on a single image pair.
pub fn total_loss(
    pred: &ArrayD<f64>,
    reference: &ArrayD<f64>,
    w: &LossWeights,
    extractor: &FeatureExtractor,
    bins: usize,
    bandwidth: f64,
) -> Result<LossReport> {
    let g = Graph::new();
    let p = g.constant(pred.clone());
    let r = g.constant(reference.clone());
    let terms = total_loss_var(&g, p, r, w, extractor, bins, bandwidth)?;
    Ok(LossReport::new(
        g.scalar_value(terms.hist),
        g.scalar_value(terms.perc),
        g.scalar_value(terms.contra),
        w,
    ))
}
