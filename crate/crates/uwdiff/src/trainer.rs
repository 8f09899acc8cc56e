//! Diffusion training orchestration: the optimization loop with stateful
//! resume, run manifests, and the ablation harness.
//!
//! The objective is noise-prediction MSE plus the image-space hybrid terms
//! evaluated on the one-step reconstruction
//! `x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, which ties losses defined on images to
//! a model that predicts noise. The schedule-modulation strength is a
//! learnable non-negative scalar stored as the `sched.alpha` parameter and
//! projected back to `[0,∞)` after every optimizer step.

use crate::checkpoint::{self, DiffusionCheckpoint, EstimatorCheckpoint};
use crate::data::{self, DatasetSplit, ImagePair};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserPredictor};
use crate::estimator::Estimator;
use crate::losses::{self, FeatureExtractor, LossWeights, DEFAULT_BANDWIDTH, DEFAULT_BINS};
use crate::metrics::{self, LabelRange};
use crate::nn::{
    clip_global_norm, init, Adam, AdamConfig, Ema, Graph, ParamStore, Session, Var,
};
use crate::schedule::{
    make_base, modulate, qsample_coeffs_var, sample_chain, standard_noise, BaseSchedule,
};
use crate::{Error, Result};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Seed of the frozen feature extractor behind the perceptual and
/// contrastive terms; fixed so losses are comparable across runs.
pub const PERC_EXTRACTOR_SEED: u64 = 1701;

const MIX: u64 = 0x9e37_79b9_7f4a_7c15;

/// Stateless stream derivation: every epoch's draws come from
/// `(seed, salt)` alone so a resumed run replays the identical stream.
fn stream_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_add(1).wrapping_mul(MIX)
}

const VAL_SALT: u64 = u64::MAX - 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub image_side: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Starting value of the learnable modulation strength.
    pub alpha_init: f64,
    pub weights: LossWeights,
    pub use_pgfm: bool,
    pub use_adagn: bool,
    pub use_hist: bool,
    pub use_perc: bool,
    pub use_contra: bool,
    /// Global gradient-norm ceiling; absent disables clipping.
    pub grad_clip: Option<f64>,
    pub use_ema: bool,
    pub ema_decay: f64,
    /// Chain start and stride for validation/ablation sampling.
    pub sample_t_start: usize,
    pub sample_stride: usize,
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl TrainConfig {
    /// Full-scale settings: 256x256, T=1500, 200 epochs.
    pub fn base() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            image_side: 256,
            t_steps: 1500,
            beta_start: 1e-4,
            beta_end: 0.02,
            alpha_init: 0.5,
            weights: LossWeights::default(),
            use_pgfm: true,
            use_adagn: true,
            use_hist: true,
            use_perc: true,
            use_contra: true,
            grad_clip: Some(1.0),
            use_ema: true,
            ema_decay: 0.999,
            sample_t_start: 1500,
            sample_stride: 30,
            denoiser: DenoiserConfig {
                input_side: 256,
                ..DenoiserConfig::base()
            },
        }
    }

    /// Desk-scale settings for tests: 32x32, short schedule, tiny denoiser.
    pub fn toy() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 2e-4,
            seed: 0,
            image_side: 32,
            t_steps: 50,
            sample_t_start: 50,
            sample_stride: 5,
            denoiser: DenoiserConfig::tiny(),
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return fail("batch size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if self.alpha_init < 0.0 {
            return fail(format!(
                "modulation strength init {} must be non-negative",
                self.alpha_init
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("gradient clip {c} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("EMA decay {} outside [0,1)", self.ema_decay));
        }
        if self.sample_t_start < 1 || self.sample_t_start > self.t_steps {
            return fail(format!(
                "sampling start {} outside 1..={}",
                self.sample_t_start, self.t_steps
            ));
        }
        if self.sample_stride < 1 {
            return fail("sampling stride must be >= 1".into());
        }
        self.weights.validate()?;
        make_base(self.t_steps, self.beta_start, self.beta_end)?;
        let den = self.effective_denoiser();
        den.validate()?;
        if den.input_side != self.image_side {
            return fail(format!(
                "denoiser expects side {}, training images are {}",
                den.input_side, self.image_side
            ));
        }
        Ok(())
    }

    /// Denoiser architecture with the run's ablation flags applied.
    pub fn effective_denoiser(&self) -> DenoiserConfig {
        let mut d = self.denoiser.clone();
        d.use_pgfm = self.use_pgfm;
        d.use_adagn = self.use_adagn;
        d
    }

    /// Copy with every ablation flag forced on; two grid cells are
    /// comparable iff their normalized forms are identical.
    fn flags_normalized(&self) -> Self {
        let mut c = self.clone();
        c.use_pgfm = true;
        c.use_adagn = true;
        c.use_hist = true;
        c.use_perc = true;
        c.use_contra = true;
        c.denoiser.use_pgfm = true;
        c.denoiser.use_adagn = true;
        c
    }
}

/// Where per-image degradation scores come from during training.
pub enum DegradationSource {
    /// PSNR-derived labels computed straight from the paired corpus.
    TeacherForcing,
    /// A frozen regressor scoring each raw image without its reference.
    Estimator(EstimatorCheckpoint),
}

impl DegradationSource {
    /// Label normalization: fitted on the training pairs in teacher-forcing
    /// mode, carried by the checkpoint otherwise.
    pub fn label_range(&self, train: &[ImagePair]) -> Result<LabelRange> {
        match self {
            Self::TeacherForcing => LabelRange::from_pairs(train),
            Self::Estimator(ckpt) => Ok(ckpt.label_range),
        }
    }

    pub fn scores(&self, pairs: &[ImagePair], range: &LabelRange) -> Result<Vec<f64>> {
        match self {
            Self::TeacherForcing => pairs
                .iter()
                .map(|p| metrics::degradation_label(p, range))
                .collect(),
            Self::Estimator(ckpt) => {
                let est = Estimator::new(ckpt.config.clone())?;
                pairs
                    .iter()
                    .map(|p| {
                        let raw = data::to_chw(&p.raw.view()).into_dyn();
                        est.predict_score(&ckpt.params, &raw, None)
                    })
                    .collect()
            }
        }
    }
}

/// Content hash of a corpus: ids, shapes, and pixel bytes in order.
pub fn corpus_fingerprint<'a>(pairs: impl IntoIterator<Item = &'a ImagePair>) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.id.as_bytes());
        for dim in p.raw.shape() {
            h.update((*dim as u64).to_le_bytes());
        }
        for v in p.raw.iter().chain(p.reference.iter()) {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub alpha_coeff: f64,
    pub grad_norm_mean: f64,
}

/// The run record: immutable config snapshot plus append-only metric rows.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub corpus_fingerprint: String,
    pub label_range: LabelRange,
    pub rows: Vec<EpochRow>,
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, split: &DatasetSplit, range: LabelRange) -> Self {
        Self {
            config: cfg.clone(),
            corpus_fingerprint: corpus_fingerprint(split.train.iter().chain(&split.val)),
            label_range: range,
            rows: Vec::new(),
            checkpoints: Vec::new(),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
        checkpoint::atomic_write(path, &bytes)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: manifest decode: {e}", path.display())))
    }

    /// Metric rows as CSV, one line per epoch.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| Error::Checkpoint(format!("metric csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Checkpoint(format!("metric csv: {e}")))?;
        checkpoint::atomic_write(path, &bytes)
    }
}

/// Everything the loop mutates; persisting it makes training resumable
/// mid-run with bit-identical results.
pub struct TrainState {
    pub params: ParamStore,
    pub opt: Adam,
    pub ema: Option<Ema>,
    pub best_val: f64,
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub next_epoch: usize,
}

const ALPHA_PARAM: &str = "sched.alpha";

impl TrainState {
    pub fn new(cfg: &TrainConfig, den: &Denoiser) -> Self {
        let mut params = ParamStore::new();
        let mut rng = init::seeded_rng(cfg.seed);
        den.init(&mut params, &mut rng);
        params.insert(ALPHA_PARAM, ArrayD::from_elem(IxDyn(&[1]), cfg.alpha_init));
        let ema = cfg.use_ema.then(|| Ema::new(cfg.ema_decay, &params));
        let best_params = params.clone();
        Self {
            params,
            opt: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            ema,
            best_val: f64::INFINITY,
            best_params,
            best_epoch: 0,
            next_epoch: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.params.get(ALPHA_PARAM).as_slice().unwrap()[0]
    }

    /// Weights a consumer should evaluate with: the EMA shadow when enabled,
    /// the raw parameters otherwise.
    pub fn eval_params(&self) -> ParamStore {
        match &self.ema {
            Some(e) => e.snapshot(),
            None => self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat = ParamStore::new();
        for (k, v) in self.params.iter() {
            flat.insert(&format!("model/{k}"), v.clone());
        }
        let (t, m, v) = self.opt.export_state();
        for (k, g) in &m {
            flat.insert(&format!("adam.m/{k}"), g.clone());
        }
        for (k, g) in &v {
            flat.insert(&format!("adam.v/{k}"), g.clone());
        }
        if let Some(e) = &self.ema {
            for (k, g) in &e.shadow {
                flat.insert(&format!("ema/{k}"), g.clone());
            }
        }
        for (k, g) in self.best_params.iter() {
            flat.insert(&format!("best/{k}"), g.clone());
        }
        let meta = serde_json::json!({
            "adam_t": t,
            "best_val": self.best_val,
            "best_epoch": self.best_epoch,
            "next_epoch": self.next_epoch,
        });
        checkpoint::save_params(path, "train-state", meta, &flat)
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let (kind, meta, flat) = checkpoint::load_params(path)?;
        if kind != "train-state" {
            return Err(Error::Checkpoint(format!(
                "{}: expected a train-state checkpoint, found {kind:?}",
                path.display()
            )));
        }
        let mut params = ParamStore::new();
        let (mut m, mut v) = (IndexMap::new(), IndexMap::new());
        let mut shadow = IndexMap::new();
        let mut best_params = ParamStore::new();
        for (k, val) in flat.iter() {
            if let Some(n) = k.strip_prefix("model/") {
                params.insert(n, val.clone());
            } else if let Some(n) = k.strip_prefix("adam.m/") {
                m.insert(n.to_string(), val.clone());
            } else if let Some(n) = k.strip_prefix("adam.v/") {
                v.insert(n.to_string(), val.clone());
            } else if let Some(n) = k.strip_prefix("ema/") {
                shadow.insert(n.to_string(), val.clone());
            } else if let Some(n) = k.strip_prefix("best/") {
                best_params.insert(n, val.clone());
            }
        }
        let grab = |key: &str| -> Result<u64> {
            meta.get(key)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {key}", path.display())))
        };
        let mut opt = Adam::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        });
        opt.import_state(grab("adam_t")?, m, v);
        let ema = (!shadow.is_empty()).then(|| Ema {
            decay: cfg.ema_decay,
            shadow,
        });
        Ok(Self {
            params,
            opt,
            ema,
            best_val: meta
                .get("best_val")
                .and_then(|v| v.as_f64())
                .unwrap_or(f64::INFINITY),
            best_params,
            best_epoch: grab("best_epoch")? as usize,
            next_epoch: grab("next_epoch")? as usize,
        })
    }
}

/// One batch stacked channels-first, with its draw bookkeeping.
struct Batch {
    ids: Vec<String>,
    ref01: ArrayD<f64>,
    raw01: ArrayD<f64>,
    ds: Vec<f64>,
    ts: Vec<usize>,
    noise: ArrayD<f64>,
}

fn stack_chw(pairs: &[&ImagePair], pick_raw: bool) -> ArrayD<f64> {
    let (h, w) = {
        let s = pairs[0].raw.shape();
        (s[0], s[1])
    };
    let mut out = ArrayD::zeros(IxDyn(&[pairs.len(), 3, h, w]));
    for (i, p) in pairs.iter().enumerate() {
        let src = if pick_raw { &p.raw } else { &p.reference };
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&data::to_chw(&src.view()));
    }
    out
}

fn draw_batch(
    pairs: &[ImagePair],
    ds_all: &[f64],
    idx: &[usize],
    t_steps: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Batch {
    let members: Vec<&ImagePair> = idx.iter().map(|&i| &pairs[i]).collect();
    let side = members[0].raw.shape()[0];
    // One timestep per batch: the image-space terms act on the batch as a
    // whole, so a shared t keeps their alpha_bar weighting exact instead of
    // letting one strong-noise element pollute the batch statistics.
    let t_shared = rng.gen_range(1..=t_steps);
    let ts: Vec<usize> = vec![t_shared; members.len()];
    let noise = standard_noise(rng, &[members.len(), 3, side, side]);
    Batch {
        ids: members.iter().map(|p| p.id.clone()).collect(),
        ref01: stack_chw(&members, false),
        raw01: stack_chw(&members, true),
        ds: idx.iter().map(|&i| ds_all[i]).collect(),
        ts,
        noise,
    }
}

/// Builds the composite objective on the tape and returns its node.
///
/// Term order is fixed: `mse + (λp·perc + (λh·hist + λc·contra))`, with
/// disabled terms absent from the graph entirely.
fn objective(
    g: &Graph,
    s: &Session,
    den: &Denoiser,
    base: &BaseSchedule,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    batch: &Batch,
) -> Result<Var> {
    let ref01 = g.constant(batch.ref01.clone());
    let x0 = g.add_scalar(g.scale(ref01, 2.0), -1.0);
    let raw = g.constant(batch.raw01.mapv(|v| 2.0 * v - 1.0));
    let eps = g.constant(batch.noise.clone());

    let alpha = s.param(ALPHA_PARAM);
    let (sa, sb) = qsample_coeffs_var(g, alpha, base, &batch.ds, &batch.ts)?;
    let xt = g.add(g.mul(sa, x0), g.mul(sb, eps));
    let eps_hat = den.forward(s, g.concat(1, &[xt, raw]), &batch.ts, &batch.ds)?;
    let mut total = losses::mse_var(g, eps_hat, eps);

    if cfg.use_hist || cfg.use_perc || cfg.use_contra {
        let x0_hat = g.div(g.sub(xt, g.mul(sb, eps_hat)), sa);
        let img01 = g.add_scalar(g.scale(x0_hat, 0.5), 0.5);
        let w = &cfg.weights;
        let mut hybrid: Option<Var> = None;
        if cfg.use_perc {
            let p = losses::perc_loss_var(g, img01, ref01, extractor)?;
            hybrid = Some(g.scale(p, w.lambda_perc));
        }
        let mut hc: Option<Var> = None;
        if cfg.use_hist {
            let h = losses::hist_loss_var(g, img01, ref01, DEFAULT_BINS, DEFAULT_BANDWIDTH)?;
            hc = Some(g.scale(h, w.lambda_hist));
        }
        if cfg.use_contra {
            let c = g.scale(losses::contra_loss_var(g, img01, ref01, extractor)?, w.lambda_contra);
            hc = Some(match hc {
                Some(x) => g.add(x, c),
                None => c,
            });
        }
        if let Some(hc) = hc {
            hybrid = Some(match hybrid {
                Some(p) => g.add(p, hc),
                None => hc,
            });
        }
        if let Some(h) = hybrid {
            // The image-space terms act on a one-step reconstruction whose
            // error is amplified by 1/sqrt(alpha_bar), so at strong timesteps
            // they would drown the noise objective in reconstruction noise.
            // Weight the block by the batch-mean alpha_bar (signal retention)
            // to anchor it to timesteps where the estimate is informative;
            // like other signal-to-noise loss weightings it is applied as a
            // constant, not differentiated through.
            let sa_vals = g.value(sa);
            let w_snr = sa_vals.iter().map(|v| v * v).sum::<f64>() / sa_vals.len() as f64;
            total = g.add(total, g.scale(h, w_snr));
        }
    }
    Ok(total)
}

/// Composite loss of `params` on fixed validation draws (no gradients).
fn validation_loss(
    den: &Denoiser,
    base: &BaseSchedule,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    params: &ParamStore,
    val: &[ImagePair],
    val_ds: &[f64],
) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = init::seeded_rng(stream_seed(cfg.seed, VAL_SALT));
    let idx_all: Vec<usize> = (0..val.len()).collect();
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in idx_all.chunks(cfg.batch_size) {
        let batch = draw_batch(val, val_ds, chunk, cfg.t_steps, &mut rng);
        let g = Graph::new();
        let s = Session::new(&g, params, false);
        let loss = objective(&g, &s, den, base, cfg, extractor, &batch)?;
        total += g.scalar_value(loss) * chunk.len() as f64;
        count += chunk.len() as f64;
    }
    Ok(total / count)
}

/// Advances training to `until_epoch`, appending one manifest row per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_range(
    split: &DatasetSplit,
    train_ds: &[f64],
    val_ds: &[f64],
    cfg: &TrainConfig,
    den: &Denoiser,
    base: &BaseSchedule,
    state: &mut TrainState,
    until_epoch: usize,
    manifest: &mut RunManifest,
) -> Result<()> {
    let extractor = FeatureExtractor::random_conv(PERC_EXTRACTOR_SEED);
    while state.next_epoch < until_epoch {
        let epoch = state.next_epoch;
        let order = data::batch_indices(
            split.train.len(),
            cfg.batch_size.min(split.train.len()),
            stream_seed(cfg.seed, 2 * epoch as u64),
        );
        let mut draw_rng = init::seeded_rng(stream_seed(cfg.seed, 2 * epoch as u64 + 1));
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut batches = 0.0_f64;
        for idx in order {
            let batch = draw_batch(&split.train, train_ds, &idx, cfg.t_steps, &mut draw_rng);
            let g = Graph::new();
            let s = Session::new(&g, &state.params, true);
            let loss = objective(&g, &s, den, base, cfg, &extractor, &batch)?;
            let loss_val = g.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    step: state.opt.steps_taken() as usize,
                    batch_ids: batch.ids,
                    detail: format!("loss {loss_val} at epoch {epoch}"),
                });
            }
            let grads = g.backward(loss);
            let mut named = s.collect_grads(&grads);
            let norm = match cfg.grad_clip {
                Some(c) => clip_global_norm(&mut named, c),
                None => crate::nn::global_grad_norm(&named),
            };
            state.opt.step(&mut state.params, &named);
            // keep "more degraded -> more noise" semantics
            let a = state.params.get_mut(ALPHA_PARAM);
            if a.as_slice().unwrap()[0] < 0.0 {
                a.as_slice_mut().unwrap()[0] = 0.0;
            }
            if let Some(e) = &mut state.ema {
                e.update(&state.params);
            }
            loss_sum += loss_val;
            norm_sum += norm;
            batches += 1.0;
        }

        let candidate = state.eval_params();
        let val_loss = validation_loss(den, base, cfg, &extractor, &candidate, &split.val, val_ds)?;
        if val_loss.is_finite() && val_loss < state.best_val {
            state.best_val = val_loss;
            state.best_params = candidate;
            state.best_epoch = epoch;
        }
        manifest.rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / batches.max(1.0),
            val_loss,
            alpha_coeff: state.alpha(),
            grad_norm_mean: norm_sum / batches.max(1.0),
        });
        state.next_epoch += 1;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub manifest: RunManifest,
    pub denoiser: Denoiser,
    pub base: BaseSchedule,
}

impl TrainOutcome {
    /// Sampler bundle from the given weights (strips the schedule parameter
    /// into the header).
    pub fn to_checkpoint(&self, params: &ParamStore) -> DiffusionCheckpoint {
        export_checkpoint(&self.manifest.config, &self.base, params)
    }
}

/// Packages trained weights for the sampler: the modulation strength moves
/// out of the parameter table into the schedule header.
pub fn export_checkpoint(
    cfg: &TrainConfig,
    base: &BaseSchedule,
    params: &ParamStore,
) -> DiffusionCheckpoint {
    let mut weights = ParamStore::new();
    let mut alpha = cfg.alpha_init;
    for (k, v) in params.iter() {
        if k == ALPHA_PARAM {
            alpha = v.as_slice().unwrap()[0];
        } else {
            weights.insert(k, v.clone());
        }
    }
    DiffusionCheckpoint {
        denoiser: cfg.effective_denoiser(),
        base: base.clone(),
        alpha_coeff: alpha.max(0.0),
        params: weights,
    }
}

/// Full training run from a fresh initialization.
pub fn train_diffusion(
    split: &DatasetSplit,
    source: &DegradationSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let den = Denoiser::new(cfg.effective_denoiser())?;
    let base = make_base(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;
    let range = source.label_range(&split.train)?;
    let train_ds = source.scores(&split.train, &range)?;
    let val_ds = source.scores(&split.val, &range)?;
    let mut state = TrainState::new(cfg, &den);
    let mut manifest = RunManifest::new(cfg, split, range);
    train_range(
        split, &train_ds, &val_ds, cfg, &den, &base, &mut state, cfg.epochs, &mut manifest,
    )?;
    Ok(TrainOutcome {
        state,
        manifest,
        denoiser: den,
        base,
    })
}

/// Runs the reverse chain on one raw image under a trained checkpoint.
/// Input and output are `[3, side, side]` in `[0,1]`.
pub fn enhance_image(
    ckpt: &DiffusionCheckpoint,
    den: &Denoiser,
    raw01: &ArrayD<f64>,
    d: f64,
    t_start: usize,
    stride: usize,
    seed: u64,
) -> Result<ArrayD<f64>> {
    let sched = modulate(&ckpt.base, d, ckpt.alpha_coeff)?;
    let predictor = DenoiserPredictor {
        denoiser: den,
        params: &ckpt.params,
        raw01: raw01.clone(),
        d,
    };
    let mut rng = init::seeded_rng(seed);
    sample_chain(raw01, &predictor, &sched, t_start, stride, &mut rng)
}

/// Mean full-reference quality of sampled enhancements over a corpus.
pub fn eval_samples(
    ckpt: &DiffusionCheckpoint,
    den: &Denoiser,
    pairs: &[ImagePair],
    ds: &[f64],
    t_start: usize,
    stride: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let raw = data::to_chw(&pair.raw.view()).into_dyn();
        let out = enhance_image(
            ckpt,
            den,
            &raw,
            ds[i],
            t_start,
            stride,
            stream_seed(seed, i as u64),
        )?;
        let side = pair.raw.shape()[0];
        let hwc = data::to_hwc(
            &out.view()
                .into_shape_with_order((3, side, side))
                .unwrap(),
        );
        psnr_sum += metrics::psnr(&hwc.view().into_dyn(), &pair.reference.view().into_dyn(), 1.0)?;
        ssim_sum += metrics::ssim(&hwc.view(), &pair.reference.view())?;
    }
    let n = pairs.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

/// One ablation cell: the flag setting and its validation-set quality.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationCell {
    pub use_pgfm: bool,
    pub use_adagn: bool,
    pub use_hist: bool,
    pub use_perc: bool,
    pub use_contra: bool,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub final_train_loss: f64,
}

/// Trains every grid cell under identical seeds and scores its best weights
/// on the validation split by actually sampling.
pub fn run_ablation(
    grid: &[TrainConfig],
    split: &DatasetSplit,
    source: &DegradationSource,
) -> Result<Vec<AblationCell>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let reference = serde_json::to_string(&grid[0].flags_normalized())
        .map_err(|e| Error::Config(format!("grid encode: {e}")))?;
    for cfg in &grid[1..] {
        let norm = serde_json::to_string(&cfg.flags_normalized())
            .map_err(|e| Error::Config(format!("grid encode: {e}")))?;
        if norm != reference {
            return Err(Error::Config(
                "ablation grid cells must differ only in ablation flags".into(),
            ));
        }
    }

    let range = source.label_range(&split.train)?;
    let val_ds = source.scores(&split.val, &range)?;
    let mut cells = Vec::with_capacity(grid.len());
    for cfg in grid {
        let outcome = train_diffusion(split, source, cfg)?;
        let ckpt = outcome.to_checkpoint(&outcome.state.best_params);
        let (val_psnr, val_ssim) = eval_samples(
            &ckpt,
            &outcome.denoiser,
            &split.val,
            &val_ds,
            cfg.sample_t_start,
            cfg.sample_stride,
            cfg.seed,
        )?;
        cells.push(AblationCell {
            use_pgfm: cfg.use_pgfm,
            use_adagn: cfg.use_adagn,
            use_hist: cfg.use_hist,
            use_perc: cfg.use_perc,
            use_contra: cfg.use_contra,
            val_psnr,
            val_ssim,
            final_train_loss: outcome
                .manifest
                .rows
                .last()
                .map(|r| r.train_loss)
                .unwrap_or(f64::NAN),
        });
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_corpus, DegradeKind};
    use tempfile::tempdir;

    fn toy_split(n_train: usize, n_val: usize, side: usize, seed: u64) -> DatasetSplit {
        let all = make_corpus(n_train + n_val, side, seed, DegradeKind::Underwater);
        let (train, val) = {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (i, p) in all.into_iter().enumerate() {
                if i % (n_train + n_val) < n_train {
                    // first block trains; deterministic, severity-interleaving
                    // is unnecessary for these smoke tests
                    train.push(p);
                } else {
                    val.push(p);
                }
            }
            (train, val)
        };
        DatasetSplit {
            train,
            val,
            seed,
        }
    }

    fn micro_cfg(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::toy();
        cfg.epochs = epochs;
        cfg.t_steps = 12;
        cfg.sample_t_start = 12;
        cfg.sample_stride = 4;
        cfg.batch_size = 2;
        cfg.use_ema = false;
        cfg
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let split = toy_split(2, 1, 32, 11);
        let cfg = micro_cfg(0);
        let out = train_diffusion(&split, &DegradationSource::TeacherForcing, &cfg).unwrap();
        assert!(out.manifest.rows.is_empty());
        let den = Denoiser::new(cfg.effective_denoiser()).unwrap();
        let fresh = TrainState::new(&cfg, &den);
        for (k, v) in fresh.params.iter() {
            assert_eq!(v, out.state.params.get(k), "{k} changed in a 0-epoch run");
        }
    }

    #[test]
    fn same_seed_reproduces_loss_curve_bitwise() {
        let split = toy_split(3, 1, 32, 12);
        let cfg = micro_cfg(2);
        let a = train_diffusion(&split, &DegradationSource::TeacherForcing, &cfg).unwrap();
        let b = train_diffusion(&split, &DegradationSource::TeacherForcing, &cfg).unwrap();
        for (ra, rb) in a.manifest.rows.iter().zip(&b.manifest.rows) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
            assert_eq!(ra.alpha_coeff.to_bits(), rb.alpha_coeff.to_bits());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let split = toy_split(3, 1, 32, 13);
        let cfg = micro_cfg(3);
        let full = train_diffusion(&split, &DegradationSource::TeacherForcing, &cfg).unwrap();

        // run 2 epochs, persist, reload, run the third
        let den = Denoiser::new(cfg.effective_denoiser()).unwrap();
        let base = make_base(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let range = DegradationSource::TeacherForcing
            .label_range(&split.train)
            .unwrap();
        let tds = DegradationSource::TeacherForcing
            .scores(&split.train, &range)
            .unwrap();
        let vds = DegradationSource::TeacherForcing
            .scores(&split.val, &range)
            .unwrap();
        let mut state = TrainState::new(&cfg, &den);
        let mut manifest = RunManifest::new(&cfg, &split, range);
        train_range(&split, &tds, &vds, &cfg, &den, &base, &mut state, 2, &mut manifest).unwrap();

        let dir = tempdir().unwrap();
        let ckpt_path = dir.path().join("state.uwdf");
        state.save(&ckpt_path).unwrap();
        let mut resumed = TrainState::load(&ckpt_path, &cfg).unwrap();
        assert_eq!(resumed.next_epoch, 2);
        train_range(
            &split, &tds, &vds, &cfg, &den, &base, &mut resumed, 3, &mut manifest,
        )
        .unwrap();

        for (k, v) in full.state.params.iter() {
            let r = resumed.params.get(k);
            for (a, b) in v.iter().zip(r.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{k} diverged across resume");
            }
        }
        assert_eq!(manifest.rows.len(), 3);
        for (ra, rb) in manifest.rows.iter().zip(&full.manifest.rows) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
        }
    }

    #[test]
    fn loss_decreases_on_tiny_overfit() {
        let split = toy_split(2, 1, 32, 14);
        let mut cfg = micro_cfg(10);
        cfg.lr = 1e-2;
        let out = train_diffusion(&split, &DegradationSource::TeacherForcing, &cfg).unwrap();
        // Per-epoch losses jitter with the drawn timesteps, so compare means
        // of the first and last thirds rather than single epochs.
        let losses: Vec<f64> = out.manifest.rows.iter().map(|r| r.train_loss).collect();
        let third = losses.len() / 3;
        let head = losses[..third].iter().sum::<f64>() / third as f64;
        let tail = losses[losses.len() - third..].iter().sum::<f64>() / third as f64;
        assert!(
            tail < head,
            "train loss did not move: {head:.4} -> {tail:.4} ({losses:?})"
        );
        assert!(out.state.alpha() >= 0.0);
    }

    #[test]
    fn ablation_grid_rejects_non_flag_differences() {
        let split = toy_split(2, 1, 32, 15);
        let a = micro_cfg(1);
        let mut b = micro_cfg(1);
        b.lr *= 2.0;
        let err = run_ablation(&[a, b], &split, &DegradationSource::TeacherForcing);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn all_off_cell_matches_plain_baseline_bitwise() {
        let split = toy_split(2, 1, 32, 16);
        let mut off = micro_cfg(1);
        off.use_pgfm = false;
        off.use_adagn = false;
        off.use_hist = false;
        off.use_perc = false;
        off.use_contra = false;

        let cell_run = train_diffusion(&split, &DegradationSource::TeacherForcing, &off).unwrap();
        let plain = train_diffusion(&split, &DegradationSource::TeacherForcing, &off).unwrap();
        for (ra, rb) in cell_run
            .manifest
            .rows
            .iter()
            .zip(&plain.manifest.rows)
        {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
        }
        for (k, v) in cell_run.state.params.iter() {
            let p = plain.state.params.get(k);
            for (x, y) in v.iter().zip(p.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = make_corpus(3, 16, 1, DegradeKind::BlurNoise);
        let b = make_corpus(3, 16, 1, DegradeKind::BlurNoise);
        let c = make_corpus(3, 16, 2, DegradeKind::BlurNoise);
        assert_eq!(corpus_fingerprint(&a), corpus_fingerprint(&b));
        assert_ne!(corpus_fingerprint(&a), corpus_fingerprint(&c));
    }

    #[test]
    fn manifest_round_trips_and_logs_csv() {
        let split = toy_split(2, 1, 32, 17);
        let cfg = micro_cfg(1);
        let out = train_diffusion(&split, &DegradationSource::TeacherForcing, &cfg).unwrap();
        let dir = tempdir().unwrap();
        let j = dir.path().join("manifest.json");
        let c = dir.path().join("metrics.csv");
        out.manifest.save_json(&j).unwrap();
        out.manifest.save_csv(&c).unwrap();
        let back = RunManifest::load_json(&j).unwrap();
        assert_eq!(back.rows.len(), 1);
        assert_eq!(back.corpus_fingerprint, out.manifest.corpus_fingerprint);
        let mut rdr = csv::Reader::from_path(&c).unwrap();
        assert_eq!(rdr.records().count(), 1);
    }

    #[test]
    fn enhance_is_seed_deterministic() {
        let split = toy_split(2, 1, 32, 18);
        let cfg = micro_cfg(1);
        let out = train_diffusion(&split, &DegradationSource::TeacherForcing, &cfg).unwrap();
        let ckpt = out.to_checkpoint(&out.state.best_params);
        let raw = data::to_chw(&split.val[0].raw.view()).into_dyn();
        let a = enhance_image(&ckpt, &out.denoiser, &raw, 0.4, 8, 3, 99).unwrap();
        let b = enhance_image(&ckpt, &out.denoiser, &raw, 0.4, 8, 3, 99).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
