//! U-shaped windowed-attention noise predictor conditioned on the diffusion
//! timestep and the degradation score.
//!
//! The conditioning pair `(t, D)` becomes one fused embedding — a sinusoidal
//! timestep code plus a linear projection of `D` — which every adaptive
//! normalization consumes. The physical-guided fusion block sits on a
//! configurable decoder stage.

pub mod adagn;
pub mod pgfm;
pub mod swin;

use crate::nn::layers::{sinusoidal_embedding, Conv2d, Linear};
use crate::nn::{Graph, ParamStore, Session, Var};
use crate::schedule::NoisePredictor;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use pgfm::Pgfm;
use swin::{FinalExpand, PatchEmbed, PatchExpand, PatchMerge, Stage};

/// Source of the channel amplified by the red-compensation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedSource {
    /// Amplify feature channel 0 of the stage input.
    FeatureChannel,
    /// Amplify the raw image's red channel, average-pooled to stage
    /// resolution.
    RawRed,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Noisy image channels plus conditioning channels (3 + 3).
    pub in_channels: usize,
    pub out_channels: usize,
    /// Expected square input side; resolved at construction.
    pub input_side: usize,
    pub patch: usize,
    pub embed_dim: usize,
    /// Transformer blocks per level; the last entry is the bottleneck.
    pub depths: Vec<usize>,
    pub window_size: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub num_groups: usize,
    pub cond_dim: usize,
    /// Decoder stage (0 = coarsest) carrying the fusion block.
    pub pgfm_stage: usize,
    pub red_source: RedSource,
    pub eps: f64,
    /// Feed the degradation score into the normalization conditioning.
    /// Off, the norm layers are modulated by the timestep embedding alone,
    /// which is the degradation-unaware baseline.
    #[serde(default = "default_true")]
    pub use_adagn: bool,
    /// Apply the physics-guided fusion block in the decoder.
    #[serde(default = "default_true")]
    pub use_pgfm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl DenoiserConfig {
    /// Desk-scale default: 64x64 inputs, three levels.
    pub fn base() -> Self {
        Self {
            in_channels: 6,
            out_channels: 3,
            input_side: 64,
            patch: 4,
            embed_dim: 64,
            depths: vec![2, 2, 2],
            window_size: 8,
            head_dim: 16,
            mlp_ratio: 2,
            num_groups: 8,
            cond_dim: 128,
            pgfm_stage: 1,
            red_source: RedSource::FeatureChannel,
            eps: 1e-5,
            use_adagn: true,
            use_pgfm: true,
        }
    }

    /// Small configuration for tests: 32x32 inputs, narrow embedding.
    pub fn tiny() -> Self {
        Self {
            input_side: 32,
            embed_dim: 16,
            cond_dim: 32,
            ..Self::base()
        }
    }

    fn levels(&self) -> usize {
        self.depths.len()
    }

    /// Channel width at a pyramid level.
    fn channels_at(&self, level: usize) -> usize {
        self.embed_dim << level
    }

    /// Spatial side at a pyramid level.
    fn side_at(&self, level: usize) -> usize {
        (self.input_side / self.patch) >> level
    }

    /// Per-level effective window: the configured size, clamped to the map.
    fn window_at(&self, level: usize) -> usize {
        self.window_size.min(self.side_at(level))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depths.len() < 2 {
            return fail("need at least two levels (encoder + bottleneck)".into());
        }
        if self.out_channels < 1 || self.in_channels < self.out_channels {
            return fail(format!(
                "channel setup {}->{} is invalid",
                self.in_channels, self.out_channels
            ));
        }
        if self.patch < 1 || self.input_side % self.patch != 0 {
            return fail(format!(
                "input side {} not divisible by patch {}",
                self.input_side, self.patch
            ));
        }
        if self.cond_dim < 2 || self.cond_dim % 2 != 0 {
            return fail(format!("conditioning dim {} must be even", self.cond_dim));
        }
        if self.eps <= 0.0 {
            return fail(format!("normalization eps {} must be positive", self.eps));
        }
        if self.mlp_ratio < 1 {
            return fail("mlp ratio must be at least 1".into());
        }
        for level in 0..self.levels() {
            let side = self.side_at(level);
            let ch = self.channels_at(level);
            if side < 1 {
                return fail(format!(
                    "input side {} too small for {} levels",
                    self.input_side,
                    self.levels()
                ));
            }
            let ws = self.window_at(level);
            if side % ws != 0 {
                return fail(format!(
                    "level {level}: side {side} not divisible by window {ws}"
                ));
            }
            if ch % self.num_groups != 0 {
                return fail(format!(
                    "level {level}: {} groups do not divide {ch} channels",
                    self.num_groups
                ));
            }
            if ch % self.head_dim != 0 {
                return fail(format!(
                    "level {level}: head dim {} does not divide {ch} channels",
                    self.head_dim
                ));
            }
        }
        if self.pgfm_stage + 2 > self.levels() {
            return fail(format!(
                "fusion stage {} out of range for {} decoder stages",
                self.pgfm_stage,
                self.levels() - 1
            ));
        }
        Ok(())
    }
}

pub struct Denoiser {
    pub cfg: DenoiserConfig,
    dproj: Linear,
    embed: PatchEmbed,
    enc: Vec<Stage>,
    downs: Vec<PatchMerge>,
    bottleneck: Stage,
    ups: Vec<PatchExpand>,
    fuses: Vec<Conv2d>,
    dec: Vec<Stage>,
    pgfm: Pgfm,
    head: FinalExpand,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels();
        let stage = |name: String, level: usize, depth: usize| {
            Stage::new(
                &name,
                depth,
                cfg.channels_at(level),
                cfg.channels_at(level) / cfg.head_dim,
                cfg.window_at(level),
                cfg.num_groups,
                cfg.cond_dim,
                cfg.mlp_ratio,
                cfg.eps,
            )
        };

        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for level in 0..levels - 1 {
            enc.push(stage(format!("enc{level}"), level, cfg.depths[level]));
            downs.push(PatchMerge::new(format!("down{level}"), cfg.channels_at(level)));
        }
        let bottleneck = stage("mid".into(), levels - 1, cfg.depths[levels - 1]);

        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut dec = Vec::new();
        for (i, level) in (0..levels - 1).rev().enumerate() {
            ups.push(PatchExpand::new(
                format!("up{i}"),
                cfg.channels_at(level + 1),
            ));
            fuses.push(Conv2d::new(
                format!("dec{i}.fuse"),
                cfg.channels_at(level) * 2,
                cfg.channels_at(level),
                1,
                1,
                0,
            ));
            dec.push(stage(format!("dec{i}"), level, cfg.depths[level]));
        }

        let pgfm_level = levels - 2 - cfg.pgfm_stage;
        Ok(Self {
            dproj: Linear::new("cond.dproj", 1, cfg.cond_dim),
            embed: PatchEmbed::new("embed", cfg.in_channels, cfg.embed_dim, cfg.patch),
            enc,
            downs,
            bottleneck,
            ups,
            fuses,
            dec,
            pgfm: Pgfm::new("pgfm", cfg.channels_at(pgfm_level)),
            head: FinalExpand::new("head", cfg.embed_dim, cfg.out_channels, cfg.patch),
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.dproj.init(store, rng);
        self.embed.init(store, rng);
        for (s, d) in self.enc.iter().zip(&self.downs) {
            s.init(store, rng);
            d.init(store, rng);
        }
        self.bottleneck.init(store, rng);
        for ((u, f), s) in self.ups.iter().zip(&self.fuses).zip(&self.dec) {
            u.init(store, rng);
            f.init(store, rng);
            s.init(store, rng);
        }
        self.pgfm.init(store, rng);
        self.head.init(store, rng);
    }

    /// Conditioning embedding for a batch of `(t, D)` pairs. The degradation
    /// projection joins only when the adaptive-normalization path is enabled.
    fn cond_embed(&self, s: &Session, ts: &[usize], ds: &[f64]) -> Var {
        let g = s.g;
        let t = g.constant(sinusoidal_embedding(ts, self.cfg.cond_dim));
        if !self.cfg.use_adagn {
            return t;
        }
        let d = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[ds.len(), 1]), ds.to_vec()).unwrap(),
        );
        g.add(t, self.dproj.forward(s, d))
    }

    /// Predicts the forward noise for `x` (`[N, in_channels, side, side]`,
    /// noisy image stacked with the raw conditioning image) at per-sample
    /// steps `ts` and degradation scores `ds`.
    pub fn forward(&self, s: &Session, x: Var, ts: &[usize], ds: &[f64]) -> Result<Var> {
        let g = s.g;
        let sh = g.shape(x);
        let cfg = &self.cfg;
        if sh.len() != 4
            || sh[1] != cfg.in_channels
            || sh[2] != cfg.input_side
            || sh[3] != cfg.input_side
        {
            return Err(Error::Contract(format!(
                "denoiser input {sh:?} does not match [N,{},{},{}]",
                cfg.in_channels, cfg.input_side, cfg.input_side
            )));
        }
        let n = sh[0];
        if ts.len() != n || ds.len() != n {
            return Err(Error::Contract(format!(
                "conditioning lengths t={} d={} for batch {n}",
                ts.len(),
                ds.len()
            )));
        }

        let cond = self.cond_embed(s, ts, ds);
        let mut h = self.embed.forward(s, x);
        let mut skips = Vec::new();
        for (stage, down) in self.enc.iter().zip(&self.downs) {
            h = stage.forward(s, h, cond);
            skips.push(h);
            h = down.forward(s, h);
        }
        h = self.bottleneck.forward(s, h, cond);

        for (i, ((up, fuse), stage)) in self
            .ups
            .iter()
            .zip(&self.fuses)
            .zip(&self.dec)
            .enumerate()
        {
            h = up.forward(s, h);
            let skip = skips[skips.len() - 1 - i];
            h = fuse.forward(s, g.concat(1, &[h, skip]));
            h = stage.forward(s, h, cond);
            if cfg.use_pgfm && i == cfg.pgfm_stage {
                let d_var = g.constant(
                    ArrayD::from_shape_vec(IxDyn(&[n, 1, 1, 1]), ds.to_vec()).unwrap(),
                );
                let red = match cfg.red_source {
                    RedSource::FeatureChannel => None,
                    RedSource::RawRed => {
                        let level = cfg.levels() - 2 - cfg.pgfm_stage;
                        let raw_red = g.slice_axis(x, 1, cfg.out_channels, 1);
                        Some(avg_pool(g, raw_red, cfg.patch << level))
                    }
                };
                h = self.pgfm.forward(s, h, d_var, red)?;
            }
        }
        Ok(self.head.forward(s, h))
    }
}

/// Mean-pool a `[N,1,H,W]` map by an integer factor.
fn avg_pool(g: &Graph, x: Var, r: usize) -> Var {
    if r == 1 {
        return x;
    }
    let folded = g.space_to_depth(x, r);
    g.mean_axis_keep(folded, 1)
}

/// Binds a denoiser, frozen weights, and per-chain conditioning into the
/// sampling-loop interface. States arrive in the `[-1,1]` diffusion domain
/// as `[3, side, side]`.
pub struct DenoiserPredictor<'a> {
    pub denoiser: &'a Denoiser,
    pub params: &'a ParamStore,
    /// Raw conditioning image, `[3, side, side]` in `[0,1]`.
    pub raw01: ArrayD<f64>,
    pub d: f64,
}

impl NoisePredictor for DenoiserPredictor<'_> {
    fn predict(&self, xt: &ArrayD<f64>, t: usize) -> Result<ArrayD<f64>> {
        let g = Graph::new();
        let s = Session::new(&g, self.params, false);
        let sh = xt.shape();
        let cond = self.raw01.mapv(|v| 2.0 * v - 1.0);
        let noisy = g.constant(xt.clone().into_shape_with_order(IxDyn(&[1, sh[0], sh[1], sh[2]])).unwrap());
        let raw = g.constant(cond.into_shape_with_order(IxDyn(&[1, sh[0], sh[1], sh[2]])).unwrap());
        let stacked = g.concat(1, &[noisy, raw]);
        let out = self.denoiser.forward(&s, stacked, &[t], &[self.d])?;
        let v = g.value(out);
        Ok(v.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn())
    }
}
