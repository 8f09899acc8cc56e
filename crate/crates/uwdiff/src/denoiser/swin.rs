//! Windowed-attention transformer blocks and patch-resolution adapters for
//! the U-shaped denoiser.
//!
//! Feature maps stay in `[N,C,H,W]` layout throughout; window partitioning
//! is a reshape/permute pair, and the shifted variant rolls the map
//! cyclically and masks attention across the wrap-around seam.

use crate::nn::layers::Conv2d;
use crate::nn::{init, Graph, ParamStore, Session, Var};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use super::adagn::AdaGn;

/// Additive mask value that suppresses attention across shifted-window seams.
const MASK_NEG: f64 = -1e9;

/// `[N,C,H,W]` -> `[N*windows*heads, window^2, C/heads]`.
pub(crate) fn to_windows(g: &Graph, x: Var, ws: usize, heads: usize) -> Var {
    let sh = g.shape(x);
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let hd = c / heads;
    let (hh, wh) = (h / ws, w / ws);
    let r = g.reshape(x, &[n, heads, hd, hh, ws, wh, ws]);
    let p = g.permute(r, &[0, 3, 5, 1, 4, 6, 2]); // [N,hh,wh,heads,ws,ws,hd]
    g.reshape(p, &[n * hh * wh * heads, ws * ws, hd])
}

/// Inverse of [`to_windows`].
pub(crate) fn from_windows(
    g: &Graph,
    x: Var,
    ws: usize,
    heads: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Var {
    let hd = c / heads;
    let (hh, wh) = (h / ws, w / ws);
    let r = g.reshape(x, &[n, hh, wh, heads, ws, ws, hd]);
    let p = g.permute(r, &[0, 3, 6, 1, 4, 2, 5]); // [N,heads,hd,hh,ws,wh,ws]
    g.reshape(p, &[n, c, h, w])
}

/// Region-id based attention mask for a cyclically shifted map:
/// `[windows, 1, window^2, window^2]` with 0 on allowed pairs and a large
/// negative value across seam regions.
pub(crate) fn shift_mask(side: usize, ws: usize, shift: usize) -> ArrayD<f64> {
    let mut ids = vec![0.0f64; side * side];
    let bounds = [(0, side - ws), (side - ws, side - shift), (side - shift, side)];
    let mut cnt = 0.0;
    for &(hs, he) in &bounds {
        for &(vs, ve) in &bounds {
            for y in hs..he {
                for x in vs..ve {
                    ids[y * side + x] = cnt;
                }
            }
            cnt += 1.0;
        }
    }
    let (hh, wh) = (side / ws, side / ws);
    let s2 = ws * ws;
    let mut mask = ArrayD::zeros(ndarray::IxDyn(&[hh * wh, 1, s2, s2]));
    for wy in 0..hh {
        for wx in 0..wh {
            let wi = wy * wh + wx;
            for i in 0..s2 {
                let yi = wy * ws + i / ws;
                let xi = wx * ws + i % ws;
                for j in 0..s2 {
                    let yj = wy * ws + j / ws;
                    let xj = wx * ws + j % ws;
                    if ids[yi * side + xi] != ids[yj * side + xj] {
                        mask[[wi, 0, i, j]] = MASK_NEG;
                    }
                }
            }
        }
    }
    mask
}

/// Relative-position index into the `(2w-1)^2`-row bias table for every
/// in-window pixel pair.
fn relative_index(ws: usize) -> Vec<usize> {
    let s2 = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(s2 * s2);
    for i in 0..s2 {
        let (yi, xi) = (i / ws, i % ws);
        for j in 0..s2 {
            let (yj, xj) = (j / ws, j % ws);
            let dy = yi + ws - 1 - yj;
            let dx = xi + ws - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Multi-head self-attention within (optionally shifted) square windows,
/// with a learned relative-position bias.
pub struct WindowAttention {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    qkv: Conv2d,
    proj: Conv2d,
    rel_index: Vec<usize>,
}

impl WindowAttention {
    pub fn new(name: impl Into<String>, channels: usize, heads: usize, window: usize) -> Self {
        let name = name.into();
        assert!(channels % heads == 0, "heads must divide channels");
        Self {
            qkv: Conv2d::new(format!("{name}.qkv"), channels, 3 * channels, 1, 1, 0),
            proj: Conv2d::new(format!("{name}.proj"), channels, channels, 1, 1, 0),
            rel_index: relative_index(window),
            name,
            channels,
            heads,
            window,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.qkv.init(store, rng);
        self.proj.init(store, rng);
        let span = 2 * self.window - 1;
        store.insert(
            &format!("{}.relpos", self.name),
            init::normal(rng, &[span * span, self.heads], 0.02),
        );
    }

    pub fn forward(&self, s: &Session, x: Var, shift: usize) -> Var {
        let g = s.g;
        let sh = g.shape(x);
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(c, self.channels);
        assert!(h == w && h % self.window == 0, "side {h} incompatible with window {}", self.window);
        let ws = self.window;
        let (heads, hd) = (self.heads, c / self.heads);
        let nw = (h / ws) * (w / ws);
        let s2 = ws * ws;

        let xs = if shift > 0 {
            g.roll2d(x, -(shift as isize), -(shift as isize))
        } else {
            x
        };
        let qkv = self.qkv.forward(s, xs);
        let part = |off: usize| {
            let v = g.slice_axis(qkv, 1, off * c, c);
            to_windows(g, v, ws, heads)
        };
        let (q, k, v) = (part(0), part(1), part(2));

        let kt = g.permute(k, &[0, 2, 1]);
        let attn = g.scale(g.batch_matmul(q, kt), 1.0 / (hd as f64).sqrt());

        let table = s.param(&format!("{}.relpos", self.name));
        let gathered = g.gather_rows(table, self.rel_index.clone());
        let bias = g.permute(g.reshape(gathered, &[s2, s2, heads]), &[2, 0, 1]);
        let a5 = g.reshape(attn, &[n, nw, heads, s2, s2]);
        let mut a5 = g.add(a5, bias);
        if shift > 0 {
            a5 = g.add(a5, g.constant(shift_mask(h, ws, shift)));
        }
        let attn = g.softmax_last(g.reshape(a5, &[n * nw * heads, s2, s2]));

        let out = g.batch_matmul(attn, v);
        let merged = from_windows(g, out, ws, heads, n, c, h, w);
        let merged = if shift > 0 {
            g.roll2d(merged, shift as isize, shift as isize)
        } else {
            merged
        };
        self.proj.forward(s, merged)
    }
}

/// Pre-norm transformer block: windowed attention and a pointwise MLP, each
/// behind a conditioned normalization and a residual connection. Blocks at
/// odd depth use the shifted window layout.
pub struct SwinBlock {
    pub channels: usize,
    pub shifted: bool,
    norm1: AdaGn,
    attn: WindowAttention,
    norm2: AdaGn,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        heads: usize,
        window: usize,
        groups: usize,
        cond_dim: usize,
        mlp_ratio: usize,
        shifted: bool,
        eps: f64,
    ) -> Self {
        let name = name.into();
        let hidden = channels * mlp_ratio;
        Self {
            channels,
            shifted,
            norm1: AdaGn::new(format!("{name}.n1"), channels, groups, cond_dim, eps),
            attn: WindowAttention::new(format!("{name}.attn"), channels, heads, window),
            norm2: AdaGn::new(format!("{name}.n2"), channels, groups, cond_dim, eps),
            fc1: Conv2d::new(format!("{name}.fc1"), channels, hidden, 1, 1, 0),
            fc2: Conv2d::new(format!("{name}.fc2"), hidden, channels, 1, 1, 0),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.norm1.init(store, rng);
        self.attn.init(store, rng);
        self.norm2.init(store, rng);
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward(&self, s: &Session, x: Var, cond: Var) -> Var {
        let g = s.g;
        let side = g.shape(x)[2];
        let shift = if self.shifted && side > self.attn.window {
            self.attn.window / 2
        } else {
            0
        };
        let a = self.attn.forward(s, self.norm1.forward(s, x, cond), shift);
        let x = g.add(x, a);
        let m = self.fc2.forward(s, g.silu(self.fc1.forward(s, self.norm2.forward(s, x, cond))));
        g.add(x, m)
    }
}

/// A run of transformer blocks at one resolution.
pub struct Stage {
    pub blocks: Vec<SwinBlock>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        depth: usize,
        channels: usize,
        heads: usize,
        window: usize,
        groups: usize,
        cond_dim: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                SwinBlock::new(
                    format!("{name}.b{i}"),
                    channels,
                    heads,
                    window,
                    groups,
                    cond_dim,
                    mlp_ratio,
                    i % 2 == 1,
                    eps,
                )
            })
            .collect();
        Self { blocks }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    pub fn forward(&self, s: &Session, mut x: Var, cond: Var) -> Var {
        for b in &self.blocks {
            x = b.forward(s, x, cond);
        }
        x
    }
}

/// Non-overlapping `patch x patch` pixels folded into channels, then
/// projected to the embedding width.
pub struct PatchEmbed {
    pub patch: usize,
    conv: Conv2d,
}

impl PatchEmbed {
    pub fn new(name: impl Into<String>, in_channels: usize, embed: usize, patch: usize) -> Self {
        Self {
            patch,
            conv: Conv2d::new(name.into(), in_channels * patch * patch, embed, 1, 1, 0),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng);
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let folded = s.g.space_to_depth(x, self.patch);
        self.conv.forward(s, folded)
    }
}

/// Downsample by 2: fold a 2x2 neighborhood into channels and project
/// `4C -> 2C`.
pub struct PatchMerge {
    conv: Conv2d,
}

impl PatchMerge {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(name.into(), channels * 4, channels * 2, 1, 1, 0),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng);
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let folded = s.g.space_to_depth(x, 2);
        self.conv.forward(s, folded)
    }
}

/// Upsample by 2: project `C -> 2C` and unfold into a 2x2 neighborhood,
/// halving the channel count.
pub struct PatchExpand {
    conv: Conv2d,
}

impl PatchExpand {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(name.into(), channels, channels * 2, 1, 1, 0),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng);
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let wide = self.conv.forward(s, x);
        s.g.depth_to_space(wide, 2)
    }
}

/// Output head: project to `out * patch^2` channels and unfold back to full
/// resolution.
pub struct FinalExpand {
    pub patch: usize,
    conv: Conv2d,
}

impl FinalExpand {
    pub fn new(name: impl Into<String>, channels: usize, out: usize, patch: usize) -> Self {
        Self {
            patch,
            conv: Conv2d::new(name.into(), channels, out * patch * patch, 1, 1, 0),
        }
    }

    /// The projection starts at zero so an untrained network predicts zero
    /// noise; decoder activations are unnormalized and would otherwise give
    /// the initial prediction an arbitrarily large scale.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng);
        for suffix in ["w", "b"] {
            let name = format!("{}.{suffix}", self.conv.name);
            let zero = crate::nn::init::zeros(store.get(&name).shape());
            *store.get_mut(&name) = zero;
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let wide = self.conv.forward(s, x);
        s.g.depth_to_space(wide, self.patch)
    }
}
