//! Layer wrappers over the tape: linear, conv, group norm, embeddings.
//!
//! A layer owns only its name and hyperparameters. Weights live in a
//! [`ParamStore`]; `init` registers them and `forward` binds them through a
//! [`Session`].

use super::graph::Var;
use super::{init, ParamStore, Session};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert(
            &format!("{}.w", self.name),
            init::kaiming(rng, &[self.in_dim, self.out_dim], self.in_dim),
        );
        if self.bias {
            store.insert(&format!("{}.b", self.name), init::zeros(&[self.out_dim]));
        }
    }

    /// `x` may have any leading shape; the last axis must equal `in_dim`.
    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let g = s.g;
        let shape = g.shape(x);
        assert_eq!(
            *shape.last().unwrap(),
            self.in_dim,
            "linear {} input dim mismatch",
            self.name
        );
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.in_dim]);
        let w = s.param(&format!("{}.w", self.name));
        let mut y = g.matmul(flat, w);
        if self.bias {
            let b = s.param(&format!("{}.b", self.name));
            y = g.add(y, b);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(self.out_dim);
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
            bias: true,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert(
            &format!("{}.w", self.name),
            init::kaiming(
                rng,
                &[self.cout, self.cin, self.k, self.k],
                self.cin * self.k * self.k,
            ),
        );
        if self.bias {
            store.insert(&format!("{}.b", self.name), init::zeros(&[self.cout]));
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let g = s.g;
        let w = s.param(&format!("{}.w", self.name));
        let mut y = g.conv2d(x, w, self.stride, self.pad);
        if self.bias {
            let b = s.param(&format!("{}.b", self.name));
            let b4 = g.reshape(b, &[1, self.cout, 1, 1]);
            y = g.add(y, b4);
        }
        y
    }
}

#[derive(Clone)]
pub struct DepthwiseConv2d {
    pub name: String,
    pub channels: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl DepthwiseConv2d {
    pub fn new(name: impl Into<String>, channels: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            k,
            stride,
            pad,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert(
            &format!("{}.w", self.name),
            init::kaiming(rng, &[self.channels, self.k, self.k], self.k * self.k),
        );
        store.insert(&format!("{}.b", self.name), init::zeros(&[self.channels]));
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let g = s.g;
        let w = s.param(&format!("{}.w", self.name));
        let b = s.param(&format!("{}.b", self.name));
        let y = g.depthwise_conv2d(x, w, self.stride, self.pad);
        let b4 = g.reshape(b, &[1, self.channels, 1, 1]);
        g.add(y, b4)
    }
}

/// Normalizes an `[N,C,H,W]` tensor per group: `(x - mean) / (std + eps)`.
///
/// `eps` is added to the standard deviation, not the variance. A tiny guard
/// inside the square root keeps the gradient finite on constant inputs.
pub fn group_normalize(s: &Session, x: Var, groups: usize, eps: f64) -> Var {
    let g = s.g;
    let shape = g.shape(x);
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let xg = g.reshape(x, &[n, groups, c / groups, h, w]);
    let mu = g.mean_axes_keep(xg, &[2, 3, 4]);
    let d = g.sub(xg, mu);
    let var = g.mean_axes_keep(g.mul(d, d), &[2, 3, 4]);
    let std = g.sqrt(g.add_scalar(var, 1e-24));
    let denom = g.add_scalar(std, eps);
    let norm = g.div(d, denom);
    g.reshape(norm, &[n, c, h, w])
}

/// Group normalization with a static per-channel affine.
#[derive(Clone)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(&format!("{}.gamma", self.name), init::ones(&[self.channels]));
        store.insert(&format!("{}.beta", self.name), init::zeros(&[self.channels]));
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let g = s.g;
        let norm = group_normalize(s, x, self.groups, self.eps);
        let gamma = s.param(&format!("{}.gamma", self.name));
        let beta = s.param(&format!("{}.beta", self.name));
        let gamma4 = g.reshape(gamma, &[1, self.channels, 1, 1]);
        let beta4 = g.reshape(beta, &[1, self.channels, 1, 1]);
        g.add(g.mul(norm, gamma4), beta4)
    }
}

/// Sinusoidal position embedding for integer timesteps, `[len(t), dim]`.
/// Half the lanes carry sines, half cosines, with log-spaced frequencies.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> ArrayD<f64> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let max_period = 10000.0f64;
    let mut out = Array2::<f64>::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = (-(j as f64) * max_period.ln() / half as f64).exp();
            let angle = t as f64 * freq;
            out[[i, j]] = angle.sin();
            out[[i, half + j]] = angle.cos();
        }
    }
    out.into_dyn()
}

/// Embeds a scalar in `[0, 1]` by an affine ramp into `dim` lanes, matching
/// the timestep embedding's scale so the two can be summed.
pub fn scalar_embedding(vals: &[f64], dim: usize) -> ArrayD<f64> {
    let mut out = Array2::<f64>::zeros((vals.len(), dim));
    for (i, &v) in vals.iter().enumerate() {
        for j in 0..dim {
            // spread the scalar across lanes with alternating sign ramps
            let phase = j as f64 / dim as f64;
            out[[i, j]] = v * (1.0 - phase) * if j % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    out.into_dyn()
}

/// One-element array helper for scalar parameters.
pub fn scalar_array(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[1]), v)
}
