//! Adaptive group normalization: group-normalize the feature map, then
//! scale and shift per channel with parameters predicted from the fused
//! (timestep, degradation) conditioning vector by a two-layer perceptron.
//!
//! The perceptron's output layer starts at zero weights with a bias of
//! (ones, zeros), so an untrained block is exactly plain group
//! normalization.

use crate::nn::layers::{group_normalize, Linear};
use crate::nn::{init, ParamStore, Session, Var};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

pub struct AdaGn {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
    pub cond_dim: usize,
    pub eps: f64,
    fc1: Linear,
    fc2: Linear,
}

impl AdaGn {
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        groups: usize,
        cond_dim: usize,
        eps: f64,
    ) -> Self {
        let name = name.into();
        assert!(channels % groups == 0, "groups must divide channels");
        Self {
            fc1: Linear::new(format!("{name}.fc1"), cond_dim, cond_dim),
            fc2: Linear::new(format!("{name}.fc2"), cond_dim, 2 * channels),
            name,
            channels,
            groups,
            cond_dim,
            eps,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
        // start as an exact group norm: zero weights, bias = (gamma=1, beta=0)
        let c = self.channels;
        *store.get_mut(&format!("{}.fc2.w", self.name)) =
            init::zeros(&[self.cond_dim, 2 * c]);
        let mut bias = init::zeros(&[2 * c]);
        bias.slice_mut(ndarray::s![..c]).fill(1.0);
        *store.get_mut(&format!("{}.fc2.b", self.name)) = bias;
    }

    /// `x`: `[N,C,H,W]`; `cond`: `[N, cond_dim]`.
    pub fn forward(&self, s: &Session, x: Var, cond: Var) -> Var {
        let g = s.g;
        let n = g.shape(x)[0];
        let c = self.channels;
        let h = g.silu(self.fc1.forward(s, cond));
        let gb = self.fc2.forward(s, h); // [N, 2C]
        let gamma = g.reshape(g.slice_axis(gb, 1, 0, c), &[n, c, 1, 1]);
        let beta = g.reshape(g.slice_axis(gb, 1, c, c), &[n, c, 1, 1]);
        let core = group_normalize(s, x, self.groups, self.eps);
        g.add(g.mul(gamma, core), beta)
    }
}

/// Per-(sample, group) mean and population standard deviation of a
/// `[N,C,H,W]` map; shared by tests and diagnostics.
pub fn group_stats(x: &ArrayD<f64>, groups: usize) -> Vec<(f64, f64)> {
    let sh = x.shape();
    let (n, c) = (sh[0], sh[1]);
    let per = c / groups;
    let mut out = Vec::with_capacity(n * groups);
    for ni in 0..n {
        for gi in 0..groups {
            let sl = x.slice(ndarray::s![ni, gi * per..(gi + 1) * per, .., ..]);
            let mean = sl.mean().unwrap();
            let var = sl.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            out.push((mean, var.sqrt()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::gradcheck;
    use crate::nn::layers::group_normalize;
    use crate::nn::{init, Graph};

    fn setup(seed: u64) -> (AdaGn, ParamStore) {
        let ada = AdaGn::new("ada", 8, 4, 12, 1e-5);
        let mut store = ParamStore::new();
        let mut rng = init::seeded_rng(seed);
        ada.init(&mut store, &mut rng);
        (ada, store)
    }

    #[test]
    fn reduces_to_group_norm_at_identity_parameters() {
        let (ada, store) = setup(41);
        let mut rng = init::seeded_rng(42);
        let x = init::normal(&mut rng, &[2, 8, 6, 6], 1.0);
        let cond = init::normal(&mut rng, &[2, 12], 1.0);

        let g = Graph::new();
        let s = Session::new(&g, &store, false);
        let vx = g.constant(x.clone());
        let vc = g.constant(cond);
        let out = g.value(ada.forward(&s, vx, vc));
        let plain = g.value(group_normalize(&s, g.constant(x), 4, 1e-5));
        let diff = (&out - &plain).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "reduction diff {diff}");
    }

    #[test]
    fn constant_input_returns_shift_only() {
        let (ada, mut store) = setup(43);
        // give beta a recognizable value through the output bias
        store
            .get_mut("ada.fc2.b")
            .slice_mut(ndarray::s![8..])
            .fill(0.7);
        let g = Graph::new();
        let s = Session::new(&g, &store, false);
        let x = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[1, 8, 5, 5]), 3.25));
        let cond = g.constant(init::zeros(&[1, 12]));
        let out = g.value(ada.forward(&s, x, cond));
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn normalized_core_has_unit_statistics() {
        let mut rng = init::seeded_rng(44);
        let x = init::normal(&mut rng, &[3, 8, 8, 8], 2.0) + 0.9;
        let g = Graph::new();
        let store = ParamStore::new();
        let s = Session::new(&g, &store, false);
        let core = g.value(group_normalize(&s, g.constant(x), 4, 1e-5));
        for (mean, std) in group_stats(&core, 4) {
            assert!(mean.abs() < 1e-4, "group mean {mean}");
            assert!((std - 1.0).abs() < 1e-4, "group std {std}");
        }
    }

    #[test]
    fn conditioning_changes_output_when_nondegenerate() {
        let (ada, mut store) = setup(45);
        let mut rng = init::seeded_rng(46);
        *store.get_mut("ada.fc2.w") = init::normal(&mut rng, &[12, 16], 0.2);
        let x = init::normal(&mut rng, &[1, 8, 4, 4], 1.0);
        let run = |cv: f64| {
            let g = Graph::new();
            let s = Session::new(&g, &store, false);
            let vx = g.constant(x.clone());
            let vc = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[1, 12]), cv));
            g.value(ada.forward(&s, vx, vc))
        };
        let d = (&run(0.1) - &run(0.9)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(d > 1e-6, "conditioning had no effect");
    }

    #[test]
    fn gradients_match_fd_through_input_and_conditioning() {
        let (ada, mut store) = setup(47);
        let mut rng = init::seeded_rng(48);
        *store.get_mut("ada.fc2.w") = init::normal(&mut rng, &[12, 16], 0.2);
        let x = init::normal(&mut rng, &[1, 8, 4, 4], 1.0);
        let cond = init::normal(&mut rng, &[1, 12], 1.0);

        let err = gradcheck(
            move |g, vs| {
                let s = Session::new(g, &store, false);
                let y = ada.forward(&s, vs[0], vs[1]);
                g.mean_all(g.mul(y, y))
            },
            &[x, cond],
            1e-5,
        );
        assert!(err < 1e-5, "adagn grad err {err}");
    }
}
