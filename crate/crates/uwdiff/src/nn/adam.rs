//! Adam optimizer, gradient clipping, and an EMA shadow of the weights.

use super::ParamStore;
use indexmap::IndexMap;
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update over every gradient present in `grads`. Parameters without
    /// a gradient this step are left untouched (their moments decay next time
    /// they appear, matching sparse-update Adam).
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |mi, gi| *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi);
            v.zip_mut_with(g, |vi, gi| {
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi
            });
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, mi, vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Snapshot of optimizer state for checkpointing.
    pub fn export_state(&self) -> (u64, IndexMap<String, ArrayD<f64>>, IndexMap<String, ArrayD<f64>>) {
        (self.t, self.m.clone(), self.v.clone())
    }

    pub fn import_state(
        &mut self,
        t: u64,
        m: IndexMap<String, ArrayD<f64>>,
        v: IndexMap<String, ArrayD<f64>>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

pub fn global_grad_norm(grads: &IndexMap<String, ArrayD<f64>>) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut IndexMap<String, ArrayD<f64>>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Exponential moving average of the parameters, updated after each step and
/// swapped in for evaluation and sampling.
pub struct Ema {
    pub decay: f64,
    pub shadow: IndexMap<String, ArrayD<f64>>,
}

impl Ema {
    pub fn new(decay: f64, params: &ParamStore) -> Self {
        let shadow = params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self { decay, shadow }
    }

    pub fn update(&mut self, params: &ParamStore) {
        for (name, p) in params.iter() {
            let s = self
                .shadow
                .entry(name.clone())
                .or_insert_with(|| p.clone());
            s.zip_mut_with(p, |si, pi| *si = self.decay * *si + (1.0 - self.decay) * pi);
        }
    }

    /// Copies the shadow weights into a fresh store.
    pub fn snapshot(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.shadow {
            out.insert(k, v.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_quadratic() {
        // minimize f(p) = 0.5 * |p|^2, grad = p
        let mut params = ParamStore::new();
        params.insert("p", ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..200 {
            let g = params.get("p").clone();
            let mut grads = IndexMap::new();
            grads.insert("p".to_string(), g);
            opt.step(&mut params, &grads);
        }
        let p = params.get("p");
        assert!(p.iter().all(|v| v.abs() < 1e-2), "p = {p:?}");
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[4]), 3.0));
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 6.0).abs() < 1e-12);
        let post = global_grad_norm(&grads);
        assert!((post - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ema_converges_to_constant_params() {
        let mut params = ParamStore::new();
        params.insert("p", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut ema = Ema::new(0.9, &params);
        *params.get_mut("p") = ArrayD::from_elem(IxDyn(&[2]), 5.0);
        for _ in 0..100 {
            ema.update(&params);
        }
        let s = &ema.shadow["p"];
        assert!(s.iter().all(|v| (v - 5.0).abs() < 1e-3));
    }
}
