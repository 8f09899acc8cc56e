//! Finite-difference gradient checking.
//!
//! Used by the unit tests of every differentiable component and by the
//! verification suite. The relative-error measure is
//! `|a - n| / max(1e-6, |a| + |n|)` per element, reported as the maximum
//! over all elements of all checked inputs.

use super::graph::{Graph, Var};
use ndarray::ArrayD;

/// Central-difference gradients of a scalar function at `xs`.
pub fn fd_gradients(
    f: &mut dyn FnMut(&[ArrayD<f64>]) -> f64,
    xs: &[ArrayD<f64>],
    h: f64,
) -> Vec<ArrayD<f64>> {
    let mut work: Vec<ArrayD<f64>> = xs.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..work.len() {
        let mut gi = ArrayD::zeros(work[i].raw_dim());
        for j in 0..gi.len() {
            let orig = work[i].as_slice().unwrap()[j];
            work[i].as_slice_mut().unwrap()[j] = orig + h;
            let fp = f(&work);
            work[i].as_slice_mut().unwrap()[j] = orig - h;
            let fm = f(&work);
            work[i].as_slice_mut().unwrap()[j] = orig;
            gi.as_slice_mut().unwrap()[j] = (fp - fm) / (2.0 * h);
        }
        out.push(gi);
    }
    out
}

pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Builds the scalar loss twice, once for analytic gradients and once per
/// finite-difference probe, and returns the worst relative error over all
/// leaf inputs.
pub fn gradcheck(
    build: impl Fn(&Graph, &[Var]) -> Var,
    xs: &[ArrayD<f64>],
    h: f64,
) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(v, x)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()))
        })
        .collect();

    let mut eval = |pts: &[ArrayD<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|x| g.leaf(x.clone())).collect();
        g.scalar_value(build(&g, &vars))
    };
    let numeric = fd_gradients(&mut eval, xs, h);

    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_err(a, n))
        .fold(0.0, f64::max)
}
