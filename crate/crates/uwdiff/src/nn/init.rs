//! Seeded weight initializers.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

pub fn full(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("invalid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let dist = Uniform::new(lo, hi);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He-style normal init scaled by the incoming fan.
pub fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    normal(rng, shape, (2.0 / fan_in.max(1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let a = normal(&mut seeded_rng(7), &[4, 5], 0.1);
        let b = normal(&mut seeded_rng(7), &[4, 5], 0.1);
        assert_eq!(a, b);
    }

    #[test]
    fn kaiming_scale_tracks_fan_in() {
        let w = kaiming(&mut seeded_rng(0), &[64, 256], 256);
        let std = (w.mapv(|v| v * v).sum() / w.len() as f64).sqrt();
        let expect = (2.0f64 / 256.0).sqrt();
        assert!((std - expect).abs() < 0.2 * expect, "std={std} expect={expect}");
    }
}
