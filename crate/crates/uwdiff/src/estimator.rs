//! Dual-stream degradation-score regressor.
//!
//! One depthwise-separable conv encoder processes both the raw and the
//! reference image (shared weights); the pooled features are concatenated
//! and a small perceptron with a sigmoid head regresses the score into
//! `[0,1]`. Without a reference, the raw image feeds both streams.

use crate::data::ImagePair;
use crate::nn::layers::{Conv2d, DepthwiseConv2d, Linear};
use crate::nn::{init, Adam, AdamConfig, Graph, ParamStore, Session, Var};
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub base_channels: usize,
    pub num_stages: usize,
    pub head_hidden: usize,
    pub input_side: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl EstimatorConfig {
    pub fn base() -> Self {
        Self {
            base_channels: 16,
            num_stages: 4,
            head_hidden: 64,
            input_side: 64,
        }
    }

    /// Narrow configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            num_stages: 2,
            head_hidden: 16,
            input_side: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 || self.num_stages < 1 || self.head_hidden < 1 {
            return Err(Error::Config("estimator sizes must be positive".into()));
        }
        if self.input_side < (1 << self.num_stages) {
            return Err(Error::Config(format!(
                "input side {} too small for {} stride-2 stages",
                self.input_side, self.num_stages
            )));
        }
        Ok(())
    }

    /// Feature length after the encoder's global pooling.
    pub fn feature_len(&self) -> usize {
        self.base_channels << self.num_stages
    }
}

pub struct Estimator {
    pub cfg: EstimatorConfig,
    stem: Conv2d,
    stages: Vec<(DepthwiseConv2d, Conv2d)>,
    fc1: Linear,
    fc2: Linear,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv2d::new("est.stem", 3, cfg.base_channels, 3, 1, 1);
        let stages = (0..cfg.num_stages)
            .map(|k| {
                let cin = cfg.base_channels << k;
                (
                    DepthwiseConv2d::new(format!("est.s{k}.dw"), cin, 3, 2, 1),
                    Conv2d::new(format!("est.s{k}.pw"), cin, cin * 2, 1, 1, 0),
                )
            })
            .collect();
        let f = cfg.feature_len();
        Ok(Self {
            stem,
            stages,
            fc1: Linear::new("est.head.fc1", 2 * f, cfg.head_hidden),
            fc2: Linear::new("est.head.fc2", cfg.head_hidden, 1),
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.stem.init(store, rng);
        for (dw, pw) in &self.stages {
            dw.init(store, rng);
            pw.init(store, rng);
        }
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4
            || shape[1] != 3
            || shape[2] != self.cfg.input_side
            || shape[3] != self.cfg.input_side
        {
            return Err(Error::Contract(format!(
                "estimator input {shape:?} does not match [N,3,{0},{0}]",
                self.cfg.input_side
            )));
        }
        Ok(())
    }

    /// Shared-weight encoder: `[N,3,S,S]` -> pooled features `[N,F]`.
    pub fn encode(&self, s: &Session, x: Var) -> Result<Var> {
        let g = s.g;
        self.check_input(&g.shape(x))?;
        let mut h = g.silu(self.stem.forward(s, x));
        for (dw, pw) in &self.stages {
            h = g.silu(pw.forward(s, dw.forward(s, h)));
        }
        let sh = g.shape(h);
        let pooled = g.mean_axes_keep(h, &[2, 3]);
        Ok(g.reshape(pooled, &[sh[0], sh[1]]))
    }

    /// Score node for a batch of (raw, reference) image pairs.
    pub fn score_var(&self, s: &Session, raw: Var, reference: Var) -> Result<Var> {
        let g = s.g;
        let fr = self.encode(s, raw)?;
        let fe = self.encode(s, reference)?;
        let cat = g.concat(1, &[fr, fe]);
        let h = g.silu(self.fc1.forward(s, cat));
        Ok(g.sigmoid(self.fc2.forward(s, h)))
    }

    /// Scalar score for one image; the raw image stands in for a missing
    /// reference.
    pub fn predict_score(
        &self,
        params: &ParamStore,
        raw: &ArrayD<f64>,
        reference: Option<&ArrayD<f64>>,
    ) -> Result<f64> {
        let g = Graph::new();
        let s = Session::new(&g, params, false);
        let batched = |img: &ArrayD<f64>| {
            let sh = img.shape().to_vec();
            let mut b = vec![1];
            b.extend(&sh);
            g.constant(img.clone().into_shape_with_order(IxDyn(&b)).unwrap())
        };
        let vr = batched(raw);
        let ve = match reference {
            Some(r) => batched(r),
            None => vr,
        };
        let out = self.score_var(&s, vr, ve)?;
        Ok(g.value(out)[[0, 0]])
    }
}

/// Optimization settings for the regression fit.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EstimatorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// One epoch of fit statistics on the held-out set.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EstimatorEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub val_pearson: f64,
}

/// A labeled sample: channels-first images plus the target score.
pub struct LabeledPair {
    pub raw: ArrayD<f64>,
    pub reference: ArrayD<f64>,
    pub label: f64,
}

impl LabeledPair {
    pub fn from_pair(pair: &ImagePair, label: f64) -> Self {
        Self {
            raw: crate::data::to_chw(&pair.raw.view()).into_dyn(),
            reference: crate::data::to_chw(&pair.reference.view()).into_dyn(),
            label,
        }
    }
}

fn stack(samples: &[&LabeledPair], pick_raw: bool) -> ArrayD<f64> {
    let sh = samples[0].raw.shape().to_vec();
    let mut out = ArrayD::zeros(IxDyn(&[samples.len(), sh[0], sh[1], sh[2]]));
    for (i, s) in samples.iter().enumerate() {
        let src = if pick_raw { &s.raw } else { &s.reference };
        out.index_axis_mut(ndarray::Axis(0), i).assign(src);
    }
    out
}

/// Pearson correlation coefficient; 0 for degenerate (constant) inputs.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().sum::<f64>() / n,
        b.iter().sum::<f64>() / n,
    );
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let denom = (va * vb).sqrt();
    if denom < 1e-18 {
        0.0
    } else {
        cov / denom
    }
}

/// Mean squared error and mean absolute error of frozen-weight predictions.
pub fn evaluate(
    est: &Estimator,
    params: &ParamStore,
    samples: &[LabeledPair],
) -> Result<(f64, f64, f64)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(est.predict_score(params, &s.raw, Some(&s.reference))?);
        labels.push(s.label);
    }
    let n = samples.len() as f64;
    let mse = preds
        .iter()
        .zip(&labels)
        .map(|(p, l)| (p - l) * (p - l))
        .sum::<f64>()
        / n;
    let mae = preds
        .iter()
        .zip(&labels)
        .map(|(p, l)| (p - l).abs())
        .sum::<f64>()
        / n;
    Ok((mse, mae, pearson(&preds, &labels)))
}

/// Fits the regressor with Adam on MSE to the labels. Returns the trained
/// parameters and the per-epoch history.
pub fn train_estimator(
    train: &[LabeledPair],
    val: &[LabeledPair],
    est: &Estimator,
    hp: &EstimatorTrainConfig,
) -> Result<(ParamStore, Vec<EstimatorEpoch>)> {
    if train.is_empty() {
        return Err(Error::Config("estimator training set is empty".into()));
    }
    let mut store = ParamStore::new();
    let mut rng = init::seeded_rng(hp.seed);
    est.init(&mut store, &mut rng);
    let mut opt = Adam::new(AdamConfig {
        lr: hp.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(hp.epochs);

    for epoch in 0..hp.epochs {
        let order = crate::data::batch_indices(
            train.len(),
            hp.batch_size.min(train.len()),
            hp.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let mut epoch_loss = 0.0;
        let mut batches = 0.0_f64;
        for batch in order {
            let samples: Vec<&LabeledPair> = batch.iter().map(|&i| &train[i]).collect();
            let raws = stack(&samples, true);
            let refs = stack(&samples, false);
            let labels = ArrayD::from_shape_vec(
                IxDyn(&[samples.len(), 1]),
                samples.iter().map(|s| s.label).collect(),
            )
            .unwrap();

            let g = Graph::new();
            let s = Session::new(&g, &store, true);
            let pred = est.score_var(&s, g.constant(raws), g.constant(refs))?;
            let loss = crate::losses::mse_var(&g, pred, g.constant(labels));
            let loss_val = g.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    step: opt.steps_taken() as usize,
                    batch_ids: batch.iter().map(|i| i.to_string()).collect(),
                    detail: format!("estimator loss {loss_val} at epoch {epoch}"),
                });
            }
            let grads = g.backward(loss);
            let named = s.collect_grads(&grads);
            opt.step(&mut store, &named);
            epoch_loss += loss_val;
            batches += 1.0;
        }
        let (val_mse, val_mae, val_pearson) = evaluate(est, &store, val)?;
        history.push(EstimatorEpoch {
            epoch,
            train_mse: epoch_loss / batches.max(1.0),
            val_mse,
            val_mae,
            val_pearson,
        });
    }
    Ok((store, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{degradation_label, LabelRange};
    use crate::synth::{make_corpus, DegradeKind};

    fn built(cfg: EstimatorConfig, seed: u64) -> (Estimator, ParamStore) {
        let est = Estimator::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = init::seeded_rng(seed);
        est.init(&mut store, &mut rng);
        (est, store)
    }

    fn labeled(n: usize, side: usize, seed: u64) -> Vec<LabeledPair> {
        let pairs = make_corpus(n, side, seed, DegradeKind::BlurNoise);
        let range = LabelRange::from_pairs(&pairs).unwrap();
        pairs
            .iter()
            .map(|p| LabeledPair::from_pair(p, degradation_label(p, &range).unwrap()))
            .collect()
    }

    #[test]
    fn scores_squashed_and_reference_mode_consistent() {
        let (est, store) = built(EstimatorConfig::tiny(), 81);
        let mut rng = init::seeded_rng(82);
        for _ in 0..5 {
            let raw = init::uniform(&mut rng, &[3, 24, 24], 0.0, 1.0);
            let with_self = est.predict_score(&store, &raw, Some(&raw)).unwrap();
            let without = est.predict_score(&store, &raw, None).unwrap();
            assert!((0.0..=1.0).contains(&with_self));
            assert_eq!(with_self, without, "no-reference mode must duplicate raw");
        }
    }

    #[test]
    fn encoder_is_shared_and_content_independent_in_length() {
        let (est, store) = built(EstimatorConfig::tiny(), 83);
        let mut rng = init::seeded_rng(84);
        let a = init::uniform(&mut rng, &[1, 3, 24, 24], 0.0, 1.0);
        let zero = ArrayD::zeros(IxDyn(&[1, 3, 24, 24]));

        let g = Graph::new();
        let s = Session::new(&g, &store, false);
        let fa = g.value(est.encode(&s, g.constant(a.clone())).unwrap());
        let fz = g.value(est.encode(&s, g.constant(zero)).unwrap());
        assert_eq!(fa.shape(), fz.shape());
        assert_eq!(fa.shape(), &[1, est.cfg.feature_len()]);
        assert!(fz.iter().all(|v| v.is_finite()));
        // identical image, identical features (one weight set)
        let fa2 = g.value(est.encode(&s, g.constant(a)).unwrap());
        assert_eq!(fa, fa2);
    }

    #[test]
    fn wrong_shape_is_a_contract_error() {
        let (est, store) = built(EstimatorConfig::tiny(), 85);
        let g = Graph::new();
        let s = Session::new(&g, &store, false);
        let bad = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 16, 16])));
        assert!(matches!(est.encode(&s, bad), Err(Error::Contract(_))));
    }

    #[test]
    fn default_config_is_lightweight() {
        let (est, store) = built(EstimatorConfig::base(), 86);
        let params = store.num_elements();
        assert!(params < 2_000_000, "parameter count {params} over budget");
        assert!(params > 10_000, "suspiciously small model: {params}");
        let _ = est;
    }

    #[test]
    fn head_gradients_match_fd() {
        let (est, store) = built(EstimatorConfig::tiny(), 87);
        let mut rng = init::seeded_rng(88);
        let raw = init::uniform(&mut rng, &[1, 3, 24, 24], 0.0, 1.0);
        let reference = init::uniform(&mut rng, &[1, 3, 24, 24], 0.0, 1.0);
        let label = ArrayD::from_elem(IxDyn(&[1, 1]), 0.6);

        let loss_with = |st: &ParamStore| {
            let g = Graph::new();
            let s = Session::new(&g, st, false);
            let pred = est
                .score_var(&s, g.constant(raw.clone()), g.constant(reference.clone()))
                .unwrap();
            g.scalar_value(crate::losses::mse_var(&g, pred, g.constant(label.clone())))
        };

        let g = Graph::new();
        let s = Session::new(&g, &store, true);
        let pred = est
            .score_var(&s, g.constant(raw.clone()), g.constant(reference.clone()))
            .unwrap();
        let loss = crate::losses::mse_var(&g, pred, g.constant(label.clone()));
        let grads = g.backward(loss);
        let by_name = s.collect_grads(&grads);

        let h = 1e-5;
        for (name, idx) in [("est.head.fc2.w", 3), ("est.head.fc1.w", 10), ("est.s0.dw.w", 2)] {
            let analytic = by_name[name].as_slice().unwrap()[idx];
            let mut plus = store.clone();
            plus.get_mut(name).as_slice_mut().unwrap()[idx] += h;
            let mut minus = store.clone();
            minus.get_mut(name).as_slice_mut().unwrap()[idx] -= h;
            let numeric = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            assert!(rel <= 1e-3, "{name}[{idx}] rel err {rel}");
        }
    }

    #[test]
    fn pearson_reference_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [2.0, 4.0, 6.0, 8.0];
        let down = [8.0, 6.0, 4.0, 2.0];
        assert!((pearson(&a, &up) - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &down) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[5.0; 4]), 0.0);
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let data = labeled(4, 24, 90);
        let est = Estimator::new(EstimatorConfig::tiny()).unwrap();
        let hp = EstimatorTrainConfig {
            epochs: 0,
            ..EstimatorTrainConfig::default()
        };
        let (trained, history) = train_estimator(&data, &data, &est, &hp).unwrap();
        assert!(history.is_empty());
        let mut fresh = ParamStore::new();
        let mut rng = init::seeded_rng(hp.seed);
        est.init(&mut fresh, &mut rng);
        for (name, v) in trained.iter() {
            assert_eq!(v, fresh.get(name), "{name} changed without any epochs");
        }
    }

    #[test]
    fn training_reduces_validation_error() {
        // interleave so the held-out labels fall inside the training range
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (j, d) in labeled(16, 24, 91).into_iter().enumerate() {
            if (j + 1) % 4 == 0 {
                val.push(d);
            } else {
                train.push(d);
            }
        }
        let est = Estimator::new(EstimatorConfig::tiny()).unwrap();
        let hp = EstimatorTrainConfig {
            epochs: 20,
            batch_size: 4,
            lr: 3e-3,
            seed: 1,
        };
        let (_, history) = train_estimator(&train, &val, &est, &hp).unwrap();
        let first = &history[0];
        let last = history.last().unwrap();
        assert!(
            last.val_mse < first.val_mse,
            "val mse {} -> {} did not improve",
            first.val_mse,
            last.val_mse
        );
    }

    #[test]
    fn constant_labels_drive_mse_to_zero() {
        let mut data = labeled(8, 24, 92);
        for d in &mut data {
            d.label = 0.42;
        }
        let est = Estimator::new(EstimatorConfig::tiny()).unwrap();
        let hp = EstimatorTrainConfig {
            epochs: 25,
            batch_size: 4,
            lr: 5e-3,
            seed: 2,
        };
        let (_, history) = train_estimator(&data, &data, &est, &hp).unwrap();
        let last = history.last().unwrap();
        assert!(last.val_mse < 1e-3, "constant-label mse {}", last.val_mse);
    }
}
