//! Mini-batch gradient descent on the weighted BCE, with a cosine-decayed
//! step size.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::{eval_binary_kl, TrainingExample};
use super::features::FEATURE_DIM;
use super::head::{LossWeights, PredictorHead};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub depth: usize,
    pub width: usize,
    pub epochs: usize,
    /// Initial step size; decays to zero along a half cosine.
    pub step_size: f64,
    pub batch_size: usize,
    /// Share of the loss-carrying examples held out for evaluation.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            depth: 3,
            width: 32,
            epochs: 3,
            step_size: 5e-3,
            batch_size: 256,
            eval_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.weights;
        if !(w.w_acc > 0.0 && w.w_rej > 0.0) {
            return Err(Error::InvalidParameter("loss weights must be positive".into()));
        }
        if self.depth > 0 && self.width == 0 {
            return Err(Error::InvalidParameter("hidden width must be positive".into()));
        }
        if self.batch_size == 0 || self.step_size.is_nan() || self.step_size <= 0.0 {
            return Err(Error::InvalidParameter("batch size and step size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::InvalidParameter("eval_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_eval: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_kl: f64,
    /// `None` when nothing was held out.
    pub eval_loss: Option<f64>,
    pub eval_kl: Option<f64>,
}

/// Trains a head on the loss-carrying examples.
///
/// Inputs are standardized with the training split's mean and standard
/// deviation. Deterministic given `config.seed`.
pub fn train_head(examples: &[TrainingExample], config: &TrainConfig) -> Result<(PredictorHead, TrainReport)> {
    config.validate()?;
    let mut data: Vec<TrainingExample> = examples.iter().filter(|e| e.include_in_loss).cloned().collect();
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seeds::rng(config.seed);
    data.shuffle(&mut rng);
    let n_eval = ((data.len() as f64 * config.eval_fraction) as usize).min(data.len() - 1);
    let eval = data.split_off(data.len() - n_eval);
    let mut train = data;

    let mut head = PredictorHead::random(config.depth, config.width, &mut rng);
    let (shift, scale) = standardization(&train);
    head.set_standardization(shift, scale);

    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total = config.epochs * batches_per_epoch;
    let mut step = 0usize;
    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size) {
            let lr = 0.5 * config.step_size * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            let (_, grad) = head.loss_and_grad(batch, config.weights).expect("batches hold loss-carrying examples");
            head.apply_step(&grad, lr);
            step += 1;
        }
    }

    let w = config.weights;
    let report = TrainReport {
        n_train: train.len(),
        n_eval,
        steps: step,
        train_loss: head.loss(&train, w).expect("nonempty"),
        train_kl: eval_binary_kl(&head, &train)?,
        eval_loss: head.loss(&eval, w),
        eval_kl: eval_binary_kl(&head, &eval).ok(),
    };
    Ok((head, report))
}

fn standardization(data: &[TrainingExample]) -> ([f64; FEATURE_DIM], [f64; FEATURE_DIM]) {
    let n = data.len() as f64;
    let mut mean = [0.0; FEATURE_DIM];
    for ex in data {
        for (m, x) in mean.iter_mut().zip(ex.features.0) {
            *m += x / n;
        }
    }
    let mut var = [0.0; FEATURE_DIM];
    for ex in data {
        for ((v, x), m) in var.iter_mut().zip(ex.features.0).zip(mean) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let scale = var.map(|v| if v.sqrt() > 1e-12 { 1.0 / v.sqrt() } else { 1.0 });
    (mean, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::FeatureVec;
    use rand::Rng;

    fn synthetic(n: usize, seed: u64) -> Vec<TrainingExample> {
        let mut rng = seeds::rng(seed);
        (0..n)
            .map(|_| {
                let q: f64 = rng.random_range(0.01..1.0);
                let mut f = [0.0; FEATURE_DIM];
                f[0] = q;
                f[2] = q.max(0.5);
                f[3] = f[2] - q;
                TrainingExample { features: FeatureVec(f), label: q, include_in_loss: true }
            })
            .collect()
    }

    #[test]
    fn empty_after_masking_is_an_error() {
        let mut ex = synthetic(10, 0);
        ex.iter_mut().for_each(|e| e.include_in_loss = false);
        assert!(matches!(train_head(&ex, &TrainConfig::default()), Err(Error::EmptyDataset)));
        assert!(matches!(train_head(&[], &TrainConfig::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn training_reduces_loss() {
        let ex = synthetic(2000, 1);
        let cfg = TrainConfig { depth: 1, width: 8, epochs: 20, step_size: 0.5, batch_size: 64, ..Default::default() };
        let (head, report) = train_head(&ex, &cfg).unwrap();
        let mut baseline = PredictorHead::zeros(1, 8);
        let (shift, scale) = standardization(&ex);
        baseline.set_standardization(shift, scale);
        assert!(report.train_loss < baseline.loss(&ex, cfg.weights).unwrap() - 0.01);
        assert!(report.eval_kl.unwrap() < 0.02, "{report:?}");
        assert!(head.predict(&ex[0].features) > 0.0);
    }

    #[test]
    fn all_accept_labels_saturate() {
        let mut ex = synthetic(500, 2);
        ex.iter_mut().for_each(|e| e.label = 1.0);
        let cfg = TrainConfig { depth: 0, epochs: 200, step_size: 1.0, batch_size: 100, ..Default::default() };
        let (head, report) = train_head(&ex, &cfg).unwrap();
        assert!(report.train_loss < 0.05, "{report:?}");
        assert!(head.predict(&ex[0].features) > 0.95);
    }

    #[test]
    fn deterministic() {
        let ex = synthetic(300, 3);
        let cfg = TrainConfig { depth: 2, width: 4, ..Default::default() };
        assert_eq!(train_head(&ex, &cfg).unwrap().0, train_head(&ex, &cfg).unwrap().0);
    }
}
