use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::TrainingExample;
use super::features::{FeatureVec, FEATURE_DIM, FEATURE_NAMES};
use crate::error::{Error, Result};

/// Version tag written into head files; bumped when [`FeatureVec`] changes.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;

/// Pre-sigmoid outputs are clamped to `±LOGIT_CLAMP`.
pub const LOGIT_CLAMP: f64 = 30.0;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Fully connected layer, weights stored row-major (`outputs × inputs`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (3.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Dense { inputs, outputs, weights, bias: vec![0.0; outputs] }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::parse("head layer", format!("{}x{} layer has wrong buffer sizes", self.outputs, self.inputs)));
        }
        Ok(())
    }
}

/// Gradient buffers shaped like a head's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub layers: Vec<Dense>,
}

impl HeadGrad {
    fn zeros_like(head: &PredictorHead) -> Self {
        HeadGrad { layers: head.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    /// Flattened in the same order as [`PredictorHead::param`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }
}

/// Weighted binary cross-entropy settings.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_acc: f64,
    pub w_rej: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_acc: 1.0, w_rej: 1.0 }
    }
}

/// `−w_acc·P·ln β̂ − w_rej·(1 − P)·ln(1 − β̂)` for `β̂ = sigmoid(z)`.
pub fn weighted_bce(label: f64, logit: f64, w: LossWeights) -> f64 {
    let z = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    w.w_acc * label * softplus(-z) + w.w_rej * (1.0 - label) * softplus(z)
}

fn weighted_bce_grad(label: f64, logit: f64, w: LossWeights) -> f64 {
    if logit.abs() >= LOGIT_CLAMP {
        return 0.0;
    }
    let s = sigmoid(logit);
    -w.w_acc * label * (1.0 - s) + w.w_rej * (1.0 - label) * s
}

/// Acceptance prediction head: a `(D + 1)`-layer residual MLP with SiLU
/// activations over [`FeatureVec`] inputs.
///
/// Depth 0 is a single linear layer, i.e. logistic regression. For depth
/// `D ≥ 1` the layers are an input projection to width `H`, `D − 1` residual
/// blocks `h ← h + silu(W h + b)`, and a linear read-out. Inputs are
/// standardized with a fixed shift and scale stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorHead {
    schema_version: u32,
    features: Vec<String>,
    depth: usize,
    width: usize,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    layers: Vec<Dense>,
}

struct Activations {
    /// input seen by each layer
    inputs: Vec<Vec<f64>>,
    /// pre-activation of each hidden layer
    pre: Vec<Vec<f64>>,
    logit: f64,
}

impl PredictorHead {
    /// All-zero weights: predicts 0.5 everywhere.
    pub fn zeros(depth: usize, width: usize) -> Self {
        let layers = Self::shapes(depth, width).into_iter().map(|(i, o)| Dense::zeros(i, o)).collect();
        Self::assemble(depth, width, layers)
    }

    pub fn random<R: Rng + ?Sized>(depth: usize, width: usize, rng: &mut R) -> Self {
        let shapes = Self::shapes(depth, width);
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (inp, out))| {
                // residual blocks start small so the stack begins near the identity
                let gain = if i == 0 || i == last { 1.0 } else { 0.5 };
                Dense::random(inp, out, gain, rng)
            })
            .collect();
        Self::assemble(depth, width, layers)
    }

    fn shapes(depth: usize, width: usize) -> Vec<(usize, usize)> {
        assert!(depth == 0 || width > 0, "hidden width must be positive");
        if depth == 0 {
            return vec![(FEATURE_DIM, 1)];
        }
        let mut shapes = vec![(FEATURE_DIM, width)];
        shapes.extend(std::iter::repeat_n((width, width), depth - 1));
        shapes.push((width, 1));
        shapes
    }

    fn assemble(depth: usize, width: usize, layers: Vec<Dense>) -> Self {
        PredictorHead {
            schema_version: FEATURE_SCHEMA_VERSION,
            features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            depth,
            width: if depth == 0 { 0 } else { width },
            input_shift: vec![0.0; FEATURE_DIM],
            input_scale: vec![1.0; FEATURE_DIM],
            layers,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Sets the input standardization `x ↦ (x − shift)·scale`.
    pub fn set_standardization(&mut self, shift: [f64; FEATURE_DIM], scale: [f64; FEATURE_DIM]) {
        self.input_shift = shift.to_vec();
        self.input_scale = scale.to_vec();
    }

    fn standardize(&self, f: &FeatureVec) -> Vec<f64> {
        f.0.iter().zip(&self.input_shift).zip(&self.input_scale).map(|((x, s), c)| (x - s) * c).collect()
    }

    fn forward(&self, f: &FeatureVec) -> Activations {
        let x = self.standardize(f);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let (hidden, out) = self.layers.split_at(self.layers.len() - 1);
        let mut h = x;
        for (i, layer) in hidden.iter().enumerate() {
            let a = layer.forward(&h);
            let next: Vec<f64> = if i == 0 {
                a.iter().map(|&v| silu(v)).collect()
            } else {
                h.iter().zip(&a).map(|(hv, &av)| hv + silu(av)).collect()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(a);
        }
        let logit = out[0].forward(&h)[0];
        inputs.push(h);
        Activations { inputs, pre, logit }
    }

    /// Raw (unclamped) pre-sigmoid output.
    pub fn logit(&self, f: &FeatureVec) -> f64 {
        self.forward(f).logit
    }

    /// Predicted acceptance probability, strictly inside (0, 1).
    pub fn predict(&self, f: &FeatureVec) -> f64 {
        sigmoid(self.logit(f).clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
    }

    fn backward(&self, act: &Activations, dz: f64, grad: &mut HeadGrad) {
        let n = self.layers.len();
        let out = &self.layers[n - 1];
        let h_last = &act.inputs[n - 1];
        let g = &mut grad.layers[n - 1];
        for (gw, hv) in g.weights.iter_mut().zip(h_last) {
            *gw += dz * hv;
        }
        g.bias[0] += dz;
        let mut dh: Vec<f64> = out.weights.iter().map(|w| w * dz).collect();

        for l in (0..n - 1).rev() {
            let layer = &self.layers[l];
            let da: Vec<f64> = dh.iter().zip(&act.pre[l]).map(|(d, &a)| d * silu_grad(a)).collect();
            let x = &act.inputs[l];
            let g = &mut grad.layers[l];
            for (o, &dao) in da.iter().enumerate() {
                g.bias[o] += dao;
                for (gw, xv) in g.weights[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(x) {
                    *gw += dao * xv;
                }
            }
            if l == 0 {
                break;
            }
            // residual path carries dh through unchanged
            for (o, &dao) in da.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (dhi, w) in dh.iter_mut().zip(row) {
                    *dhi += w * dao;
                }
            }
        }
    }

    /// Mean weighted BCE over the examples that carry loss, and its gradient.
    /// Returns `None` when no example carries loss.
    pub fn loss_and_grad(&self, examples: &[TrainingExample], w: LossWeights) -> Option<(f64, HeadGrad)> {
        let mut grad = HeadGrad::zeros_like(self);
        let mut total = 0.0;
        let mut count = 0usize;
        for ex in examples.iter().filter(|e| e.include_in_loss) {
            let act = self.forward(&ex.features);
            total += weighted_bce(ex.label, act.logit, w);
            self.backward(&act, weighted_bce_grad(ex.label, act.logit, w), &mut grad);
            count += 1;
        }
        if count == 0 {
            return None;
        }
        let scale = 1.0 / count as f64;
        for l in &mut grad.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= scale);
        }
        Some((total * scale, grad))
    }

    /// Mean weighted BCE over the examples that carry loss.
    pub fn loss(&self, examples: &[TrainingExample], w: LossWeights) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for ex in examples.iter().filter(|e| e.include_in_loss) {
            total += weighted_bce(ex.label, self.logit(&ex.features), w);
            count += 1;
        }
        (count > 0).then(|| total / count as f64)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            if index < l.weights.len() {
                return (li, true, index);
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return (li, false, index);
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter by flat index: each layer's weights, then its bias.
    pub fn param(&self, index: usize) -> f64 {
        let (l, is_w, i) = self.locate(index);
        if is_w {
            self.layers[l].weights[i]
        } else {
            self.layers[l].bias[i]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, is_w, i) = self.locate(index);
        if is_w {
            self.layers[l].weights[i] = value;
        } else {
            self.layers[l].bias[i] = value;
        }
    }

    pub(crate) fn apply_step(&mut self, grad: &HeadGrad, step: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= step * d);
            l.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= step * d);
        }
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != FEATURE_SCHEMA_VERSION {
            return Err(Error::parse(
                "head",
                format!("feature schema version {} (expected {FEATURE_SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.input_shift.len() != FEATURE_DIM || self.input_scale.len() != FEATURE_DIM {
            return Err(Error::parse("head", "standardization vectors have the wrong length"));
        }
        let expected = Self::shapes(self.depth, self.width.max(1));
        let actual: Vec<_> = self.layers.iter().map(|l| (l.inputs, l.outputs)).collect();
        if expected != actual {
            return Err(Error::parse("head", format!("layer shapes {actual:?} do not match depth {}", self.depth)));
        }
        self.layers.iter().try_for_each(Dense::check)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let head: PredictorHead = serde_json::from_slice(&fs::read(path)?)?;
        head.validate()?;
        Ok(head)
    }
}
