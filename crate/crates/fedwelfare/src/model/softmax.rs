//! Multinomial logistic regression with a client-local normalization layer.
//!
//! The model partitions as: `norm.shift` / `norm.scale` (local spans, a
//! per-feature affine standardization estimated from local training data)
//! and `linear.weight` / `linear.bias` (shared spans trained by mini-batch
//! SGD on softmax cross-entropy). The local partition is what the FedBn
//! aggregation rule leaves client-side.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledDataset, Layout, ModelError, ParamVector, Partition};

const NORM_SHIFT: &str = "norm.shift";
const NORM_SCALE: &str = "norm.scale";
const LINEAR_WEIGHT: &str = "linear.weight";
const LINEAR_BIAS: &str = "linear.bias";

/// Minimum scale used by the normalization layer; guards constant features.
const SCALE_FLOOR: f64 = 1e-6;

/// Shape of the softmax classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxSpec {
    pub n_features: usize,
    pub n_classes: usize,
}

impl SoftmaxSpec {
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        assert!(n_features >= 1 && n_classes >= 2);
        SoftmaxSpec { n_features, n_classes }
    }

    pub fn layout(&self) -> Layout {
        Layout::new([
            (NORM_SHIFT.to_string(), self.n_features, Partition::Local),
            (NORM_SCALE.to_string(), self.n_features, Partition::Local),
            (LINEAR_WEIGHT.to_string(), self.n_features * self.n_classes, Partition::Shared),
            (LINEAR_BIAS.to_string(), self.n_classes, Partition::Shared),
        ])
    }

    pub fn from_layout(layout: &Layout) -> Option<Self> {
        let f = layout.span(NORM_SHIFT)?.len;
        let c = layout.span(LINEAR_BIAS)?.len;
        let spec = SoftmaxSpec { n_features: f, n_classes: c };
        (spec.layout() == *layout).then_some(spec)
    }

    /// Gaussian(0, 0.01) weights, zero biases, identity normalization.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut model = ParamVector::zeros(self.layout());
        for v in model.span_values_mut(NORM_SCALE) {
            *v = 1.0;
        }
        let dist = Normal::new(0.0, 0.01).unwrap();
        for v in model.span_values_mut(LINEAR_WEIGHT) {
            *v = dist.sample(rng);
        }
        model
    }

    /// Re-estimates the local normalization spans (per-feature mean and
    /// standard deviation) from `data`. A no-op on an empty dataset.
    pub fn fit_normalization(&self, model: &mut ParamVector, data: &LabeledDataset) {
        if data.is_empty() {
            return;
        }
        assert_eq!(data.n_features(), self.n_features);
        let n = data.len() as f64;
        let mut mean = vec![0.0; self.n_features];
        for i in 0..data.len() {
            let (x, _) = data.sample(i);
            for (m, &v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; self.n_features];
        for i in 0..data.len() {
            let (x, _) = data.sample(i);
            for ((s, &v), &m) in var.iter_mut().zip(x).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let shift = model.span_values_mut(NORM_SHIFT);
        shift.copy_from_slice(&mean);
        let scale = model.span_values_mut(NORM_SCALE);
        for (s, &v) in scale.iter_mut().zip(&var) {
            *s = (v / n).sqrt().max(SCALE_FLOOR);
        }
    }

    fn logits(&self, model: &ParamVector, x: &[f64], out: &mut [f64]) {
        let shift = model.span_values(NORM_SHIFT);
        let scale = model.span_values(NORM_SCALE);
        let weight = model.span_values(LINEAR_WEIGHT);
        let bias = model.span_values(LINEAR_BIAS);
        for (c, o) in out.iter_mut().enumerate() {
            let row = &weight[c * self.n_features..(c + 1) * self.n_features];
            let mut acc = bias[c];
            for f in 0..self.n_features {
                acc += row[f] * (x[f] - shift[f]) / scale[f];
            }
            *o = acc;
        }
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Fraction of argmax-correct predictions; score ties go to the lowest
/// class id.
pub fn evaluate_accuracy(model: &ParamVector, data: &LabeledDataset) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let spec = SoftmaxSpec::from_layout(model.layout()).expect("softmax layout");
    let mut logits = vec![0.0; spec.n_classes];
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        spec.logits(model, x, &mut logits);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean multinomial cross-entropy of `model` on `data`.
pub fn cross_entropy_loss(model: &ParamVector, data: &LabeledDataset) -> f64 {
    assert!(!data.is_empty());
    let spec = SoftmaxSpec::from_layout(model.layout()).expect("softmax layout");
    let mut logits = vec![0.0; spec.n_classes];
    let mut total = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        spec.logits(model, x, &mut logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - logits[y];
    }
    total / data.len() as f64
}

/// Analytic gradient of [`cross_entropy_loss`] with respect to the full
/// parameter vector. Local normalization spans are statistics, not trained
/// parameters, so their entries are zero.
pub fn loss_gradient(model: &ParamVector, data: &LabeledDataset) -> ParamVector {
    assert!(!data.is_empty());
    let spec = SoftmaxSpec::from_layout(model.layout()).expect("softmax layout");
    let mut grad = ParamVector::zeros(model.layout().clone());
    accumulate_gradient(&spec, model, data, 0..data.len(), &mut grad);
    grad
}

fn accumulate_gradient(
    spec: &SoftmaxSpec,
    model: &ParamVector,
    data: &LabeledDataset,
    indices: impl IntoIterator<Item = usize> + Clone,
    grad: &mut ParamVector,
) {
    let count = indices.clone().into_iter().count();
    if count == 0 {
        return;
    }
    let shift = model.span_values(NORM_SHIFT).to_vec();
    let scale = model.span_values(NORM_SCALE).to_vec();
    let inv_n = 1.0 / count as f64;
    let mut probs = vec![0.0; spec.n_classes];
    let mut z = vec![0.0; spec.n_features];
    for i in indices {
        let (x, y) = data.sample(i);
        for f in 0..spec.n_features {
            z[f] = (x[f] - shift[f]) / scale[f];
        }
        spec.logits(model, x, &mut probs);
        softmax_in_place(&mut probs);
        probs[y] -= 1.0;
        {
            let gw = grad.span_values_mut(LINEAR_WEIGHT);
            for c in 0..spec.n_classes {
                let coef = probs[c] * inv_n;
                let row = &mut gw[c * spec.n_features..(c + 1) * spec.n_features];
                for f in 0..spec.n_features {
                    row[f] += coef * z[f];
                }
            }
        }
        let gb = grad.span_values_mut(LINEAR_BIAS);
        for c in 0..spec.n_classes {
            gb[c] += probs[c] * inv_n;
        }
    }
}

/// Trainer settings for one local update: `epochs` full passes of shuffled
/// mini-batch SGD at `learning_rate`, batch size `batch_size` (the final
/// partial batch is allowed).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainerConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err("learning_rate must be > 0".into());
        }
        Ok(())
    }
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch SGD on the shared spans
/// and returns the updated model plus the number of gradient steps taken.
/// An empty dataset is a no-op: the model comes back unchanged with zero
/// iterations.
pub fn local_update<R: Rng + ?Sized>(
    model: &ParamVector,
    data: &LabeledDataset,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> (ParamVector, u64) {
    if data.is_empty() {
        return (model.clone(), 0);
    }
    let spec = SoftmaxSpec::from_layout(model.layout()).expect("softmax layout");
    let mut current = model.clone();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut iterations = 0u64;
    let mut grad = ParamVector::zeros(model.layout().clone());
    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for batch in indices.chunks(cfg.batch_size) {
            for v in grad.values_mut() {
                *v = 0.0;
            }
            accumulate_gradient(&spec, &current, data, batch.iter().copied(), &mut grad);
            let lr = cfg.learning_rate;
            for (w, g) in current.values_mut().iter_mut().zip(grad.values()) {
                *w -= lr * g;
            }
            iterations += 1;
        }
    }
    (current, iterations)
}
