//! Federated model representation and aggregation.
//!
//! A model is a flat `f64` vector with a named layout. Each layer span is
//! tagged `Shared` or `Local`; shared spans participate in federated
//! averaging, local spans stay client-side when the federation runs in
//! [`AggregationMode::FedBn`] mode.

mod oracle;
mod sharing;
mod softmax;

pub use oracle::{oracle_accuracy, oracle_mean_accuracy, AccuracyOracleParams};
pub use sharing::{run_sharing_round, SharingClient, SharingRoundResult};
pub use softmax::{
    cross_entropy_loss, evaluate_accuracy, loss_gradient, local_update, SoftmaxSpec, TrainerConfig,
};

use std::io::{self, Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model layouts do not match")]
    LayoutMismatch,
    #[error("aggregation weights sum to {sum}, expected 1 within {tol}")]
    WeightsNotNormalized { sum: f64, tol: f64 },
    #[error("no models to aggregate")]
    EmptyModelList,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("feature row {row} has {got} columns, expected {expected}")]
    FeatureWidthMismatch { row: usize, got: usize, expected: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

/// Whether a layer participates in federated averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    Shared,
    Local,
}

/// Aggregation rule for [`aggregate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationMode {
    /// Weighted mean of every parameter.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Weighted mean of shared spans; local spans are restored per client
    /// via [`ParamVector::personalized`] after aggregation.
    #[serde(rename = "fedbn")]
    FedBn,
}

/// One named layer span within the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub partition: Partition,
}

impl LayerSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Ordered, gap-free description of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    spans: Vec<LayerSpan>,
    total_len: usize,
}

impl Layout {
    /// Builds a layout from `(name, len, partition)` triples laid out
    /// contiguously in order. At least one span must be shared.
    pub fn new(spans: impl IntoIterator<Item = (String, usize, Partition)>) -> Self {
        let mut out = Vec::new();
        let mut start = 0;
        for (name, len, partition) in spans {
            out.push(LayerSpan { name, start, len, partition });
            start += len;
        }
        assert!(
            out.iter().any(|s| s.partition == Partition::Shared),
            "layout needs at least one shared span"
        );
        Layout { spans: out, total_len: start }
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn spans(&self) -> &[LayerSpan] {
        &self.spans
    }

    pub fn span(&self, name: &str) -> Option<&LayerSpan> {
        self.spans.iter().find(|s| s.name == name)
    }
}

/// Flat model parameters plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total_len()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Self {
        assert_eq!(layout.total_len(), values.len());
        ParamVector { layout, values }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn span_values(&self, name: &str) -> &[f64] {
        let span = self.layout.span(name).expect("unknown span");
        &self.values[span.range()]
    }

    pub fn span_values_mut(&mut self, name: &str) -> &mut [f64] {
        let span = self.layout.span(name).expect("unknown span").clone();
        &mut self.values[span.range()]
    }

    /// Copies this model's shared spans over `client_model`'s, leaving the
    /// client's local spans untouched. This is the FedBN redistribution step:
    /// the returned model is what client `i` actually receives.
    pub fn personalized(&self, client_model: &ParamVector) -> ParamVector {
        assert_eq!(self.layout, client_model.layout, "layout mismatch");
        let mut out = client_model.clone();
        for span in self.layout.spans() {
            if span.partition == Partition::Shared {
                out.values[span.range()].copy_from_slice(&self.values[span.range()]);
            }
        }
        out
    }

    /// Serializes as a one-line JSON layout manifest followed by the raw
    /// little-endian f64 array.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let manifest = serde_json::to_string(&self.layout)
            .map_err(|e| ModelError::Manifest(e.to_string()))?;
        w.write_all(manifest.as_bytes())?;
        w.write_all(b"\n")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ModelError::Manifest("missing manifest line".into()))?;
        let layout: Layout = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| ModelError::Manifest(e.to_string()))?;
        let body = &bytes[newline + 1..];
        if body.len() != layout.total_len() * 8 {
            return Err(ModelError::Manifest(format!(
                "value array holds {} bytes, layout needs {}",
                body.len(),
                layout.total_len() * 8
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ParamVector { layout, values })
    }
}

/// Weighted aggregation of client models.
///
/// Weights must be non-negative and sum to 1 within `1e-9`. In `FedAvg` mode
/// every parameter is the weighted mean; in `FedBn` mode the returned vector
/// is also the weighted mean everywhere (local spans included, for
/// reporting), and callers restore each client's own local spans with
/// [`ParamVector::personalized`].
pub fn aggregate(
    models: &[ParamVector],
    weights: &[f64],
    mode: AggregationMode,
) -> Result<ParamVector, ModelError> {
    // FedAvg and FedBn share one averaging rule: the FedBn aggregate's local
    // spans are reporting values only, redistribution restores each client's
    // own spans (`ParamVector::personalized`).
    let _ = mode;
    let first = models.first().ok_or(ModelError::EmptyModelList)?;
    if models.iter().any(|m| m.layout != first.layout) || models.len() != weights.len() {
        return Err(ModelError::LayoutMismatch);
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(ModelError::WeightsNotNormalized { sum, tol: 1e-9 });
    }
    // Identity shortcut keeps k-fold aggregation of one model bit-exact.
    if models.iter().all(|m| m.values == first.values) {
        return Ok(first.clone());
    }
    let mut out = vec![0.0; first.values.len()];
    for (model, &w) in models.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(&model.values) {
            *o += w * v;
        }
    }
    Ok(ParamVector { layout: first.layout.clone(), values: out })
}

/// Normalizes raw weights (e.g. cumulative dataset sizes) to sum to 1.
pub fn normalized_weights(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / raw.len() as f64; raw.len()];
    }
    raw.iter().map(|&w| w / total).collect()
}

/// Sample features and integer class labels.
#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        assert!(n_classes >= 2, "need at least two classes");
        LabeledDataset { features: Vec::new(), labels: Vec::new(), n_features, n_classes }
    }

    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, ModelError> {
        let n_features = rows.first().map_or(0, |r| r.len());
        let mut ds = LabeledDataset::new(n_features, n_classes);
        for (i, (row, &label)) in rows.iter().zip(&labels).enumerate() {
            if row.len() != n_features {
                return Err(ModelError::FeatureWidthMismatch {
                    row: i,
                    got: row.len(),
                    expected: n_features,
                });
            }
            if label >= n_classes {
                return Err(ModelError::LabelOutOfRange { label, classes: n_classes });
            }
            ds.features.extend_from_slice(row);
            ds.labels.push(label);
        }
        Ok(ds)
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        assert_eq!(features.len(), self.n_features);
        assert!(label < self.n_classes);
        self.features.extend_from_slice(features);
        self.labels.push(label);
    }

    /// Appends every sample of `other` (same shape) to this dataset.
    pub fn extend_from(&mut self, other: &LabeledDataset) {
        assert_eq!(self.n_features, other.n_features);
        assert_eq!(self.n_classes, other.n_classes);
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        let start = i * self.n_features;
        (&self.features[start..start + self.n_features], self.labels[i])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}
