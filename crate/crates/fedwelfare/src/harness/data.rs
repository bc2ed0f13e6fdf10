//! Data provisioning: Poisson arrivals, Gaussian-blob synthetic data with
//! label corruption, and the 70/30 train/validation split.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::model::LabeledDataset;
use crate::ClientId;

use super::config::{DataSource, ScenarioConfig, SyntheticTaskConfig};
use super::rng::{stream, StreamPurpose};

/// One Poisson draw of the round's sample count.
pub fn sample_arrivals<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    debug_assert!(lambda > 0.0);
    let draw: f64 = Poisson::new(lambda).expect("validated lambda").sample(rng);
    draw as u64
}

/// Scenario-level synthetic geometry: class centers and per-client mean
/// shifts, drawn once per scenario seed and shared by every replication so
/// client identities stay stable.
#[derive(Debug, Clone)]
pub struct SyntheticGeometry {
    pub centers: Vec<Vec<f64>>,
    pub shifts: Vec<Vec<f64>>,
}

impl SyntheticGeometry {
    pub fn generate(cfg: &ScenarioConfig) -> Self {
        let task = &cfg.synthetic;
        let mut rng = stream(cfg.run.base_seed, StreamPurpose::Geometry, 0, 0);
        let centers = (0..task.classes)
            .map(|_| {
                (0..task.features)
                    .map(|_| task.separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        // One direction draw per client regardless of data source, so
        // geometry is stable under per-client config changes.
        let shifts = cfg
            .clients
            .iter()
            .map(|client| {
                let magnitude = match &client.data {
                    DataSource::SyntheticBlob { shift, .. } => *shift,
                    _ => 0.0,
                };
                (0..task.features)
                    .map(|_| magnitude * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        SyntheticGeometry { centers, shifts }
    }
}

/// Draws `n` blob samples for one client: x = center(class) + client shift +
/// unit Gaussian noise. With probability `label_noise` a sample's label is
/// resampled uniformly over the other classes.
pub fn generate_synthetic_data<R: Rng + ?Sized>(
    geometry: &SyntheticGeometry,
    client_index: usize,
    task: &SyntheticTaskConfig,
    label_noise: f64,
    n: u64,
    rng: &mut R,
) -> LabeledDataset {
    let classes = task.classes;
    let shift = &geometry.shifts[client_index];
    let mut ds = LabeledDataset::new(task.features, classes);
    let mut x = vec![0.0; task.features];
    for _ in 0..n {
        let true_label = rng.random_range(0..classes);
        let center = &geometry.centers[true_label];
        for f in 0..task.features {
            x[f] = center[f] + shift[f] + rng.sample::<f64, _>(StandardNormal);
        }
        let label = if label_noise > 0.0 && rng.random::<f64>() < label_noise {
            (true_label + rng.random_range(1..classes)) % classes
        } else {
            true_label
        };
        ds.push(&x, label);
    }
    ds
}

/// Splits new arrivals 70/30, rounding toward the validation side:
/// validation receives ceil(0.3 n) randomly chosen samples.
pub fn split_arrivals<R: Rng + ?Sized>(
    batch: &LabeledDataset,
    rng: &mut R,
) -> (LabeledDataset, LabeledDataset) {
    let n = batch.len();
    let val_count = (0.3 * n as f64).ceil() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    indices.shuffle(rng);
    let mut train = LabeledDataset::new(batch.n_features(), batch.n_classes());
    let mut val = LabeledDataset::new(batch.n_features(), batch.n_classes());
    for (pos, &i) in indices.iter().enumerate() {
        let (x, y) = batch.sample(i);
        if pos < val_count {
            val.push(x, y);
        } else {
            train.push(x, y);
        }
    }
    (train, val)
}

/// A round's provisioned data for one client.
pub struct ArrivalBatch {
    pub client: ClientId,
    pub round: u32,
    pub n_samples: u64,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
}
