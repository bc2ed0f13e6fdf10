//! One data-sharing round: repeated dispatch / local update / aggregate
//! cycles with stability-based early stopping.

use rand_chacha::ChaCha8Rng;

use super::{
    aggregate, evaluate_accuracy, local_update, normalized_weights, AggregationMode,
    LabeledDataset, ModelError, ParamVector, SoftmaxSpec, TrainerConfig,
};

/// Per-client inputs to a sharing round.
pub struct SharingClient<'a> {
    pub train: &'a LabeledDataset,
    pub val: &'a LabeledDataset,
    pub rng: &'a mut ChaCha8Rng,
}

pub struct SharingRoundResult {
    /// Each client's personalized post-aggregation model (identical across
    /// clients under FedAvg).
    pub models: Vec<ParamVector>,
    /// Final local models (after the last local update, before aggregation);
    /// these are the snapshots contribution valuation aggregates.
    pub local_models: Vec<ParamVector>,
    /// The plain aggregate of the final iteration.
    pub aggregate: ParamVector,
    /// Validation accuracy of each client's final model.
    pub accuracies: Vec<f64>,
    /// Gradient steps taken by each client across all aggregation iterations.
    pub iterations: Vec<u64>,
    /// Aggregation iterations actually run (1..=max_iters).
    pub iterations_run: u32,
}

/// Runs up to `max_iters` aggregation iterations over the active clients,
/// stopping early after an iteration in which every client's validation
/// accuracy moved by less than `early_stop_delta` in absolute value. The
/// first iteration only establishes the baseline and never stops.
///
/// Each iteration dispatches the current aggregate, re-fits the local
/// normalization spans from the client's cumulative training data, runs a
/// local update, and aggregates with weights proportional to cumulative
/// training-set sizes. Under FedBn the model a client keeps (and is
/// evaluated with) retains its own local spans; under FedAvg every span is
/// the plain weighted mean.
pub fn run_sharing_round(
    global: &ParamVector,
    clients: &mut [SharingClient<'_>],
    trainer: &TrainerConfig,
    mode: AggregationMode,
    max_iters: u32,
    early_stop_delta: f64,
) -> Result<SharingRoundResult, ModelError> {
    assert!(!clients.is_empty(), "need at least one active client");
    assert!(max_iters >= 1);
    let spec = SoftmaxSpec::from_layout(global.layout()).expect("softmax layout");

    let weights = normalized_weights(
        &clients.iter().map(|c| c.train.len() as f64).collect::<Vec<_>>(),
    );

    let mut current_aggregate = global.clone();
    let mut total_iterations = vec![0u64; clients.len()];
    let mut prev_acc: Option<Vec<f64>> = None;
    let mut models: Vec<ParamVector> = Vec::new();
    let mut local_models: Vec<ParamVector> = Vec::new();
    let mut accuracies: Vec<f64> = Vec::new();
    let mut iterations_run = 0;

    for _ in 0..max_iters {
        iterations_run += 1;
        local_models.clear();
        for (i, client) in clients.iter_mut().enumerate() {
            let mut dispatched = current_aggregate.clone();
            spec.fit_normalization(&mut dispatched, client.train);
            let (updated, steps) = local_update(&dispatched, client.train, trainer, client.rng);
            total_iterations[i] += steps;
            local_models.push(updated);
        }
        current_aggregate = aggregate(&local_models, &weights, mode)?;

        models.clear();
        accuracies.clear();
        for (client, local) in clients.iter().zip(&local_models) {
            let personal = match mode {
                AggregationMode::FedAvg => current_aggregate.clone(),
                AggregationMode::FedBn => current_aggregate.personalized(local),
            };
            accuracies.push(evaluate_accuracy(&personal, client.val)?);
            models.push(personal);
        }

        if let Some(prev) = &prev_acc {
            let stable = accuracies
                .iter()
                .zip(prev)
                .all(|(now, before)| (now - before).abs() < early_stop_delta);
            if stable {
                break;
            }
        }
        prev_acc = Some(accuracies.clone());
    }

    Ok(SharingRoundResult {
        models,
        local_models,
        aggregate: current_aggregate,
        accuracies,
        iterations: total_iterations,
        iterations_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn blob_dataset(seed: u64, n: usize, center: f64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = LabeledDataset::new(2, 2);
        for _ in 0..n {
            let label = rng.random_range(0..2usize);
            let offset = if label == 0 { -center } else { center };
            ds.push(
                &[offset + rng.random_range(-0.5..0.5), offset + rng.random_range(-0.5..0.5)],
                label,
            );
        }
        ds
    }

    fn trainer() -> TrainerConfig {
        TrainerConfig { epochs: 1, batch_size: 8, learning_rate: 0.2 }
    }

    #[test]
    fn single_client_round_is_pure_local_training() {
        let spec = SoftmaxSpec::new(2, 2);
        let mut init_rng = ChaCha8Rng::seed_from_u64(5);
        let global = spec.init(&mut init_rng);
        let train = blob_dataset(11, 30, 2.0);
        let val = blob_dataset(12, 20, 2.0);

        let mut rng_a = ChaCha8Rng::seed_from_u64(77);
        let mut clients =
            vec![SharingClient { train: &train, val: &val, rng: &mut rng_a }];
        let result =
            run_sharing_round(&global, &mut clients, &trainer(), AggregationMode::FedAvg, 3, 0.0)
                .unwrap();

        // Weight-1 aggregation is the identity, so the round must equal three
        // chained (fit, local update) steps.
        let mut rng_b = ChaCha8Rng::seed_from_u64(77);
        let mut expected = global.clone();
        for _ in 0..3 {
            spec.fit_normalization(&mut expected, &train);
            let (updated, _) = local_update(&expected, &train, &trainer(), &mut rng_b);
            expected = updated;
        }
        assert_eq!(result.models[0], expected);
        assert_eq!(result.iterations_run, 3);
    }

    #[test]
    fn max_iters_one_runs_exactly_one_iteration() {
        let spec = SoftmaxSpec::new(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let global = spec.init(&mut rng);
        let train_a = blob_dataset(1, 20, 2.0);
        let val_a = blob_dataset(2, 10, 2.0);
        let train_b = blob_dataset(3, 25, 2.0);
        let val_b = blob_dataset(4, 10, 2.0);
        let mut rng_a = ChaCha8Rng::seed_from_u64(21);
        let mut rng_b = ChaCha8Rng::seed_from_u64(22);
        let mut clients = vec![
            SharingClient { train: &train_a, val: &val_a, rng: &mut rng_a },
            SharingClient { train: &train_b, val: &val_b, rng: &mut rng_b },
        ];
        let result = run_sharing_round(
            &global,
            &mut clients,
            &trainer(),
            AggregationMode::FedAvg,
            1,
            // A threshold this large would stop immediately if it could.
            1.0,
        )
        .unwrap();
        assert_eq!(result.iterations_run, 1);
    }

    #[test]
    fn early_stop_triggers_on_second_iteration_when_stable() {
        // Learning rate zero: accuracies never move, so iteration 2 observes
        // zero deltas and stops (iteration 1 only sets the baseline).
        let spec = SoftmaxSpec::new(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let global = spec.init(&mut rng);
        let frozen = TrainerConfig { epochs: 1, batch_size: 8, learning_rate: 0.0 };
        let train_a = blob_dataset(31, 20, 2.0);
        let val_a = blob_dataset(32, 10, 2.0);
        let train_b = blob_dataset(33, 20, 2.0);
        let val_b = blob_dataset(34, 10, 2.0);
        let mut rng_a = ChaCha8Rng::seed_from_u64(41);
        let mut rng_b = ChaCha8Rng::seed_from_u64(42);
        let mut clients = vec![
            SharingClient { train: &train_a, val: &val_a, rng: &mut rng_a },
            SharingClient { train: &train_b, val: &val_b, rng: &mut rng_b },
        ];
        let result =
            run_sharing_round(&global, &mut clients, &frozen, AggregationMode::FedAvg, 5, 0.005)
                .unwrap();
        assert_eq!(result.iterations_run, 2);
    }

    #[test]
    fn fedbn_never_lets_aggregation_touch_local_spans() {
        let spec = SoftmaxSpec::new(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let global = spec.init(&mut rng);
        // Clients with different feature scales get different norm spans.
        let train_a = blob_dataset(51, 30, 1.0);
        let val_a = blob_dataset(52, 10, 1.0);
        let train_b = blob_dataset(53, 30, 4.0);
        let val_b = blob_dataset(54, 10, 4.0);
        let mut rng_a = ChaCha8Rng::seed_from_u64(61);
        let mut rng_b = ChaCha8Rng::seed_from_u64(62);
        let mut clients = vec![
            SharingClient { train: &train_a, val: &val_a, rng: &mut rng_a },
            SharingClient { train: &train_b, val: &val_b, rng: &mut rng_b },
        ];
        let result =
            run_sharing_round(&global, &mut clients, &trainer(), AggregationMode::FedBn, 4, 0.0)
                .unwrap();

        // Each returned model's local spans equal the client's own fit, which
        // neither local updates nor aggregation modify.
        let mut fit_a = global.clone();
        spec.fit_normalization(&mut fit_a, &train_a);
        let mut fit_b = global.clone();
        spec.fit_normalization(&mut fit_b, &train_b);
        assert_eq!(result.models[0].span_values("norm.shift"), fit_a.span_values("norm.shift"));
        assert_eq!(result.models[0].span_values("norm.scale"), fit_a.span_values("norm.scale"));
        assert_eq!(result.models[1].span_values("norm.shift"), fit_b.span_values("norm.shift"));
        assert_eq!(result.models[1].span_values("norm.scale"), fit_b.span_values("norm.scale"));
        // Shared spans are identical across clients after aggregation.
        assert_eq!(
            result.models[0].span_values("linear.weight"),
            result.models[1].span_values("linear.weight")
        );
    }
}
