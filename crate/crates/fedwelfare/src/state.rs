//! Mutable federation state carried across data-sharing rounds, plus the
//! per-round model phase for each execution backend.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::contribution::{
    CollectiveUtility, ModelCollectiveUtility, OracleCollectiveUtility,
};
use crate::economics::ClientEconParams;
use crate::model::{
    evaluate_accuracy, oracle_accuracy, run_sharing_round, AccuracyOracleParams, AggregationMode,
    LabeledDataset, ModelError, ParamVector, SharingClient, TrainerConfig,
};
use crate::ClientId;

#[derive(Debug, Error)]
pub enum RoundError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("client {client} has no validation data at round {round}")]
    NoValidationData { client: ClientId, round: u32 },
    #[error("injected scenario has no row for client {client} at round {round}")]
    MissingInjectedRow { client: ClientId, round: u32 },
    #[error("contribution: {0}")]
    Contribution(String),
}

/// One client's standing state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: ClientId,
    pub econ: ClientEconParams,
    /// Cumulative training set (trainer backend).
    pub train: LabeledDataset,
    /// Cumulative held-out validation set (trainer backend).
    pub val: LabeledDataset,
    /// Synthetic accuracy curve (oracle backend).
    pub oracle: Option<AccuracyOracleParams>,
    pub active: bool,
    /// Round the client was deselected, if ever.
    pub eliminated_round: Option<u32>,
    /// epsilon(n, t-1): the previous round's validation accuracy.
    pub eps_prev: f64,
    /// Running sums of the settled ledger, for later reward realization.
    pub cumulative_payoff: f64,
    pub cumulative_mt: f64,
    /// s(n,t): samples that arrived for the current round.
    pub samples_this_round: u64,
    /// K(n,t): local gradient steps run in the current round.
    pub iterations_this_round: u64,
}

impl ClientState {
    pub fn new(id: ClientId, econ: ClientEconParams, n_features: usize, n_classes: usize) -> Self {
        ClientState {
            id,
            econ,
            train: LabeledDataset::new(n_features, n_classes),
            val: LabeledDataset::new(n_features, n_classes),
            oracle: None,
            active: true,
            eliminated_round: None,
            eps_prev: 0.0,
            cumulative_payoff: 0.0,
            cumulative_mt: 0.0,
            samples_this_round: 0,
            iterations_this_round: 0,
        }
    }
}

/// Injected per-round economics, used by the worked-example backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectedRow {
    pub utility: f64,
    pub cost: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Default)]
pub struct InjectedTable {
    rows: HashMap<(ClientId, u32), InjectedRow>,
}

impl InjectedTable {
    pub fn insert(&mut self, client: ClientId, round: u32, row: InjectedRow) {
        self.rows.insert((client, round), row);
    }

    pub fn get(&self, client: ClientId, round: u32) -> Option<InjectedRow> {
        self.rows.get(&(client, round)).copied()
    }

    pub fn max_round(&self) -> u32 {
        self.rows.keys().map(|&(_, r)| r).max().unwrap_or(0)
    }
}

/// How the model phase of a round is executed.
#[derive(Debug, Clone)]
pub enum RoundBackend {
    Trainer {
        trainer: TrainerConfig,
        mode: AggregationMode,
        max_iters: u32,
        early_stop_delta: f64,
    },
    Oracle,
    Injected(InjectedTable),
}

/// Everything the contribution measures need from the finished model phase.
pub enum ValuationSnapshot {
    Model {
        local_models: Vec<ParamVector>,
        raw_weights: Vec<f64>,
        mode: AggregationMode,
    },
    Oracle {
        pool_before: f64,
        deltas: Vec<f64>,
        curves: Vec<AccuracyOracleParams>,
    },
    Injected,
}

/// Output of the model phase for the currently active clients (id order).
pub struct ModelPhaseOutput {
    pub eps: Vec<f64>,
    pub iterations: Vec<u64>,
    pub valuation: ValuationSnapshot,
}

/// Federation-wide mutable state.
pub struct FederationState {
    /// Last completed round; 0 before the first round.
    pub round: u32,
    pub clients: Vec<ClientState>,
    /// Current global model (trainer backend).
    pub global_model: Option<ParamVector>,
    /// Cumulative effective-sample pool (oracle backend).
    pub oracle_pool: f64,
}

impl FederationState {
    pub fn new(clients: Vec<ClientState>) -> Self {
        FederationState { round: 0, clients, global_model: None, oracle_pool: 0.0 }
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.clients.len()).filter(|&i| self.clients[i].active).collect()
    }

    pub fn active_ids(&self) -> Vec<ClientId> {
        self.clients.iter().filter(|c| c.active).map(|c| c.id).collect()
    }

    pub fn active_count(&self) -> usize {
        self.clients.iter().filter(|c| c.active).count()
    }

    /// Runs the model phase of round `self.round + 1` over the active
    /// clients. `train_rngs` supplies one training stream per active client
    /// in id order; `noise_rngs` one observation-noise stream each.
    pub fn run_model_phase(
        &mut self,
        backend: &RoundBackend,
        train_rngs: &mut [ChaCha8Rng],
        noise_rngs: &mut [ChaCha8Rng],
    ) -> Result<ModelPhaseOutput, RoundError> {
        let round = self.round + 1;
        let active = self.active_indices();
        match backend {
            RoundBackend::Trainer { trainer, mode, max_iters, early_stop_delta } => {
                assert_eq!(train_rngs.len(), active.len());
                let global = self.global_model.as_ref().expect("trainer backend needs a model");
                for &i in &active {
                    let c = &self.clients[i];
                    if c.val.is_empty() {
                        return Err(RoundError::NoValidationData { client: c.id, round });
                    }
                }
                let mut sharing: Vec<SharingClient<'_>> = Vec::with_capacity(active.len());
                {
                    // Split borrows: datasets immutably, one rng per client.
                    let clients = &self.clients;
                    for (slot, &i) in train_rngs.iter_mut().zip(&active) {
                        sharing.push(SharingClient {
                            train: &clients[i].train,
                            val: &clients[i].val,
                            rng: slot,
                        });
                    }
                }
                let result = run_sharing_round(
                    global,
                    &mut sharing,
                    trainer,
                    *mode,
                    *max_iters,
                    *early_stop_delta,
                )?;
                drop(sharing);
                self.global_model = Some(result.aggregate.clone());
                let raw_weights: Vec<f64> =
                    active.iter().map(|&i| self.clients[i].train.len() as f64).collect();
                Ok(ModelPhaseOutput {
                    eps: result.accuracies,
                    iterations: result.iterations,
                    valuation: ValuationSnapshot::Model {
                        local_models: result.local_models,
                        raw_weights,
                        mode: *mode,
                    },
                })
            }
            RoundBackend::Oracle => {
                assert_eq!(noise_rngs.len(), active.len());
                let pool_before = self.oracle_pool;
                let mut deltas = Vec::with_capacity(active.len());
                let mut curves = Vec::with_capacity(active.len());
                for &i in &active {
                    let c = &self.clients[i];
                    let params = c.oracle.expect("oracle backend needs per-client curve params");
                    deltas.push(params.quality_weight * c.samples_this_round as f64);
                    curves.push(params);
                }
                let pool_after = pool_before + deltas.iter().sum::<f64>();
                self.oracle_pool = pool_after;
                let eps: Vec<f64> = curves
                    .iter()
                    .zip(noise_rngs.iter_mut())
                    .map(|(params, rng)| oracle_accuracy(params, pool_after, rng))
                    .collect();
                Ok(ModelPhaseOutput {
                    eps,
                    iterations: vec![0; active.len()],
                    valuation: ValuationSnapshot::Oracle { pool_before, deltas, curves },
                })
            }
            RoundBackend::Injected(_) => Ok(ModelPhaseOutput {
                eps: Vec::new(),
                iterations: vec![0; active.len()],
                valuation: ValuationSnapshot::Injected,
            }),
        }
    }

    /// Validation accuracy of the freshly initialized global model on each
    /// active client's current validation set: the epsilon(n, 0) baseline.
    pub fn baseline_accuracy(&self, client_idx: usize) -> Result<f64, RoundError> {
        let c = &self.clients[client_idx];
        if c.val.is_empty() {
            return Err(RoundError::NoValidationData { client: c.id, round: 1 });
        }
        let model = self.global_model.as_ref().expect("trainer backend needs a model");
        Ok(evaluate_accuracy(model, &c.val)?)
    }
}

impl ValuationSnapshot {
    /// Builds the collective-utility evaluator over the active clients, or
    /// `None` when contributions are injected.
    pub fn utility_fn<'a>(
        &'a self,
        state: &'a FederationState,
        active: &[usize],
    ) -> Option<Box<dyn CollectiveUtility + 'a>> {
        match self {
            ValuationSnapshot::Model { local_models, raw_weights, mode } => {
                let val_sets: Vec<&LabeledDataset> =
                    active.iter().map(|&i| &state.clients[i].val).collect();
                Some(Box::new(ModelCollectiveUtility::new(
                    local_models,
                    raw_weights.clone(),
                    val_sets,
                    *mode,
                )))
            }
            ValuationSnapshot::Oracle { pool_before, deltas, curves } => Some(Box::new(
                OracleCollectiveUtility::new(*pool_before, deltas, curves),
            )),
            ValuationSnapshot::Injected => None,
        }
    }
}
