//! Aggregation of per-replication CSVs into the run report. The report is
//! always computed from the written CSV files, so re-reading and
//! re-aggregating them reproduces it exactly.

use serde::{Deserialize, Serialize};

use crate::metrics::TsfiSemantics;

use super::csvio::{LedgerRow, MetricsRow};

pub const MANIFEST_SCHEMA: &str = "fedwelfare-run/1";
pub const REPORT_SCHEMA: &str = "fedwelfare-report/1";
pub const SWEEP_SCHEMA: &str = "fedwelfare-sweep/1";

/// Sidecar describing a run directory; written next to the CSVs so the
/// report can be rebuilt from files alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub name: String,
    pub mu: f64,
    pub base_seed: u64,
    pub replications: u32,
    pub max_rounds: u32,
    pub tsfi_semantics: TsfiSemantics,
    pub client_ids: Vec<u32>,
    /// Replications that aborted, with their diagnostics.
    pub failures: Vec<FailedReplication>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedReplication {
    pub replication: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema: String,
    pub name: String,
    pub mu: f64,
    pub replications: u32,
    pub successes: u32,
    pub failures: u32,
    pub max_rounds: u32,
    pub tsfi_semantics: TsfiSemantics,
    pub clients: Vec<ClientReport>,
    pub rounds: Vec<RoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub id: u32,
    /// Mean round of deselection over successful replications;
    /// max_rounds + 1 counts as never eliminated.
    pub mean_elimination_round: f64,
    pub sd_elimination_round: f64,
    /// Fraction of replications in which the client was deselected.
    pub eliminated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub tsw_mean: f64,
    pub tsw_sd: f64,
    /// `None` when the index was undefined in every replication.
    pub tsfi_mean: Option<f64>,
    pub tsfi_sd: Option<f64>,
    /// Replications with a defined TSFI at this round.
    pub tsfi_defined: u32,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Elimination round of every (replication, client) pair found in the
/// ledger: the round whose record has `active = false`, or the sentinel
/// `max_rounds + 1`.
pub fn elimination_rounds(
    ledger: &[LedgerRow],
    client_id: u32,
    max_rounds: u32,
) -> Vec<(u32, u32)> {
    let mut reps: Vec<u32> = ledger.iter().map(|r| r.replication).collect();
    reps.sort_unstable();
    reps.dedup();
    reps.into_iter()
        .map(|rep| {
            let eliminated = ledger
                .iter()
                .find(|r| r.replication == rep && r.client.0 == client_id && !r.active)
                .map(|r| r.round);
            (rep, eliminated.unwrap_or(max_rounds + 1))
        })
        .collect()
}

/// Builds the aggregate report from parsed CSV rows. Metric trajectories of
/// replications that terminated early are carried forward at their final
/// value (cumulative metrics do not change after termination).
pub fn build_report(
    manifest: &RunManifest,
    ledger: &[LedgerRow],
    metrics: &[MetricsRow],
) -> AggregateReport {
    let mut reps: Vec<u32> = ledger.iter().map(|r| r.replication).collect();
    reps.sort_unstable();
    reps.dedup();
    let successes = reps.len() as u32;

    let clients = manifest
        .client_ids
        .iter()
        .map(|&id| {
            let rounds: Vec<f64> = elimination_rounds(ledger, id, manifest.max_rounds)
                .into_iter()
                .map(|(_, r)| r as f64)
                .collect();
            let (mean, sd) = mean_sd(&rounds);
            let eliminated = rounds
                .iter()
                .filter(|&&r| r <= manifest.max_rounds as f64)
                .count() as f64;
            ClientReport {
                id,
                mean_elimination_round: mean,
                sd_elimination_round: sd,
                eliminated_fraction: if rounds.is_empty() {
                    0.0
                } else {
                    eliminated / rounds.len() as f64
                },
            }
        })
        .collect();

    let mut rounds_out = Vec::new();
    for round in 1..=manifest.max_rounds {
        let mut tsw = Vec::new();
        let mut tsfi = Vec::new();
        for &rep in &reps {
            // Row for this round, else the replication's last earlier row.
            let row = metrics
                .iter()
                .filter(|m| m.replication == rep && m.round <= round)
                .max_by_key(|m| m.round);
            if let Some(row) = row {
                tsw.push(row.tsw);
                if let Some(v) = row.tsfi {
                    tsfi.push(v);
                }
            }
        }
        let (tsw_mean, tsw_sd) = mean_sd(&tsw);
        let defined = tsfi.len() as u32;
        let (tsfi_mean, tsfi_sd) = if tsfi.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_sd(&tsfi);
            (Some(m), Some(s))
        };
        rounds_out.push(RoundReport {
            round,
            tsw_mean,
            tsw_sd,
            tsfi_mean,
            tsfi_sd,
            tsfi_defined: defined,
        });
    }

    AggregateReport {
        schema: REPORT_SCHEMA.to_string(),
        name: manifest.name.clone(),
        mu: manifest.mu,
        replications: manifest.replications,
        successes,
        failures: manifest.failures.len() as u32,
        max_rounds: manifest.max_rounds,
        tsfi_semantics: manifest.tsfi_semantics,
        clients,
        rounds: rounds_out,
    }
}

/// Per-mu summaries of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema: String,
    pub name: String,
    pub mus: Vec<f64>,
    pub runs: Vec<AggregateReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ClientId;

    fn row(rep: u32, round: u32, client: u32, active: bool) -> LedgerRow {
        LedgerRow {
            replication: rep,
            round,
            client: ClientId(client),
            utility: 0.1,
            cost: 0.05,
            profit: 0.05,
            q: 1.0,
            payoff: 0.05,
            mt: 0.0,
            active,
        }
    }

    fn manifest() -> RunManifest {
        RunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            name: "test".to_string(),
            mu: 0.1,
            base_seed: 1,
            replications: 2,
            max_rounds: 3,
            tsfi_semantics: TsfiSemantics::Retrospective,
            client_ids: vec![0, 1],
            failures: Vec::new(),
        }
    }

    #[test]
    fn elimination_rounds_use_the_sentinel_for_survivors() {
        // Rep 0: client 1 eliminated at round 2; rep 1: nobody eliminated.
        let ledger = vec![
            row(0, 1, 0, true),
            row(0, 1, 1, true),
            row(0, 2, 0, true),
            row(0, 2, 1, false),
            row(1, 1, 0, true),
            row(1, 1, 1, true),
        ];
        let rounds = elimination_rounds(&ledger, 1, 3);
        assert_eq!(rounds, vec![(0, 2), (1, 4)]);
        let report = build_report(&manifest(), &ledger, &[]);
        let client1 = &report.clients[1];
        assert!((client1.mean_elimination_round - 3.0).abs() < 1e-12);
        assert!((client1.eliminated_fraction - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metric_trajectories_carry_forward_after_termination() {
        let ledger = vec![row(0, 1, 0, true), row(0, 2, 0, true)];
        let metrics = vec![
            MetricsRow {
                replication: 0,
                round: 1,
                tsw: 0.4,
                tsfi: Some(1.0),
                semantics: TsfiSemantics::Retrospective,
                mu: 0.1,
            },
            MetricsRow {
                replication: 0,
                round: 2,
                tsw: 0.5,
                tsfi: Some(0.8),
                semantics: TsfiSemantics::Retrospective,
                mu: 0.1,
            },
        ];
        let report = build_report(&manifest(), &ledger, &metrics);
        assert_eq!(report.rounds.len(), 3);
        // Round 3 carries the round-2 values forward.
        assert!((report.rounds[2].tsw_mean - 0.5).abs() < 1e-12);
        assert_eq!(report.rounds[2].tsfi_mean, Some(0.8));
    }
}
