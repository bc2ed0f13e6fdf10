//! Aggregate evaluation metrics: total social welfare (TSW) and the total
//! selection fairness index (TSFI) in both of its semantics.

use serde::{Deserialize, Serialize};

use crate::economics::RoundEconRecord;
use crate::ClientId;

/// Which active set weights past contributions in the TSFI numerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TsfiSemantics {
    /// The current active set A(t') is applied to every past round. This is
    /// the reading that reproduces the worked-example values, and the
    /// default.
    #[default]
    Retrospective,
    /// Each round contributes its own A(t), exactly as the formula is
    /// written.
    Historical,
}

/// One round of the ledger: the records of every client that participated
/// (the previous active set), with `active` marking survival of that
/// round's selection.
pub type RoundRecords = Vec<RoundEconRecord>;

fn round_active_set(records: &RoundRecords) -> Vec<ClientId> {
    records.iter().filter(|r| r.active).map(|r| r.client).collect()
}

/// TSW(t'): the cumulative profit of the retained clients over rounds
/// 1..=t'. The t = 0 term is zero by definition.
pub fn total_social_welfare(rounds: &[RoundRecords]) -> f64 {
    rounds
        .iter()
        .map(|records| {
            records.iter().filter(|r| r.active).map(|r| r.utility - r.cost).sum::<f64>()
        })
        .sum()
}

/// TSFI(t') over rounds 1..=t'. The denominator sums q over every client of
/// the federation; clients contribute q = 0 for rounds after their
/// deselection (they train nothing). Returns `None` when the denominator is
/// zero (the metric is undefined, not an error).
pub fn total_selection_fairness(
    rounds: &[RoundRecords],
    semantics: TsfiSemantics,
) -> Option<f64> {
    if rounds.is_empty() {
        return None;
    }
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    let current_active = round_active_set(rounds.last().unwrap());
    for records in rounds {
        let own_active = round_active_set(records);
        for record in records {
            denominator += record.q;
            let counted = match semantics {
                TsfiSemantics::Retrospective => current_active.contains(&record.client),
                TsfiSemantics::Historical => own_active.contains(&record.client),
            };
            if counted {
                numerator += record.q;
            }
        }
    }
    (denominator != 0.0).then(|| numerator / denominator)
}

/// Per-round trajectories of both metrics over a replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSeries {
    pub semantics: TsfiSemantics,
    /// tsw[t-1] = TSW(t).
    pub tsw: Vec<f64>,
    /// tsfi[t-1] = TSFI(t); `None` marks an undefined value.
    pub tsfi: Vec<Option<f64>>,
}

impl MetricsSeries {
    pub fn new(semantics: TsfiSemantics) -> Self {
        MetricsSeries { semantics, tsw: Vec::new(), tsfi: Vec::new() }
    }

    /// Appends round t's values given the ledger prefix for rounds 1..=t.
    /// TSW accumulates incrementally; TSFI is recomputed over the prefix
    /// because its numerator is not cumulative.
    pub fn push_round(&mut self, rounds_so_far: &[RoundRecords]) {
        let last = rounds_so_far.last().expect("at least one round");
        let round_welfare: f64 =
            last.iter().filter(|r| r.active).map(|r| r.utility - r.cost).sum();
        let prev = self.tsw.last().copied().unwrap_or(0.0);
        self.tsw.push(prev + round_welfare);
        self.tsfi.push(total_selection_fairness(rounds_so_far, self.semantics));
    }

    pub fn rounds(&self) -> usize {
        self.tsw.len()
    }
}
