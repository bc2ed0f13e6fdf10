//! Client selection: the welfare/fairness objective, the restricted
//! powerset search over loss-making clients, the heuristic baselines, and
//! the driver that runs one full data-sharing round.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contribution::{
    marginal_contributions, quantitative_contribution, shapley_exact, shapley_monte_carlo,
    ContributionMethod,
};
use crate::economics::{compute_cost, compute_utility, money_transfer, RoundEconRecord};
use crate::state::{FederationState, RoundBackend, RoundError};
use crate::ClientId;

/// Largest candidate-elimination set the powerset search will enumerate.
pub const POWERSET_GUARD: usize = 20;

/// The retained membership after a round's selection decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub round: u32,
    /// Ascending client ids.
    pub members: Vec<ClientId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDecision {
    pub retained: ActiveSet,
    /// Ascending client ids eliminated this round.
    pub eliminated: Vec<ClientId>,
    pub objective_value: f64,
    /// Candidate sets actually evaluated by the search.
    pub candidates_considered: u32,
}

/// How the retained set is decided each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    /// Maximize welfare minus the mu-weighted fairness penalty (the full
    /// mechanism).
    #[default]
    Objective,
    /// Keep exactly the profit-makers; equivalent to mu = 0.
    LeastLenient,
    /// Never eliminate anyone; equivalent to mu -> infinity.
    MostLenient,
}

/// Indices (into the ordered previous active set) of clients whose utility
/// fell strictly below cost. Zero-profit clients are retained.
pub fn candidate_eliminations(profits: &[f64]) -> Vec<usize> {
    (0..profits.len()).filter(|&i| profits[i] < 0.0).collect()
}

/// The round objective for one candidate: retained welfare minus the
/// fairness penalty, applied once.
///
/// `retained_mask` selects members of the ordered previous active set and
/// must be non-empty. An empty eliminated set carries no penalty; a
/// non-positive retained contribution total rejects the candidate outright
/// (negative infinity).
pub fn selection_objective(profits: &[f64], q: &[f64], retained_mask: u64, mu: f64) -> f64 {
    debug_assert!(retained_mask != 0, "empty retained sets are skipped by the caller");
    let n = profits.len();
    let full = full_mask(n);
    let eliminated_mask = full & !retained_mask;
    let mut welfare = 0.0;
    for (i, &p) in profits.iter().enumerate() {
        if retained_mask & (1 << i) != 0 {
            welfare += p;
        }
    }
    if eliminated_mask == 0 {
        return welfare;
    }
    let mut q_eliminated = 0.0;
    let mut q_retained = 0.0;
    for (i, &qi) in q.iter().enumerate() {
        if retained_mask & (1 << i) != 0 {
            q_retained += qi;
        } else {
            q_eliminated += qi;
        }
    }
    if q_retained <= 0.0 {
        return f64::NEG_INFINITY;
    }
    welfare - mu * (q_eliminated / q_retained)
}

/// Exhaustive search over the powerset of the candidate-elimination set.
///
/// Inputs are per-member slices over the ordered previous active set.
/// Returns the maximizer; ties break toward fewer eliminations, then the
/// lexicographically smallest eliminated-id set. `None` only when every
/// candidate would empty the federation, which signals termination.
pub fn select_active_set(
    prev_members: &[ClientId],
    round: u32,
    profits: &[f64],
    q: &[f64],
    mu: f64,
) -> Option<SelectionDecision> {
    assert_eq!(prev_members.len(), profits.len());
    assert_eq!(prev_members.len(), q.len());
    assert!(!prev_members.is_empty());
    debug_assert!(prev_members.windows(2).all(|w| w[0] < w[1]), "members must be ascending");

    let candidates = candidate_eliminations(profits);
    assert!(
        candidates.len() <= POWERSET_GUARD,
        "candidate set of {} exceeds the powerset guard",
        candidates.len()
    );
    let full = full_mask(prev_members.len());

    let mut best: Option<(f64, Vec<usize>, u64)> = None;
    let mut considered = 0u32;
    for choice in 0..(1u64 << candidates.len()) {
        let mut elim_mask = 0u64;
        let mut elim_indices = Vec::new();
        for (bit, &idx) in candidates.iter().enumerate() {
            if choice & (1 << bit) != 0 {
                elim_mask |= 1 << idx;
                elim_indices.push(idx);
            }
        }
        let retained_mask = full & !elim_mask;
        if retained_mask == 0 {
            continue;
        }
        considered += 1;
        let f = selection_objective(profits, q, retained_mask, mu);
        let better = match &best {
            None => true,
            Some((best_f, best_elim, _)) => {
                f > *best_f
                    || (f == *best_f
                        && (elim_indices.len() < best_elim.len()
                            || (elim_indices.len() == best_elim.len()
                                && elim_indices < *best_elim)))
            }
        };
        if better {
            best = Some((f, elim_indices, retained_mask));
        }
    }

    best.map(|(objective_value, elim_indices, retained_mask)| {
        let eliminated: Vec<ClientId> = elim_indices.iter().map(|&i| prev_members[i]).collect();
        let members: Vec<ClientId> = (0..prev_members.len())
            .filter(|&i| retained_mask & (1 << i) != 0)
            .map(|i| prev_members[i])
            .collect();
        SelectionDecision {
            retained: ActiveSet { round, members },
            eliminated,
            objective_value,
            candidates_considered: considered,
        }
    })
}

/// Keep exactly the clients with non-negative profit. If every client made
/// a loss, the single least-lossy client (lowest id on ties) is kept so the
/// round can still settle; the federation then terminates on the
/// all-but-one rule.
pub fn least_lenient_selection(
    prev_members: &[ClientId],
    round: u32,
    profits: &[f64],
) -> SelectionDecision {
    let keep: Vec<usize> = (0..profits.len()).filter(|&i| profits[i] >= 0.0).collect();
    let keep = if keep.is_empty() {
        let mut best = 0;
        for i in 1..profits.len() {
            if profits[i] > profits[best] {
                best = i;
            }
        }
        vec![best]
    } else {
        keep
    };
    let members: Vec<ClientId> = keep.iter().map(|&i| prev_members[i]).collect();
    let eliminated: Vec<ClientId> = (0..prev_members.len())
        .filter(|i| !keep.contains(i))
        .map(|i| prev_members[i])
        .collect();
    let objective_value = keep.iter().map(|&i| profits[i]).sum();
    SelectionDecision {
        retained: ActiveSet { round, members },
        eliminated,
        objective_value,
        candidates_considered: 1,
    }
}

/// Never eliminate anyone.
pub fn most_lenient_selection(
    prev_members: &[ClientId],
    round: u32,
    profits: &[f64],
) -> SelectionDecision {
    SelectionDecision {
        retained: ActiveSet { round, members: prev_members.to_vec() },
        eliminated: Vec::new(),
        objective_value: profits.iter().sum(),
        candidates_considered: 1,
    }
}

/// Mechanism settings for a round: the trade-off weight, the contribution
/// measure, and the selection rule.
#[derive(Debug, Clone)]
pub struct SelectionMechanism {
    pub mu: f64,
    pub method: ContributionMethod,
    pub rule: SelectionRule,
}

/// Everything one settled round produces.
pub struct RoundOutput {
    pub round: u32,
    /// One record per previous-active-set member, ascending id order.
    pub records: Vec<RoundEconRecord>,
    pub decision: SelectionDecision,
    /// The money transfer fell back to an equal split (all clamped
    /// contributions were zero).
    pub equal_split: bool,
    /// The selection left at most one client: the federation ends here.
    pub terminated: bool,
}

/// Runs one full data-sharing round over `state`'s active clients: model
/// phase, utility/cost/contribution accounting, the selection decision, and
/// the money transfer over the retained set. Arrivals must already have
/// been applied (`samples_this_round` and, for the trainer backend, the
/// datasets).
pub fn selection_round(
    state: &mut FederationState,
    backend: &RoundBackend,
    mech: &SelectionMechanism,
    train_rngs: &mut [ChaCha8Rng],
    noise_rngs: &mut [ChaCha8Rng],
    shapley_rng: &mut ChaCha8Rng,
) -> Result<RoundOutput, RoundError> {
    let round = state.round + 1;
    let active = state.active_indices();
    assert!(!active.is_empty(), "selection_round on a terminated federation");

    let phase = state.run_model_phase(backend, train_rngs, noise_rngs)?;
    for (pos, &i) in active.iter().enumerate() {
        state.clients[i].iterations_this_round = phase.iterations[pos];
    }

    // Utility and cost per active client.
    let (utilities, costs): (Vec<f64>, Vec<f64>) = match backend {
        RoundBackend::Injected(table) => {
            let mut u = Vec::with_capacity(active.len());
            let mut c = Vec::with_capacity(active.len());
            for &i in &active {
                let id = state.clients[i].id;
                let row = table
                    .get(id, round)
                    .ok_or(RoundError::MissingInjectedRow { client: id, round })?;
                u.push(row.utility);
                c.push(row.cost);
            }
            (u, c)
        }
        _ => {
            let mut u = Vec::with_capacity(active.len());
            let mut c = Vec::with_capacity(active.len());
            for (pos, &i) in active.iter().enumerate() {
                let client = &state.clients[i];
                u.push(compute_utility(client.econ.utility_rate, phase.eps[pos], client.eps_prev));
                c.push(compute_cost(
                    &client.econ,
                    client.samples_this_round,
                    client.iterations_this_round,
                ));
            }
            (u, c)
        }
    };
    let profits: Vec<f64> = utilities.iter().zip(&costs).map(|(u, c)| u - c).collect();

    // Contribution scores.
    let q: Vec<f64> = match backend {
        RoundBackend::Injected(table) => active
            .iter()
            .map(|&i| table.get(state.clients[i].id, round).expect("checked above").q)
            .collect(),
        _ => match mech.method {
            ContributionMethod::Quantitative => active
                .iter()
                .map(|&i| quantitative_contribution(state.clients[i].samples_this_round))
                .collect(),
            ContributionMethod::Marginal => {
                let v = phase.valuation.utility_fn(state, &active).expect("model-backed round");
                marginal_contributions(v.as_ref())
            }
            ContributionMethod::ShapleyExact => {
                let v = phase.valuation.utility_fn(state, &active).expect("model-backed round");
                shapley_exact(v.as_ref())
                    .map_err(|e| RoundError::Contribution(e.to_string()))?
            }
            ContributionMethod::ShapleyMc { permutations } => {
                let v = phase.valuation.utility_fn(state, &active).expect("model-backed round");
                shapley_monte_carlo(v.as_ref(), permutations, shapley_rng)
            }
        },
    };

    // Selection decision.
    let prev_members: Vec<ClientId> = active.iter().map(|&i| state.clients[i].id).collect();
    let decision = match mech.rule {
        SelectionRule::Objective => {
            match select_active_set(&prev_members, round, &profits, &q, mech.mu) {
                Some(d) => d,
                // Unreachable with a non-empty previous active set (the
                // empty elimination is always admissible); terminate if it
                // ever fires.
                None => SelectionDecision {
                    retained: ActiveSet { round, members: Vec::new() },
                    eliminated: prev_members.clone(),
                    objective_value: f64::NEG_INFINITY,
                    candidates_considered: 0,
                },
            }
        }
        SelectionRule::LeastLenient => least_lenient_selection(&prev_members, round, &profits),
        SelectionRule::MostLenient => most_lenient_selection(&prev_members, round, &profits),
    };

    // Money transfer over the retained set only.
    let retained_pos: Vec<usize> = (0..prev_members.len())
        .filter(|&p| decision.retained.members.contains(&prev_members[p]))
        .collect();
    let (transfer, equal_split) = if retained_pos.is_empty() {
        (None, false)
    } else {
        let r_profits: Vec<f64> = retained_pos.iter().map(|&p| profits[p]).collect();
        let r_q: Vec<f64> = retained_pos.iter().map(|&p| q[p]).collect();
        let out = money_transfer(&r_profits, &r_q);
        let flag = out.equal_split;
        (Some(out), flag)
    };

    // Records for every participant of this round.
    let mut records = Vec::with_capacity(prev_members.len());
    for (pos, &idx) in active.iter().enumerate() {
        let id = state.clients[idx].id;
        let retained_slot = retained_pos.iter().position(|&p| p == pos);
        let (payoff, mt, is_active) = match (retained_slot, &transfer) {
            (Some(slot), Some(out)) => (out.payoffs[slot], out.transfers[slot], true),
            _ => (profits[pos], 0.0, false),
        };
        records.push(RoundEconRecord {
            client: id,
            utility: utilities[pos],
            cost: costs[pos],
            profit: profits[pos],
            q: q[pos],
            payoff,
            mt,
            active: is_active,
        });
    }

    // Commit the decision to state.
    for (pos, &idx) in active.iter().enumerate() {
        let client = &mut state.clients[idx];
        let retained = records[pos].active;
        if retained {
            client.cumulative_payoff += records[pos].payoff;
            client.cumulative_mt += records[pos].mt;
            if let Some(&eps) = phase.eps.get(pos) {
                client.eps_prev = eps;
            }
        } else {
            client.active = false;
            client.eliminated_round = Some(round);
        }
    }
    state.round = round;
    let terminated = decision.retained.members.len() <= 1;

    Ok(RoundOutput { round, records, decision, equal_split, terminated })
}

fn full_mask(n: usize) -> u64 {
    assert!(n <= 63);
    (1u64 << n) - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn ids(v: &[u32]) -> Vec<ClientId> {
        v.iter().map(|&i| ClientId(i)).collect()
    }

    // The worked two-round example: round-1 rows are all profitable, round-2
    // rows put clients 1 and 2 at a loss.
    const R1_PROFITS: [f64; 3] = [0.1, 0.05, 0.25];
    const R2_PROFITS: [f64; 3] = [-0.05, -0.05, 0.15];
    const R2_Q: [f64; 3] = [0.5, 0.1, 0.4];

    #[test]
    fn profitable_rounds_have_no_candidates() {
        assert!(candidate_eliminations(&R1_PROFITS).is_empty());
        assert!(candidate_eliminations(&[0.0, 0.3]).is_empty());
    }

    #[test]
    fn loss_makers_are_the_candidates() {
        assert_eq!(candidate_eliminations(&R2_PROFITS), vec![0, 1]);
    }

    #[test]
    fn objective_matches_worked_scenarios() {
        for &mu in &[0.0, 0.1, 1.0] {
            // eliminate client 0 -> retained {1, 2}
            let f = selection_objective(&R2_PROFITS, &R2_Q, 0b110, mu);
            assert!((f - (0.1 - mu)).abs() < 1e-12);
            // eliminate client 1 -> retained {0, 2}
            let f = selection_objective(&R2_PROFITS, &R2_Q, 0b101, mu);
            assert!((f - (0.1 - mu / 9.0)).abs() < 1e-12);
            // eliminate both -> retained {2}
            let f = selection_objective(&R2_PROFITS, &R2_Q, 0b100, mu);
            assert!((f - (0.15 - 1.5 * mu)).abs() < 1e-12);
            // eliminate none
            let f = selection_objective(&R2_PROFITS, &R2_Q, 0b111, mu);
            assert!((f - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn decisions_track_mu_regions() {
        let members = ids(&[1, 2, 3]);
        let d = select_active_set(&members, 2, &R2_PROFITS, &R2_Q, 0.01).unwrap();
        assert_eq!(d.retained.members, ids(&[3]));
        assert_eq!(d.eliminated, ids(&[1, 2]));
        assert_eq!(d.candidates_considered, 4);

        let d = select_active_set(&members, 2, &R2_PROFITS, &R2_Q, 0.2).unwrap();
        assert_eq!(d.retained.members, ids(&[1, 3]));
        assert_eq!(d.eliminated, ids(&[2]));

        let d = select_active_set(&members, 2, &R2_PROFITS, &R2_Q, 1.0).unwrap();
        assert_eq!(d.retained.members, ids(&[1, 2, 3]));
        assert!(d.eliminated.is_empty());
    }

    #[test]
    fn retained_set_grows_with_mu_on_the_frozen_instance() {
        let members = ids(&[1, 2, 3]);
        let grid = [0.0, 0.01, 0.1, 0.2, 0.5, 1.0];
        let mut prev: Option<Vec<ClientId>> = None;
        for &mu in &grid {
            let d = select_active_set(&members, 2, &R2_PROFITS, &R2_Q, mu).unwrap();
            if let Some(p) = &prev {
                assert!(
                    p.iter().all(|id| d.retained.members.contains(id)),
                    "mu {mu}: retained set shrank"
                );
            }
            prev = Some(d.retained.members);
        }
    }

    #[test]
    fn mu_zero_keeps_exactly_the_profit_makers() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(2..8usize);
            let members: Vec<ClientId> = (0..n as u32).map(ClientId).collect();
            let profits: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let d = select_active_set(&members, 1, &profits, &q, 0.0).unwrap();
            let expected: Vec<ClientId> = (0..n)
                .filter(|&i| profits[i] >= 0.0)
                .map(|i| members[i])
                .collect();
            if expected.is_empty() {
                // All losers: the search keeps the least lossy client.
                assert_eq!(d.retained.members.len(), 1);
            } else {
                assert_eq!(d.retained.members, expected);
            }
        }
    }

    #[test]
    fn mu_zero_matches_least_lenient_including_all_loser_rounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(2..7usize);
            let members: Vec<ClientId> = (0..n as u32).map(ClientId).collect();
            let profits: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..0.05)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let mechanism = select_active_set(&members, 1, &profits, &q, 0.0).unwrap();
            let heuristic = least_lenient_selection(&members, 1, &profits);
            assert_eq!(mechanism.retained.members, heuristic.retained.members);
            assert_eq!(mechanism.eliminated, heuristic.eliminated);
        }
    }

    #[test]
    fn equal_objectives_break_toward_fewer_then_smaller_ids() {
        // Two symmetric losers: eliminating either gives the same objective
        // at mu = 0; the lexicographically smaller set must win.
        let members = ids(&[5, 9]);
        let profits = [-0.1, -0.1];
        let q = [0.2, 0.2];
        let d = select_active_set(&members, 1, &profits, &q, 0.0).unwrap();
        assert_eq!(d.eliminated, ids(&[5]));
        assert_eq!(d.retained.members, ids(&[9]));
    }

    #[test]
    fn nonpositive_retained_contribution_rejects_the_candidate() {
        let profits = [-0.2, 0.1];
        let q = [0.5, -0.5];
        // Eliminating client 0 leaves q_retained = -0.5 <= 0.
        let f = selection_objective(&profits, &q, 0b10, 0.3);
        assert_eq!(f, f64::NEG_INFINITY);
        // The empty elimination carries no penalty even with bad q.
        let f = selection_objective(&profits, &q, 0b11, 0.3);
        assert!((f - (-0.1)).abs() < 1e-12);
    }

    #[test]
    fn restricted_search_matches_full_powerset_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..40 {
            let n = rng.random_range(2..9usize);
            let members: Vec<ClientId> = (0..n as u32).map(ClientId).collect();
            let profits: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let mu = rng.random_range(0.0..1.0);
            let restricted = select_active_set(&members, 1, &profits, &q, mu).unwrap();

            let mut best = f64::NEG_INFINITY;
            for retained_mask in 1u64..(1 << n) {
                let f = selection_objective(&profits, &q, retained_mask, mu);
                if f > best {
                    best = f;
                }
            }
            assert_eq!(restricted.objective_value, best);
        }
    }

    #[test]
    fn most_lenient_retains_everyone() {
        let members = ids(&[1, 2, 3]);
        let d = most_lenient_selection(&members, 4, &[-1.0, -2.0, -3.0]);
        assert_eq!(d.retained.members, members);
        assert!(d.eliminated.is_empty());
    }
}
