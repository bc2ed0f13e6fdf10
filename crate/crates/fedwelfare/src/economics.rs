//! Per-round utility, cost, budget, and the budget-balanced money-transfer
//! scheme that makes payoffs proportional to contribution.

use serde::{Deserialize, Serialize};

use crate::ClientId;

/// A client's economic constants. All in abstract money units (accuracy
/// units when `utility_rate` is 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientEconParams {
    /// Revenue per unit increase in precision (u_n).
    #[serde(default = "default_utility_rate")]
    pub utility_rate: f64,
    /// Cost per collected sample.
    #[serde(default = "default_data_cost")]
    pub data_cost: f64,
    /// Cost per local training iteration.
    #[serde(default)]
    pub train_cost: f64,
    /// Cost of one round of communication with the server.
    #[serde(default)]
    pub comm_cost: f64,
}

fn default_utility_rate() -> f64 {
    1.0
}

fn default_data_cost() -> f64 {
    2e-4
}

impl Default for ClientEconParams {
    fn default() -> Self {
        ClientEconParams {
            utility_rate: default_utility_rate(),
            data_cost: default_data_cost(),
            train_cost: 0.0,
            comm_cost: 0.0,
        }
    }
}

impl ClientEconParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("utility_rate", self.utility_rate),
            ("data_cost", self.data_cost),
            ("train_cost", self.train_cost),
            ("comm_cost", self.comm_cost),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// One client's settled economics for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundEconRecord {
    pub client: ClientId,
    pub utility: f64,
    pub cost: f64,
    /// utility - cost.
    pub profit: f64,
    /// Contribution score q(n,t), unclamped.
    pub q: f64,
    /// profit + mt. Equals profit for clients deselected this round.
    pub payoff: f64,
    /// Money transferred to this client; exactly 0 when deselected.
    pub mt: f64,
    /// Whether the client survived this round's selection.
    pub active: bool,
}

/// utility(n,t) = u_n * (eps_t - eps_prev). May be negative.
pub fn compute_utility(utility_rate: f64, eps_t: f64, eps_prev: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&eps_t) && (0.0..=1.0).contains(&eps_prev));
    utility_rate * (eps_t - eps_prev)
}

/// cost(n,t) = data_cost * samples + train_cost * iterations + comm_cost.
pub fn compute_cost(params: &ClientEconParams, samples: u64, iterations: u64) -> f64 {
    params.data_cost * samples as f64 + params.train_cost * iterations as f64 + params.comm_cost
}

/// B(t): the net profit/loss of the active set, fully redistributed by the
/// money-transfer scheme.
pub fn compute_budget(active_profits: &[f64]) -> f64 {
    active_profits.iter().sum()
}

/// Result of settling one round's money transfers over the active set.
#[derive(Debug, Clone, PartialEq)]
pub struct MoneyTransfer {
    /// payoff(n) = share(n) * B(t), in the same order as the inputs.
    pub payoffs: Vec<f64>,
    /// mt(n) = payoff(n) - profit(n); sums to zero.
    pub transfers: Vec<f64>,
    /// True when every clamped contribution was zero and the budget was
    /// split equally instead.
    pub equal_split: bool,
}

/// Splits the budget B(t) = sum of `profits` across the active set in
/// proportion to contribution. Negative contributions are clamped to zero
/// for the payoff shares only; when all clamp to zero the budget is split
/// equally and the outcome is flagged.
pub fn money_transfer(profits: &[f64], q: &[f64]) -> MoneyTransfer {
    assert_eq!(profits.len(), q.len());
    assert!(!profits.is_empty(), "money transfer needs at least one active client");
    let budget = compute_budget(profits);
    let clamped: Vec<f64> = q.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    let equal_split = total <= 0.0;
    let shares: Vec<f64> = if equal_split {
        vec![1.0 / profits.len() as f64; profits.len()]
    } else {
        clamped.iter().map(|&v| v / total).collect()
    };
    let payoffs: Vec<f64> = shares.iter().map(|&s| s * budget).collect();
    let transfers: Vec<f64> = payoffs.iter().zip(profits).map(|(p, pr)| p - pr).collect();
    MoneyTransfer { payoffs, transfers, equal_split }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn utility_is_rate_times_precision_delta() {
        assert!((compute_utility(1.0, 0.8, 0.6) - 0.2).abs() < 1e-15);
        assert_eq!(compute_utility(7.5, 0.4, 0.4), 0.0);
        assert!((compute_utility(1.0, 0.68, 0.73) - (-0.05)).abs() < 1e-15);
    }

    #[test]
    fn cost_components_add_up() {
        let p = ClientEconParams { utility_rate: 1.0, data_cost: 2e-4, train_cost: 0.0, comm_cost: 0.0 };
        assert!((compute_cost(&p, 100, 0) - 0.02).abs() < 1e-15);

        let zero = ClientEconParams { utility_rate: 0.0, data_cost: 0.0, train_cost: 0.0, comm_cost: 0.0 };
        assert_eq!(compute_cost(&zero, 1000, 1000), 0.0);

        let full = ClientEconParams { utility_rate: 1.0, data_cost: 2e-4, train_cost: 1e-5, comm_cost: 0.001 };
        assert!((compute_cost(&full, 300, 50) - 0.0615).abs() < 1e-15);
    }

    #[test]
    fn budget_sums_active_profits() {
        // Round-1 profits of the three-client worked example.
        assert!((compute_budget(&[0.1, 0.05, 0.25]) - 0.40).abs() < 1e-15);
        assert_eq!(compute_budget(&[]), 0.0);
        // Round 2 when only the third client is retained.
        assert!((compute_budget(&[0.15]) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn money_transfer_matches_round_one_worked_values() {
        let out = money_transfer(&[0.1, 0.05, 0.25], &[0.4, 0.2, 0.4]);
        let expected_payoffs = [0.16, 0.08, 0.16];
        let expected_mt = [0.06, 0.03, -0.09];
        for i in 0..3 {
            assert!((out.payoffs[i] - expected_payoffs[i]).abs() < 1e-12);
            assert!((out.transfers[i] - expected_mt[i]).abs() < 1e-12);
        }
        assert!(out.transfers.iter().sum::<f64>().abs() < 1e-12);
        assert!(!out.equal_split);
    }

    #[test]
    fn money_transfer_matches_round_two_retained_pair() {
        let out = money_transfer(&[-0.05, 0.15], &[0.5, 0.4]);
        assert!((out.payoffs[0] - 0.1 * 5.0 / 9.0).abs() < 1e-12);
        assert!((out.payoffs[1] - 0.1 * 4.0 / 9.0).abs() < 1e-12);
        assert!((out.transfers[0] - (0.1 * 5.0 / 9.0 + 0.05)).abs() < 1e-12);
        assert!((out.transfers[1] - (0.1 * 4.0 / 9.0 - 0.15)).abs() < 1e-12);
    }

    #[test]
    fn single_client_gets_own_profit_back() {
        let out = money_transfer(&[0.07], &[0.3]);
        assert!((out.payoffs[0] - 0.07).abs() < 1e-15);
        assert!(out.transfers[0].abs() < 1e-15);
    }

    #[test]
    fn all_nonpositive_contributions_fall_back_to_equal_split() {
        let out = money_transfer(&[0.3, 0.1], &[-0.2, 0.0]);
        assert!(out.equal_split);
        assert!((out.payoffs[0] - 0.2).abs() < 1e-15);
        assert!((out.payoffs[1] - 0.2).abs() < 1e-15);
        assert!(out.transfers.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn positive_budget_and_contributions_pay_every_client() {
        // The fairness mechanism compensates loss makers when B(t) > 0.
        let out = money_transfer(&[-0.1, 0.4], &[0.5, 0.5]);
        assert!(out.payoffs.iter().all(|&p| p > 0.0));
    }

    proptest! {
        #[test]
        fn transfers_always_balance(
            profits in proptest::collection::vec(-1.0f64..1.0, 1..10),
            raw_q in proptest::collection::vec(-1.0f64..1.0, 1..10),
        ) {
            let n = profits.len().min(raw_q.len());
            let profits = &profits[..n];
            let q = &raw_q[..n];
            let out = money_transfer(profits, q);
            let mt_sum: f64 = out.transfers.iter().sum();
            prop_assert!(mt_sum.abs() < 1e-9);
            let budget = compute_budget(profits);
            let payoff_sum: f64 = out.payoffs.iter().sum();
            prop_assert!((payoff_sum - budget).abs() < 1e-9);
        }

        #[test]
        fn payoffs_scale_with_contribution(
            profits in proptest::collection::vec(-1.0f64..1.0, 2..8),
            raw_q in proptest::collection::vec(0.01f64..1.0, 2..8),
        ) {
            let n = profits.len().min(raw_q.len());
            let profits = &profits[..n];
            let q = &raw_q[..n];
            let budget = compute_budget(profits);
            prop_assume!(budget.abs() > 1e-6);
            let out = money_transfer(profits, q);
            for i in 0..n {
                for j in 0..n {
                    let lhs = out.payoffs[i] * q[j];
                    let rhs = out.payoffs[j] * q[i];
                    prop_assert!((lhs - rhs).abs() < 1e-9 * budget.abs().max(1.0));
                }
            }
        }
    }
}
