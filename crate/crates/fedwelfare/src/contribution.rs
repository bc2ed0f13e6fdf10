//! Contribution measures q(n,t): quantitative, marginal, exact Shapley and
//! permutation-sampling Shapley, plus the collective-utility evaluators they
//! score subsets with.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    aggregate, evaluate_accuracy, normalized_weights, oracle_mean_accuracy, AccuracyOracleParams,
    AggregationMode, LabeledDataset, ParamVector,
};

/// Hard cap on the active-set size for exact Shapley (2^N subset table).
pub const SHAPLEY_EXACT_MAX_PLAYERS: usize = 20;

/// Above this player count, exhaustive permutation enumeration is never
/// attempted by the Monte-Carlo estimator.
const EXHAUSTIVE_PERMUTATION_MAX_PLAYERS: usize = 8;

#[derive(Debug, Error)]
pub enum ContributionError {
    #[error("exact Shapley supports at most {max} players, got {n}")]
    TooManyPlayers { n: usize, max: usize },
}

/// How q(n,t) is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ContributionMethod {
    /// q = number of samples contributed this round.
    Quantitative,
    /// q = v(A) - v(A \ {n}).
    Marginal,
    /// Exact Shapley value over all 2^N subsets of the active set.
    ShapleyExact,
    /// Permutation-sampling Shapley estimate.
    ShapleyMc { permutations: u32 },
}

impl ContributionMethod {
    pub fn validate(&self, client_count: usize) -> Result<(), String> {
        match self {
            ContributionMethod::ShapleyExact if client_count > SHAPLEY_EXACT_MAX_PLAYERS => {
                Err(format!(
                    "shapley-exact supports at most {SHAPLEY_EXACT_MAX_PLAYERS} clients, scenario has {client_count}"
                ))
            }
            ContributionMethod::ShapleyMc { permutations: 0 } => {
                Err("shapley-mc needs at least one permutation".into())
            }
            _ => Ok(()),
        }
    }
}

/// A set function over the ordered active-client list. Subsets are bitmasks:
/// bit i selects the i-th active client. Implementations must be
/// deterministic within a round and must return 0 for the empty subset.
pub trait CollectiveUtility {
    fn player_count(&self) -> usize;
    fn value(&self, subset: u64) -> f64;
}

/// Wraps a closure as a [`CollectiveUtility`]; the closure is still expected
/// to map the empty mask to 0.
pub struct FnUtility<F: Fn(u64) -> f64> {
    players: usize,
    f: F,
}

impl<F: Fn(u64) -> f64> FnUtility<F> {
    pub fn new(players: usize, f: F) -> Self {
        FnUtility { players, f }
    }
}

impl<F: Fn(u64) -> f64> CollectiveUtility for FnUtility<F> {
    fn player_count(&self) -> usize {
        self.players
    }

    fn value(&self, subset: u64) -> f64 {
        (self.f)(subset)
    }
}

/// q(n,t) for the quantitative measure: the sample count itself.
pub fn quantitative_contribution(samples: u64) -> f64 {
    samples as f64
}

/// q(n,t) = v(full) - v(full without player). `player` indexes the ordered
/// active list.
pub fn marginal_contribution<V: CollectiveUtility + ?Sized>(v: &V, player: usize) -> f64 {
    let n = v.player_count();
    assert!(player < n);
    let full = full_mask(n);
    v.value(full) - v.value(full & !(1u64 << player))
}

/// Marginal contributions for every player: N+1 utility evaluations.
pub fn marginal_contributions<V: CollectiveUtility + ?Sized>(v: &V) -> Vec<f64> {
    let n = v.player_count();
    let full = full_mask(n);
    let v_full = v.value(full);
    (0..n).map(|i| v_full - v.value(full & !(1u64 << i))).collect()
}

/// Exact Shapley values by enumerating all 2^N subsets once.
pub fn shapley_exact<V: CollectiveUtility + ?Sized>(v: &V) -> Result<Vec<f64>, ContributionError> {
    let n = v.player_count();
    if n > SHAPLEY_EXACT_MAX_PLAYERS {
        return Err(ContributionError::TooManyPlayers { n, max: SHAPLEY_EXACT_MAX_PLAYERS });
    }
    let table: Vec<f64> = (0..1u64 << n).map(|mask| v.value(mask)).collect();
    // weight(s) = s! (n-1-s)! / n! = 1 / (n * C(n-1, s))
    let weights: Vec<f64> =
        (0..n).map(|s| 1.0 / (n as f64 * binomial(n - 1, s))).collect();
    let mut out = vec![0.0; n];
    for mask in 0..1u64 << n {
        let size = mask.count_ones() as usize;
        for (i, q) in out.iter_mut().enumerate() {
            let bit = 1u64 << i;
            if mask & bit == 0 {
                *q += weights[size] * (table[(mask | bit) as usize] - table[mask as usize]);
            }
        }
    }
    Ok(out)
}

/// Permutation-sampling Shapley estimator: the average over orderings of
/// each player's marginal gain on its predecessors. When every distinct
/// ordering fits the budget (`permutations >= n!` and n is small) the
/// estimator enumerates them instead of sampling, making the result exact.
pub fn shapley_monte_carlo<V, R>(v: &V, permutations: u32, rng: &mut R) -> Vec<f64>
where
    V: CollectiveUtility + ?Sized,
    R: Rng + ?Sized,
{
    assert!(permutations >= 1);
    let n = v.player_count();
    if n == 0 {
        return Vec::new();
    }
    let mut memo: HashMap<u64, f64> = HashMap::new();
    let mut cached = |mask: u64| -> f64 {
        *memo.entry(mask).or_insert_with(|| v.value(mask))
    };

    if n <= EXHAUSTIVE_PERMUTATION_MAX_PLAYERS && permutations as u128 >= factorial(n) {
        let mut sums = vec![0.0; n];
        let mut order: Vec<usize> = (0..n).collect();
        let mut count = 0u64;
        permutations_visit(&mut order, 0, &mut |perm| {
            accumulate_permutation(perm, &mut cached, &mut sums);
            count += 1;
        });
        return sums.into_iter().map(|s| s / count as f64).collect();
    }

    let mut sums = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..permutations {
        order.shuffle(rng);
        accumulate_permutation(&order, &mut cached, &mut sums);
    }
    sums.into_iter().map(|s| s / permutations as f64).collect()
}

fn accumulate_permutation(
    order: &[usize],
    cached: &mut impl FnMut(u64) -> f64,
    sums: &mut [f64],
) {
    let mut mask = 0u64;
    let mut prev = cached(0);
    for &player in order {
        mask |= 1 << player;
        let next = cached(mask);
        sums[player] += next - prev;
        prev = next;
    }
}

fn permutations_visit(order: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == order.len() {
        visit(order);
        return;
    }
    for i in k..order.len() {
        order.swap(k, i);
        permutations_visit(order, k + 1, visit);
        order.swap(k, i);
    }
}

fn full_mask(n: usize) -> u64 {
    assert!(n <= 63);
    (1u64 << n) - 1
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// Collective utility backed by frozen post-round local models: v(S) is the
/// mean validation accuracy over all active clients of the subset's
/// weighted-mean model. Subset aggregation always uses FedAvg semantics;
/// under FedBn each evaluating client keeps its own local spans.
pub struct ModelCollectiveUtility<'a> {
    local_models: &'a [ParamVector],
    raw_weights: Vec<f64>,
    val_sets: Vec<&'a LabeledDataset>,
    mode: AggregationMode,
}

impl<'a> ModelCollectiveUtility<'a> {
    pub fn new(
        local_models: &'a [ParamVector],
        raw_weights: Vec<f64>,
        val_sets: Vec<&'a LabeledDataset>,
        mode: AggregationMode,
    ) -> Self {
        assert_eq!(local_models.len(), raw_weights.len());
        assert_eq!(local_models.len(), val_sets.len());
        ModelCollectiveUtility { local_models, raw_weights, val_sets, mode }
    }
}

impl CollectiveUtility for ModelCollectiveUtility<'_> {
    fn player_count(&self) -> usize {
        self.local_models.len()
    }

    fn value(&self, subset: u64) -> f64 {
        if subset == 0 {
            return 0.0;
        }
        let members: Vec<usize> =
            (0..self.player_count()).filter(|&i| subset & (1 << i) != 0).collect();
        let models: Vec<ParamVector> =
            members.iter().map(|&i| self.local_models[i].clone()).collect();
        let weights = normalized_weights(
            &members.iter().map(|&i| self.raw_weights[i]).collect::<Vec<_>>(),
        );
        let subset_model =
            aggregate(&models, &weights, AggregationMode::FedAvg).expect("frozen snapshot");
        let mut total = 0.0;
        for (i, val) in self.val_sets.iter().enumerate() {
            let eval_model = match self.mode {
                AggregationMode::FedAvg => subset_model.clone(),
                AggregationMode::FedBn => subset_model.personalized(&self.local_models[i]),
            };
            total += evaluate_accuracy(&eval_model, val).expect("non-empty validation set");
        }
        total / self.player_count() as f64
    }
}

/// Collective utility for the synthetic accuracy backend: v(S) is the mean
/// noiseless curve value over all active clients at the pool the round would
/// have reached had only subset S contributed its current-round samples.
pub struct OracleCollectiveUtility<'a> {
    pool_before: f64,
    round_deltas: &'a [f64],
    curves: &'a [AccuracyOracleParams],
}

impl<'a> OracleCollectiveUtility<'a> {
    pub fn new(
        pool_before: f64,
        round_deltas: &'a [f64],
        curves: &'a [AccuracyOracleParams],
    ) -> Self {
        assert_eq!(round_deltas.len(), curves.len());
        OracleCollectiveUtility { pool_before, round_deltas, curves }
    }
}

impl CollectiveUtility for OracleCollectiveUtility<'_> {
    fn player_count(&self) -> usize {
        self.curves.len()
    }

    fn value(&self, subset: u64) -> f64 {
        if subset == 0 {
            return 0.0;
        }
        let pool: f64 = self.pool_before
            + (0..self.player_count())
                .filter(|&i| subset & (1 << i) != 0)
                .map(|i| self.round_deltas[i])
                .sum::<f64>();
        let total: f64 =
            self.curves.iter().map(|c| oracle_mean_accuracy(c, pool)).sum();
        total / self.player_count() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Table-driven set function for oracle-style testing; entry 0 is v(∅).
    struct TableUtility {
        values: Vec<f64>,
    }

    impl TableUtility {
        fn additive(weights: &[f64]) -> Self {
            let n = weights.len();
            let values = (0..1u64 << n)
                .map(|mask| {
                    (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| weights[i]).sum()
                })
                .collect();
            TableUtility { values }
        }

        fn random(n: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut values: Vec<f64> =
                (0..1u64 << n).map(|_| rng.random_range(0.0..1.0)).collect();
            values[0] = 0.0;
            TableUtility { values }
        }
    }

    impl CollectiveUtility for TableUtility {
        fn player_count(&self) -> usize {
            self.values.len().trailing_zeros() as usize
        }

        fn value(&self, subset: u64) -> f64 {
            self.values[subset as usize]
        }
    }

    #[test]
    fn quantitative_is_the_sample_count() {
        assert_eq!(quantitative_contribution(100), 100.0);
        assert_eq!(quantitative_contribution(0), 0.0);
    }

    #[test]
    fn marginal_of_constant_utility_is_zero() {
        let v = FnUtility::new(4, |mask| if mask == 0 { 0.0 } else { 0.7 });
        for q in marginal_contributions(&v) {
            assert_eq!(q, 0.0);
        }
    }

    #[test]
    fn marginal_two_client_worked_case() {
        // v({1,2}) = 0.9, v({1}) = 0.7, v({2}) = 0.6
        let v = FnUtility::new(2, |mask| match mask {
            0b11 => 0.9,
            0b01 => 0.7,
            0b10 => 0.6,
            _ => 0.0,
        });
        let q = marginal_contributions(&v);
        assert!((q[0] - 0.3).abs() < 1e-15);
        assert!((q[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn shapley_single_player_is_its_own_value() {
        let v = FnUtility::new(1, |mask| if mask == 1 { 0.42 } else { 0.0 });
        let q = shapley_exact(&v).unwrap();
        assert!((q[0] - 0.42).abs() < 1e-15);
    }

    #[test]
    fn shapley_symmetric_game_splits_equally() {
        let v = FnUtility::new(5, |mask| mask.count_ones() as f64 / 5.0);
        let q = shapley_exact(&v).unwrap();
        for &x in &q {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn shapley_additive_game_returns_weights() {
        let v = TableUtility::additive(&[0.1, 0.2, 0.3]);
        let q = shapley_exact(&v).unwrap();
        assert!((q[0] - 0.1).abs() < 1e-12);
        assert!((q[1] - 0.2).abs() < 1e-12);
        assert!((q[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn shapley_null_player_gets_exactly_zero() {
        // Player 2 never changes the value.
        let v = FnUtility::new(3, |mask| {
            let without = mask & 0b011;
            without.count_ones() as f64 * 0.25
        });
        let q = shapley_exact(&v).unwrap();
        assert_eq!(q[2], 0.0);
    }

    #[test]
    fn shapley_efficiency_on_random_tables() {
        for seed in 0..20 {
            let n = 2 + (seed as usize % 7);
            let v = TableUtility::random(n, seed);
            let q = shapley_exact(&v).unwrap();
            let total: f64 = q.iter().sum();
            let expected = v.value((1 << n) - 1) - v.value(0);
            assert!((total - expected).abs() < 1e-9, "seed {seed}: {total} vs {expected}");
        }
    }

    #[test]
    fn two_player_shapley_agrees_with_half_sum_of_marginals() {
        let v = TableUtility::random(2, 99);
        let q = shapley_exact(&v).unwrap();
        let expected0 = 0.5 * ((v.value(0b01) - v.value(0)) + (v.value(0b11) - v.value(0b10)));
        let expected1 = 0.5 * ((v.value(0b10) - v.value(0)) + (v.value(0b11) - v.value(0b01)));
        assert_eq!(q[0], expected0);
        assert_eq!(q[1], expected1);
    }

    #[test]
    fn shapley_guard_rejects_oversized_games() {
        let v = FnUtility::new(21, |_| 0.0);
        assert!(matches!(
            shapley_exact(&v),
            Err(ContributionError::TooManyPlayers { n: 21, .. })
        ));
    }

    #[test]
    fn exhaustive_monte_carlo_equals_exact() {
        for n in 1..=4usize {
            let v = TableUtility::random(n, 7 + n as u64);
            let exact = shapley_exact(&v).unwrap();
            let budget = factorial(n) as u32;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mc = shapley_monte_carlo(&v, budget, &mut rng);
            for (a, b) in mc.iter().zip(&exact) {
                assert!((a - b).abs() < 1e-12, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sampled_monte_carlo_converges_on_additive_game() {
        let v = TableUtility::additive(&[0.05, 0.1, 0.15, 0.2, 0.25]);
        let exact = shapley_exact(&v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mc = shapley_monte_carlo(&v, 2000, &mut rng);
        for (a, b) in mc.iter().zip(&exact) {
            assert!((a - b).abs() <= 0.01);
        }
    }

    #[test]
    fn monte_carlo_is_deterministic_per_stream() {
        let v = TableUtility::random(6, 5);
        let a = shapley_monte_carlo(&v, 250, &mut ChaCha8Rng::seed_from_u64(42));
        let b = shapley_monte_carlo(&v, 250, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_mean_within_three_standard_errors() {
        let v = TableUtility::random(5, 31);
        let exact = shapley_exact(&v).unwrap();
        let streams = 50;
        let mut estimates: Vec<Vec<f64>> = Vec::with_capacity(streams);
        for s in 0..streams {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + s as u64);
            estimates.push(shapley_monte_carlo(&v, 400, &mut rng));
        }
        for player in 0..5 {
            let vals: Vec<f64> = estimates.iter().map(|e| e[player]).collect();
            let mean = vals.iter().sum::<f64>() / streams as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (streams - 1) as f64;
            let se = (var / streams as f64).sqrt();
            assert!(
                (mean - exact[player]).abs() <= 3.0 * se.max(1e-12),
                "player {player}: mean {mean}, exact {}, se {se}",
                exact[player]
            );
        }
    }
}
