//! Deterministic seed derivation: every random stream in a run is a ChaCha8
//! generator keyed by splitmix64-mixing the base seed with the replication
//! index, the stream purpose, the client id, and the round. Streams are
//! therefore independent of execution order and of how many replications
//! run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The 64-bit mix function (the splitmix64 finalizer).
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn chain(seed: u64, words: &[u64]) -> u64 {
    words.iter().fold(seed, |acc, &w| splitmix64(acc ^ w))
}

/// What a stream is consumed for. The discriminant enters the seed mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    /// Scenario-level synthetic geometry (class centers, client shifts);
    /// shared by all replications.
    Geometry = 1,
    /// Model parameter initialization.
    ParamInit = 2,
    /// Poisson sample arrivals.
    Arrivals = 3,
    /// Synthetic data generation and the train/validation split.
    DataGen = 4,
    /// Mini-batch shuffling during local training.
    Training = 5,
    /// Observation noise of the synthetic accuracy backend.
    OracleNoise = 6,
    /// Permutation sampling for Monte-Carlo Shapley.
    Shapley = 7,
}

/// Seed for replication `rep` of a scenario.
pub fn replication_seed(base_seed: u64, rep: u32) -> u64 {
    chain(splitmix64(base_seed), &[rep as u64])
}

/// A per-(purpose, client, round) stream under `seed` (usually a
/// replication seed; scenario-level streams pass the base seed).
pub fn stream(seed: u64, purpose: StreamPurpose, client: u32, round: u32) -> ChaCha8Rng {
    let mixed = chain(seed, &[purpose as u64, client as u64, round as u64]);
    ChaCha8Rng::seed_from_u64(mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(42, StreamPurpose::Arrivals, 3, 7);
        let mut b = stream(42, StreamPurpose::Arrivals, 3, 7);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn distinct_coordinates_give_distinct_streams() {
        let base = stream(42, StreamPurpose::Arrivals, 0, 1).random::<u64>();
        for (p, c, r) in [
            (StreamPurpose::DataGen, 0, 1),
            (StreamPurpose::Arrivals, 1, 1),
            (StreamPurpose::Arrivals, 0, 2),
        ] {
            assert_ne!(stream(42, p, c, r).random::<u64>(), base);
        }
    }

    #[test]
    fn replication_seeds_differ() {
        let seeds: Vec<u64> = (0..100).map(|r| replication_seed(7, r)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
    }
}
