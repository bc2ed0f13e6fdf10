//! Synthetic accuracy-curve backend: a saturating exponential in the
//! federation's cumulative effective sample count, used as a fast substitute
//! for actual training.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Per-client parameters of the synthetic accuracy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyOracleParams {
    /// Accuracy ceiling, in (0, 1].
    pub a_max: f64,
    /// Sample-scale constant of the saturating exponential, > 0.
    pub tau: f64,
    /// Client heterogeneity factor in (0, 1]; scales the ceiling.
    #[serde(default = "default_unit")]
    pub hetero_factor: f64,
    /// Weight applied to this client's samples when they enter the shared
    /// effective-sample pool, in [0, 1]. Lower values model low-quality data.
    #[serde(default = "default_unit")]
    pub quality_weight: f64,
    /// Standard deviation of the Gaussian observation noise, >= 0.
    #[serde(default)]
    pub noise_sd: f64,
}

fn default_unit() -> f64 {
    1.0
}

impl AccuracyOracleParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.a_max > 0.0 && self.a_max <= 1.0) {
            return Err(format!("a_max {} outside (0, 1]", self.a_max));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(format!("tau {} must be > 0", self.tau));
        }
        if !(self.hetero_factor > 0.0 && self.hetero_factor <= 1.0) {
            return Err(format!("hetero_factor {} outside (0, 1]", self.hetero_factor));
        }
        if !(0.0..=1.0).contains(&self.quality_weight) {
            return Err(format!("quality_weight {} outside [0, 1]", self.quality_weight));
        }
        if self.noise_sd < 0.0 {
            return Err(format!("noise_sd {} must be >= 0", self.noise_sd));
        }
        Ok(())
    }
}

/// Noiseless curve value at `effective_samples` cumulative weighted samples.
pub fn oracle_mean_accuracy(params: &AccuracyOracleParams, effective_samples: f64) -> f64 {
    debug_assert!(effective_samples >= 0.0);
    let raw = params.a_max * params.hetero_factor * (1.0 - (-effective_samples / params.tau).exp());
    raw.clamp(0.0, 1.0)
}

/// Curve value plus Gaussian observation noise, clamped to [0, 1].
pub fn oracle_accuracy<R: Rng + ?Sized>(
    params: &AccuracyOracleParams,
    effective_samples: f64,
    rng: &mut R,
) -> f64 {
    let mean = params.a_max * params.hetero_factor * (1.0 - (-effective_samples / params.tau).exp());
    let noise = if params.noise_sd > 0.0 {
        Normal::new(0.0, params.noise_sd).unwrap().sample(rng)
    } else {
        0.0
    };
    (mean + noise).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(noise_sd: f64) -> AccuracyOracleParams {
        AccuracyOracleParams {
            a_max: 0.9,
            tau: 500.0,
            hetero_factor: 1.0,
            quality_weight: 1.0,
            noise_sd,
        }
    }

    #[test]
    fn zero_samples_give_zero_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(oracle_accuracy(&params(0.0), 0.0, &mut rng), 0.0);
    }

    #[test]
    fn curve_saturates_at_ceiling() {
        let p = AccuracyOracleParams { hetero_factor: 0.8, ..params(0.0) };
        let v = oracle_mean_accuracy(&p, 1e12);
        assert!((v - 0.9 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn curve_value_at_one_tau() {
        let v = oracle_mean_accuracy(&params(0.0), 500.0);
        let expected = 0.9 * (1.0 - (-1.0f64).exp());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.5689).abs() < 1e-4);
    }

    #[test]
    fn identical_streams_give_identical_noise() {
        let p = params(0.05);
        let a = oracle_accuracy(&p, 200.0, &mut ChaCha8Rng::seed_from_u64(17));
        let b = oracle_accuracy(&p, 200.0, &mut ChaCha8Rng::seed_from_u64(17));
        assert_eq!(a, b);
    }

    #[test]
    fn output_is_clamped() {
        let p = AccuracyOracleParams { noise_sd: 10.0, ..params(0.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v = oracle_accuracy(&p, 400.0, &mut rng);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn validation_rejects_bad_params() {
        assert!(AccuracyOracleParams { a_max: 0.0, ..params(0.0) }.validate().is_err());
        assert!(AccuracyOracleParams { tau: -1.0, ..params(0.0) }.validate().is_err());
        assert!(AccuracyOracleParams { quality_weight: 1.5, ..params(0.0) }.validate().is_err());
        assert!(params(0.01).validate().is_ok());
    }
}
