//! Scenario configuration: the JSON schema, validation, and the built-in
//! presets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contribution::ContributionMethod;
use crate::economics::ClientEconParams;
use crate::metrics::TsfiSemantics;
use crate::model::{AccuracyOracleParams, AggregationMode};
use crate::selection::{SelectionRule, POWERSET_GUARD};

use super::SimError;

/// A complete experiment description. Unknown JSON keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Free-form scenario label, used in reports.
    pub name: String,
    pub clients: Vec<ClientConfig>,
    pub federation: FederationConfig,
    pub mechanism: MechanismConfig,
    pub run: RunConfig,
    /// Geometry of the synthetic classification task (trainer backend).
    #[serde(default)]
    pub synthetic: SyntheticTaskConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub id: u32,
    /// Poisson mean of per-round sample arrivals.
    pub lambda: f64,
    #[serde(default)]
    pub econ: ClientEconParams,
    pub data: DataSource,
    /// Synthetic accuracy curve; required by the oracle backend.
    #[serde(default)]
    pub oracle: Option<AccuracyOracleParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian class blobs with an optional per-client mean shift
    /// (heterogeneity) and label-corruption probability.
    SyntheticBlob {
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        label_noise: f64,
    },
    /// Locally supplied IDX (MNIST-format) files used as a sample pool.
    Idx { images: PathBuf, labels: PathBuf },
    /// Utility/cost/contribution injected per round; no model runs.
    Injected { rows: Vec<InjectedRowConfig> },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedRowConfig {
    pub round: u32,
    pub utility: f64,
    pub cost: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// T: maximum number of data-sharing rounds.
    pub max_rounds: u32,
    /// L: maximum aggregation iterations inside a sharing round.
    #[serde(default = "default_max_aggregation_iters")]
    pub max_aggregation_iters: u32,
    /// Early-stop threshold on per-client validation-accuracy change.
    #[serde(default = "default_early_stop_delta")]
    pub early_stop_delta: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// K: local epochs per aggregation iteration.
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub algorithm: AggregationMode,
    pub backend: BackendKind,
}

fn default_max_aggregation_iters() -> u32 {
    5
}
fn default_early_stop_delta() -> f64 {
    0.01
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> u32 {
    1
}
fn default_learning_rate() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Trainer,
    Oracle,
    Injected,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismConfig {
    pub mu: f64,
    pub contribution: ContributionMethod,
    #[serde(default)]
    pub tsfi_semantics: TsfiSemantics,
    #[serde(default)]
    pub rule: SelectionRule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub base_seed: u64,
    pub replications: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub classes: usize,
    pub features: usize,
    /// Standard deviation of the class-center draws; larger separates the
    /// blobs more.
    pub separation: f64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig { classes: 10, features: 16, separation: 2.0 }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |msg: String| Err(SimError::Config(msg));
        if self.clients.is_empty() {
            return err("scenario needs at least one client".into());
        }
        if self.clients.len() > POWERSET_GUARD {
            return err(format!(
                "scenario has {} clients; the selection search supports at most {POWERSET_GUARD}",
                self.clients.len()
            ));
        }
        for pair in self.clients.windows(2) {
            if pair[0].id >= pair[1].id {
                return err("client ids must be unique and ascending".into());
            }
        }
        if self.federation.max_rounds < 1 {
            return err("federation.max_rounds must be >= 1".into());
        }
        if self.federation.max_aggregation_iters < 1 {
            return err("federation.max_aggregation_iters must be >= 1".into());
        }
        if self.federation.early_stop_delta < 0.0 {
            return err("federation.early_stop_delta must be >= 0".into());
        }
        if self.run.replications < 1 {
            return err("run.replications must be >= 1".into());
        }
        if !(self.mechanism.mu >= 0.0 && self.mechanism.mu.is_finite()) {
            return err(format!("mechanism.mu must be a finite non-negative real, got {}", self.mechanism.mu));
        }
        self.mechanism
            .contribution
            .validate(self.clients.len())
            .map_err(SimError::Config)?;
        if self.synthetic.classes < 2 || self.synthetic.features < 1 {
            return err("synthetic task needs >= 2 classes and >= 1 feature".into());
        }
        if !self.synthetic.separation.is_finite() || self.synthetic.separation <= 0.0 {
            return err("synthetic.separation must be > 0".into());
        }
        match self.federation.backend {
            BackendKind::Trainer => {
                let trainer = self.trainer_config();
                trainer.validate().map_err(SimError::Config)?;
            }
            BackendKind::Oracle => {}
            BackendKind::Injected => {}
        }
        for client in &self.clients {
            client.econ.validate().map_err(|e| {
                SimError::Config(format!("client {}: {e}", client.id))
            })?;
            if !client.lambda.is_finite() || client.lambda <= 0.0 {
                return err(format!("client {}: lambda must be > 0", client.id));
            }
            if let Some(oracle) = &client.oracle {
                oracle
                    .validate()
                    .map_err(|e| SimError::Config(format!("client {}: {e}", client.id)))?;
            }
            match (&client.data, self.federation.backend) {
                (DataSource::SyntheticBlob { label_noise, .. }, _) => {
                    if !(0.0..=1.0).contains(label_noise) {
                        return err(format!(
                            "client {}: label_noise must be in [0, 1]",
                            client.id
                        ));
                    }
                }
                (DataSource::Injected { .. }, BackendKind::Injected) => {}
                (DataSource::Injected { .. }, _) => {
                    return err(format!(
                        "client {}: injected data requires the injected backend",
                        client.id
                    ));
                }
                (DataSource::Idx { .. }, _) => {}
            }
            if self.federation.backend == BackendKind::Oracle && client.oracle.is_none() {
                return err(format!(
                    "client {}: the oracle backend needs per-client oracle params",
                    client.id
                ));
            }
            if self.federation.backend == BackendKind::Injected
                && !matches!(client.data, DataSource::Injected { .. })
            {
                return err(format!(
                    "client {}: the injected backend needs injected data rows",
                    client.id
                ));
            }
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> crate::model::TrainerConfig {
        crate::model::TrainerConfig {
            epochs: self.federation.epochs,
            batch_size: self.federation.batch_size,
            learning_rate: self.federation.learning_rate,
        }
    }

    pub fn client_ids(&self) -> Vec<crate::ClientId> {
        self.clients.iter().map(|c| crate::ClientId(c.id)).collect()
    }
}

/// Built-in scenario presets, shipped as JSON files under `presets/`.
pub mod presets {
    use super::ScenarioConfig;
    use crate::harness::SimError;

    pub const NAMES: [&str; 5] = [
        "heterogeneous",
        "homogeneous-large",
        "homogeneous-small",
        "label-noise",
        "toy-example",
    ];

    pub fn source(name: &str) -> Option<&'static str> {
        match name {
            "heterogeneous" => Some(include_str!("../../presets/heterogeneous.json")),
            "homogeneous-large" => Some(include_str!("../../presets/homogeneous-large.json")),
            "homogeneous-small" => Some(include_str!("../../presets/homogeneous-small.json")),
            "label-noise" => Some(include_str!("../../presets/label-noise.json")),
            "toy-example" => Some(include_str!("../../presets/toy-example.json")),
            _ => None,
        }
    }

    pub fn load(name: &str) -> Result<ScenarioConfig, SimError> {
        let text = source(name)
            .ok_or_else(|| SimError::Config(format!("unknown preset '{name}'")))?;
        ScenarioConfig::from_json(text)
    }
}
