//! Scenario configuration, data provisioning, replication execution,
//! persistence, and reporting.

pub mod config;
pub mod csvio;
pub mod data;
pub mod experiment;
pub mod idx;
pub mod replication;
pub mod report;
pub mod rng;
pub mod svg;

use thiserror::Error;

pub use config::{presets, ScenarioConfig};
pub use experiment::{run_experiment, run_sweep};
pub use replication::{run_replication, PreparedScenario, ReplicationResult};
pub use report::AggregateReport;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Idx(#[from] idx::IdxError),
    #[error(transparent)]
    Round(#[from] crate::state::RoundError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(String),
}
