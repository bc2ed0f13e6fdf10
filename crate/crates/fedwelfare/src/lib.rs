//! Deterministic simulator of cross-silo federated learning with an
//! economic layer.
//!
//! Each data-sharing round, clients acquire data, train and federate (or
//! consult a synthetic accuracy curve), settle per-client utility and cost,
//! score contributions (sample counts, marginal value, or Shapley values),
//! decide which loss-making clients to deselect by maximizing social
//! welfare minus a mu-weighted fairness penalty, and redistribute the
//! round's budget so payoffs are proportional to contribution while money
//! transfers sum to zero.
//!
//! The [`harness`] module runs config-driven scenarios over many seeded
//! replications and writes CSV ledgers plus an aggregate report; the other
//! modules expose the individual mechanisms.

pub mod contribution;
pub mod economics;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod selection;
pub mod state;

use std::fmt;

use serde::{Deserialize, Serialize};

/// Identity of a federation client. Ordering gives the deterministic
/// tie-break order used everywhere.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
