//! Seeded discrete-event simulation of the whole system, plus the
//! experiment harness that drives it.
//!
//! A [`SimWorld`] owns the server, every gateway and a time-ordered event
//! queue. Messages travel with simulated latency; processing costs are
//! charged in simulated milliseconds, so every metric is a pure function of
//! the configuration and the seed.

mod build;
mod config;
mod experiments;
mod world;


use thiserror::Error;

pub use build::{build_world, demo_world, domain_name, pool_attribute, QuerySetup, DEMO_OFFICE, HIT, MISS};
pub use config::{ConfigError, SimConfig};
pub use experiments::{
    churn_experiment, fig3_csv, fig5_csv, fig6_csv, mean_stdev, qualifying_oracle, query_breakdown,
    registration_breakdown, run_query_experiment, sweep_size, sweep_ttl, ChurnReport, Metrics, PhaseRow, SizeRow,
    TtlRow, TtlSweep,
};
pub use world::{Event, Node, QueryTrack, SimRngs, SimWorld};

use crate::engine::EngineError;

/// Cluster degree used unless a config says otherwise. With it, a ttl of 8
/// covers a 1000-member cluster from its head in every seeded run we sweep.
pub const CALIBRATED_DEGREE: usize = 4;

pub const SNAPSHOT_HEADER: &str = "CDMS-SNAPSHOT v1";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("query rejected: {0}")]
    Query(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("bad snapshot: {0}")]
    Snapshot(String),
}

/// Header line, then the world as JSON.
pub fn save_snapshot(world: &SimWorld) -> String {
    let body = serde_json::to_string(world).expect("world serializes");
    format!("{SNAPSHOT_HEADER}\n{body}\n")
}

pub fn load_snapshot(text: &str) -> Result<SimWorld, SimError> {
    let (header, body) = text
        .split_once('\n')
        .ok_or_else(|| SimError::Snapshot("missing header".into()))?;
    if header.trim_end() != SNAPSHOT_HEADER {
        return Err(SimError::Snapshot(format!("unsupported header {header:?}")));
    }
    serde_json::from_str(body).map_err(|e| SimError::Snapshot(e.to_string()))
}
