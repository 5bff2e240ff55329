//! Simulated weather-station fleet and the scenario runner.

mod node;
mod report;
mod run;
mod spec;

use thiserror::Error;

pub use node::{capture, run_node, NodeContext, NodeError, NodeStats, ProtocolTraffic};
pub use report::{ClockMode, CountRow, ScenarioReport, ThroughputPoint, Totals, Trace, TracePoint, AGGREGATE_NODE};
pub use run::{run_scenario, ScenarioRun};
pub use spec::{station_node, Action, ScenarioSpec, ScheduledAction};

use crate::gateway::GatewayError;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("scenario timeout: {0}")]
    Timeout(String),
    #[error("node {node_id} failed: {error}")]
    Node { node_id: String, error: String },
    #[error("scheduled action failed: {0}")]
    Action(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Io(String),
}
