//! The gateway service: transport listeners, node registry and
//! self-configuration, the ordered ingest pipeline, uplink to a cloud
//! broker, alarms, metrics, persistence and the HTTP API.

mod api;
mod config;
mod events;
mod metrics;
mod registry;
mod runtime;
mod service;
mod store;

use std::io;

use thiserror::Error;

pub use api::router;
pub use config::{GatewayConfig, TransportPorts};
pub use events::{AlarmEvent, Diagnostic, DiagnosticKind, GatewayEvent};
pub use metrics::{HostSample, HostSampler, HostStats, StatsError, ThroughputWindow};
pub use registry::{NodeConfig, NodeStatus, Registry, RegistryError};
pub use runtime::{start, GatewayAddrs, RunningGateway};
pub use service::{config_topic, uplink_topic, ErrorCounts, Gateway, IngestCounters, UplinkMessage, UNKNOWN_NODE};
pub use store::{CorruptLine, QueryResult, ReadingStore, StoreError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot bind {what} listener on {addr}: {source}")]
    Bind {
        what: &'static str,
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid alarm rule: {0}")]
    InvalidAlarm(String),
    #[error("alarm rule {0:?} already exists")]
    DuplicateAlarm(String),
    #[error("unknown alarm rule {0:?}")]
    UnknownAlarm(String),
}
