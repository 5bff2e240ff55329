use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{self, AlarmRule, Comparator, NormalizedReading, ProtocolId};

/// Everything pushed to `/events`, one JSON object per message.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GatewayEvent {
    Reading { reading: NormalizedReading },
    Alarm(AlarmEvent),
    Diagnostic(Diagnostic),
    NodeRegistered { node_id: String, revision: u64 },
}

impl GatewayEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            GatewayEvent::Reading { .. } => "reading",
            GatewayEvent::Alarm(_) => "alarm",
            GatewayEvent::Diagnostic(_) => "diagnostic",
            GatewayEvent::NodeRegistered { .. } => "node_registered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub rule_id: String,
    pub message: String,
    pub node_id: String,
    pub sensor_id: String,
    pub value: f64,
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(with = "model::timestamp")]
    pub date: DateTime<Utc>,
}

impl AlarmEvent {
    pub fn new(rule: &AlarmRule, r: &NormalizedReading) -> Self {
        Self {
            rule_id: rule.rule_id.clone(),
            message: rule.message.clone(),
            node_id: r.node_id().to_string(),
            sensor_id: r.sensor_id().to_string(),
            value: r.value(),
            comparator: rule.comparator,
            threshold: rule.threshold,
            date: r.date(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Decode,
    Normalize,
    Registration,
    Storage,
    Uplink,
    HostStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    #[serde(with = "model::timestamp")]
    pub timestamp: DateTime<Utc>,
    pub kind: DiagnosticKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<ProtocolId>,
    pub message: String,
}
