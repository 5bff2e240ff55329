use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::model::{self, AlarmRule, GpsCoordinate, Magnitude, NodeDescriptor, ProtocolId, SensorDescriptor};
use crate::sensors::Calibration;

fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
}

fn default_window() -> f64 {
    6.0
}

fn default_gate() -> String {
    "gw1".into()
}

fn default_network() -> String {
    "net1".into()
}

fn default_token() -> String {
    "sim-token".into()
}

/// A simulated experiment. Node `i` (0-based) draws its weather with seed
/// `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub duration_s: u64,
    #[serde(default)]
    pub seed: u64,
    pub nodes: Vec<NodeDescriptor>,
    /// Scenario time zero.
    #[serde(default = "default_start", with = "model::timestamp")]
    pub start: DateTime<Utc>,
    /// Throughput sampling period and window.
    #[serde(default = "default_window")]
    pub throughput_window_s: f64,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default)]
    pub actions: Vec<ScheduledAction>,
    #[serde(default = "default_gate")]
    pub gate_id: String,
    #[serde(default = "default_network")]
    pub network_id: String,
    #[serde(default = "default_token")]
    pub bearer_token: String,
}

/// Something the operator does `at_s` seconds into the run, after that
/// instant's emissions have been ingested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledAction {
    pub at_s: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    SetInterval { node_id: String, seconds: u32 },
    AssignProtocol { node_id: String, sensor_id: String, protocol: ProtocolId },
    AddAlarm { rule: AlarmRule },
    RemoveAlarm { rule_id: String },
    /// The node reports `value` for its next capture of that sensor.
    ForceValue { node_id: String, sensor_id: String, value: f64 },
}

impl ScenarioSpec {
    /// Two six-sensor stations, 6 s captures for 480 s; temperature and
    /// humidity over WiFi, radiation and rainfall over ZigBee, wind speed
    /// and direction over Bluetooth.
    pub fn two_stations() -> Self {
        let nodes = [("n1", 4.638_193, -74.084_046), ("n2", 4.638_401, -74.083_712)]
            .into_iter()
            .map(|(id, lat, lon)| station_node(id, GpsCoordinate::new(lat, lon).expect("fixed coordinates")))
            .collect();
        Self {
            duration_s: 480,
            seed: 7,
            nodes,
            start: default_start(),
            throughput_window_s: default_window(),
            calibration: Calibration::default(),
            actions: Vec::new(),
            gate_id: default_gate(),
            network_id: default_network(),
            bearer_token: default_token(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::InvalidSpec(format!("{}: {e}", path.display())))?;
        let spec: ScenarioSpec =
            serde_json::from_str(&text).map_err(|e| ScenarioError::InvalidSpec(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::InvalidSpec(m));
        if self.duration_s == 0 {
            return invalid("duration_s must be positive".into());
        }
        if self.nodes.is_empty() {
            return invalid("at least one node is required".into());
        }
        if !(self.throughput_window_s.is_finite() && self.throughput_window_s > 0.0) {
            return invalid("throughput_window_s must be positive".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for n in &self.nodes {
            n.validate().map_err(|e| ScenarioError::InvalidSpec(e.to_string()))?;
            if !ids.insert(n.node_id.as_str()) {
                return invalid(format!("duplicate node {:?}", n.node_id));
            }
        }
        for a in &self.actions {
            let node = match &a.action {
                Action::SetInterval { node_id, .. }
                | Action::AssignProtocol { node_id, .. }
                | Action::ForceValue { node_id, .. } => Some(node_id),
                Action::AddAlarm { rule } => {
                    rule.validate().map_err(|e| ScenarioError::InvalidSpec(e.to_string()))?;
                    None
                }
                Action::RemoveAlarm { .. } => None,
            };
            if let Some(id) = node {
                if !ids.contains(id.as_str()) {
                    return invalid(format!("action at {} s names unknown node {id:?}", a.at_s));
                }
            }
        }
        model::GatewayIdentity::new(&self.gate_id, &self.network_id).map_err(|e| ScenarioError::InvalidSpec(e.to_string()))?;
        Ok(())
    }
}

pub fn station_node(node_id: &str, gps: GpsCoordinate) -> NodeDescriptor {
    let sensors = [
        ("temp", Magnitude::Celsius, "AM2315", ProtocolId::Wifi),
        ("hum", Magnitude::PercentRh, "AM2315", ProtocolId::Wifi),
        ("rad", Magnitude::WattsPerSquareMeter, "Davis 6450", ProtocolId::Zigbee),
        ("rain", Magnitude::Millimeters, "tipping bucket", ProtocolId::Zigbee),
        ("wspd", Magnitude::KilometersPerHour, "cup anemometer", ProtocolId::Bluetooth),
        ("wdir", Magnitude::Compass16, "wind vane", ProtocolId::Bluetooth),
    ];
    NodeDescriptor {
        node_id: node_id.into(),
        gps,
        sensors: sensors.iter().map(|(id, m, model, _)| SensorDescriptor::new(*id, *m, *model)).collect(),
        capture_interval: 6,
        protocol_assignment: sensors.iter().map(|(id, _, _, p)| (id.to_string(), *p)).collect(),
    }
}
