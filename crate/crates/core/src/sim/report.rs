use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::node::ProtocolTraffic;
use super::ScenarioError;
use crate::gateway::AlarmEvent;
use crate::model::{self, Magnitude, ProtocolId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Real,
}

/// Outcome of one scenario run. In virtual-clock mode it is a pure function
/// of the spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub duration_s: u64,
    pub seed: u64,
    pub clock: ClockMode,
    pub throughput_window_s: f64,
    pub nodes: Vec<String>,
    pub totals: Totals,
    pub counts: Vec<CountRow>,
    pub throughput: Vec<ThroughputPoint>,
    pub traces: Vec<Trace>,
    pub alarms: Vec<AlarmEvent>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    /// Frames written by the nodes, announces included.
    pub frames_sent: u64,
    pub frames_processed: u64,
    pub readings_persisted: u64,
    pub uplink_published: u64,
    /// Readings that reached the cloud-side subscriber.
    pub cloud_received: u64,
    pub errors: u64,
    pub alarms: u64,
}

/// Traffic of one node on one transport.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub protocol: ProtocolId,
    pub node_id: String,
    /// Readings received by the cloud sink that entered on this transport.
    pub readings: u64,
    #[serde(flatten)]
    pub sent: ProtocolTraffic,
}

/// Node `"all"` is the aggregate over nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputPoint {
    #[serde(with = "model::timestamp")]
    pub timestamp: DateTime<Utc>,
    pub protocol: ProtocolId,
    pub node: String,
    pub kbps: f64,
}

pub const AGGREGATE_NODE: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub node_id: String,
    pub sensor_id: String,
    pub magnitude: Magnitude,
    pub points: Vec<TracePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    #[serde(with = "model::timestamp")]
    pub date: DateTime<Utc>,
    pub value: f64,
    pub protocol: ProtocolId,
}

impl ScenarioReport {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))
    }

    /// Writes `report.json` and `throughput.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ScenarioError> {
        let io = |e: std::io::Error| ScenarioError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let json = serde_json::to_vec_pretty(self).expect("report serialization is infallible");
        std::fs::write(dir.join("report.json"), json).map_err(io)?;
        std::fs::write(dir.join("throughput.csv"), self.throughput_csv()).map_err(io)?;
        Ok(())
    }

    pub fn readings_per_protocol(&self) -> BTreeMap<ProtocolId, u64> {
        let mut out: BTreeMap<ProtocolId, u64> = ProtocolId::ALL.iter().map(|p| (*p, 0)).collect();
        for row in &self.counts {
            *out.entry(row.protocol).or_default() += row.readings;
        }
        out
    }

    pub fn trace(&self, node_id: &str, sensor_id: &str) -> Option<&Trace> {
        self.traces.iter().find(|t| t.node_id == node_id && t.sensor_id == sensor_id)
    }

    /// Seconds between consecutive captures of one sensor.
    pub fn emission_gaps(&self, node_id: &str, sensor_id: &str) -> Vec<i64> {
        self.trace(node_id, sensor_id)
            .map(|t| t.points.windows(2).map(|w| (w[1].date - w[0].date).num_seconds()).collect())
            .unwrap_or_default()
    }

    pub fn throughput_csv(&self) -> String {
        let mut out = String::from("timestamp,protocol,node,kbps\n");
        for p in &self.throughput {
            let _ = writeln!(out, "{},{},{},{}", model::format_timestamp(&p.timestamp), p.protocol, p.node, p.kbps);
        }
        out
    }

    pub fn counts_table(&self) -> String {
        let mut out = format!("{:<10} {:<10} {:>9} {:>9} {:>10}\n", "protocol", "node", "readings", "messages", "bytes");
        for r in &self.counts {
            let _ = writeln!(
                out,
                "{:<10} {:<10} {:>9} {:>9} {:>10}",
                r.protocol.as_str(),
                r.node_id,
                r.readings,
                r.sent.messages,
                r.sent.bytes
            );
        }
        for (p, n) in self.readings_per_protocol() {
            let _ = writeln!(out, "{:<10} {:<10} {:>9}", p.as_str(), "total", n);
        }
        let _ = writeln!(out, "{:<10} {:<10} {:>9}", "all", "total", self.totals.cloud_received);
        out
    }

    pub fn readings_csv(&self) -> String {
        let mut out = String::from("date,node,sensor,protocol,value\n");
        for t in &self.traces {
            for p in &t.points {
                let _ = writeln!(out, "{},{},{},{},{}", model::format_timestamp(&p.date), t.node_id, t.sensor_id, p.protocol, p.value);
            }
        }
        out
    }
}
