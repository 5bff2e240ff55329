use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, NodeDescriptor, ProtocolId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("node {node_id:?} has no sensor {sensor_id:?}")]
    UnknownSensor { node_id: String, sensor_id: String },
    #[error("capture interval must be at least 1 s")]
    InvalidInterval,
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
}

/// Effective node configuration pushed down to nodes on
/// `cfg/<gate-id>/<node-id>`. `revision` grows with every change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    pub capture_interval: u32,
    pub protocol_assignment: BTreeMap<String, ProtocolId>,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeStatus {
    #[serde(flatten)]
    pub descriptor: NodeDescriptor,
    #[serde(serialize_with = "ser_opt_ts")]
    pub last_seen: Option<DateTime<Utc>>,
    pub revision: u64,
}

fn ser_opt_ts<S: serde::Serializer>(t: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
    match t {
        Some(t) => s.collect_str(&model::format_timestamp(t)),
        None => s.serialize_none(),
    }
}

impl NodeStatus {
    pub fn config(&self) -> NodeConfig {
        NodeConfig {
            node_id: self.descriptor.node_id.clone(),
            capture_interval: self.descriptor.capture_interval,
            protocol_assignment: self.descriptor.protocol_assignment.clone(),
            revision: self.revision,
        }
    }
}

/// Known nodes, keyed by id.
#[derive(Debug, Default)]
pub struct Registry {
    nodes: BTreeMap<String, NodeStatus>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new node or replaces an existing descriptor. Re-announcing
    /// an identical descriptor leaves the entry (and its revision) untouched.
    pub fn register(&mut self, d: NodeDescriptor) -> Result<&NodeStatus, RegistryError> {
        d.validate().map_err(|e| RegistryError::InvalidDescriptor(e.to_string()))?;
        let id = d.node_id.clone();
        match self.nodes.get_mut(&id) {
            Some(existing) if existing.descriptor == d => {}
            Some(existing) => {
                existing.descriptor = d;
                existing.revision += 1;
            }
            None => {
                self.nodes.insert(id.clone(), NodeStatus { descriptor: d, last_seen: None, revision: 1 });
            }
        }
        Ok(&self.nodes[&id])
    }

    pub fn get(&self, node_id: &str) -> Option<&NodeStatus> {
        self.nodes.get(node_id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NodeStatus> {
        self.nodes.values()
    }

    fn entry(&mut self, node_id: &str) -> Result<&mut NodeStatus, RegistryError> {
        self.nodes.get_mut(node_id).ok_or_else(|| RegistryError::UnknownNode(node_id.into()))
    }

    pub fn set_capture_interval(&mut self, node_id: &str, seconds: u32) -> Result<&NodeStatus, RegistryError> {
        let entry = self.entry(node_id)?;
        if seconds < 1 {
            return Err(RegistryError::InvalidInterval);
        }
        if entry.descriptor.capture_interval != seconds {
            entry.descriptor.capture_interval = seconds;
            entry.revision += 1;
        }
        Ok(entry)
    }

    pub fn assign_protocol(
        &mut self,
        node_id: &str,
        sensor_id: &str,
        protocol: ProtocolId,
    ) -> Result<&NodeStatus, RegistryError> {
        let entry = self.entry(node_id)?;
        if entry.descriptor.sensor(sensor_id).is_none() {
            return Err(RegistryError::UnknownSensor {
                node_id: node_id.into(),
                sensor_id: sensor_id.into(),
            });
        }
        let previous = entry.descriptor.protocol_assignment.insert(sensor_id.into(), protocol);
        if previous != Some(protocol) {
            entry.revision += 1;
        }
        Ok(entry)
    }

    pub fn touch(&mut self, node_id: &str, at: DateTime<Utc>) {
        if let Some(e) = self.nodes.get_mut(node_id) {
            e.last_seen = Some(e.last_seen.map_or(at, |prev| prev.max(at)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GpsCoordinate, Magnitude, SensorDescriptor};

    fn desc() -> NodeDescriptor {
        NodeDescriptor {
            node_id: "n1".into(),
            gps: GpsCoordinate::new(4.6, -74.1).unwrap(),
            sensors: vec![
                SensorDescriptor::new("temp", Magnitude::Celsius, "AM2315"),
                SensorDescriptor::new("hum", Magnitude::PercentRh, "AM2315"),
            ],
            capture_interval: 6,
            protocol_assignment: [
                ("temp".to_string(), ProtocolId::Wifi),
                ("hum".to_string(), ProtocolId::Wifi),
            ]
            .into(),
        }
    }

    #[test]
    fn reannounce_is_idempotent() {
        let mut r = Registry::new();
        assert_eq!(r.register(desc()).unwrap().revision, 1);
        assert_eq!(r.register(desc()).unwrap().revision, 1);
        assert_eq!(r.len(), 1);
        let mut changed = desc();
        changed.capture_interval = 10;
        assert_eq!(r.register(changed).unwrap().revision, 2);
    }

    #[test]
    fn invalid_descriptor_rejected() {
        let mut r = Registry::new();
        let mut d = desc();
        d.capture_interval = 0;
        assert!(matches!(r.register(d), Err(RegistryError::InvalidDescriptor(_))));
        assert!(r.is_empty());
    }

    #[test]
    fn configuration_changes_bump_revision() {
        let mut r = Registry::new();
        r.register(desc()).unwrap();
        let s = r.set_capture_interval("n1", 6).unwrap();
        assert_eq!(s.revision, 1);
        let s = r.set_capture_interval("n1", 12).unwrap();
        assert_eq!((s.revision, s.descriptor.capture_interval), (2, 12));
        let s = r.assign_protocol("n1", "temp", ProtocolId::Zigbee).unwrap();
        assert_eq!(s.revision, 3);
        assert_eq!(s.config().protocol_assignment["temp"], ProtocolId::Zigbee);

        assert_eq!(r.set_capture_interval("ghost", 6).unwrap_err(), RegistryError::UnknownNode("ghost".into()));
        assert_eq!(r.set_capture_interval("n1", 0).unwrap_err(), RegistryError::InvalidInterval);
        assert!(matches!(
            r.assign_protocol("n1", "wind", ProtocolId::Wifi),
            Err(RegistryError::UnknownSensor { .. })
        ));
    }
}
