//! Protocol conversion: pull the node's compact record out of a transport
//! frame and rebuild it as a [`NormalizedReading`].
//!
//! Nodes send one JSON object per frame, independent of transport:
//!
//! ```text
//! {"n":"n1","s":"temp","v":25.3,"t":"2020-01-01T00:00:06Z"}
//! ```
//!
//! A node announces itself with the reserved sensor id `_announce`, carrying
//! its [`NodeDescriptor`] in `"v"`.

use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{
    self, GatewayIdentity, ModelError, NodeDescriptor, NormalizedReading, ProtocolId,
};
use crate::transport::RawFrame;

pub const ANNOUNCE_SENSOR_ID: &str = "_announce";
const RECORD_KEYS: [&str; 4] = ["n", "s", "v", "t"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalizeError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("unknown record key {0:?}")]
    UnknownKey(String),
    #[error("node {node_id:?} has no sensor {sensor_id:?}")]
    UnknownSensor { node_id: String, sensor_id: String },
    #[error("record for node {record:?} matched against descriptor of {descriptor:?}")]
    NodeMismatch { record: String, descriptor: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A single measurement as sent by a node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeUplinkRecord {
    #[serde(rename = "n")]
    pub node_id: String,
    #[serde(rename = "s")]
    pub sensor_id: String,
    #[serde(rename = "v")]
    pub value: f64,
    #[serde(rename = "t", with = "model::timestamp")]
    pub capture_time: DateTime<Utc>,
}

impl NodeUplinkRecord {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("record serialization is infallible")
    }
}

/// Everything a node can put in an uplink frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Uplink {
    Reading(NodeUplinkRecord),
    Announce { descriptor: NodeDescriptor, capture_time: DateTime<Utc> },
}

impl Uplink {
    pub fn node_id(&self) -> &str {
        match self {
            Uplink::Reading(r) => &r.node_id,
            Uplink::Announce { descriptor, .. } => &descriptor.node_id,
        }
    }
}

#[derive(Serialize)]
struct AnnounceWire<'a> {
    n: &'a str,
    s: &'static str,
    v: &'a NodeDescriptor,
    #[serde(with = "model::timestamp")]
    t: &'a DateTime<Utc>,
}

pub fn encode_announce(descriptor: &NodeDescriptor, capture_time: DateTime<Utc>) -> Vec<u8> {
    let wire = AnnounceWire {
        n: &descriptor.node_id,
        s: ANNOUNCE_SENSOR_ID,
        v: descriptor,
        t: &model::truncate_to_seconds(capture_time),
    };
    serde_json::to_vec(&wire).expect("announce serialization is infallible")
}

fn parse_object(payload: &[u8]) -> Result<Map<String, Value>, NormalizeError> {
    let value: Value = serde_json::from_slice(payload)
        .map_err(|e| NormalizeError::MalformedRecord(format!("not JSON: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(NormalizeError::MalformedRecord("not a JSON object".into()));
    };
    if let Some(key) = obj.keys().find(|k| !RECORD_KEYS.contains(&k.as_str())) {
        return Err(NormalizeError::UnknownKey(key.clone()));
    }
    if let Some(key) = RECORD_KEYS.iter().find(|k| !obj.contains_key(**k)) {
        return Err(NormalizeError::MalformedRecord(format!("missing key {key:?}")));
    }
    Ok(obj)
}

fn str_field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a str, NormalizeError> {
    obj[key]
        .as_str()
        .ok_or_else(|| NormalizeError::MalformedRecord(format!("key {key:?} must be a string")))
}

/// Parses any uplink payload: a reading or an announce.
pub fn extract_uplink(frame: &RawFrame) -> Result<Uplink, NormalizeError> {
    let obj = parse_object(frame.payload())?;
    let node_id = str_field(&obj, "n")?;
    let sensor_id = str_field(&obj, "s")?;
    let capture_time = model::parse_timestamp(str_field(&obj, "t")?)
        .map_err(|e| NormalizeError::MalformedRecord(e.to_string()))?;

    if sensor_id == ANNOUNCE_SENSOR_ID {
        let descriptor: NodeDescriptor = serde_json::from_value(obj["v"].clone())
            .map_err(|e| NormalizeError::MalformedRecord(format!("bad announce: {e}")))?;
        if descriptor.node_id != node_id {
            return Err(NormalizeError::NodeMismatch {
                record: node_id.to_string(),
                descriptor: descriptor.node_id,
            });
        }
        return Ok(Uplink::Announce { descriptor, capture_time });
    }

    let value = obj["v"]
        .as_f64()
        .ok_or_else(|| NormalizeError::MalformedRecord("key \"v\" must be a number".into()))?;
    if node_id.is_empty() || sensor_id.is_empty() {
        return Err(NormalizeError::MalformedRecord("empty node or sensor id".into()));
    }
    Ok(Uplink::Reading(NodeUplinkRecord {
        node_id: node_id.to_string(),
        sensor_id: sensor_id.to_string(),
        value,
        capture_time,
    }))
}

/// Parses a measurement record; announces are rejected as malformed here.
pub fn extract_payload(frame: &RawFrame) -> Result<NodeUplinkRecord, NormalizeError> {
    match extract_uplink(frame)? {
        Uplink::Reading(r) => Ok(r),
        Uplink::Announce { .. } => {
            Err(NormalizeError::MalformedRecord("announce where a reading was expected".into()))
        }
    }
}

/// Builds the standardized reading. `arrival` is the transport the frame
/// actually came in on, whatever the node's configuration says.
pub fn build_normalized(
    rec: &NodeUplinkRecord,
    arrival: ProtocolId,
    node: &NodeDescriptor,
    gw: &GatewayIdentity,
) -> Result<NormalizedReading, NormalizeError> {
    if rec.node_id != node.node_id {
        return Err(NormalizeError::NodeMismatch {
            record: rec.node_id.clone(),
            descriptor: node.node_id.clone(),
        });
    }
    let sensor = node.sensor(&rec.sensor_id).ok_or_else(|| NormalizeError::UnknownSensor {
        node_id: rec.node_id.clone(),
        sensor_id: rec.sensor_id.clone(),
    })?;
    Ok(NormalizedReading::new(
        &rec.node_id,
        node.gps,
        arrival,
        rec.capture_time,
        &rec.sensor_id,
        rec.value,
        sensor.magnitude,
        gw,
    )?)
}
