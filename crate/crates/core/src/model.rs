//! Domain types shared by every part of the gateway, and the canonical
//! JSON codec for [`NormalizedReading`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

/// Wire format of every timestamp the gateway emits.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

/// Key order of a serialized reading.
pub const READING_KEYS: [&str; 9] = [
    "node-id",
    "gps",
    "protocol",
    "date",
    "sensor-id",
    "value",
    "magnitude",
    "gate-id",
    "network-id",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("malformed gps string {0:?}")]
    MalformedGps(String),
    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),
    #[error("unknown magnitude {0:?}")]
    UnknownMagnitude(String),
    #[error("unknown comparator {0:?}")]
    UnknownComparator(String),
    #[error("field {0} must not be empty")]
    EmptyField(&'static str),
    #[error("value must be finite")]
    NonFiniteValue,
    #[error("bad timestamp {0:?}")]
    BadTimestamp(String),
    #[error("invalid node descriptor: {0}")]
    InvalidDescriptor(String),
}

/// The three simulated wireless transports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolId {
    Wifi,
    Bluetooth,
    Zigbee,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 3] = [ProtocolId::Wifi, ProtocolId::Bluetooth, ProtocolId::Zigbee];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolId::Wifi => "wifi",
            ProtocolId::Bluetooth => "bluetooth",
            ProtocolId::Zigbee => "zigbee",
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wifi" => Ok(ProtocolId::Wifi),
            "bluetooth" => Ok(ProtocolId::Bluetooth),
            "zigbee" => Ok(ProtocolId::Zigbee),
            other => Err(ModelError::UnknownProtocol(other.to_string())),
        }
    }
}

/// A position stored in whole micro-degrees, so that the 6-decimal string
/// form round-trips exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GpsCoordinate {
    lat_micro: i32,
    lon_micro: i32,
}

impl GpsCoordinate {
    pub fn new(latitude: f64, longitude: f64) -> Result<Self, ModelError> {
        if !latitude.is_finite() || !(-90.0..=90.0).contains(&latitude) {
            return Err(ModelError::LatitudeOutOfRange(latitude));
        }
        if !longitude.is_finite() || !(-180.0..=180.0).contains(&longitude) {
            return Err(ModelError::LongitudeOutOfRange(longitude));
        }
        Ok(Self {
            lat_micro: (latitude * 1e6).round() as i32,
            lon_micro: (longitude * 1e6).round() as i32,
        })
    }

    pub fn latitude(&self) -> f64 {
        f64::from(self.lat_micro) / 1e6
    }

    pub fn longitude(&self) -> f64 {
        f64::from(self.lon_micro) / 1e6
    }
}

fn fmt_micro(f: &mut fmt::Formatter<'_>, micro: i32) -> fmt::Result {
    let sign = if micro < 0 { "-" } else { "" };
    let abs = micro.unsigned_abs();
    write!(f, "{sign}{}.{:06}", abs / 1_000_000, abs % 1_000_000)
}

impl fmt::Display for GpsCoordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_micro(f, self.lat_micro)?;
        f.write_str(",")?;
        fmt_micro(f, self.lon_micro)
    }
}

impl FromStr for GpsCoordinate {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::MalformedGps(s.to_string());
        let (lat, lon) = s.split_once(',').ok_or_else(bad)?;
        let lat: f64 = lat.trim().parse().map_err(|_| bad())?;
        let lon: f64 = lon.trim().parse().map_err(|_| bad())?;
        GpsCoordinate::new(lat, lon)
    }
}

impl Serialize for GpsCoordinate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GpsCoordinate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Closed vocabulary of measurement units, one per weather variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Magnitude {
    #[serde(rename = "celsius")]
    Celsius,
    #[serde(rename = "percent_rh")]
    PercentRh,
    #[serde(rename = "w_per_m2")]
    WattsPerSquareMeter,
    #[serde(rename = "mm")]
    Millimeters,
    #[serde(rename = "km_per_h")]
    KilometersPerHour,
    /// Value is a compass sector index, 0 = N, counting clockwise to 15 = NNW.
    #[serde(rename = "compass_16")]
    Compass16,
}

impl Magnitude {
    pub const ALL: [Magnitude; 6] = [
        Magnitude::Celsius,
        Magnitude::PercentRh,
        Magnitude::WattsPerSquareMeter,
        Magnitude::Millimeters,
        Magnitude::KilometersPerHour,
        Magnitude::Compass16,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Magnitude::Celsius => "celsius",
            Magnitude::PercentRh => "percent_rh",
            Magnitude::WattsPerSquareMeter => "w_per_m2",
            Magnitude::Millimeters => "mm",
            Magnitude::KilometersPerHour => "km_per_h",
            Magnitude::Compass16 => "compass_16",
        }
    }
}

impl fmt::Display for Magnitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Magnitude {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Magnitude::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::UnknownMagnitude(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorDescriptor {
    pub sensor_id: String,
    pub magnitude: Magnitude,
    pub model: String,
}

impl SensorDescriptor {
    pub fn new(sensor_id: impl Into<String>, magnitude: Magnitude, model: impl Into<String>) -> Self {
        Self { sensor_id: sensor_id.into(), magnitude, model: model.into() }
    }
}

/// Registry entry for one wireless node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: String,
    pub gps: GpsCoordinate,
    pub sensors: Vec<SensorDescriptor>,
    /// Seconds between captures.
    pub capture_interval: u32,
    pub protocol_assignment: BTreeMap<String, ProtocolId>,
}

impl NodeDescriptor {
    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |m: String| Err(ModelError::InvalidDescriptor(m));
        if !is_token(&self.node_id) {
            return invalid(format!("node_id {:?} is not a nonempty token", self.node_id));
        }
        if self.capture_interval < 1 {
            return invalid("capture_interval must be at least 1 s".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sensors {
            if !is_token(&s.sensor_id) || s.sensor_id.starts_with('_') {
                return invalid(format!("sensor_id {:?} is not a valid token", s.sensor_id));
            }
            if !seen.insert(s.sensor_id.as_str()) {
                return invalid(format!("duplicate sensor_id {:?}", s.sensor_id));
            }
        }
        for sensor_id in self.protocol_assignment.keys() {
            if !seen.contains(sensor_id.as_str()) {
                return invalid(format!("protocol assignment names unknown sensor {sensor_id:?}"));
            }
        }
        Ok(())
    }

    pub fn sensor(&self, sensor_id: &str) -> Option<&SensorDescriptor> {
        self.sensors.iter().find(|s| s.sensor_id == sensor_id)
    }

    /// Transport a sensor is configured to use. Unassigned sensors fall back
    /// to the first assigned protocol, then WiFi.
    pub fn protocol_for(&self, sensor_id: &str) -> ProtocolId {
        self.protocol_assignment
            .get(sensor_id)
            .or_else(|| self.protocol_assignment.values().next())
            .copied()
            .unwrap_or(ProtocolId::Wifi)
    }
}

/// Tokens are nonempty and contain neither whitespace nor MQTT topic
/// metacharacters, since ids end up as topic levels.
pub fn is_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || matches!(c, '/' | '+' | '#' | '\0'))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GatewayIdentity {
    pub gate_id: String,
    pub network_id: String,
}

impl GatewayIdentity {
    pub fn new(gate_id: impl Into<String>, network_id: impl Into<String>) -> Result<Self, ModelError> {
        let gate_id = gate_id.into();
        let network_id = network_id.into();
        if !is_token(&gate_id) {
            return Err(ModelError::EmptyField("gate-id"));
        }
        if network_id.is_empty() {
            return Err(ModelError::EmptyField("network-id"));
        }
        Ok(Self { gate_id, network_id })
    }
}

/// Truncates to whole seconds, the precision readings carry.
pub fn truncate_to_seconds(t: DateTime<Utc>) -> DateTime<Utc> {
    t.with_nanosecond(0).unwrap_or(t)
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, ModelError> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .map(|n| n.and_utc())
        .map_err(|_| ModelError::BadTimestamp(s.to_string()))
}

/// Serde adapter for second-precision UTC timestamps.
pub mod timestamp {
    use super::*;

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&t.format(TIMESTAMP_FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        parse_timestamp(&s).map_err(D::Error::custom)
    }
}

/// The standardized measurement record relayed from the gateway to the cloud.
///
/// Fields are private so that every instance has passed [`NormalizedReading::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedReading {
    node_id: String,
    gps: GpsCoordinate,
    protocol: ProtocolId,
    date: DateTime<Utc>,
    sensor_id: String,
    value: f64,
    magnitude: Magnitude,
    gate_id: String,
    network_id: String,
}

impl NormalizedReading {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        node_id: impl Into<String>,
        gps: GpsCoordinate,
        protocol: ProtocolId,
        date: DateTime<Utc>,
        sensor_id: impl Into<String>,
        value: f64,
        magnitude: Magnitude,
        identity: &GatewayIdentity,
    ) -> Result<Self, ModelError> {
        let node_id = node_id.into();
        let sensor_id = sensor_id.into();
        if node_id.is_empty() {
            return Err(ModelError::EmptyField("node-id"));
        }
        if sensor_id.is_empty() {
            return Err(ModelError::EmptyField("sensor-id"));
        }
        if identity.gate_id.is_empty() {
            return Err(ModelError::EmptyField("gate-id"));
        }
        if identity.network_id.is_empty() {
            return Err(ModelError::EmptyField("network-id"));
        }
        if !value.is_finite() {
            return Err(ModelError::NonFiniteValue);
        }
        Ok(Self {
            node_id,
            gps,
            protocol,
            date: truncate_to_seconds(date),
            sensor_id,
            value,
            magnitude,
            gate_id: identity.gate_id.clone(),
            network_id: identity.network_id.clone(),
        })
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }
    pub fn gps(&self) -> GpsCoordinate {
        self.gps
    }
    pub fn protocol(&self) -> ProtocolId {
        self.protocol
    }
    pub fn date(&self) -> DateTime<Utc> {
        self.date
    }
    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }
    pub fn value(&self) -> f64 {
        self.value
    }
    pub fn magnitude(&self) -> Magnitude {
        self.magnitude
    }
    pub fn gate_id(&self) -> &str {
        &self.gate_id
    }
    pub fn network_id(&self) -> &str {
        &self.network_id
    }

    /// Canonical JSON bytes: fixed key order, no whitespace.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        serialize_reading(self)
    }
}

impl Serialize for NormalizedReading {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("NormalizedReading", 9)?;
        st.serialize_field("node-id", &self.node_id)?;
        st.serialize_field("gps", &self.gps)?;
        st.serialize_field("protocol", &self.protocol)?;
        st.serialize_field("date", &self.date.format(TIMESTAMP_FORMAT).to_string())?;
        st.serialize_field("sensor-id", &self.sensor_id)?;
        st.serialize_field("value", &self.value)?;
        st.serialize_field("magnitude", &self.magnitude)?;
        st.serialize_field("gate-id", &self.gate_id)?;
        st.serialize_field("network-id", &self.network_id)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for NormalizedReading {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        reading_from_value(&value).map_err(D::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseReadingError {
    #[error("reading is not a JSON object: {0}")]
    NotAnObject(String),
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {0:?} has the wrong type")]
    TypeMismatch(&'static str),
    #[error("field \"date\" is not a YYYY-MM-DDThh:mm:ssZ timestamp")]
    BadTimestamp,
    #[error("field \"protocol\" is not one of wifi, bluetooth, zigbee")]
    BadProtocol,
    #[error("field {key:?} is invalid: {reason}")]
    InvalidField { key: &'static str, reason: String },
}

/// Serializes a reading to its canonical JSON form.
pub fn serialize_reading(r: &NormalizedReading) -> Vec<u8> {
    // Serializing owned strings and finite floats cannot fail.
    serde_json::to_vec(r).expect("reading serialization is infallible")
}

/// Parses a reading, accepting any key order and insignificant whitespace.
pub fn parse_reading(bytes: &[u8]) -> Result<NormalizedReading, ParseReadingError> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| ParseReadingError::NotAnObject(e.to_string()))?;
    reading_from_value(&value)
}

fn reading_from_value(value: &Value) -> Result<NormalizedReading, ParseReadingError> {
    let obj = value
        .as_object()
        .ok_or_else(|| ParseReadingError::NotAnObject(value.to_string()))?;
    for key in READING_KEYS {
        if !obj.contains_key(key) {
            return Err(ParseReadingError::MissingField(key));
        }
    }
    let text = |key: &'static str| -> Result<&str, ParseReadingError> {
        let s = obj[key].as_str().ok_or(ParseReadingError::TypeMismatch(key))?;
        if s.is_empty() {
            return Err(ParseReadingError::InvalidField { key, reason: "empty".into() });
        }
        Ok(s)
    };
    let invalid = |key: &'static str| move |e: ModelError| ParseReadingError::InvalidField { key, reason: e.to_string() };

    let node_id = text("node-id")?;
    let gps: GpsCoordinate = text("gps")?.parse().map_err(invalid("gps"))?;
    let protocol: ProtocolId = obj["protocol"]
        .as_str()
        .ok_or(ParseReadingError::TypeMismatch("protocol"))?
        .parse()
        .map_err(|_| ParseReadingError::BadProtocol)?;
    let date = parse_timestamp(
        obj["date"].as_str().ok_or(ParseReadingError::TypeMismatch("date"))?,
    )
    .map_err(|_| ParseReadingError::BadTimestamp)?;
    let sensor_id = text("sensor-id")?;
    let value = obj["value"].as_f64().ok_or(ParseReadingError::TypeMismatch("value"))?;
    let magnitude: Magnitude = text("magnitude")?.parse().map_err(invalid("magnitude"))?;
    let identity = GatewayIdentity {
        gate_id: text("gate-id")?.to_string(),
        network_id: text("network-id")?.to_string(),
    };
    NormalizedReading::new(node_id, gps, protocol, date, sensor_id, value, magnitude, &identity)
        .map_err(invalid("value"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparator {
    Less,
    LessOrEqual,
    Greater,
    GreaterOrEqual,
    Equal,
}

impl Comparator {
    pub fn as_str(self) -> &'static str {
        match self {
            Comparator::Less => "<",
            Comparator::LessOrEqual => "<=",
            Comparator::Greater => ">",
            Comparator::GreaterOrEqual => ">=",
            Comparator::Equal => "=",
        }
    }

    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Less => value < threshold,
            Comparator::LessOrEqual => value <= threshold,
            Comparator::Greater => value > threshold,
            Comparator::GreaterOrEqual => value >= threshold,
            Comparator::Equal => value == threshold,
        }
    }
}

impl FromStr for Comparator {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "<" => Comparator::Less,
            "<=" | "≤" => Comparator::LessOrEqual,
            ">" => Comparator::Greater,
            ">=" | "≥" => Comparator::GreaterOrEqual,
            "=" | "==" => Comparator::Equal,
            other => return Err(ModelError::UnknownComparator(other.to_string())),
        })
    }
}

impl Serialize for Comparator {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Comparator {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Either `"*"` or an exact id.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Pattern {
    Any,
    Exact(String),
}

impl Pattern {
    pub fn matches(&self, s: &str) -> bool {
        match self {
            Pattern::Any => true,
            Pattern::Exact(lit) => lit == s,
        }
    }
}

impl From<&str> for Pattern {
    fn from(s: &str) -> Self {
        if s == "*" {
            Pattern::Any
        } else {
            Pattern::Exact(s.to_string())
        }
    }
}

impl Serialize for Pattern {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Pattern::Any => serializer.serialize_str("*"),
            Pattern::Exact(s) => serializer.serialize_str(s),
        }
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s.is_empty() {
            return Err(D::Error::custom("empty pattern"));
        }
        Ok(Pattern::from(s.as_str()))
    }
}

/// Operator-authored threshold rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRule {
    pub rule_id: String,
    pub node: Pattern,
    pub sensor: Pattern,
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default)]
    pub message: String,
}

impl AlarmRule {
    pub fn new(
        rule_id: impl Into<String>,
        node: &str,
        sensor: &str,
        comparator: Comparator,
        threshold: f64,
        message: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let rule = Self {
            rule_id: rule_id.into(),
            node: Pattern::from(node),
            sensor: Pattern::from(sensor),
            comparator,
            threshold,
            message: message.into(),
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rule_id.is_empty() {
            return Err(ModelError::EmptyField("rule_id"));
        }
        if !self.threshold.is_finite() {
            return Err(ModelError::NonFiniteValue);
        }
        Ok(())
    }
}

/// True when the rule's selector covers the reading and its comparison holds.
pub fn rule_matches(rule: &AlarmRule, r: &NormalizedReading) -> bool {
    rule.node.matches(r.node_id())
        && rule.sensor.matches(r.sensor_id())
        && rule.comparator.holds(r.value(), rule.threshold)
}
