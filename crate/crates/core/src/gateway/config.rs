use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::model::{GatewayIdentity, ProtocolId};

/// Gateway configuration, read from a single JSON document. Every field has
/// a default, so `{}` is a valid (if insecure) configuration.
///
/// ```json
/// {
///   "gate_id": "gw1",
///   "network_id": "net1",
///   "bind": "127.0.0.1",
///   "ports": { "wifi": 7001, "bluetooth": 7002, "zigbee": 7003 },
///   "broker_port": 1883,
///   "api_port": 8080,
///   "cloud_broker": "127.0.0.1:1884",
///   "bearer_token": "change-me",
///   "readings_log": "readings.jsonl"
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub gate_id: String,
    pub network_id: String,
    /// Interface address every listener binds to.
    pub bind: String,
    pub ports: TransportPorts,
    /// Embedded broker for node downlink.
    pub broker_port: u16,
    pub api_port: u16,
    /// `host:port` of the upstream broker; uplink is disabled when absent.
    pub cloud_broker: Option<String>,
    pub bearer_token: String,
    pub retry_interval_s: f64,
    pub retry_budget: u32,
    /// Default query window for throughput and the minimum sample retention.
    pub throughput_window_s: f64,
    pub stats_period_s: f64,
    /// Append-only reading log; kept in memory when absent.
    pub readings_log: Option<PathBuf>,
    pub max_log_bytes: Option<u64>,
    /// Readings queued for the cloud broker while it is unreachable.
    pub uplink_buffer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportPorts {
    pub wifi: u16,
    pub bluetooth: u16,
    pub zigbee: u16,
}

impl Default for TransportPorts {
    fn default() -> Self {
        Self { wifi: 7001, bluetooth: 7002, zigbee: 7003 }
    }
}

impl TransportPorts {
    pub fn get(&self, p: ProtocolId) -> u16 {
        match p {
            ProtocolId::Wifi => self.wifi,
            ProtocolId::Bluetooth => self.bluetooth,
            ProtocolId::Zigbee => self.zigbee,
        }
    }

    /// All ports zero: let the OS pick (tests and simulations).
    pub fn ephemeral() -> Self {
        Self { wifi: 0, bluetooth: 0, zigbee: 0 }
    }
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            gate_id: "gw1".into(),
            network_id: "net1".into(),
            bind: "127.0.0.1".into(),
            ports: TransportPorts::default(),
            broker_port: 1883,
            api_port: 8080,
            cloud_broker: None,
            bearer_token: "change-me".into(),
            retry_interval_s: 2.0,
            retry_budget: 5,
            throughput_window_s: 60.0,
            stats_period_s: 10.0,
            readings_log: None,
            max_log_bytes: None,
            uplink_buffer: 10_000,
        }
    }
}

impl GatewayConfig {
    /// Every listener on an OS-assigned port, nothing persisted to disk.
    pub fn ephemeral() -> Self {
        Self { ports: TransportPorts::ephemeral(), broker_port: 0, api_port: 0, ..Self::default() }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let config: GatewayConfig = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        self.identity()?;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(GatewayError::Config(format!("{name} must be positive")))
            }
        };
        positive("retry_interval_s", self.retry_interval_s)?;
        positive("throughput_window_s", self.throughput_window_s)?;
        positive("stats_period_s", self.stats_period_s)?;
        if self.bearer_token.is_empty() {
            return Err(GatewayError::Config("bearer_token must not be empty".into()));
        }
        if self.uplink_buffer == 0 {
            return Err(GatewayError::Config("uplink_buffer must be at least 1".into()));
        }
        Ok(())
    }

    pub fn identity(&self) -> Result<GatewayIdentity, GatewayError> {
        GatewayIdentity::new(&self.gate_id, &self.network_id)
            .map_err(|e| GatewayError::Config(e.to_string()))
    }

    pub(crate) fn retry_interval(&self) -> chrono::Duration {
        chrono::Duration::milliseconds((self.retry_interval_s * 1000.0).round() as i64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_uses_defaults() {
        let c: GatewayConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, GatewayConfig::default());
        assert_eq!(c.stats_period_s, 10.0);
        assert_eq!(c.retry_budget, 5);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<GatewayConfig>(r#"{"gate":"x"}"#).is_err());
        let c: GatewayConfig = serde_json::from_str(r#"{"retry_interval_s":0}"#).unwrap();
        assert!(c.validate().is_err());
        let c: GatewayConfig = serde_json::from_str(r#"{"gate_id":""}"#).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn load_reports_the_path() {
        let err = GatewayConfig::load(Path::new("/definitely/not/here.json")).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.json"));
    }
}
