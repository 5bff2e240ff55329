use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, Utc};
use serde::Serialize;
use thiserror::Error;
use tracing::{debug, warn};

use crate::clock::{Clock, SystemClock};
use crate::gateway::{GatewayAddrs, NodeConfig};
use crate::model::{Magnitude, NodeDescriptor, ProtocolId, SensorDescriptor};
use crate::mqtt::{ClientError, ClientOptions, MqttClient, QoS};
use crate::normalize::{encode_announce, NodeUplinkRecord};
use crate::sensors::{am2315_decode, synth_weather, vane_sector, Am2315Payload, Calibration};
use crate::transport::{connect_link, LinkError, LinkWriter, RawFrame};

const CONNECT_ATTEMPTS: u32 = 8;
const BACKOFF_MIN: StdDuration = StdDuration::from_millis(50);
const BACKOFF_MAX: StdDuration = StdDuration::from_secs(2);

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("gateway unreachable at {addr} after {attempts} attempts")]
    GatewayUnreachable { addr: String, attempts: u32 },
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Mqtt(#[from] ClientError),
}

/// Counters shared between a running node and whoever observes it.
#[derive(Debug, Default)]
pub struct NodeStats {
    frames_sent: AtomicU64,
    /// Latest configuration revision received (applied or rejected).
    revision: AtomicU64,
    rejected_configs: AtomicU64,
    ready: AtomicBool,
    forced: Mutex<BTreeMap<String, f64>>,
    sent: Mutex<BTreeMap<ProtocolId, ProtocolTraffic>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ProtocolTraffic {
    /// Reading frames.
    pub messages: u64,
    /// Wire bytes, announces included.
    pub bytes: u64,
}

impl NodeStats {
    pub fn frames_sent(&self) -> u64 {
        self.frames_sent.load(Ordering::SeqCst)
    }

    pub fn config_revision(&self) -> u64 {
        self.revision.load(Ordering::SeqCst)
    }

    pub fn rejected_configs(&self) -> u64 {
        self.rejected_configs.load(Ordering::SeqCst)
    }

    /// Announced and configured; emitting from here on.
    pub fn is_ready(&self) -> bool {
        self.ready.load(Ordering::SeqCst)
    }

    /// Overrides the next capture of `sensor_id`.
    pub fn force_value(&self, sensor_id: &str, value: f64) {
        self.forced.lock().unwrap().insert(sensor_id.into(), value);
    }

    pub fn traffic(&self) -> BTreeMap<ProtocolId, ProtocolTraffic> {
        self.sent.lock().unwrap().clone()
    }

    fn note_sent(&self, protocol: ProtocolId, bytes: usize, reading: bool) {
        {
            let mut sent = self.sent.lock().unwrap();
            let t = sent.entry(protocol).or_default();
            t.bytes += bytes as u64;
            t.messages += u64::from(reading);
        }
        self.frames_sent.fetch_add(1, Ordering::SeqCst);
    }
}

/// Static inputs of one simulated station.
#[derive(Clone)]
pub struct NodeContext {
    pub gateway: GatewayAddrs,
    pub clock: Arc<dyn Clock>,
    /// Scenario time zero; weather is a function of time since then.
    pub start: DateTime<Utc>,
    pub seed: u64,
    pub calibration: Calibration,
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let k = 10f64.powi(decimals);
    (v * k).round() / k
}

/// What the station reports for `sensor` at `t_s` seconds into the run.
/// Counter sensors (rain, wind) cover the `interval_s` before `t_s`.
pub fn capture(sensor: &SensorDescriptor, t_s: f64, interval_s: f64, seed: u64, cal: &Calibration) -> f64 {
    let now = synth_weather(t_s, seed);
    match sensor.magnitude {
        Magnitude::Celsius | Magnitude::PercentRh => {
            // Through the AM2315 wire format, so values carry its 0.1 resolution.
            let wire = Am2315Payload::from_reading(now.temperature, now.humidity);
            let (t, h) = am2315_decode(&wire).expect("self-encoded payload is valid");
            if sensor.magnitude == Magnitude::Celsius {
                t
            } else {
                h
            }
        }
        Magnitude::WattsPerSquareMeter => {
            let volts = now.irradiance * cal.davis_volts_per_wm2;
            round_to(cal.irradiance(volts.min(crate::sensors::DAVIS_6450_MAX_VOLTS)).unwrap_or(0.0), 1)
        }
        Magnitude::Millimeters => {
            let before = synth_weather(t_s - interval_s, seed);
            cal.rain_mm(now.rain_tips.saturating_sub(before.rain_tips))
        }
        Magnitude::KilometersPerHour => {
            let before = synth_weather(t_s - interval_s, seed);
            let closures = now.wind_closures.saturating_sub(before.wind_closures);
            round_to(cal.wind_kmh(closures, interval_s).unwrap_or(0.0), 2)
        }
        Magnitude::Compass16 => {
            let sector = vane_sector(now.vane_voltage, cal.vane_vref).unwrap_or(0);
            sector as f64 * 22.5
        }
    }
}

struct Links {
    addrs: GatewayAddrs,
    open: HashMap<ProtocolId, LinkWriter>,
}

impl Links {
    async fn send(&mut self, protocol: ProtocolId, payload: Vec<u8>) -> Result<usize, NodeError> {
        let frame = RawFrame::new(protocol, payload).expect("records are far below the frame limit");
        if !self.open.contains_key(&protocol) {
            let addr = self.addrs.transport(protocol).to_string();
            let endpoint = retry(&addr, || connect_link(protocol, &addr)).await?;
            self.open.insert(protocol, endpoint.split().1);
        }
        let writer = self.open.get_mut(&protocol).expect("inserted above");
        match writer.send(&frame).await {
            Ok(n) => Ok(n),
            Err(e) => {
                self.open.remove(&protocol);
                Err(e.into())
            }
        }
    }
}

async fn retry<T, E, F, Fut>(addr: &str, mut f: F) -> Result<T, NodeError>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T, E>>,
    E: std::fmt::Display,
{
    let mut backoff = BACKOFF_MIN;
    for attempt in 1..=CONNECT_ATTEMPTS {
        match f().await {
            Ok(v) => return Ok(v),
            Err(e) => {
                debug!("connect to {addr} failed (attempt {attempt}): {e}");
                if attempt < CONNECT_ATTEMPTS {
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(BACKOFF_MAX);
                }
            }
        }
    }
    Err(NodeError::GatewayUnreachable { addr: addr.into(), attempts: CONNECT_ATTEMPTS })
}

/// Runs one station until cancelled: announce, wait for configuration,
/// then capture every `capture_interval` seconds and follow config updates.
/// Connection retries use wall time so they never hold a virtual clock.
pub async fn run_node(mut desc: NodeDescriptor, ctx: NodeContext, stats: Arc<NodeStats>) -> Result<(), NodeError> {
    let broker_addr = ctx.gateway.broker.to_string();
    let client = retry(&broker_addr, || {
        MqttClient::connect(&broker_addr, ClientOptions::new(desc.node_id.clone()), Arc::new(SystemClock))
    })
    .await?;
    client.subscribe(&format!("cfg/+/{}", desc.node_id), QoS::AtLeastOnce).await?;

    let mut links = Links { addrs: ctx.gateway, open: HashMap::new() };
    let announce_on = desc.sensors.first().map_or(ProtocolId::Wifi, |s| desc.protocol_for(&s.sensor_id));
    let n = links.send(announce_on, encode_announce(&desc, ctx.clock.now())).await?;
    stats.note_sent(announce_on, n, false);

    // The gateway answers an announce with the effective configuration.
    loop {
        let Some(msg) = client.poll().await else {
            return Err(ClientError::NotConnected.into());
        };
        if apply_config(&mut desc, &msg.payload, &stats) {
            break;
        }
    }
    stats.ready.store(true, Ordering::SeqCst);

    let mut last: Option<DateTime<Utc>> = None;
    let mut next = ctx.clock.now();
    loop {
        let sleep = ctx.clock.sleep_until(next);
        tokio::select! {
            _ = sleep => {
                emit(&desc, &ctx, &stats, &mut links, next).await?;
                last = Some(next);
                next += Duration::seconds(desc.capture_interval.into());
            }
            msg = client.poll() => {
                let Some(msg) = msg else { return Err(ClientError::NotConnected.into()) };
                let before = desc.capture_interval;
                if apply_config(&mut desc, &msg.payload, &stats) && desc.capture_interval != before {
                    let now = ctx.clock.now();
                    next = last.map_or(now, |l| l + Duration::seconds(desc.capture_interval.into())).max(now);
                }
            }
        }
    }
}

/// Returns true when the configuration was accepted.
fn apply_config(desc: &mut NodeDescriptor, payload: &[u8], stats: &NodeStats) -> bool {
    match serde_json::from_slice::<NodeConfig>(payload) {
        Ok(cfg) if cfg.node_id == desc.node_id && cfg.capture_interval >= 1 => {
            desc.capture_interval = cfg.capture_interval;
            for (sensor, protocol) in cfg.protocol_assignment {
                if desc.sensor(&sensor).is_some() {
                    desc.protocol_assignment.insert(sensor, protocol);
                }
            }
            stats.revision.fetch_max(cfg.revision, Ordering::SeqCst);
            true
        }
        other => {
            warn!("node {} rejected configuration: {other:?}", desc.node_id);
            stats.rejected_configs.fetch_add(1, Ordering::SeqCst);
            // Keep the revision moving so observers are not left waiting.
            if let Some(rev) = serde_json::from_slice::<serde_json::Value>(payload)
                .ok()
                .and_then(|v| v.get("revision").and_then(|r| r.as_u64()))
            {
                stats.revision.fetch_max(rev, Ordering::SeqCst);
            }
            false
        }
    }
}

async fn emit(
    desc: &NodeDescriptor,
    ctx: &NodeContext,
    stats: &NodeStats,
    links: &mut Links,
    at: DateTime<Utc>,
) -> Result<(), NodeError> {
    let t_s = (at - ctx.start).num_milliseconds() as f64 / 1000.0;
    let interval = f64::from(desc.capture_interval);
    for sensor in &desc.sensors {
        let forced = stats.forced.lock().unwrap().remove(&sensor.sensor_id);
        let value = forced.unwrap_or_else(|| capture(sensor, t_s, interval, ctx.seed, &ctx.calibration));
        let rec = NodeUplinkRecord {
            node_id: desc.node_id.clone(),
            sensor_id: sensor.sensor_id.clone(),
            value,
            capture_time: at,
        };
        let protocol = desc.protocol_for(&sensor.sensor_id);
        let n = links.send(protocol, rec.encode()).await?;
        stats.note_sent(protocol, n, true);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensors::COMPASS_POINTS;

    fn sensor(m: Magnitude) -> SensorDescriptor {
        SensorDescriptor::new("s", m, "x")
    }

    #[test]
    fn captures_are_deterministic_and_in_range() {
        let cal = Calibration::default();
        for t in (0..480).step_by(6) {
            let t = t as f64;
            let temp = capture(&sensor(Magnitude::Celsius), t, 6.0, 7, &cal);
            assert_eq!(temp, capture(&sensor(Magnitude::Celsius), t, 6.0, 7, &cal));
            assert!((0.0..40.0).contains(&temp));
            assert_eq!((temp * 10.0).round(), temp * 10.0, "AM2315 resolution");
            let hum = capture(&sensor(Magnitude::PercentRh), t, 6.0, 7, &cal);
            assert!((0.0..=100.0).contains(&hum));
            assert!(capture(&sensor(Magnitude::WattsPerSquareMeter), t, 6.0, 7, &cal) > 0.0);
            assert!(capture(&sensor(Magnitude::Millimeters), t, 6.0, 7, &cal) >= 0.0);
            assert!(capture(&sensor(Magnitude::KilometersPerHour), t, 6.0, 7, &cal) >= 0.0);
            let dir = capture(&sensor(Magnitude::Compass16), t, 6.0, 7, &cal);
            assert!((dir / 22.5) < COMPASS_POINTS.len() as f64 && dir.rem_euclid(22.5) == 0.0);
        }
    }

    #[test]
    fn counters_are_differenced_over_the_interval() {
        let cal = Calibration::default();
        // 6 mm/h over an hour is 21 or 22 tips
        let total: f64 = (1..=600).map(|k| capture(&sensor(Magnitude::Millimeters), k as f64 * 6.0, 6.0, 1, &cal)).sum();
        assert!((5.5..=6.2).contains(&total), "{total}");
        let mean_wind: f64 =
            (1..=80).map(|k| capture(&sensor(Magnitude::KilometersPerHour), k as f64 * 6.0, 6.0, 1, &cal)).sum::<f64>() / 80.0;
        assert!((6.0..10.0).contains(&mean_wind), "{mean_wind}");
    }

    #[test]
    fn neighbouring_stations_agree_on_temperature() {
        let cal = Calibration::default();
        for t in (0..480).step_by(6) {
            let a = capture(&sensor(Magnitude::Celsius), t as f64, 6.0, 7, &cal);
            let b = capture(&sensor(Magnitude::Celsius), t as f64, 6.0, 8, &cal);
            assert!((a - b).abs() <= 0.5, "{a} vs {b}");
        }
    }

    #[test]
    fn rejected_config_still_advances_revision() {
        let stats = NodeStats::default();
        let mut desc = crate::sim::station_node("n1", crate::model::GpsCoordinate::new(0.0, 0.0).unwrap());
        let bad = br#"{"node_id":"n1","capture_interval":6,"protocol_assignment":{"temp":"lora"},"revision":4}"#;
        assert!(!apply_config(&mut desc, bad, &stats));
        assert_eq!((stats.config_revision(), stats.rejected_configs()), (4, 1));
        assert_eq!(desc.protocol_for("temp"), ProtocolId::Wifi);

        let good = br#"{"node_id":"n1","capture_interval":12,"protocol_assignment":{"temp":"zigbee"},"revision":5}"#;
        assert!(apply_config(&mut desc, good, &stats));
        assert_eq!((desc.capture_interval, desc.protocol_for("temp")), (12, ProtocolId::Zigbee));
    }
}
