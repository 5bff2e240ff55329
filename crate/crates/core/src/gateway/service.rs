use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use chrono::Duration;
use serde::Serialize;
use tokio::sync::{broadcast, mpsc};
use tracing::{debug, warn};

use super::events::{AlarmEvent, Diagnostic, DiagnosticKind, GatewayEvent};
use super::metrics::{HostSample, HostSampler, StatsError, ThroughputWindow};
use super::registry::{NodeStatus, Registry, RegistryError};
use super::store::{QueryResult, ReadingStore};
use super::{GatewayConfig, GatewayError};
use crate::clock::{Clock, SystemClock};
use crate::model::{
    rule_matches, serialize_reading, AlarmRule, GatewayIdentity, NodeDescriptor, NormalizedReading, ProtocolId,
};
use crate::mqtt::{Broker, BrokerConfig, QoS};
use crate::normalize::{build_normalized, extract_uplink, Uplink};
use crate::transport::{DecodeError, RawFrame};

/// Throughput key for bytes whose sender could not be identified.
pub const UNKNOWN_NODE: &str = "_unknown";
const EVENT_CAPACITY: usize = 4096;
const HOST_SERIES_LEN: usize = 8640;
const MIN_RETENTION_S: i64 = 600;

pub fn uplink_topic(gate_id: &str, node_id: &str, sensor_id: &str) -> String {
    format!("dat/{gate_id}/{node_id}/{sensor_id}")
}

pub fn config_topic(gate_id: &str, node_id: &str) -> String {
    format!("cfg/{gate_id}/{node_id}")
}

/// A reading waiting to be forwarded to the cloud broker.
#[derive(Debug, Clone)]
pub struct UplinkMessage {
    pub topic: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Default)]
struct Counters {
    frames_processed: AtomicU64,
    reading_frames: AtomicU64,
    announces: AtomicU64,
    readings_persisted: AtomicU64,
    uplink_published: AtomicU64,
    uplink_acked: AtomicU64,
    uplink_dropped: AtomicU64,
    alarms_fired: AtomicU64,
    errors: [AtomicU64; 3],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ErrorCounts {
    pub wifi: u64,
    pub bluetooth: u64,
    pub zigbee: u64,
}

impl ErrorCounts {
    pub fn get(&self, p: ProtocolId) -> u64 {
        match p {
            ProtocolId::Wifi => self.wifi,
            ProtocolId::Bluetooth => self.bluetooth,
            ProtocolId::Zigbee => self.zigbee,
        }
    }

    pub fn total(&self) -> u64 {
        self.wifi + self.bluetooth + self.zigbee
    }
}

/// Pipeline accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestCounters {
    /// Every frame or decode failure taken off the ingest queue.
    pub frames_processed: u64,
    /// Frames that carried a reading record (valid or not).
    pub reading_frames: u64,
    pub announces: u64,
    pub readings_persisted: u64,
    /// Readings handed to the uplink (queued for the cloud broker, or
    /// published on the embedded broker when no cloud broker is set).
    pub uplink_published: u64,
    /// Cloud-broker PUBACKs received.
    pub uplink_acked: u64,
    pub uplink_dropped: u64,
    pub alarms_fired: u64,
    pub errors: ErrorCounts,
}

fn protocol_index(p: ProtocolId) -> usize {
    match p {
        ProtocolId::Wifi => 0,
        ProtocolId::Bluetooth => 1,
        ProtocolId::Zigbee => 2,
    }
}

/// Gateway state shared by listeners, the ingest stage, and the API.
pub struct Gateway {
    config: GatewayConfig,
    identity: GatewayIdentity,
    clock: Arc<dyn Clock>,
    broker: Arc<Broker>,
    registry: RwLock<Registry>,
    alarms: RwLock<Vec<AlarmRule>>,
    throughput: Mutex<ThroughputWindow>,
    store: ReadingStore,
    events: broadcast::Sender<GatewayEvent>,
    uplink: OnceLock<mpsc::Sender<UplinkMessage>>,
    ingest_lock: Mutex<()>,
    host: Mutex<(HostSampler, VecDeque<HostSample>)>,
    counters: Counters,
}

impl Gateway {
    /// `clock` timestamps the data plane (arrival times, throughput).
    /// Broker redelivery runs on wall time regardless.
    pub fn new(config: GatewayConfig, clock: Arc<dyn Clock>) -> Result<Arc<Self>, GatewayError> {
        config.validate()?;
        let identity = config.identity()?;
        let store = match &config.readings_log {
            Some(path) => ReadingStore::open(path, config.max_log_bytes)
                .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?,
            None => ReadingStore::in_memory(config.max_log_bytes),
        };
        let broker = Broker::new(BrokerConfig { retry_interval: config.retry_interval() }, Arc::new(SystemClock));
        let retention = Duration::seconds((config.throughput_window_s.ceil() as i64).max(MIN_RETENTION_S));
        let (events, _) = broadcast::channel(EVENT_CAPACITY);
        Ok(Arc::new(Self {
            identity,
            clock,
            broker,
            registry: RwLock::new(Registry::new()),
            alarms: RwLock::new(Vec::new()),
            throughput: Mutex::new(ThroughputWindow::new(retention)),
            store,
            events,
            uplink: OnceLock::new(),
            ingest_lock: Mutex::new(()),
            host: Mutex::new((HostSampler::new(), VecDeque::new())),
            counters: Counters::default(),
            config,
        }))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn identity(&self) -> &GatewayIdentity {
        &self.identity
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Embedded broker carrying node configuration.
    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn store(&self) -> &ReadingStore {
        &self.store
    }

    pub fn subscribe_events(&self) -> broadcast::Receiver<GatewayEvent> {
        self.events.subscribe()
    }

    /// Routes uplink publishes into `tx` instead of the embedded broker.
    /// Only the first call has an effect.
    pub fn attach_uplink(&self, tx: mpsc::Sender<UplinkMessage>) -> bool {
        self.uplink.set(tx).is_ok()
    }

    fn emit(&self, event: GatewayEvent) {
        // No subscribers is fine.
        let _ = self.events.send(event);
    }

    pub(crate) fn diagnostic(&self, kind: DiagnosticKind, protocol: Option<ProtocolId>, message: String) {
        debug!(?kind, ?protocol, "{message}");
        self.emit(GatewayEvent::Diagnostic(Diagnostic { timestamp: self.clock.now(), kind, protocol, message }));
    }

    fn count_error(&self, protocol: ProtocolId, kind: DiagnosticKind, message: String) {
        self.counters.errors[protocol_index(protocol)].fetch_add(1, Ordering::Relaxed);
        self.diagnostic(kind, Some(protocol), message);
    }

    pub fn counters(&self) -> IngestCounters {
        let c = &self.counters;
        let load = |a: &AtomicU64| a.load(Ordering::SeqCst);
        IngestCounters {
            frames_processed: load(&c.frames_processed),
            reading_frames: load(&c.reading_frames),
            announces: load(&c.announces),
            readings_persisted: load(&c.readings_persisted),
            uplink_published: load(&c.uplink_published),
            uplink_acked: load(&c.uplink_acked),
            uplink_dropped: load(&c.uplink_dropped),
            alarms_fired: load(&c.alarms_fired),
            errors: ErrorCounts {
                wifi: load(&c.errors[0]),
                bluetooth: load(&c.errors[1]),
                zigbee: load(&c.errors[2]),
            },
        }
    }

    pub(crate) fn note_uplink_acked(&self) {
        self.counters.uplink_acked.fetch_add(1, Ordering::SeqCst);
    }

    pub(crate) fn note_uplink_dropped(&self) {
        self.counters.uplink_dropped.fetch_add(1, Ordering::SeqCst);
    }

    // ---- registry ----

    pub fn nodes(&self) -> Vec<NodeStatus> {
        self.registry.read().unwrap().iter().cloned().collect()
    }

    pub fn node(&self, node_id: &str) -> Option<NodeStatus> {
        self.registry.read().unwrap().get(node_id).cloned()
    }

    /// Registers or updates a node and publishes its configuration retained.
    pub fn register_node(&self, descriptor: NodeDescriptor) -> Result<NodeStatus, GatewayError> {
        let (status, fresh) = {
            let mut reg = self.registry.write().unwrap();
            let before = reg.get(&descriptor.node_id).map(|s| s.revision);
            let status = reg.register(descriptor)?.clone();
            (status.clone(), before != Some(status.revision))
        };
        self.publish_config(&status);
        if fresh {
            self.emit(GatewayEvent::NodeRegistered {
                node_id: status.descriptor.node_id.clone(),
                revision: status.revision,
            });
        }
        Ok(status)
    }

    pub fn set_capture_interval(&self, node_id: &str, seconds: u32) -> Result<NodeStatus, GatewayError> {
        let status = self.registry.write().unwrap().set_capture_interval(node_id, seconds)?.clone();
        self.publish_config(&status);
        Ok(status)
    }

    pub fn assign_protocol(&self, node_id: &str, sensor_id: &str, protocol: ProtocolId) -> Result<NodeStatus, GatewayError> {
        let status = self.registry.write().unwrap().assign_protocol(node_id, sensor_id, protocol)?.clone();
        self.publish_config(&status);
        Ok(status)
    }

    fn publish_config(&self, status: &NodeStatus) {
        let topic = config_topic(&self.identity.gate_id, &status.descriptor.node_id);
        let payload = serde_json::to_vec(&status.config()).expect("config serialization is infallible");
        if let Err(e) = self.broker.publish_local(&topic, payload, QoS::AtLeastOnce, true) {
            // Node ids are validated tokens, so the topic is always valid.
            warn!("config publish on {topic} failed: {e}");
        }
    }

    // ---- alarms ----

    pub fn alarms(&self) -> Vec<AlarmRule> {
        self.alarms.read().unwrap().clone()
    }

    pub fn add_alarm(&self, rule: AlarmRule) -> Result<AlarmRule, GatewayError> {
        rule.validate().map_err(|e| GatewayError::InvalidAlarm(e.to_string()))?;
        let mut alarms = self.alarms.write().unwrap();
        if alarms.iter().any(|r| r.rule_id == rule.rule_id) {
            return Err(GatewayError::DuplicateAlarm(rule.rule_id));
        }
        alarms.push(rule.clone());
        Ok(rule)
    }

    pub fn remove_alarm(&self, rule_id: &str) -> Result<AlarmRule, GatewayError> {
        let mut alarms = self.alarms.write().unwrap();
        let idx = alarms
            .iter()
            .position(|r| r.rule_id == rule_id)
            .ok_or_else(|| GatewayError::UnknownAlarm(rule_id.into()))?;
        Ok(alarms.remove(idx))
    }

    // ---- metrics ----

    /// kbps received on `protocol` over the last `window_s` seconds.
    pub fn throughput(&self, protocol: ProtocolId, node_id: Option<&str>, window_s: f64) -> f64 {
        let now = self.clock.now();
        self.throughput.lock().unwrap().throughput(protocol, node_id, now, window_s)
    }

    pub fn throughput_nodes(&self, protocol: ProtocolId) -> Vec<String> {
        self.throughput.lock().unwrap().nodes(protocol)
    }

    /// Takes one host sample and appends it (or a gap) to the series.
    pub fn sample_host_stats(&self) -> Result<super::HostStats, StatsError> {
        let mut guard = self.host.lock().unwrap();
        let (sampler, series) = &mut *guard;
        let now = chrono::Utc::now();
        let result = sampler.sample(now);
        let entry = match &result {
            Ok(s) => HostSample::Stats(s.clone()),
            Err(e) => HostSample::Gap { timestamp: sampler.stamp(now), gap: true, reason: e.to_string() },
        };
        series.push_back(entry);
        if series.len() > HOST_SERIES_LEN {
            series.pop_front();
        }
        drop(guard);
        if let Err(e) = &result {
            self.diagnostic(DiagnosticKind::HostStats, None, e.to_string());
        }
        result
    }

    pub fn host_series(&self) -> Vec<HostSample> {
        self.host.lock().unwrap().1.iter().cloned().collect()
    }

    // ---- persistence ----

    pub fn query_readings(
        &self,
        since: Option<chrono::DateTime<chrono::Utc>>,
        node_id: Option<&str>,
        sensor_id: Option<&str>,
    ) -> Result<QueryResult, GatewayError> {
        Ok(self.store.query(since, node_id, sensor_id)?)
    }

    // ---- ingest ----

    /// A frame the listener could not decode. Counted, never fatal.
    pub fn ingest_decode_error(&self, arrival: ProtocolId, err: &DecodeError) {
        let _serial = self.ingest_lock.lock().unwrap();
        self.count_error(arrival, DiagnosticKind::Decode, format!("{arrival}: {err}"));
        self.counters.frames_processed.fetch_add(1, Ordering::SeqCst);
    }

    /// Runs one received frame through the pipeline: throughput accounting,
    /// extraction, lookup, normalization, persistence, alarms, uplink.
    /// Failures are counted per protocol and reported as diagnostics.
    pub fn ingest(&self, frame: &RawFrame, arrival: ProtocolId, rx_bytes: usize) {
        let _serial = self.ingest_lock.lock().unwrap();
        self.ingest_locked(frame, arrival, rx_bytes);
        self.counters.frames_processed.fetch_add(1, Ordering::SeqCst);
    }

    fn ingest_locked(&self, frame: &RawFrame, arrival: ProtocolId, rx_bytes: usize) {
        let now = self.clock.now();
        let uplink = extract_uplink(frame);
        let node_key = uplink.as_ref().map(|u| u.node_id()).unwrap_or(UNKNOWN_NODE);
        self.throughput.lock().unwrap().record(arrival, node_key, now, rx_bytes as u64);

        match uplink {
            Err(e) => self.count_error(arrival, DiagnosticKind::Normalize, e.to_string()),
            Ok(Uplink::Announce { descriptor, .. }) => {
                self.counters.announces.fetch_add(1, Ordering::SeqCst);
                let node_id = descriptor.node_id.clone();
                match self.register_node(descriptor) {
                    Ok(_) => self.registry.write().unwrap().touch(&node_id, now),
                    Err(e) => self.count_error(arrival, DiagnosticKind::Registration, e.to_string()),
                }
            }
            Ok(Uplink::Reading(rec)) => {
                self.counters.reading_frames.fetch_add(1, Ordering::SeqCst);
                let node = self.registry.read().unwrap().get(&rec.node_id).map(|s| s.descriptor.clone());
                let Some(node) = node else {
                    let e = RegistryError::UnknownNode(rec.node_id);
                    return self.count_error(arrival, DiagnosticKind::Normalize, e.to_string());
                };
                match build_normalized(&rec, arrival, &node, &self.identity) {
                    Ok(reading) => self.accept(reading, arrival, now),
                    Err(e) => self.count_error(arrival, DiagnosticKind::Normalize, e.to_string()),
                }
            }
        }
    }

    fn accept(&self, reading: NormalizedReading, arrival: ProtocolId, now: chrono::DateTime<chrono::Utc>) {
        if let Err(e) = self.store.append(&reading) {
            return self.count_error(arrival, DiagnosticKind::Storage, e.to_string());
        }
        self.counters.readings_persisted.fetch_add(1, Ordering::SeqCst);
        self.registry.write().unwrap().touch(reading.node_id(), now);
        self.emit(GatewayEvent::Reading { reading: reading.clone() });

        let fired: Vec<AlarmEvent> = self
            .alarms
            .read()
            .unwrap()
            .iter()
            .filter(|rule| rule_matches(rule, &reading))
            .map(|rule| AlarmEvent::new(rule, &reading))
            .collect();
        for event in fired {
            self.counters.alarms_fired.fetch_add(1, Ordering::SeqCst);
            self.emit(GatewayEvent::Alarm(event));
        }

        let topic = uplink_topic(&self.identity.gate_id, reading.node_id(), reading.sensor_id());
        let payload = serialize_reading(&reading);
        match self.uplink.get() {
            Some(tx) => match tx.try_send(UplinkMessage { topic, payload }) {
                Ok(()) => {
                    self.counters.uplink_published.fetch_add(1, Ordering::SeqCst);
                }
                Err(e) => {
                    self.note_uplink_dropped();
                    self.diagnostic(DiagnosticKind::Uplink, Some(arrival), format!("uplink buffer: {e}; reading dropped"));
                }
            },
            None => match self.broker.publish_local(&topic, payload, QoS::AtLeastOnce, false) {
                Ok(()) => {
                    self.counters.uplink_published.fetch_add(1, Ordering::SeqCst);
                }
                Err(e) => self.diagnostic(DiagnosticKind::Uplink, Some(arrival), e.to_string()),
            },
        }
    }
}
