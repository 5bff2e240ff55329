//! Embedded MQTT broker.
//!
//! [`Broker`] holds all routing state and reacts to decoded packets; it never
//! touches sockets. [`serve`] wires it to a TCP listener, and tests can drive
//! it directly through [`Broker::open_session`] / [`Broker::handle`].

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, Utc};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::{JoinHandle, JoinSet};
use tracing::{debug, warn};

use super::packet::{decode_packet, ConnectReturnCode, MqttPacket, PacketError, Publish, QoS, SubackCode};
use super::topic::{topic_matches, valid_topic_filter};
use crate::clock::Clock;

pub type SessionId = u64;

/// Default time before an unacknowledged QoS 1 delivery is resent.
pub const DEFAULT_RETRY_INTERVAL: Duration = Duration::seconds(2);
const RECENT_IDS: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error(transparent)]
    Packet(#[from] PacketError),
}

/// What the connection driver should do after a packet was handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Close,
}

/// Message to a session's writer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    Packet(MqttPacket),
    Close,
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub retry_interval: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self { retry_interval: DEFAULT_RETRY_INTERVAL }
    }
}

#[derive(Debug)]
struct Inflight {
    publish: Publish,
    sent_at: DateTime<Utc>,
}

/// Packet ids seen recently, for suppressing duplicate QoS 1 deliveries.
#[derive(Debug, Default)]
pub(crate) struct RecentIds {
    order: VecDeque<u16>,
    set: HashSet<u16>,
}

impl RecentIds {
    /// Records `id` and reports whether the message is a duplicate, i.e. it
    /// carries the dup flag and the id was already seen.
    pub(crate) fn is_duplicate(&mut self, id: u16, dup: bool) -> bool {
        if dup && self.set.contains(&id) {
            return true;
        }
        if self.set.insert(id) {
            self.order.push_back(id);
            if self.order.len() > RECENT_IDS {
                if let Some(old) = self.order.pop_front() {
                    self.set.remove(&old);
                }
            }
        }
        false
    }
}

#[derive(Debug)]
struct Session {
    client_id: Option<String>,
    tx: mpsc::UnboundedSender<Outbound>,
    subscriptions: BTreeMap<String, QoS>,
    next_packet_id: u16,
    inflight: BTreeMap<u16, Inflight>,
    recent_incoming: RecentIds,
}

impl Session {
    fn send(&self, p: MqttPacket) {
        let _ = self.tx.send(Outbound::Packet(p));
    }

    fn allocate_packet_id(&mut self) -> u16 {
        loop {
            self.next_packet_id = self.next_packet_id.wrapping_add(1);
            if self.next_packet_id != 0 && !self.inflight.contains_key(&self.next_packet_id) {
                return self.next_packet_id;
            }
        }
    }

    /// Highest QoS granted by any filter matching `topic`.
    fn best_match(&self, topic: &str) -> Option<QoS> {
        self.subscriptions
            .iter()
            .filter(|(f, _)| topic_matches(f, topic))
            .map(|(_, q)| *q)
            .max()
    }

    fn deliver(&mut self, topic: &str, payload: &[u8], qos: QoS, retain: bool, now: DateTime<Utc>) {
        let mut publish = Publish::new(topic, payload.to_vec(), qos);
        publish.retain = retain;
        if qos == QoS::AtLeastOnce {
            let id = self.allocate_packet_id();
            publish.packet_id = Some(id);
            self.inflight.insert(id, Inflight { publish: publish.clone(), sent_at: now });
        }
        self.send(MqttPacket::Publish(publish));
    }
}

#[derive(Debug, Default)]
struct State {
    next_session: SessionId,
    sessions: HashMap<SessionId, Session>,
    by_client: HashMap<String, SessionId>,
    retained: BTreeMap<String, Publish>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BrokerStats {
    /// PUBLISH packets accepted from clients or injected locally.
    pub received: u64,
    /// Duplicates dropped on arrival.
    pub duplicates: u64,
    /// First-time deliveries to sessions.
    pub delivered: u64,
    /// Redeliveries with the dup flag.
    pub resent: u64,
}

pub struct Broker {
    config: BrokerConfig,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
    received: AtomicU64,
    duplicates: AtomicU64,
    delivered: AtomicU64,
    resent: AtomicU64,
}

impl Broker {
    pub fn new(config: BrokerConfig, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Self {
            config,
            clock,
            state: Mutex::new(State::default()),
            received: AtomicU64::new(0),
            duplicates: AtomicU64::new(0),
            delivered: AtomicU64::new(0),
            resent: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn stats(&self) -> BrokerStats {
        BrokerStats {
            received: self.received.load(Ordering::Relaxed),
            duplicates: self.duplicates.load(Ordering::Relaxed),
            delivered: self.delivered.load(Ordering::Relaxed),
            resent: self.resent.load(Ordering::Relaxed),
        }
    }

    /// Registers a new, not yet connected session writing to `tx`.
    pub fn open_session(&self, tx: mpsc::UnboundedSender<Outbound>) -> SessionId {
        let mut st = self.state.lock().unwrap();
        st.next_session += 1;
        let id = st.next_session;
        st.sessions.insert(
            id,
            Session {
                client_id: None,
                tx,
                subscriptions: BTreeMap::new(),
                next_packet_id: 0,
                inflight: BTreeMap::new(),
                recent_incoming: RecentIds::default(),
            },
        );
        id
    }

    pub fn close_session(&self, id: SessionId) {
        let mut st = self.state.lock().unwrap();
        if let Some(s) = st.sessions.remove(&id) {
            if let Some(cid) = s.client_id {
                if st.by_client.get(&cid) == Some(&id) {
                    st.by_client.remove(&cid);
                }
            }
        }
    }

    pub fn session_count(&self) -> usize {
        self.state.lock().unwrap().sessions.len()
    }

    pub fn inflight_count(&self, id: SessionId) -> usize {
        self.state.lock().unwrap().sessions.get(&id).map_or(0, |s| s.inflight.len())
    }

    pub fn retained(&self, topic: &str) -> Option<Publish> {
        self.state.lock().unwrap().retained.get(topic).cloned()
    }

    /// Reacts to one packet from a session. Every state change happens under
    /// a single lock, so concurrent sessions observe a total order.
    pub fn handle(&self, id: SessionId, packet: MqttPacket) -> Result<Flow, BrokerError> {
        let now = self.clock.now();
        let mut guard = self.state.lock().unwrap();
        let st = &mut *guard;
        let session = st.sessions.get_mut(&id).ok_or(BrokerError::UnknownSession(id))?;
        let connected = session.client_id.is_some();

        match packet {
            MqttPacket::Connect { client_id, .. } => {
                if connected {
                    return Err(BrokerError::ProtocolViolation("second CONNECT".into()));
                }
                let client_id =
                    if client_id.is_empty() { format!("anon-{id}") } else { client_id };
                session.client_id = Some(client_id.clone());
                session.send(MqttPacket::Connack {
                    session_present: false,
                    code: ConnectReturnCode::Accepted,
                });
                if let Some(old) = st.by_client.insert(client_id, id) {
                    if let Some(prev) = st.sessions.remove(&old) {
                        debug!(session = old, "session taken over");
                        let _ = prev.tx.send(Outbound::Close);
                    }
                }
                Ok(Flow::Continue)
            }
            _ if !connected => Err(BrokerError::ProtocolViolation("packet before CONNECT".into())),
            MqttPacket::Publish(p) => {
                if let Some(pid) = p.packet_id {
                    session.send(MqttPacket::Puback { packet_id: pid });
                    if session.recent_incoming.is_duplicate(pid, p.dup) {
                        self.duplicates.fetch_add(1, Ordering::Relaxed);
                        return Ok(Flow::Continue);
                    }
                }
                self.route(st, p, now);
                Ok(Flow::Continue)
            }
            MqttPacket::Puback { packet_id } => {
                session.inflight.remove(&packet_id);
                Ok(Flow::Continue)
            }
            MqttPacket::Subscribe { packet_id, filters } => {
                let mut granted = Vec::with_capacity(filters.len());
                let mut accepted = Vec::new();
                for (filter, qos) in filters {
                    if valid_topic_filter(&filter) {
                        session.subscriptions.insert(filter.clone(), qos);
                        accepted.push((filter, qos));
                        granted.push(SubackCode::Granted(qos));
                    } else {
                        granted.push(SubackCode::Failure);
                    }
                }
                session.send(MqttPacket::Suback { packet_id, granted });
                for (topic, msg) in &st.retained {
                    let best = accepted
                        .iter()
                        .filter(|(f, _)| topic_matches(f, topic))
                        .map(|(_, q)| *q)
                        .max();
                    if let Some(sub_qos) = best {
                        session.deliver(topic, &msg.payload, msg.qos.min(sub_qos), true, now);
                        self.delivered.fetch_add(1, Ordering::Relaxed);
                    }
                }
                Ok(Flow::Continue)
            }
            MqttPacket::Pingreq => {
                session.send(MqttPacket::Pingresp);
                Ok(Flow::Continue)
            }
            MqttPacket::Disconnect => Ok(Flow::Close),
            other => Err(BrokerError::ProtocolViolation(format!(
                "client sent a server-only packet: {other:?}"
            ))),
        }
    }

    fn route(&self, st: &mut State, p: Publish, now: DateTime<Utc>) {
        self.received.fetch_add(1, Ordering::Relaxed);
        if p.retain {
            if p.payload.is_empty() {
                st.retained.remove(&p.topic);
            } else {
                let mut stored = p.clone();
                stored.dup = false;
                stored.packet_id = None;
                st.retained.insert(p.topic.clone(), stored);
            }
        }
        for session in st.sessions.values_mut() {
            if session.client_id.is_none() {
                continue;
            }
            if let Some(sub_qos) = session.best_match(&p.topic) {
                session.deliver(&p.topic, &p.payload, p.qos.min(sub_qos), false, now);
                self.delivered.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Publishes from inside the broker's process, as if from a client.
    pub fn publish_local(&self, topic: &str, payload: Vec<u8>, qos: QoS, retain: bool) -> Result<(), BrokerError> {
        let mut p = Publish::new(topic, payload, qos);
        p.retain = retain;
        if qos == QoS::AtLeastOnce {
            // Any nonzero id satisfies validation; it is never sent as-is.
            p.packet_id = Some(1);
        }
        p.validate()?;
        let now = self.clock.now();
        let mut st = self.state.lock().unwrap();
        self.route(&mut st, p, now);
        Ok(())
    }

    /// Resends every QoS 1 delivery that has waited at least the retry
    /// interval, with the dup flag set. Returns how many were resent.
    pub fn resend_expired(&self) -> usize {
        let now = self.clock.now();
        let retry = self.config.retry_interval;
        let mut st = self.state.lock().unwrap();
        let mut count = 0;
        for session in st.sessions.values_mut() {
            let mut resend = Vec::new();
            for inflight in session.inflight.values_mut() {
                if now - inflight.sent_at >= retry {
                    inflight.sent_at = now;
                    let mut p = inflight.publish.clone();
                    p.dup = true;
                    resend.push(p);
                }
            }
            for p in resend {
                session.send(MqttPacket::Publish(p));
                count += 1;
            }
        }
        self.resent.fetch_add(count as u64, Ordering::Relaxed);
        count
    }
}

/// A broker listening on a TCP socket.
pub struct BrokerServer {
    broker: Arc<Broker>,
    local_addr: SocketAddr,
    task: JoinHandle<()>,
}

impl BrokerServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    /// Stops accepting and drops every open connection.
    pub fn shutdown(&self) {
        self.task.abort();
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Binds `addr` and serves `broker` on it until shut down. A retry ticker
/// polls for expired QoS 1 deliveries every `tick`.
pub async fn serve(broker: Arc<Broker>, addr: &str, tick: StdDuration) -> io::Result<BrokerServer> {
    let listener = TcpListener::bind(addr).await?;
    Ok(serve_listener(broker, listener, tick))
}

pub fn serve_listener(broker: Arc<Broker>, listener: TcpListener, tick: StdDuration) -> BrokerServer {
    let local_addr = listener.local_addr().expect("bound listener has an address");
    let b = Arc::clone(&broker);
    let task = tokio::spawn(async move {
        let mut conns = JoinSet::new();
        let retry = Arc::clone(&b);
        conns.spawn(async move {
            let mut interval = tokio::time::interval(tick);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                retry.resend_expired();
            }
        });
        loop {
            tokio::select! {
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let _ = stream.set_nodelay(true);
                        conns.spawn(run_connection(Arc::clone(&b), stream, peer));
                    }
                    Err(e) => warn!("broker accept failed: {e}"),
                },
                Some(_) = conns.join_next(), if !conns.is_empty() => {}
            }
        }
    });
    BrokerServer { broker, local_addr, task }
}

async fn run_connection(broker: Arc<Broker>, stream: TcpStream, peer: SocketAddr) {
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel();
    let id = broker.open_session(tx);

    let writer = tokio::spawn(async move {
        let mut buf = Vec::new();
        while let Some(out) = rx.recv().await {
            match out {
                Outbound::Packet(p) => {
                    buf.clear();
                    if p.encode_into(&mut buf).is_err() || wr.write_all(&buf).await.is_err() {
                        break;
                    }
                }
                Outbound::Close => break,
            }
        }
        let _ = wr.shutdown().await;
    });

    let mut buf = Vec::with_capacity(4096);
    let mut chunk = [0u8; 4096];
    'conn: loop {
        loop {
            match decode_packet(&buf) {
                Ok((packet, used)) => {
                    buf.drain(..used);
                    match broker.handle(id, packet) {
                        Ok(Flow::Continue) => {}
                        Ok(Flow::Close) => break 'conn,
                        Err(e) => {
                            debug!(%peer, "closing session: {e}");
                            break 'conn;
                        }
                    }
                }
                Err(PacketError::NeedMoreData) => break,
                Err(e) => {
                    debug!(%peer, "closing session on bad packet: {e}");
                    break 'conn;
                }
            }
        }
        match rd.read(&mut chunk).await {
            Ok(0) | Err(_) => break,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
        }
    }
    broker.close_session(id);
    let _ = writer.await;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use chrono::TimeZone;

    struct TestSession {
        id: SessionId,
        rx: mpsc::UnboundedReceiver<Outbound>,
    }

    impl TestSession {
        fn open(broker: &Broker, client_id: &str) -> Self {
            let (tx, rx) = mpsc::unbounded_channel();
            let id = broker.open_session(tx);
            let mut s = Self { id, rx };
            broker
                .handle(id, MqttPacket::Connect { client_id: client_id.into(), keep_alive: 30 })
                .unwrap();
            assert!(matches!(s.next(), Some(MqttPacket::Connack { .. })));
            s
        }

        fn next(&mut self) -> Option<MqttPacket> {
            match self.rx.try_recv() {
                Ok(Outbound::Packet(p)) => Some(p),
                _ => None,
            }
        }

        fn drain(&mut self) -> Vec<MqttPacket> {
            std::iter::from_fn(|| self.next()).collect()
        }

        fn publishes(&mut self) -> Vec<Publish> {
            self.drain()
                .into_iter()
                .filter_map(|p| match p {
                    MqttPacket::Publish(p) => Some(p),
                    _ => None,
                })
                .collect()
        }

        fn subscribe(&mut self, broker: &Broker, filter: &str, qos: QoS) {
            broker
                .handle(self.id, MqttPacket::Subscribe { packet_id: 1, filters: vec![(filter.into(), qos)] })
                .unwrap();
        }
    }

    fn setup() -> (Arc<Broker>, VirtualClock) {
        let clock = VirtualClock::new(Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap());
        (Broker::new(BrokerConfig::default(), Arc::new(clock.clone())), clock)
    }

    fn publish(topic: &str, payload: &[u8], qos: QoS, id: Option<u16>, retain: bool) -> MqttPacket {
        let mut p = Publish::new(topic, payload.to_vec(), qos);
        p.packet_id = id;
        p.retain = retain;
        MqttPacket::Publish(p)
    }

    #[test]
    fn packets_before_connect_are_violations() {
        let (broker, _) = setup();
        let (tx, _rx) = mpsc::unbounded_channel();
        let id = broker.open_session(tx);
        assert!(broker.handle(id, MqttPacket::Pingreq).is_err());
    }

    #[test]
    fn ping_is_answered() {
        let (broker, _) = setup();
        let mut s = TestSession::open(&broker, "c");
        broker.handle(s.id, MqttPacket::Pingreq).unwrap();
        assert_eq!(s.next(), Some(MqttPacket::Pingresp));
        assert_eq!(broker.handle(s.id, MqttPacket::Disconnect), Ok(Flow::Close));
    }

    #[test]
    fn late_subscriber_gets_retained_config() {
        let (broker, _) = setup();
        let mut early = TestSession::open(&broker, "early");
        early.subscribe(&broker, "cfg/n1", QoS::AtLeastOnce);
        early.drain();

        let publisher = TestSession::open(&broker, "pub");
        broker.handle(publisher.id, publish("cfg/n1", b"interval=6", QoS::AtLeastOnce, Some(5), true)).unwrap();
        let live = early.publishes();
        assert_eq!(live.len(), 1);
        assert!(!live[0].retain);

        let mut late = TestSession::open(&broker, "late");
        late.subscribe(&broker, "cfg/+", QoS::AtLeastOnce);
        let got = late.drain();
        assert!(matches!(got[0], MqttPacket::Suback { .. }));
        match &got[1] {
            MqttPacket::Publish(p) => {
                assert_eq!(p.topic, "cfg/n1");
                assert_eq!(p.payload, b"interval=6");
                assert!(p.retain);
                assert_eq!(p.qos, QoS::AtLeastOnce);
            }
            other => panic!("expected retained publish, got {other:?}"),
        }

        // Empty retained payload clears the slot.
        broker.publish_local("cfg/n1", vec![], QoS::AtMostOnce, true).unwrap();
        assert!(broker.retained("cfg/n1").is_none());
    }

    #[test]
    fn withheld_puback_triggers_dup_redelivery() {
        let (broker, clock) = setup();
        let mut sub = TestSession::open(&broker, "sub");
        sub.subscribe(&broker, "dat/#", QoS::AtLeastOnce);
        sub.drain();

        broker.publish_local("dat/gw1/n1/temp", b"25".to_vec(), QoS::AtLeastOnce, false).unwrap();
        let first = sub.publishes();
        assert_eq!(first.len(), 1);
        assert!(!first[0].dup);
        let pid = first[0].packet_id.unwrap();

        clock.advance(Duration::milliseconds(1999));
        assert_eq!(broker.resend_expired(), 0);
        clock.advance(Duration::milliseconds(1));
        assert_eq!(broker.resend_expired(), 1);
        let again = sub.publishes();
        assert_eq!(again.len(), 1);
        assert!(again[0].dup);
        assert_eq!(again[0].packet_id, Some(pid));
        assert_eq!(again[0].payload, b"25");

        broker.handle(sub.id, MqttPacket::Puback { packet_id: pid }).unwrap();
        clock.advance(Duration::seconds(10));
        assert_eq!(broker.resend_expired(), 0);
        assert_eq!(broker.inflight_count(sub.id), 0);
    }

    #[test]
    fn overlapping_filters_deliver_once_at_best_qos() {
        let (broker, _) = setup();
        let mut a = TestSession::open(&broker, "a");
        broker
            .handle(
                a.id,
                MqttPacket::Subscribe {
                    packet_id: 1,
                    filters: vec![("a/+".into(), QoS::AtMostOnce), ("a/#".into(), QoS::AtLeastOnce)],
                },
            )
            .unwrap();
        let mut b = TestSession::open(&broker, "b");
        b.subscribe(&broker, "a/#", QoS::AtMostOnce);
        a.drain();
        b.drain();

        broker.publish_local("a/x", b"m".to_vec(), QoS::AtLeastOnce, false).unwrap();
        let got_a = a.publishes();
        let got_b = b.publishes();
        assert_eq!(got_a.len(), 1);
        assert_eq!(got_a[0].qos, QoS::AtLeastOnce);
        assert_eq!(got_b.len(), 1);
        assert_eq!(got_b[0].qos, QoS::AtMostOnce);
    }

    #[test]
    fn duplicate_incoming_publish_is_acked_but_not_routed() {
        let (broker, _) = setup();
        let mut sub = TestSession::open(&broker, "sub");
        sub.subscribe(&broker, "t", QoS::AtMostOnce);
        sub.drain();
        let mut pubr = TestSession::open(&broker, "pub");
        broker.handle(pubr.id, publish("t", b"1", QoS::AtLeastOnce, Some(9), false)).unwrap();
        let mut dup = Publish::new("t", b"1".to_vec(), QoS::AtLeastOnce);
        dup.packet_id = Some(9);
        dup.dup = true;
        broker.handle(pubr.id, MqttPacket::Publish(dup)).unwrap();
        assert_eq!(pubr.drain(), vec![MqttPacket::Puback { packet_id: 9 }; 2]);
        assert_eq!(sub.publishes().len(), 1);
        assert_eq!(broker.stats().duplicates, 1);
    }

    #[test]
    fn client_id_takeover_closes_old_session() {
        let (broker, _) = setup();
        let mut first = TestSession::open(&broker, "same");
        let _second = TestSession::open(&broker, "same");
        assert_eq!(first.rx.try_recv().ok(), Some(Outbound::Close));
        assert_eq!(broker.session_count(), 1);
    }
}
