//! Publisher/subscriber client with QoS 1 retries.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration as StdDuration, Instant};

use chrono::{DateTime, Duration, Utc};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot, Mutex as AsyncMutex};
use tokio::task::JoinHandle;

use super::broker::RecentIds;
use super::packet::{decode_packet, ConnectReturnCode, MqttPacket, PacketError, Publish, QoS, SubackCode};
use super::topic::{valid_topic_filter, valid_topic_name};
use crate::clock::Clock;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("not connected")]
    NotConnected,
    #[error("no acknowledgement after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("connection refused: {0:?}")]
    Refused(ConnectReturnCode),
    #[error("subscription to {0:?} rejected")]
    SubscribeRejected(String),
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Packet(#[from] PacketError),
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub client_id: String,
    /// Seconds; zero disables pings.
    pub keep_alive: u16,
    pub retry_interval: Duration,
    /// Resends allowed before a delivery fails with `Timeout`.
    pub retry_budget: u32,
    pub connect_timeout: StdDuration,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            keep_alive: 30,
            retry_interval: Duration::seconds(2),
            retry_budget: 5,
            connect_timeout: StdDuration::from_secs(5),
        }
    }
}

type Completion = oneshot::Sender<Result<(), ClientError>>;

struct PendingPublish {
    publish: Publish,
    sent_at: DateTime<Utc>,
    attempts: u32,
    done: Completion,
}

#[derive(Default)]
struct State {
    next_packet_id: u16,
    publishes: HashMap<u16, PendingPublish>,
    subscribes: HashMap<u16, oneshot::Sender<Vec<SubackCode>>>,
    recent_incoming: RecentIds,
}

impl State {
    fn allocate_packet_id(&mut self) -> u16 {
        loop {
            self.next_packet_id = self.next_packet_id.wrapping_add(1);
            let id = self.next_packet_id;
            if id != 0 && !self.publishes.contains_key(&id) && !self.subscribes.contains_key(&id) {
                return id;
            }
        }
    }

    fn fail_all(&mut self) {
        for (_, p) in self.publishes.drain() {
            let _ = p.done.send(Err(ClientError::NotConnected));
        }
        self.subscribes.clear();
    }
}

struct Shared {
    opts: ClientOptions,
    clock: Arc<dyn Clock>,
    connected: AtomicBool,
    state: Mutex<State>,
    out: mpsc::UnboundedSender<MqttPacket>,
    last_send: Mutex<Instant>,
}

impl Shared {
    fn send(&self, p: MqttPacket) -> Result<(), ClientError> {
        if !self.connected.load(Ordering::SeqCst) {
            return Err(ClientError::NotConnected);
        }
        *self.last_send.lock().unwrap() = Instant::now();
        self.out.send(p).map_err(|_| ClientError::NotConnected)
    }

    fn disconnected(&self) {
        self.connected.store(false, Ordering::SeqCst);
        self.state.lock().unwrap().fail_all();
    }
}

/// Resolves when a publish is acknowledged (immediately for QoS 0).
#[must_use = "a delivery token does nothing unless awaited"]
pub struct DeliveryToken {
    rx: Option<oneshot::Receiver<Result<(), ClientError>>>,
}

impl DeliveryToken {
    pub fn is_immediate(&self) -> bool {
        self.rx.is_none()
    }

    pub async fn wait(self) -> Result<(), ClientError> {
        match self.rx {
            None => Ok(()),
            Some(rx) => rx.await.unwrap_or(Err(ClientError::NotConnected)),
        }
    }
}

/// A connected client session.
pub struct MqttClient {
    shared: Arc<Shared>,
    incoming: AsyncMutex<mpsc::UnboundedReceiver<Publish>>,
    tasks: Vec<JoinHandle<()>>,
}

impl MqttClient {
    /// Opens a TCP connection and completes the CONNECT/CONNACK exchange.
    pub async fn connect(addr: &str, opts: ClientOptions, clock: Arc<dyn Clock>) -> Result<Self, ClientError> {
        let io_err = |e: std::io::Error| ClientError::Io(e.to_string());
        let stream = tokio::time::timeout(opts.connect_timeout, TcpStream::connect(addr))
            .await
            .map_err(|_| ClientError::Io(format!("connect to {addr} timed out")))?
            .map_err(io_err)?;
        stream.set_nodelay(true).map_err(io_err)?;
        let (mut rd, mut wr) = stream.into_split();

        let connect = MqttPacket::Connect { client_id: opts.client_id.clone(), keep_alive: opts.keep_alive };
        wr.write_all(&connect.encode()?).await.map_err(io_err)?;

        let mut buf = Vec::new();
        let connack = tokio::time::timeout(opts.connect_timeout, read_packet(&mut rd, &mut buf))
            .await
            .map_err(|_| ClientError::Io("no CONNACK".into()))??;
        match connack {
            MqttPacket::Connack { code: ConnectReturnCode::Accepted, .. } => {}
            MqttPacket::Connack { code, .. } => return Err(ClientError::Refused(code)),
            other => {
                return Err(ClientError::Packet(PacketError::ProtocolViolation(format!(
                    "expected CONNACK, got {other:?}"
                ))))
            }
        }

        let (out_tx, out_rx) = mpsc::unbounded_channel();
        let (in_tx, in_rx) = mpsc::unbounded_channel();
        let shared = Arc::new(Shared {
            opts,
            clock,
            connected: AtomicBool::new(true),
            state: Mutex::new(State::default()),
            out: out_tx,
            last_send: Mutex::new(Instant::now()),
        });

        let tasks = vec![
            tokio::spawn(write_loop(Arc::clone(&shared), wr, out_rx)),
            tokio::spawn(read_loop(Arc::clone(&shared), rd, buf, in_tx)),
            tokio::spawn(retry_loop(Arc::downgrade(&shared))),
        ];
        Ok(Self { shared, incoming: AsyncMutex::new(in_rx), tasks })
    }

    pub fn client_id(&self) -> &str {
        &self.shared.opts.client_id
    }

    pub fn is_connected(&self) -> bool {
        self.shared.connected.load(Ordering::SeqCst)
    }

    pub fn publish(&self, topic: &str, payload: Vec<u8>, qos: QoS, retain: bool) -> Result<DeliveryToken, ClientError> {
        if !self.is_connected() {
            return Err(ClientError::NotConnected);
        }
        if !valid_topic_name(topic) {
            return Err(ClientError::InvalidTopic(topic.into()));
        }
        let mut p = Publish::new(topic, payload, qos);
        p.retain = retain;
        match qos {
            QoS::AtMostOnce => {
                self.shared.send(MqttPacket::Publish(p))?;
                Ok(DeliveryToken { rx: None })
            }
            QoS::AtLeastOnce => {
                let (tx, rx) = oneshot::channel();
                {
                    let mut st = self.shared.state.lock().unwrap();
                    let id = st.allocate_packet_id();
                    p.packet_id = Some(id);
                    st.publishes.insert(
                        id,
                        PendingPublish {
                            publish: p.clone(),
                            sent_at: self.shared.clock.now(),
                            attempts: 1,
                            done: tx,
                        },
                    );
                }
                let id = p.packet_id;
                if let Err(e) = self.shared.send(MqttPacket::Publish(p)) {
                    self.shared.state.lock().unwrap().publishes.remove(&id.unwrap_or(0));
                    return Err(e);
                }
                Ok(DeliveryToken { rx: Some(rx) })
            }
        }
    }

    /// Subscribes and waits for the SUBACK.
    pub async fn subscribe(&self, filter: &str, qos: QoS) -> Result<QoS, ClientError> {
        if !valid_topic_filter(filter) {
            return Err(ClientError::InvalidTopic(filter.into()));
        }
        let (tx, rx) = oneshot::channel();
        let packet_id = {
            let mut st = self.shared.state.lock().unwrap();
            let id = st.allocate_packet_id();
            st.subscribes.insert(id, tx);
            id
        };
        self.shared.send(MqttPacket::Subscribe { packet_id, filters: vec![(filter.into(), qos)] })?;
        let opts = &self.shared.opts;
        let budget = (opts.retry_interval * (opts.retry_budget as i32 + 1)).to_std().unwrap_or_default();
        let granted = match tokio::time::timeout(budget.max(StdDuration::from_millis(100)), rx).await {
            Ok(Ok(granted)) => granted,
            Ok(Err(_)) => return Err(ClientError::NotConnected),
            Err(_) => {
                self.shared.state.lock().unwrap().subscribes.remove(&packet_id);
                return Err(ClientError::Timeout { attempts: 1 });
            }
        };
        match granted.first() {
            Some(SubackCode::Granted(q)) => Ok(*q),
            _ => Err(ClientError::SubscribeRejected(filter.into())),
        }
    }

    /// Next message received on a subscription, in arrival order. `None`
    /// once the connection is gone and everything received was consumed.
    pub async fn poll(&self) -> Option<Publish> {
        self.incoming.lock().await.recv().await
    }

    pub fn try_poll(&self) -> Option<Publish> {
        self.incoming.try_lock().ok()?.try_recv().ok()
    }

    pub async fn disconnect(&self) {
        let _ = self.shared.send(MqttPacket::Disconnect);
        self.shared.disconnected();
        // Let the writer flush the DISCONNECT before the socket goes away.
        tokio::time::sleep(StdDuration::from_millis(5)).await;
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for MqttClient {
    fn drop(&mut self) {
        self.shared.connected.store(false, Ordering::SeqCst);
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn read_packet(rd: &mut OwnedReadHalf, buf: &mut Vec<u8>) -> Result<MqttPacket, ClientError> {
    let mut chunk = [0u8; 4096];
    loop {
        match decode_packet(buf) {
            Ok((p, used)) => {
                buf.drain(..used);
                return Ok(p);
            }
            Err(PacketError::NeedMoreData) => {}
            Err(e) => return Err(e.into()),
        }
        let n = rd.read(&mut chunk).await.map_err(|e| ClientError::Io(e.to_string()))?;
        if n == 0 {
            return Err(ClientError::NotConnected);
        }
        buf.extend_from_slice(&chunk[..n]);
    }
}

async fn write_loop(shared: Arc<Shared>, mut wr: OwnedWriteHalf, mut rx: mpsc::UnboundedReceiver<MqttPacket>) {
    let mut buf = Vec::new();
    while let Some(p) = rx.recv().await {
        buf.clear();
        if p.encode_into(&mut buf).is_err() {
            continue;
        }
        if wr.write_all(&buf).await.is_err() {
            break;
        }
        if p == MqttPacket::Disconnect {
            break;
        }
    }
    let _ = wr.shutdown().await;
    shared.disconnected();
}

async fn read_loop(
    shared: Arc<Shared>,
    mut rd: OwnedReadHalf,
    mut buf: Vec<u8>,
    incoming: mpsc::UnboundedSender<Publish>,
) {
    while let Ok(packet) = read_packet(&mut rd, &mut buf).await {
        match packet {
            MqttPacket::Puback { packet_id } => {
                let done = shared.state.lock().unwrap().publishes.remove(&packet_id);
                if let Some(p) = done {
                    let _ = p.done.send(Ok(()));
                }
            }
            MqttPacket::Suback { packet_id, granted } => {
                let waiter = shared.state.lock().unwrap().subscribes.remove(&packet_id);
                if let Some(tx) = waiter {
                    let _ = tx.send(granted);
                }
            }
            MqttPacket::Publish(p) => {
                let mut deliver = true;
                if let Some(id) = p.packet_id {
                    let _ = shared.send(MqttPacket::Puback { packet_id: id });
                    deliver = !shared.state.lock().unwrap().recent_incoming.is_duplicate(id, p.dup);
                }
                if deliver {
                    let _ = incoming.send(p);
                }
            }
            MqttPacket::Pingresp => {}
            _ => break,
        }
    }
    shared.disconnected();
}

async fn retry_loop(shared: std::sync::Weak<Shared>) {
    let tick = match shared.upgrade() {
        Some(s) => (s.opts.retry_interval.to_std().unwrap_or_default() / 4)
            .clamp(StdDuration::from_millis(5), StdDuration::from_millis(250)),
        None => return,
    };
    let mut interval = tokio::time::interval(tick);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        let Some(shared) = shared.upgrade() else { return };
        if !shared.connected.load(Ordering::SeqCst) {
            return;
        }
        let now = shared.clock.now();
        let opts = &shared.opts;
        let mut resend = Vec::new();
        let mut failed = Vec::new();
        {
            let mut st = shared.state.lock().unwrap();
            for (id, p) in st.publishes.iter_mut() {
                if now - p.sent_at < opts.retry_interval {
                    continue;
                }
                if p.attempts > opts.retry_budget {
                    failed.push(*id);
                    continue;
                }
                p.attempts += 1;
                p.sent_at = now;
                let mut again = p.publish.clone();
                again.dup = true;
                resend.push(again);
            }
            for id in failed {
                if let Some(p) = st.publishes.remove(&id) {
                    let _ = p.done.send(Err(ClientError::Timeout { attempts: p.attempts }));
                }
            }
        }
        for p in resend {
            let _ = shared.send(MqttPacket::Publish(p));
        }
        if opts.keep_alive > 0 {
            let idle = shared.last_send.lock().unwrap().elapsed();
            if idle >= StdDuration::from_secs(u64::from(opts.keep_alive)) / 2 {
                let _ = shared.send(MqttPacket::Pingreq);
            }
        }
    }
}
