use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration as StdDuration;

use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tracing::{info, warn};

use super::events::DiagnosticKind;
use super::service::{Gateway, UplinkMessage};
use super::{api, GatewayError};
use crate::clock::SystemClock;
use crate::model::ProtocolId;
use crate::mqtt::{serve_listener, BrokerServer, ClientError, ClientOptions, MqttClient, QoS};
use crate::transport::{DecodeError, LinkEndpoint, LinkError, RawFrame};

const BROKER_TICK: StdDuration = StdDuration::from_millis(250);
const UPLINK_BACKOFF_MIN: StdDuration = StdDuration::from_millis(100);
const UPLINK_BACKOFF_MAX: StdDuration = StdDuration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GatewayAddrs {
    pub wifi: SocketAddr,
    pub bluetooth: SocketAddr,
    pub zigbee: SocketAddr,
    pub broker: SocketAddr,
    pub api: SocketAddr,
}

impl GatewayAddrs {
    pub fn transport(&self, p: ProtocolId) -> SocketAddr {
        match p {
            ProtocolId::Wifi => self.wifi,
            ProtocolId::Bluetooth => self.bluetooth,
            ProtocolId::Zigbee => self.zigbee,
        }
    }
}

enum IngestItem {
    Frame { frame: RawFrame, arrival: ProtocolId, rx_bytes: usize },
    Malformed { arrival: ProtocolId, error: DecodeError },
}

/// A started gateway. Dropping it stops every task.
pub struct RunningGateway {
    gateway: Arc<Gateway>,
    addrs: GatewayAddrs,
    _broker: BrokerServer,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningGateway {
    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn addrs(&self) -> GatewayAddrs {
        self.addrs
    }

    pub fn shutdown(self) {}
}

impl Drop for RunningGateway {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn bind(host: &str, port: u16, what: &'static str) -> Result<TcpListener, GatewayError> {
    let addr = format!("{host}:{port}");
    TcpListener::bind(&addr).await.map_err(|source| GatewayError::Bind { what, addr, source })
}

/// Binds every listener (transports, broker, API) and spawns the service
/// tasks. Fails without leaving anything running if any port is taken.
pub async fn start(gateway: Arc<Gateway>) -> Result<RunningGateway, GatewayError> {
    let cfg = gateway.config().clone();
    let wifi = bind(&cfg.bind, cfg.ports.wifi, "wifi").await?;
    let bluetooth = bind(&cfg.bind, cfg.ports.bluetooth, "bluetooth").await?;
    let zigbee = bind(&cfg.bind, cfg.ports.zigbee, "zigbee").await?;
    let broker_l = bind(&cfg.bind, cfg.broker_port, "broker").await?;
    let api_l = bind(&cfg.bind, cfg.api_port, "api").await?;
    let addr = |l: &TcpListener| l.local_addr().expect("bound listener has an address");
    let addrs = GatewayAddrs {
        wifi: addr(&wifi),
        bluetooth: addr(&bluetooth),
        zigbee: addr(&zigbee),
        broker: addr(&broker_l),
        api: addr(&api_l),
    };

    let broker = serve_listener(Arc::clone(gateway.broker()), broker_l, BROKER_TICK);
    let mut tasks = Vec::new();

    let (ingest_tx, ingest_rx) = mpsc::unbounded_channel();
    tasks.push(tokio::spawn(ingest_loop(Arc::clone(&gateway), ingest_rx)));
    for (kind, listener) in [(ProtocolId::Wifi, wifi), (ProtocolId::Bluetooth, bluetooth), (ProtocolId::Zigbee, zigbee)] {
        tasks.push(tokio::spawn(listen(kind, listener, ingest_tx.clone())));
    }

    if let Some(cloud) = cfg.cloud_broker.clone() {
        let (tx, rx) = mpsc::channel(cfg.uplink_buffer);
        gateway.attach_uplink(tx);
        tasks.push(tokio::spawn(uplink_loop(Arc::clone(&gateway), cloud, rx)));
    }

    let app = api::router(Arc::clone(&gateway));
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(api_l, app).await {
            warn!("api server stopped: {e}");
        }
    }));

    let period = StdDuration::from_secs_f64(cfg.stats_period_s);
    let gw = Arc::clone(&gateway);
    tasks.push(tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            let _ = gw.sample_host_stats();
        }
    }));

    info!(?addrs, "gateway {} started", gateway.identity().gate_id);
    Ok(RunningGateway { gateway, addrs, _broker: broker, tasks })
}

async fn ingest_loop(gateway: Arc<Gateway>, mut rx: mpsc::UnboundedReceiver<IngestItem>) {
    while let Some(item) = rx.recv().await {
        match item {
            IngestItem::Frame { frame, arrival, rx_bytes } => gateway.ingest(&frame, arrival, rx_bytes),
            IngestItem::Malformed { arrival, error } => gateway.ingest_decode_error(arrival, &error),
        }
    }
}

async fn listen(kind: ProtocolId, listener: TcpListener, tx: mpsc::UnboundedSender<IngestItem>) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(s) => s,
            Err(e) => {
                warn!("{kind} accept failed: {e}");
                tokio::time::sleep(StdDuration::from_millis(50)).await;
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let tx = tx.clone();
        tokio::spawn(async move {
            let (mut reader, _writer) = LinkEndpoint::new(kind, peer.to_string(), stream).split();
            loop {
                let item = match reader.recv().await {
                    Ok((frame, rx_bytes)) => IngestItem::Frame { frame, arrival: kind, rx_bytes },
                    Err(LinkError::Decode(error)) => IngestItem::Malformed { arrival: kind, error },
                    Err(_) => break,
                };
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
    }
}

/// Forwards readings to the cloud broker in order, waiting for each PUBACK.
/// While the broker is unreachable, readings wait in the bounded channel.
async fn uplink_loop(gateway: Arc<Gateway>, addr: String, mut rx: mpsc::Receiver<UplinkMessage>) {
    let cfg = gateway.config().clone();
    let mut opts = ClientOptions::new(format!("{}-uplink", gateway.identity().gate_id));
    opts.retry_interval = cfg.retry_interval();
    opts.retry_budget = cfg.retry_budget;

    let mut client: Option<MqttClient> = None;
    let mut pending: Option<UplinkMessage> = None;
    let mut backoff = UPLINK_BACKOFF_MIN;
    let mut reported_down = false;
    loop {
        let msg = match pending.take() {
            Some(m) => m,
            None => match rx.recv().await {
                Some(m) => m,
                None => return,
            },
        };
        if client.as_ref().is_none_or(|c| !c.is_connected()) {
            match MqttClient::connect(&addr, opts.clone(), Arc::new(SystemClock)).await {
                Ok(c) => {
                    client = Some(c);
                    backoff = UPLINK_BACKOFF_MIN;
                    if reported_down {
                        gateway.diagnostic(DiagnosticKind::Uplink, None, format!("cloud broker {addr} reachable again"));
                        reported_down = false;
                    }
                }
                Err(e) => {
                    if !reported_down {
                        gateway.diagnostic(
                            DiagnosticKind::Uplink,
                            None,
                            format!("cloud broker {addr} unreachable ({e}); buffering up to {} readings", cfg.uplink_buffer),
                        );
                        reported_down = true;
                    }
                    pending = Some(msg);
                    tokio::time::sleep(backoff).await;
                    backoff = (backoff * 2).min(UPLINK_BACKOFF_MAX);
                    continue;
                }
            }
        }
        let c = client.as_ref().expect("connected above");
        let outcome = match c.publish(&msg.topic, msg.payload.clone(), QoS::AtLeastOnce, false) {
            Ok(token) => token.wait().await,
            Err(e) => Err(e),
        };
        match outcome {
            Ok(()) => gateway.note_uplink_acked(),
            Err(ClientError::Timeout { attempts }) => {
                gateway.note_uplink_dropped();
                gateway.diagnostic(
                    DiagnosticKind::Uplink,
                    None,
                    format!("no PUBACK for {} after {attempts} attempts; reading dropped", msg.topic),
                );
            }
            Err(_) => {
                client = None;
                pending = Some(msg);
            }
        }
    }
}
