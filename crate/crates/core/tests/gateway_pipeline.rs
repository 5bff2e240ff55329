use std::sync::Arc;
use std::time::Duration as StdDuration;

use chrono::{Duration, TimeZone, Utc};
use piico::clock::{Clock, VirtualClock};
use piico::gateway::{self, Gateway, GatewayConfig, GatewayEvent, NodeConfig};
use piico::model::{
    parse_reading, AlarmRule, Comparator, GpsCoordinate, Magnitude, NodeDescriptor, ProtocolId, SensorDescriptor,
};
use piico::mqtt::{ClientOptions, MqttClient, QoS};
use piico::normalize::{encode_announce, NodeUplinkRecord};
use piico::transport::{connect_link, RawFrame};

fn t0() -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
}

fn node(id: &str) -> NodeDescriptor {
    NodeDescriptor {
        node_id: id.into(),
        gps: GpsCoordinate::new(4.7, -74.03).unwrap(),
        sensors: vec![
            SensorDescriptor::new("temp", Magnitude::Celsius, "AM2315"),
            SensorDescriptor::new("hum", Magnitude::PercentRh, "AM2315"),
        ],
        capture_interval: 6,
        protocol_assignment: [("temp".to_string(), ProtocolId::Wifi), ("hum".to_string(), ProtocolId::Wifi)].into(),
    }
}

fn record(node: &str, sensor: &str, value: f64, sec: i64) -> RawFrame {
    let rec = NodeUplinkRecord {
        node_id: node.into(),
        sensor_id: sensor.into(),
        value,
        capture_time: t0() + Duration::seconds(sec),
    };
    RawFrame::new(ProtocolId::Wifi, rec.encode()).unwrap()
}

fn gateway(clock: &VirtualClock) -> Arc<Gateway> {
    Gateway::new(GatewayConfig::ephemeral(), Arc::new(clock.clone())).unwrap()
}

#[test]
fn valid_frame_is_persisted_published_and_tagged() {
    let clock = VirtualClock::new(t0());
    let gw = gateway(&clock);
    gw.register_node(node("n1")).unwrap();

    // Arrival over zigbee wins over the node's configured assignment.
    let frame = record("n1", "temp", 25.3, 6);
    gw.ingest(&frame, ProtocolId::Zigbee, 80);

    let stored = gw.query_readings(None, None, None).unwrap();
    assert_eq!(stored.readings.len(), 1);
    let r = &stored.readings[0];
    assert_eq!((r.node_id(), r.sensor_id(), r.value()), ("n1", "temp", 25.3));
    assert_eq!(r.protocol(), ProtocolId::Zigbee);
    assert_eq!(r.gate_id(), "gw1");

    let c = gw.counters();
    assert_eq!((c.readings_persisted, c.uplink_published, c.frames_processed), (1, 1, 1));
    // no cloud broker configured: the reading lands on the embedded broker
    assert_eq!(gw.broker().stats().received, 2, "one retained cfg + one reading");
    assert_eq!(gw.node("n1").unwrap().last_seen, Some(t0()));
}

#[test]
fn unregistered_node_counts_an_error_and_publishes_nothing() {
    let clock = VirtualClock::new(t0());
    let gw = gateway(&clock);
    let mut events = gw.subscribe_events();
    gw.ingest(&record("ghost", "temp", 20.0, 0), ProtocolId::Wifi, 60);
    let c = gw.counters();
    assert_eq!(c.errors.wifi, 1);
    assert_eq!((c.readings_persisted, c.uplink_published), (0, 0));
    assert!(matches!(events.try_recv().unwrap(), GatewayEvent::Diagnostic(_)));

    gw.register_node(node("n1")).unwrap();
    gw.ingest(&record("n1", "wind", 3.0, 0), ProtocolId::Bluetooth, 60);
    let bad = RawFrame::new(ProtocolId::Zigbee, b"not json".to_vec()).unwrap();
    gw.ingest(&bad, ProtocolId::Zigbee, 12);
    let c = gw.counters();
    assert_eq!((c.errors.wifi, c.errors.bluetooth, c.errors.zigbee), (1, 1, 1));
    assert_eq!(c.frames_processed, 3);
    // bytes of unattributable frames are still counted
    assert!(gw.throughput(ProtocolId::Zigbee, Some(gateway::UNKNOWN_NODE), 6.0) > 0.0);
}

#[test]
fn announce_registers_and_publishes_retained_config() {
    let clock = VirtualClock::new(t0());
    let gw = gateway(&clock);
    let frame = RawFrame::new(ProtocolId::Bluetooth, encode_announce(&node("n1"), t0())).unwrap();
    gw.ingest(&frame, ProtocolId::Bluetooth, 300);
    gw.ingest(&frame, ProtocolId::Bluetooth, 300);
    assert_eq!(gw.nodes().len(), 1);
    assert_eq!(gw.node("n1").unwrap().revision, 1, "re-announce is idempotent");

    let retained = gw.broker().retained("cfg/gw1/n1").expect("retained cfg");
    let cfg: NodeConfig = serde_json::from_slice(&retained.payload).unwrap();
    assert_eq!(cfg.capture_interval, 6);

    gw.set_capture_interval("n1", 12).unwrap();
    gw.assign_protocol("n1", "temp", ProtocolId::Zigbee).unwrap();
    let cfg: NodeConfig = serde_json::from_slice(&gw.broker().retained("cfg/gw1/n1").unwrap().payload).unwrap();
    assert_eq!(cfg.capture_interval, 12);
    assert_eq!(cfg.protocol_assignment["temp"], ProtocolId::Zigbee);
    assert_eq!(cfg.revision, 3);

    assert!(gw.set_capture_interval("ghost", 6).is_err());
    let mut bad = node("n2");
    bad.capture_interval = 0;
    assert!(gw.register_node(bad).is_err());
}

#[test]
fn matching_rule_fires_one_alarm_event() {
    let clock = VirtualClock::new(t0());
    let gw = gateway(&clock);
    gw.register_node(node("n1")).unwrap();
    gw.add_alarm(AlarmRule::new("hot", "*", "temp", Comparator::Greater, 30.0, "too hot").unwrap()).unwrap();
    let mut events = gw.subscribe_events();

    gw.ingest(&record("n1", "temp", 31.0, 0), ProtocolId::Wifi, 60);
    gw.ingest(&record("n1", "temp", 29.0, 6), ProtocolId::Wifi, 60);
    gw.ingest(&record("n1", "hum", 99.0, 6), ProtocolId::Wifi, 60);

    let alarms: Vec<_> = std::iter::from_fn(|| events.try_recv().ok())
        .filter_map(|e| match e {
            GatewayEvent::Alarm(a) => Some(a),
            _ => None,
        })
        .collect();
    assert_eq!(alarms.len(), 1);
    assert_eq!((alarms[0].rule_id.as_str(), alarms[0].value), ("hot", 31.0));

    gw.remove_alarm("hot").unwrap();
    gw.ingest(&record("n1", "temp", 35.0, 12), ProtocolId::Wifi, 60);
    assert!(std::iter::from_fn(|| events.try_recv().ok()).all(|e| !matches!(e, GatewayEvent::Alarm(_))));
    assert!(gw.remove_alarm("hot").is_err());
}

#[test]
fn throughput_uses_the_gateway_clock() {
    let clock = VirtualClock::new(t0());
    let gw = gateway(&clock);
    gw.register_node(node("n1")).unwrap();
    gw.register_node(node("n2")).unwrap();
    for i in 0..6 {
        clock.advance(Duration::seconds(1));
        gw.ingest(&record("n1", "temp", 20.0, i), ProtocolId::Wifi, 100);
        gw.ingest(&record("n2", "temp", 20.0, i), ProtocolId::Wifi, 25);
    }
    assert_eq!(gw.throughput(ProtocolId::Wifi, None, 6.0), 1.0);
    let sum: f64 = ["n1", "n2"].iter().map(|n| gw.throughput(ProtocolId::Wifi, Some(n), 6.0)).sum();
    assert!((sum - 1.0).abs() < 1e-12);
    clock.advance(Duration::seconds(60));
    assert_eq!(gw.throughput(ProtocolId::Wifi, None, 6.0), 0.0);
}

#[test]
fn readings_log_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = GatewayConfig { readings_log: Some(dir.path().join("readings.jsonl")), ..GatewayConfig::ephemeral() };
    let clock = VirtualClock::new(t0());
    {
        let gw = Gateway::new(config.clone(), Arc::new(clock.clone())).unwrap();
        gw.register_node(node("n1")).unwrap();
        gw.ingest(&record("n1", "temp", 21.0, 0), ProtocolId::Wifi, 60);
    }
    let gw = Gateway::new(config, Arc::new(clock)).unwrap();
    assert_eq!(gw.query_readings(None, Some("n1"), Some("temp")).unwrap().readings.len(), 1);
}

/// Frames over a real TCP link end up on the cloud broker as canonical JSON.
#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn end_to_end_over_loopback() {
    let cloud = piico::mqtt::serve(
        piico::mqtt::Broker::new(Default::default(), Arc::new(piico::clock::SystemClock)),
        "127.0.0.1:0",
        StdDuration::from_millis(100),
    )
    .await
    .unwrap();
    let sink = MqttClient::connect(
        &cloud.local_addr().to_string(),
        ClientOptions::new("sink"),
        Arc::new(piico::clock::SystemClock),
    )
    .await
    .unwrap();
    sink.subscribe("dat/#", QoS::AtLeastOnce).await.unwrap();

    let config = GatewayConfig { cloud_broker: Some(cloud.local_addr().to_string()), ..GatewayConfig::ephemeral() };
    let clock = VirtualClock::new(t0());
    let gw = Gateway::new(config, Arc::new(clock.clone())).unwrap();
    let running = gateway::start(Arc::clone(&gw)).await.unwrap();
    let addrs = running.addrs();

    let mut wifi = connect_link(ProtocolId::Wifi, &addrs.wifi.to_string()).await.unwrap();
    let announce = RawFrame::new(ProtocolId::Wifi, encode_announce(&node("n1"), clock.now())).unwrap();
    wifi.send(&announce).await.unwrap();
    let mut zb = connect_link(ProtocolId::Zigbee, &addrs.zigbee.to_string()).await.unwrap();
    wifi.send(&record("n1", "temp", 22.5, 0)).await.unwrap();
    let zframe = RawFrame::new(ProtocolId::Zigbee, record("n1", "hum", 55.0, 0).into_payload()).unwrap();
    zb.send(&zframe).await.unwrap();

    let mut got = Vec::new();
    while got.len() < 2 {
        let p = tokio::time::timeout(StdDuration::from_secs(5), sink.poll()).await.unwrap().unwrap();
        got.push(p);
    }
    got.sort_by(|a, b| a.topic.cmp(&b.topic));
    assert_eq!(got[0].topic, "dat/gw1/n1/hum");
    assert_eq!(got[1].topic, "dat/gw1/n1/temp");
    let hum = parse_reading(&got[0].payload).unwrap();
    assert_eq!((hum.protocol(), hum.value()), (ProtocolId::Zigbee, 55.0));

    // node-side config subscription through the embedded broker
    let node_client = MqttClient::connect(
        &addrs.broker.to_string(),
        ClientOptions::new("n1"),
        Arc::new(piico::clock::SystemClock),
    )
    .await
    .unwrap();
    node_client.subscribe("cfg/+/n1", QoS::AtLeastOnce).await.unwrap();
    let cfg = tokio::time::timeout(StdDuration::from_secs(5), node_client.poll()).await.unwrap().unwrap();
    assert!(cfg.retain);
    let cfg: NodeConfig = serde_json::from_slice(&cfg.payload).unwrap();
    assert_eq!(cfg.capture_interval, 6);

    let deadline = tokio::time::Instant::now() + StdDuration::from_secs(5);
    while gw.counters().uplink_acked < 2 && tokio::time::Instant::now() < deadline {
        tokio::time::sleep(StdDuration::from_millis(10)).await;
    }
    let c = gw.counters();
    assert_eq!((c.readings_persisted, c.uplink_published, c.uplink_acked), (2, 2, 2));
    assert_eq!(c.announces, 1);
}

#[tokio::test]
async fn port_conflict_names_the_port() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let mut config = GatewayConfig::ephemeral();
    config.ports.bluetooth = port;
    let gw = Gateway::new(config, Arc::new(piico::clock::SystemClock)).unwrap();
    let err = gateway::start(gw).await.err().expect("bind must fail");
    let msg = err.to_string();
    assert!(msg.contains("bluetooth") && msg.contains(&port.to_string()), "{msg}");
}
