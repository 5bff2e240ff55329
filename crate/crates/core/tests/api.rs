use std::sync::Arc;
use std::time::Duration as StdDuration;

use chrono::{TimeZone, Utc};
use piico::clock::VirtualClock;
use piico::gateway::{self, Gateway, GatewayConfig, NodeConfig, RunningGateway};
use piico::model::ProtocolId;
use piico::normalize::NodeUplinkRecord;
use piico::transport::RawFrame;
use reqwest::StatusCode;
use serde_json::{json, Value};

const TOKEN: &str = "s3cret";

struct Api {
    base: String,
    http: reqwest::Client,
    running: RunningGateway,
}

impl Api {
    async fn start() -> Self {
        let config = GatewayConfig { bearer_token: TOKEN.into(), ..GatewayConfig::ephemeral() };
        let clock = VirtualClock::new(Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap());
        let gw = Gateway::new(config, Arc::new(clock)).unwrap();
        let running = gateway::start(gw).await.unwrap();
        Self { base: format!("http://{}", running.addrs().api), http: reqwest::Client::new(), running }
    }

    fn gw(&self) -> &Arc<Gateway> {
        self.running.gateway()
    }

    fn req(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        self.http.request(method, format!("{}{path}", self.base)).bearer_auth(TOKEN)
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let resp = self.req(reqwest::Method::GET, path).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn send(&self, method: reqwest::Method, path: &str, body: &Value) -> (StatusCode, Value) {
        let resp = self.req(method, path).json(body).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }
}

fn descriptor() -> Value {
    json!({
        "node_id": "n1",
        "gps": "4.700000,-74.030000",
        "sensors": [
            {"sensor_id": "temp", "magnitude": "celsius", "model": "AM2315"},
            {"sensor_id": "hum", "magnitude": "percent_rh", "model": "AM2315"}
        ],
        "capture_interval": 6,
        "protocol_assignment": {"temp": "wifi", "hum": "wifi"}
    })
}

#[tokio::test]
async fn missing_or_wrong_token_is_401() {
    let api = Api::start().await;
    for path in ["/nodes", "/readings", "/alarms", "/metrics/host", "/events"] {
        let resp = api.http.get(format!("{}{path}", api.base)).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::UNAUTHORIZED, "{path}");
        let resp = api.http.get(format!("{}{path}", api.base)).bearer_auth("nope").send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::UNAUTHORIZED, "{path}");
    }
}

#[tokio::test]
async fn node_registration_and_patch() {
    let api = Api::start().await;
    let (status, body) = api.send(reqwest::Method::POST, "/nodes", &descriptor()).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body, descriptor(), "descriptor echoed");

    let (status, nodes) = api.get("/nodes").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(nodes.as_array().unwrap().len(), 1);
    assert_eq!(nodes[0]["node_id"], "n1");
    assert_eq!(nodes[0]["revision"], 1);
    assert!(nodes[0]["last_seen"].is_null());

    let (status, _) = api.send(reqwest::Method::PATCH, "/nodes/n1", &json!({"capture_interval": 0})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = api
        .send(reqwest::Method::PATCH, "/nodes/n1", &json!({"protocol_assignment": {"wind": "zigbee"}}))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = api.send(reqwest::Method::PATCH, "/nodes/ghost", &json!({"capture_interval": 6})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(api.gw().node("n1").unwrap().revision, 1, "rejected patches change nothing");

    let (status, body) = api
        .send(
            reqwest::Method::PATCH,
            "/nodes/n1",
            &json!({"capture_interval": 12, "protocol_assignment": {"temp": "zigbee"}}),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["capture_interval"], 12);
    assert_eq!(body["protocol_assignment"]["temp"], "zigbee");

    let retained = api.gw().broker().retained("cfg/gw1/n1").unwrap();
    let cfg: NodeConfig = serde_json::from_slice(&retained.payload).unwrap();
    assert_eq!((cfg.capture_interval, cfg.protocol_assignment["temp"]), (12, ProtocolId::Zigbee));
}

#[tokio::test]
async fn invalid_bodies_are_422() {
    let api = Api::start().await;
    let mut bad = descriptor();
    bad["capture_interval"] = json!(0);
    assert_eq!(api.send(reqwest::Method::POST, "/nodes", &bad).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let resp = api.req(reqwest::Method::POST, "/nodes").body("{not json").send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let rule = json!({"rule_id": "r", "node": "*", "sensor": "temp", "comparator": "~", "threshold": 1});
    assert_eq!(api.send(reqwest::Method::POST, "/alarms", &rule).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(api.get("/readings?since=yesterday").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(api.get("/metrics/throughput?protocol=lora").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(api.get("/metrics/throughput?window=0").await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn alarms_crud() {
    let api = Api::start().await;
    let rule = json!({"rule_id": "hot", "node": "*", "sensor": "temp", "comparator": ">", "threshold": 30.0, "message": "too hot"});
    let (status, body) = api.send(reqwest::Method::POST, "/alarms", &rule).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body, rule);
    assert_eq!(api.send(reqwest::Method::POST, "/alarms", &rule).await.0, StatusCode::CONFLICT);
    assert_eq!(api.get("/alarms").await.1, json!([rule]));

    let resp = api.req(reqwest::Method::DELETE, "/alarms/hot").send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NO_CONTENT);
    let resp = api.req(reqwest::Method::DELETE, "/alarms/hot").send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    assert_eq!(api.get("/alarms").await.1, json!([]));
}

#[tokio::test]
async fn readings_reflect_completed_ingest() {
    let api = Api::start().await;
    api.send(reqwest::Method::POST, "/nodes", &descriptor()).await;
    for (i, sensor) in ["temp", "hum", "temp"].iter().enumerate() {
        let rec = NodeUplinkRecord {
            node_id: "n1".into(),
            sensor_id: sensor.to_string(),
            value: 20.0 + i as f64,
            capture_time: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 6 * i as u32).unwrap(),
        };
        api.gw().ingest(&RawFrame::new(ProtocolId::Wifi, rec.encode()).unwrap(), ProtocolId::Wifi, 125);
    }
    let (_, all) = api.get("/readings").await;
    assert_eq!(all["readings"].as_array().unwrap().len(), 3);
    assert_eq!(all["corrupt_lines"], json!([]));
    let (_, temp) = api.get("/readings?sensor=temp&since=2020-01-01T00:00:06Z").await;
    let temp = temp["readings"].as_array().unwrap();
    assert_eq!(temp.len(), 1);
    assert_eq!(temp[0]["value"], 22.0);
    assert_eq!(temp[0]["protocol"], "wifi");

    let (status, tp) = api.get("/metrics/throughput?protocol=wifi&window=6").await;
    assert_eq!(status, StatusCode::OK);
    // 3 frames × 125 bytes × 8 / 1000 / 6
    assert_eq!(tp["protocols"][0]["kbps"], 0.5);
    assert_eq!(tp["protocols"][0]["nodes"]["n1"], 0.5);

    let (_, counters) = api.get("/metrics/counters").await;
    assert_eq!(counters["readings_persisted"], 3);
}

#[tokio::test]
async fn host_series_is_exported() {
    let api = Api::start().await;
    // the sampler takes its first sample immediately
    tokio::time::sleep(StdDuration::from_millis(50)).await;
    api.gw().sample_host_stats().ok();
    let (status, series) = api.get("/metrics/host").await;
    assert_eq!(status, StatusCode::OK);
    let series = series.as_array().unwrap();
    assert!(series.len() >= 2);
    for s in series {
        if let Some(cpu) = s["cpu_percent"].as_f64() {
            assert!((0.0..=100.0).contains(&cpu));
        } else {
            assert_eq!(s["gap"], true);
        }
    }
}

#[tokio::test]
async fn event_stream_carries_json_events() {
    let api = Api::start().await;
    let mut resp = api
        .http
        .get(format!("{}/events?access_token={TOKEN}", api.base))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));

    api.send(reqwest::Method::POST, "/nodes", &descriptor()).await;
    let mut buf = String::new();
    let deadline = tokio::time::Instant::now() + StdDuration::from_secs(5);
    while !buf.contains("\n\n") {
        let chunk = tokio::time::timeout_at(deadline, resp.chunk()).await.unwrap().unwrap().unwrap();
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
    }
    let data = buf.lines().find_map(|l| l.strip_prefix("data: ")).unwrap();
    let event: Value = serde_json::from_str(data).unwrap();
    assert_eq!(event, json!({"type": "node_registered", "node_id": "n1", "revision": 1}));
}
