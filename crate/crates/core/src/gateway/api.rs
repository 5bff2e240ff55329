//! REST + server-sent-events API. Every route requires
//! `Authorization: Bearer <token>`; `GET /events` also accepts
//! `?access_token=<token>` because browser `EventSource` cannot set headers.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use super::service::Gateway;
use super::{GatewayError, RegistryError};
use crate::model::{self, AlarmRule, NodeDescriptor, ProtocolId};

type AppState = Arc<Gateway>;

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = match &e {
            GatewayError::Registry(RegistryError::UnknownNode(_)) | GatewayError::UnknownAlarm(_) => StatusCode::NOT_FOUND,
            GatewayError::DuplicateAlarm(_) => StatusCode::CONFLICT,
            GatewayError::Registry(_) | GatewayError::InvalidAlarm(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Body parsing that reports every failure (syntax or shape) as 422.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(e.to_string()))
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/nodes", get(list_nodes).post(create_node))
        .route("/nodes/{id}", get(get_node).patch(patch_node))
        .route("/readings", get(readings))
        .route("/metrics/throughput", get(throughput))
        .route("/metrics/host", get(host_stats))
        .route("/metrics/counters", get(counters))
        .route("/alarms", get(list_alarms).post(create_alarm))
        .route("/alarms/{id}", delete(delete_alarm))
        .route("/events", get(events))
        .layer(middleware::from_fn_with_state(Arc::clone(&gateway), require_token))
        .with_state(gateway)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn require_token(State(gw): State<AppState>, req: Request, next: Next) -> Response {
    let expected = gw.config().bearer_token.as_bytes();
    let from_header = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    let from_query = (req.uri().path() == "/events")
        .then(|| req.uri().query())
        .flatten()
        .and_then(|q| q.split('&').find_map(|kv| kv.strip_prefix("access_token=")));
    match from_header.or(from_query) {
        Some(token) if constant_time_eq(token.as_bytes(), expected) => next.run(req).await,
        _ => {
            let mut resp = ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
            resp.headers_mut().insert(header::WWW_AUTHENTICATE, "Bearer".parse().unwrap());
            resp
        }
    }
}

// ---- nodes ----

async fn list_nodes(State(gw): State<AppState>) -> impl IntoResponse {
    Json(gw.nodes())
}

async fn get_node(State(gw): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    gw.node(&id).map(Json).ok_or_else(|| ApiError::not_found(format!("unknown node {id:?}")))
}

async fn create_node(State(gw): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let descriptor: NodeDescriptor = parse_body(&body)?;
    let status = gw.register_node(descriptor)?;
    Ok((StatusCode::CREATED, Json(status.descriptor)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodePatch {
    capture_interval: Option<i64>,
    #[serde(default)]
    protocol_assignment: BTreeMap<String, ProtocolId>,
}

/// All fields are validated before anything is applied.
async fn patch_node(State(gw): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let node = gw.node(&id).ok_or_else(|| ApiError::not_found(format!("unknown node {id:?}")))?;
    let patch: NodePatch = parse_body(&body)?;
    let interval = match patch.capture_interval {
        None => None,
        Some(s) if (1..=u32::MAX as i64).contains(&s) => Some(s as u32),
        Some(_) => return Err(ApiError::unprocessable(RegistryError::InvalidInterval.to_string())),
    };
    if let Some(sensor) = patch.protocol_assignment.keys().find(|s| node.descriptor.sensor(s).is_none()) {
        return Err(ApiError::unprocessable(
            RegistryError::UnknownSensor { node_id: id.clone(), sensor_id: sensor.clone() }.to_string(),
        ));
    }
    let mut status = node;
    if let Some(seconds) = interval {
        status = gw.set_capture_interval(&id, seconds)?;
    }
    for (sensor, protocol) in &patch.protocol_assignment {
        status = gw.assign_protocol(&id, sensor, *protocol)?;
    }
    Ok(Json(status))
}

// ---- readings ----

#[derive(Debug, Deserialize)]
struct ReadingsQuery {
    since: Option<String>,
    node: Option<String>,
    sensor: Option<String>,
}

fn parse_since(s: &str) -> ApiResult<DateTime<Utc>> {
    model::parse_timestamp(s)
        .or_else(|_| DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc)))
        .map_err(|_| ApiError::unprocessable(format!("bad since timestamp {s:?}")))
}

async fn readings(State(gw): State<AppState>, Query(q): Query<ReadingsQuery>) -> ApiResult<impl IntoResponse> {
    let since = q.since.as_deref().map(parse_since).transpose()?;
    Ok(Json(gw.query_readings(since, q.node.as_deref(), q.sensor.as_deref())?))
}

// ---- metrics ----

#[derive(Debug, Deserialize)]
struct ThroughputQuery {
    protocol: Option<String>,
    window: Option<f64>,
    node: Option<String>,
}

#[derive(Debug, Serialize)]
struct ProtocolThroughput {
    protocol: ProtocolId,
    kbps: f64,
    nodes: BTreeMap<String, f64>,
}

async fn throughput(State(gw): State<AppState>, Query(q): Query<ThroughputQuery>) -> ApiResult<impl IntoResponse> {
    let window = q.window.unwrap_or(gw.config().throughput_window_s);
    if !(window.is_finite() && window > 0.0) {
        return Err(ApiError::unprocessable("window must be a positive number of seconds"));
    }
    let protocols = match q.protocol.as_deref() {
        Some(p) => vec![p.parse::<ProtocolId>().map_err(|e| ApiError::unprocessable(e.to_string()))?],
        None => ProtocolId::ALL.to_vec(),
    };
    let at = gw.clock().now();
    let series: Vec<_> = protocols
        .into_iter()
        .map(|p| {
            let nodes = match q.node.as_deref() {
                Some(n) => vec![n.to_string()],
                None => gw.throughput_nodes(p),
            };
            ProtocolThroughput {
                protocol: p,
                kbps: gw.throughput(p, q.node.as_deref(), window),
                nodes: nodes
                    .into_iter()
                    .map(|n| {
                        let kbps = gw.throughput(p, Some(&n), window);
                        (n, kbps)
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(Json(json!({
        "at": model::format_timestamp(&at),
        "window_s": window,
        "protocols": series,
    })))
}

async fn host_stats(State(gw): State<AppState>) -> impl IntoResponse {
    Json(gw.host_series())
}

async fn counters(State(gw): State<AppState>) -> impl IntoResponse {
    Json(gw.counters())
}

// ---- alarms ----

async fn list_alarms(State(gw): State<AppState>) -> impl IntoResponse {
    Json(gw.alarms())
}

async fn create_alarm(State(gw): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let rule: AlarmRule = parse_body(&body)?;
    Ok((StatusCode::CREATED, Json(gw.add_alarm(rule)?)))
}

async fn delete_alarm(State(gw): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    gw.remove_alarm(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

// ---- events ----

async fn events(State(gw): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = gw.subscribe_events();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let data = match rx.recv().await {
            Ok(event) => serde_json::to_string(&event).expect("event serialization is infallible"),
            Err(RecvError::Lagged(n)) => json!({
                "type": "diagnostic",
                "kind": "stream",
                "message": format!("{n} events skipped, client too slow"),
            })
            .to_string(),
            Err(RecvError::Closed) => return None,
        };
        Some((Ok(Event::default().data(data)), rx))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
