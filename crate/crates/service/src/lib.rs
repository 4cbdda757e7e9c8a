//! HTTP+JSON control API.
//!
//! All times in requests and responses are simulation milliseconds.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/nodes` | node summaries |
//! | GET | `/api/telemetry?device&series&from&to&agg&bucket` | stored points |
//! | POST | `/api/downlink` | queue `{device_id, fport, payload_b64}` |
//! | GET | `/api/downlink/queue` | pending downlinks |
//! | GET | `/api/energy/report?profile&basis` | steady-state energy figures |
//! | POST | `/api/scenario` | replace the running scenario |
//! | GET | `/api/scenario/status` | run progress |
//! | GET | `/api/stream` | server-sent topic messages and phase events |
//! | GET | `/api/errors?from&to` | `lorawan/error` history |
//! | GET | `/api/export?format` | all stored points as csv or jsonl |

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;

use senswich::control::{get_energy_report, run_scenario, ControlError, RunError, RunHandle};
use senswich::node::{Basis, ProfileKind};
use senswich::pipeline::{Aggregation, ExportFormat, QueryError};
use senswich::scenario::{ConfigError, ScenarioConfig};
use senswich::sim::{DownlinkRequestError, StreamEvent};
use senswich::time::{SimDuration, SimTime};

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    run: RwLock<Option<RunHandle>>,
    data_dir: Option<PathBuf>,
    runs_started: AtomicU64,
}

impl AppState {
    /// With `data_dir`, each scenario writes its files to
    /// `<data_dir>/run-<n>/`.
    pub fn new(data_dir: Option<PathBuf>) -> Self {
        Self {
            inner: Arc::new(Inner {
                run: RwLock::new(None),
                data_dir,
                runs_started: AtomicU64::new(0),
            }),
        }
    }

    /// Stops the current scenario, if any, and starts `config`.
    pub fn start(&self, config: ScenarioConfig) -> Result<(), RunError> {
        let n = self.inner.runs_started.fetch_add(1, Ordering::SeqCst) + 1;
        let out = self.inner.data_dir.as_ref().map(|d| d.join(format!("run-{n}")));
        let mut slot = self.inner.run.write().expect("run slot poisoned");
        // the old run's files must be closed before the new one starts
        slot.take();
        *slot = Some(run_scenario(config, out.as_deref())?);
        Ok(())
    }

    fn with_run<R>(&self, f: impl FnOnce(&RunHandle) -> R) -> Result<R, ApiError> {
        let slot = self.inner.run.read().expect("run slot poisoned");
        slot.as_ref().map(f).ok_or(ApiError::NoScenario)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/nodes", get(nodes))
        .route("/api/telemetry", get(telemetry))
        .route("/api/downlink", post(enqueue_downlink))
        .route("/api/downlink/queue", get(downlink_queue))
        .route("/api/energy/report", get(energy_report))
        .route("/api/scenario", post(start_scenario))
        .route("/api/scenario/status", get(scenario_status))
        .route("/api/stream", get(stream))
        .route("/api/errors", get(errors))
        .route("/api/export", get(export))
        .with_state(state)
}

#[derive(Debug)]
enum ApiError {
    NoScenario,
    BadRequest(String),
    UnknownDevice(String),
    Config(ConfigError),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NoScenario => (
                StatusCode::CONFLICT,
                json!({"error": "no_scenario", "message": "no scenario has been started"}),
            ),
            ApiError::BadRequest(m) => (
                StatusCode::BAD_REQUEST,
                json!({"error": "bad_request", "message": m}),
            ),
            ApiError::UnknownDevice(d) => (
                StatusCode::NOT_FOUND,
                json!({"error": "unknown_device", "message": format!("unknown device `{d}`")}),
            ),
            ApiError::Config(e) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": "config", "message": e.to_string(), "fields": e.errors}),
            ),
            ApiError::Internal(m) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({"error": "internal", "message": m}),
            ),
        };
        (status, Json(body)).into_response()
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::UnknownDevice(d) => ApiError::UnknownDevice(d),
            other => ApiError::BadRequest(other.to_string()),
        }
    }
}

impl From<ControlError> for ApiError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::Downlink(DownlinkRequestError::UnknownDevice(d)) => ApiError::UnknownDevice(d),
            ControlError::Downlink(DownlinkRequestError::Base64(m)) => {
                ApiError::BadRequest(format!("base64: {m}"))
            }
            ControlError::Downlink(e) => ApiError::BadRequest(e.to_string()),
            ControlError::Stopped => ApiError::NoScenario,
        }
    }
}

async fn nodes(State(app): State<AppState>) -> Result<Response, ApiError> {
    app.with_run(|h| Json(h.read().node_summaries()).into_response())
}

#[derive(Debug, Deserialize)]
struct TelemetryParams {
    device: String,
    series: String,
    from: Option<u64>,
    to: Option<u64>,
    agg: Option<String>,
    bucket: Option<u64>,
}

#[derive(Debug, Serialize)]
struct TelemetryPoint {
    time: SimTime,
    value: f64,
}

#[derive(Debug, Serialize)]
struct TelemetryResponse {
    device: String,
    series: String,
    agg: Aggregation,
    points: Vec<TelemetryPoint>,
}

async fn telemetry(
    State(app): State<AppState>,
    Query(p): Query<TelemetryParams>,
) -> Result<Json<TelemetryResponse>, ApiError> {
    let agg: Aggregation = p.agg.as_deref().unwrap_or("raw").parse()?;
    app.with_run(|h| {
        let sim = h.read();
        let from = SimTime(p.from.unwrap_or(0));
        let to = p.to.map(SimTime).unwrap_or_else(|| sim.now());
        let bucket = SimDuration(p.bucket.unwrap_or(0));
        let points = sim
            .pipeline()
            .query(&p.device, &p.series, from, to, agg, bucket)?;
        Ok(Json(TelemetryResponse {
            device: p.device.clone(),
            series: p.series.clone(),
            agg,
            points: points
                .into_iter()
                .map(|(time, value)| TelemetryPoint { time, value })
                .collect(),
        }))
    })?
}

#[derive(Debug, Deserialize)]
struct DownlinkRequest {
    device_id: String,
    fport: u16,
    payload_b64: String,
}

async fn enqueue_downlink(
    State(app): State<AppState>,
    Json(req): Json<DownlinkRequest>,
) -> Result<Response, ApiError> {
    // the run thread replies between actions; keep the wait off the async workers
    let cmd = tokio::task::spawn_blocking(move || {
        app.with_run(|h| h.enqueue_downlink(&req.device_id, req.fport, &req.payload_b64))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))???;
    Ok((StatusCode::CREATED, Json(cmd)).into_response())
}

async fn downlink_queue(State(app): State<AppState>) -> Result<Response, ApiError> {
    app.with_run(|h| {
        let sim = h.read();
        let pending: Vec<_> = sim.downlinks().pending().cloned().collect();
        Json(pending).into_response()
    })
}

#[derive(Debug, Deserialize)]
struct EnergyParams {
    profile: Option<String>,
    basis: Option<String>,
}

async fn energy_report(Query(p): Query<EnergyParams>) -> Result<Response, ApiError> {
    let profile: ProfileKind = p
        .profile
        .as_deref()
        .unwrap_or("regulator")
        .parse()
        .map_err(ApiError::BadRequest)?;
    let basis: Basis = p
        .basis
        .as_deref()
        .unwrap_or("capacity")
        .parse()
        .map_err(ApiError::BadRequest)?;
    Ok(Json(get_energy_report(profile, basis)).into_response())
}

async fn start_scenario(State(app): State<AppState>, body: String) -> Result<Response, ApiError> {
    let config = ScenarioConfig::from_json(&body).map_err(ApiError::Config)?;
    tokio::task::spawn_blocking(move || {
        app.start(config).map_err(|e| match e {
            RunError::Config(c) => ApiError::Config(c),
            RunError::Io(e) => ApiError::Internal(e.to_string()),
        })?;
        app.with_run(|h| (StatusCode::ACCEPTED, Json(h.status())).into_response())
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn scenario_status(State(app): State<AppState>) -> Result<Response, ApiError> {
    app.with_run(|h| Json(h.status()).into_response())
}

async fn stream(
    State(app): State<AppState>,
) -> Result<Sse<impl Stream<Item = Result<Event, std::convert::Infallible>>>, ApiError> {
    let rx = app.with_run(|h| h.subscribe())?;
    let (tx, out) = futures::channel::mpsc::unbounded();
    // ends once the simulation or the client goes away
    thread::Builder::new()
        .name("senswich-sse".into())
        .spawn(move || {
            while let Ok(ev) = rx.recv() {
                if tx.unbounded_send(ev).is_err() {
                    break;
                }
            }
        })
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let events = out.map(|ev: StreamEvent| {
        let name = match &ev {
            StreamEvent::Message(m) => m.topic.clone(),
            StreamEvent::Phase(_) => "phase".to_string(),
        };
        let data = serde_json::to_string(&ev).expect("stream events serialize");
        Ok(Event::default().event(name).data(data))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
struct RangeParams {
    from: Option<u64>,
    to: Option<u64>,
}

async fn errors(State(app): State<AppState>, Query(p): Query<RangeParams>) -> Result<Response, ApiError> {
    app.with_run(|h| {
        let sim = h.read();
        let from = SimTime(p.from.unwrap_or(0));
        let to = p.to.map(SimTime).unwrap_or(SimTime(u64::MAX));
        if from > to {
            return Err(ApiError::BadRequest(format!("from {from} is after to {to}")));
        }
        Ok(Json(sim.pipeline().errors(from, to)).into_response())
    })?
}

#[derive(Debug, Deserialize)]
struct ExportParams {
    format: Option<String>,
}

async fn export(State(app): State<AppState>, Query(p): Query<ExportParams>) -> Result<Response, ApiError> {
    let format: ExportFormat = p
        .format
        .as_deref()
        .unwrap_or("csv")
        .parse()
        .map_err(ApiError::BadRequest)?;
    let content_type = match format {
        ExportFormat::Csv => "text/csv",
        ExportFormat::Jsonl => "application/x-ndjson",
    };
    app.with_run(|h| {
        let mut buf = Vec::new();
        h.read()
            .export(format, &mut buf)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(([(header::CONTENT_TYPE, content_type)], buf).into_response())
    })?
}
