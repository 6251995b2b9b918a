//! Live session service.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | `POST` | `/sessions` | [`CreateSession`] (may be empty) | `201` [`Created`] |
//! | `POST` | `/sessions/{id}/bits` | [`PushBits`] | [`Accepted`] |
//! | `GET` | `/sessions/{id}/stats` | | [`Snapshot`] |
//! | `GET` | `/sessions/{id}/events` | | SSE stream of `snapshot` events |
//! | `DELETE` | `/sessions/{id}` | | final [`Snapshot`] |
//!
//! Errors are `{"error": "..."}` with status 400 (bad payload or config),
//! 404 (unknown session) or 409 (session already closed). The event stream
//! sends the current snapshot on connect, then one per change, repeating the
//! latest at least every heartbeat interval; it ends after the closed
//! snapshot. Each session's log is written to `<log_dir>/<id>.log`.

pub mod live;

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use mdlbell::qstate::StateKind;
use mdlbell::session::{parse_bits, SessionConfig};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

pub use live::{spawn_session, LiveError, Role, SessionCore, SessionHandle, Snapshot};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub log_dir: PathBuf,
    pub heartbeat: Duration,
}

impl ServiceConfig {
    pub fn new(log_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            log_dir: log_dir.into(),
            heartbeat: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Chsh,
    Mdl,
    ChshIdeal,
    MdlIdeal,
}

impl Preset {
    pub fn config(self) -> SessionConfig {
        match self {
            Preset::Chsh => SessionConfig::calibrated(StateKind::ChshMaximal),
            Preset::Mdl => SessionConfig::calibrated(StateKind::MdlNonmaximal),
            Preset::ChshIdeal => SessionConfig::ideal(StateKind::ChshMaximal),
            Preset::MdlIdeal => SessionConfig::ideal(StateKind::MdlNonmaximal),
        }
    }
}

/// A preset with optional overrides, or a complete `config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub max_trials: Option<u64>,
    pub pulse_rate_hz: Option<f64>,
    pub eta_a: Option<f64>,
    pub eta_b: Option<f64>,
    pub config: Option<SessionConfig>,
}

impl CreateSession {
    pub fn resolve(&self) -> SessionConfig {
        let mut cfg = self
            .config
            .clone()
            .unwrap_or_else(|| self.preset.unwrap_or_default().config());
        if let Some(v) = self.seed {
            cfg.rng_seed = v;
        }
        if let Some(v) = self.max_trials {
            cfg.max_trials = Some(v);
        }
        if let Some(v) = self.pulse_rate_hz {
            cfg.pulse_rate_hz = v;
        }
        if let Some(v) = self.eta_a {
            cfg.noise.eta_a = v;
        }
        if let Some(v) = self.eta_b {
            cfg.noise.eta_b = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PushBits {
    pub role: Role,
    /// ASCII `0`/`1`; whitespace is ignored.
    pub bits: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: usize,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id:?}"))
    }
}

impl From<LiveError> for ApiError {
    fn from(e: LiveError) -> Self {
        let status = match e {
            LiveError::Config(_) => StatusCode::BAD_REQUEST,
            LiveError::Closed => StatusCode::CONFLICT,
            LiveError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

struct AppState {
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

type Shared = Arc<AppState>;

impl AppState {
    fn get(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

pub fn router(config: ServiceConfig) -> Router {
    let state = Arc::new(AppState {
        config,
        sessions: Mutex::new(HashMap::new()),
    });
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", axum::routing::delete(close))
        .route("/sessions/{id}/bits", post(push_bits))
        .route("/sessions/{id}/stats", get(stats))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.log_dir)?;
    axum::serve(listener, router(config)).await
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid JSON body: {e}")))
}

async fn create(State(state): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        parse_json(&body)?
    };
    let config = req.resolve();
    let id = uuid::Uuid::new_v4().simple().to_string();
    let log_path = state.config.log_dir.join(format!("{id}.log"));
    let handle = spawn_session(id.clone(), &config, Some(log_path))?;
    state
        .sessions
        .lock()
        .expect("session map poisoned")
        .insert(id.clone(), handle);
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn push_bits(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Accepted>, ApiError> {
    let handle = state.get(&id)?;
    let req: PushBits = parse_json(&body)?;
    let bits = parse_bits(&req.bits).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let accepted = handle.push(req.role, bits).await?;
    Ok(Json(Accepted { accepted }))
}

async fn stats(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<Snapshot>, ApiError> {
    Ok(Json((*state.get(&id)?.latest()).clone()))
}

async fn close(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<Snapshot>, ApiError> {
    let snap = state.get(&id)?.close().await?;
    Ok(Json((*snap).clone()))
}

fn snapshot_event(snap: &Snapshot) -> Event {
    Event::default()
        .event("snapshot")
        .id(snap.seq.to_string())
        .data(serde_json::to_string(snap).expect("snapshot serializes"))
}

async fn events(
    State(state): State<Shared>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let rx = state.get(&id)?.subscribe();
    let heartbeat = state.config.heartbeat;
    let stream = futures::stream::unfold((rx, true, false), move |(mut rx, first, done)| async move {
        if done {
            return None;
        }
        let mut ended = false;
        if !first {
            tokio::select! {
                changed = rx.changed() => ended = changed.is_err(),
                _ = tokio::time::sleep(heartbeat) => {}
            }
        }
        let snap = rx.borrow_and_update().clone();
        let done = ended || snap.closed;
        Some((Ok(snapshot_event(&snap)), (rx, false, done)))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
