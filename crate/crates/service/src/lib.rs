//! HTTP front end of the scenario engine.
//!
//! Responses carry `X-API-Version: 1`; a request naming any other version is
//! refused with 400. Errors are JSON `{"code", "message"}`. Inference runs on
//! the blocking pool against a shared engine that can be swapped atomically:
//! a request holds the `Arc` it started with, so it never sees a half-loaded
//! checkpoint.

use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gcn_rwz::scenario::{parse_time, NetworkSnapshot, ScenarioEngine, ScenarioRequest, ScenarioResponse, SegmentHistory};
use serde::{Deserialize, Serialize};

pub const API_VERSION: &str = "1";
pub const VERSION_HEADER: &str = "x-api-version";

/// Builds a fresh engine, e.g. from the checkpoint on disk.
pub type Loader = Box<dyn Fn() -> gcn_rwz::Result<ScenarioEngine> + Send + Sync>;

pub struct AppState {
    engine: RwLock<Arc<ScenarioEngine>>,
    loader: Option<Loader>,
}

impl AppState {
    pub fn new(engine: ScenarioEngine) -> Self {
        Self {
            engine: RwLock::new(Arc::new(engine)),
            loader: None,
        }
    }

    /// Enables `POST /reload`.
    pub fn with_loader(mut self, loader: Loader) -> Self {
        self.loader = Some(loader);
        self
    }

    pub fn engine(&self) -> Arc<ScenarioEngine> {
        self.engine.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Installs `engine` for all later requests; returns the previous one.
    pub fn swap(&self, engine: ScenarioEngine) -> Arc<ScenarioEngine> {
        let mut slot = self.engine.write().unwrap_or_else(|e| e.into_inner());
        std::mem::replace(&mut *slot, Arc::new(engine))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<gcn_rwz::Error> for ApiError {
    fn from(e: gcn_rwz::Error) -> Self {
        use gcn_rwz::Error as E;
        let (status, code) = match &e {
            E::OutOfRange(_) => (StatusCode::NOT_FOUND, "out_of_range"),
            E::Schema(_) | E::Format { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_event"),
            E::Parameter(_) | E::Config(_) => (StatusCode::BAD_REQUEST, "invalid_parameter"),
            E::Numeric(_) | E::Tensor(_) => (StatusCode::INTERNAL_SERVER_ERROR, "numeric"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), "malformed_request", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_parameter", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: String,
    pub api_version: String,
    pub segments: usize,
}

#[derive(Debug, Deserialize)]
pub struct NetworkQuery {
    pub at: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct HistoryQuery {
    pub segment: String,
    pub from: Option<String>,
    pub to: Option<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/network", get(network))
        .route("/history", get(history))
        .route("/scenario", post(scenario))
        .route("/reload", post(reload))
        .layer(middleware::from_fn(versioning))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on http://{addr}");
    }
    axum::serve(listener, router(state)).await
}

async fn versioning(req: Request, next: Next) -> Response {
    let requested = req.headers().get(VERSION_HEADER).cloned();
    let mut resp = match requested {
        Some(v) if v.as_bytes() != API_VERSION.as_bytes() => ApiError::new(
            StatusCode::BAD_REQUEST,
            "unsupported_version",
            format!("this server speaks API version {API_VERSION}, got {}", String::from_utf8_lossy(v.as_bytes())),
        )
        .into_response(),
        _ => next.run(req).await,
    };
    resp.headers_mut()
        .insert(VERSION_HEADER, HeaderValue::from_static(API_VERSION));
    resp
}

fn health_of(engine: &ScenarioEngine) -> Health {
    Health {
        status: "ok".into(),
        checkpoint_id: engine.checkpoint_id().to_string(),
        api_version: API_VERSION.into(),
        segments: engine.corridor.bundle.segments(),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(health_of(&state.engine()))
}

async fn network(
    State(state): State<Arc<AppState>>,
    query: Result<Query<NetworkQuery>, QueryRejection>,
) -> ApiResult<NetworkSnapshot> {
    let Query(q) = query?;
    let at = q.at.as_deref().map(parse_time).transpose()?;
    Ok(Json(state.engine().network_snapshot(at)?))
}

async fn history(
    State(state): State<Arc<AppState>>,
    query: Result<Query<HistoryQuery>, QueryRejection>,
) -> ApiResult<SegmentHistory> {
    let Query(q) = query?;
    let engine = state.engine();
    let cal = engine.corridor.bundle.calendar;
    let from = q.from.as_deref().map(parse_time).transpose()?.unwrap_or(cal.start);
    let to = q
        .to
        .as_deref()
        .map(parse_time)
        .transpose()?
        .unwrap_or_else(|| cal.time_at(cal.len));
    Ok(Json(engine.history(&q.segment, from, to)?))
}

async fn scenario(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ScenarioRequest>, JsonRejection>,
) -> ApiResult<ScenarioResponse> {
    let Json(req) = body?;
    let engine = state.engine();
    let resp = tokio::task::spawn_blocking(move || engine.predict_scenario(&req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(resp))
}

async fn reload(State(state): State<Arc<AppState>>) -> ApiResult<Health> {
    if state.loader.is_none() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "reload_unavailable",
            "this server was started without a checkpoint path",
        ));
    }
    let task_state = state.clone();
    let engine = tokio::task::spawn_blocking(move || task_state.loader.as_ref().map(|load| load()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "reload_unavailable", "no loader"))??;
    let health = health_of(&engine);
    state.swap(engine);
    log::info!("reloaded checkpoint {}", health.checkpoint_id);
    Ok(Json(health))
}
