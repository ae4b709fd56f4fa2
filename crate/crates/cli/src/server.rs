//! Local HTTP/JSON service over a [`SessionStore`].
//!
//! JSON replies are `{"revision": r, <key>: payload}`; errors are
//! `{code, message, details}`. Every response also carries the revision in
//! the `x-planecal-revision` header.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{RawQuery, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tokio::sync::RwLock;

use planecal::target::PatchSelection;

use crate::error::AppError;
use crate::session::{Channel, SessionStore};

pub const REVISION_HEADER: &str = "x-planecal-revision";

pub type SharedStore = Arc<RwLock<SessionStore>>;

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/api/session", get(get_session))
        .route("/api/frame", get(get_frame).post(post_frame))
        .route("/api/frame/raster", get(get_raster))
        .route("/api/seed", post(post_seed))
        .route("/api/camera-plane", get(get_camera_plane))
        .route("/api/accept", post(post_accept))
        .route("/api/reject", post(post_reject))
        .route("/api/remove", post(post_remove))
        .route("/api/calibrate", post(post_calibrate))
        .route("/api/report", get(get_report))
        .route("/api/measurements", get(get_measurements))
        .fallback(not_found)
        .with_state(store)
}

/// Binds `127.0.0.1:port` and serves until Ctrl-C. `on_ready` receives the
/// bound address, which matters when `port` is 0.
pub async fn serve(store: SessionStore, port: u16, on_ready: impl FnOnce(SocketAddr)) -> Result<(), AppError> {
    let io_error = |e: std::io::Error| AppError::new("io", e.to_string());
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await.map_err(io_error)?;
    on_ready(listener.local_addr().map_err(io_error)?);
    axum::serve(listener, router(Arc::new(RwLock::new(store))))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io_error)
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "conflict" | "duplicate_measurement" | "no_candidate" => StatusCode::CONFLICT,
        "no_frame" | "no_measurement" | "no_report" | "not_found" => StatusCode::NOT_FOUND,
        "bad_request" | "usage" | "invalid_selection" | "invalid_config" => StatusCode::BAD_REQUEST,
        "fit_failure" | "insufficient_measurements" | "singular_normal_matrix" | "invalid_board" => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn with_revision(status: StatusCode, revision: u64, content_type: &'static str, body: impl IntoResponse) -> Response {
    (
        status,
        [
            (header::CONTENT_TYPE, content_type.to_owned()),
            (header::HeaderName::from_static(REVISION_HEADER), revision.to_string()),
        ],
        body,
    )
        .into_response()
}

fn reply(revision: u64, key: &str, payload: impl Serialize) -> Response {
    let mut body = Map::new();
    body.insert("revision".into(), Value::from(revision));
    body.insert(key.into(), serde_json::to_value(payload).expect("payload serializes"));
    let text = serde_json::to_string(&body).expect("payload serializes");
    with_revision(StatusCode::OK, revision, "application/json", text)
}

fn failure(revision: u64, err: &AppError) -> Response {
    with_revision(status_for(err.code), revision, "application/json", err.to_json())
}

fn respond<T: Serialize>(revision: u64, key: &str, result: Result<T, AppError>) -> Response {
    match result {
        Ok(payload) => reply(revision, key, payload),
        Err(e) => failure(revision, &e),
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, AppError> {
    serde_json::from_slice(body).map_err(|e| {
        AppError::new("bad_request", format!("invalid request body: {e}"))
            .with_details(serde_json::json!({ "line": e.line(), "column": e.column() }))
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RevisionRequest {
    revision: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRequest {
    revision: u64,
    frame: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedRequest {
    revision: u64,
    ring: usize,
    column: usize,
    radius: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RemoveRequest {
    revision: u64,
    id: String,
}

async fn not_found(State(store): State<SharedStore>) -> Response {
    let revision = store.read().await.revision();
    failure(revision, &AppError::new("not_found", "no such endpoint"))
}

async fn get_session(State(store): State<SharedStore>) -> Response {
    let s = store.read().await;
    reply(s.revision(), "session", s.state())
}

async fn get_frame(State(store): State<SharedStore>) -> Response {
    let s = store.read().await;
    reply(s.revision(), "frame", s.frame_meta())
}

fn parse_channel(query: Option<&str>) -> Result<Channel, AppError> {
    let value = query
        .unwrap_or("")
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == "channel")
        .map_or("range", |(_, v)| v);
    match value {
        "range" => Ok(Channel::Range),
        "intensity" => Ok(Channel::Intensity),
        other => Err(AppError::new("bad_request", format!("unknown raster channel `{other}`"))
            .with_details(serde_json::json!({ "allowed": ["range", "intensity"] }))),
    }
}

async fn get_raster(State(store): State<SharedStore>, RawQuery(query): RawQuery) -> Response {
    let s = store.read().await;
    match parse_channel(query.as_deref()) {
        Ok(channel) => with_revision(StatusCode::OK, s.revision(), "application/octet-stream", s.raster(channel)),
        Err(e) => failure(s.revision(), &e),
    }
}

async fn post_frame(State(store): State<SharedStore>, body: Bytes) -> Response {
    let mut s = store.write().await;
    let result = parse_body::<FrameRequest>(&body).and_then(|req| s.select_frame(req.revision, &req.frame));
    match result {
        Ok(()) => reply(s.revision(), "frame", s.frame_meta()),
        Err(e) => failure(s.revision(), &e),
    }
}

async fn post_seed(State(store): State<SharedStore>, body: Bytes) -> Response {
    let mut s = store.write().await;
    let result = parse_body::<SeedRequest>(&body).and_then(|req| {
        let sel = PatchSelection {
            ring: req.ring,
            column: req.column,
            radius: req.radius,
        };
        s.seed(req.revision, sel).cloned()
    });
    respond(s.revision(), "candidate", result)
}

async fn get_camera_plane(State(store): State<SharedStore>) -> Response {
    let s = store.read().await;
    respond(s.revision(), "camera", s.camera())
}

async fn post_accept(State(store): State<SharedStore>, body: Bytes) -> Response {
    let mut s = store.write().await;
    let result = parse_body::<RevisionRequest>(&body).and_then(|req| s.accept(req.revision).cloned());
    respond(s.revision(), "accepted", result)
}

async fn post_reject(State(store): State<SharedStore>, body: Bytes) -> Response {
    let mut s = store.write().await;
    let result = parse_body::<RevisionRequest>(&body).and_then(|req| s.reject(req.revision));
    match result {
        Ok(()) => reply(s.revision(), "session", s.state()),
        Err(e) => failure(s.revision(), &e),
    }
}

async fn post_remove(State(store): State<SharedStore>, body: Bytes) -> Response {
    let mut s = store.write().await;
    let result = parse_body::<RemoveRequest>(&body).and_then(|req| s.remove(req.revision, &req.id));
    match result {
        Ok(()) => reply(s.revision(), "session", s.state()),
        Err(e) => failure(s.revision(), &e),
    }
}

async fn post_calibrate(State(store): State<SharedStore>, body: Bytes) -> Response {
    let mut s = store.write().await;
    let result = parse_body::<RevisionRequest>(&body).and_then(|req| s.calibrate(req.revision).cloned());
    respond(s.revision(), "report", result)
}

async fn get_report(State(store): State<SharedStore>) -> Response {
    let s = store.read().await;
    let result = s
        .report()
        .ok_or_else(|| AppError::new("no_report", "no calibration has been run in this session"));
    respond(s.revision(), "report", result)
}

async fn get_measurements(State(store): State<SharedStore>) -> Response {
    let s = store.read().await;
    reply(s.revision(), "measurements", s.measurements())
}
