//! HTTP front end for ensview sessions.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ensview::session::{ApiRequest, CreateParams, GuardPolicy, SelectionBody, SessionError, SessionManager};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

type Shared = Arc<SessionManager>;

struct ApiError {
    status: StatusCode,
    body: Value,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn bad_request(msg: String, revision: Option<u64>) -> ApiError {
    ApiError {
        status: StatusCode::BAD_REQUEST,
        body: json!({ "error": msg, "revision": revision }),
    }
}

fn current_revision(mgr: &SessionManager, session: Option<&str>) -> Option<u64> {
    let s = mgr.session(session?).ok()?;
    let rev = s.read().ok()?.revision();
    Some(rev)
}

fn session_of(req: &ApiRequest) -> Option<&str> {
    match req {
        ApiRequest::CreateSession { .. } => None,
        ApiRequest::Frame { session, .. }
        | ApiRequest::Selection { session, .. }
        | ApiRequest::Toggle { session, .. }
        | ApiRequest::ErrorsFilter { session, .. }
        | ApiRequest::ModelSpace { session, .. }
        | ApiRequest::Axes { session, .. }
        | ApiRequest::Layout { session, .. }
        | ApiRequest::Guard { session, .. }
        | ApiRequest::Cv { session }
        | ApiRequest::Reset { session }
        | ApiRequest::Perf { session }
        | ApiRequest::Candidates { session }
        | ApiRequest::Snapshot { session } => Some(session),
    }
}

/// Runs a request off the async executor; projections can take seconds.
async fn run(mgr: Shared, req: ApiRequest) -> Result<Json<Value>, ApiError> {
    let out = tokio::task::spawn_blocking(move || {
        let result = mgr.dispatch(&req);
        result.map_err(|e: SessionError| {
            let revision = current_revision(&mgr, session_of(&req));
            ApiError {
                status: StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
                body: json!({ "error": e.to_string(), "revision": revision }),
            }
        })
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        body: json!({ "error": format!("worker failed: {e}"), "revision": null }),
    })?;
    out.map(Json)
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid JSON body: {e}"), None))
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid JSON body: {e}"), None))
}

async fn create(State(mgr): State<Shared>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let params: CreateParams = parse_body(&body)?;
    run(mgr, ApiRequest::CreateSession { params }).await
}

#[derive(Debug, Deserialize, Default)]
struct FrameQuery {
    mode: Option<String>,
    cols: Option<usize>,
    rows: Option<usize>,
}

async fn frame(State(mgr): State<Shared>, Path(session): Path<String>, Query(q): Query<FrameQuery>) -> Result<Json<Value>, ApiError> {
    run(
        mgr,
        ApiRequest::Frame {
            session,
            mode: q.mode,
            cols: q.cols,
            rows: q.rows,
        },
    )
    .await
}

async fn selection(State(mgr): State<Shared>, Path(session): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let body: SelectionBody = parse_required(&body)?;
    run(mgr, ApiRequest::Selection { session, body }).await
}

async fn toggle(State(mgr): State<Shared>, Path((session, model_id)): Path<(String, usize)>) -> Result<Json<Value>, ApiError> {
    run(mgr, ApiRequest::Toggle { session, model_id }).await
}

#[derive(Debug, Deserialize)]
struct OnBody {
    on: bool,
}

async fn errors_filter(State(mgr): State<Shared>, Path(session): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let OnBody { on } = parse_required(&body)?;
    run(mgr, ApiRequest::ErrorsFilter { session, on }).await
}

#[derive(Debug, Deserialize, Default)]
struct AxesQuery {
    x: Option<String>,
    y: Option<String>,
}

async fn model_space(State(mgr): State<Shared>, Path(session): Path<String>, Query(q): Query<AxesQuery>) -> Result<Json<Value>, ApiError> {
    run(mgr, ApiRequest::ModelSpace { session, x: q.x, y: q.y }).await
}

#[derive(Debug, Deserialize)]
struct AxesBody {
    x: String,
    y: String,
}

async fn axes(State(mgr): State<Shared>, Path(session): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let AxesBody { x, y } = parse_required(&body)?;
    run(mgr, ApiRequest::Axes { session, x, y }).await
}

#[derive(Debug, Deserialize)]
struct LayoutBody {
    mode: String,
}

async fn layout(State(mgr): State<Shared>, Path(session): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let LayoutBody { mode } = parse_required(&body)?;
    run(mgr, ApiRequest::Layout { session, mode }).await
}

async fn guard(State(mgr): State<Shared>, Path(session): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let guard: GuardPolicy = parse_required(&body)?;
    run(mgr, ApiRequest::Guard { session, guard }).await
}

async fn cv(State(mgr): State<Shared>, Path(session): Path<String>) -> Result<Json<Value>, ApiError> {
    run(mgr, ApiRequest::Cv { session }).await
}

async fn reset(State(mgr): State<Shared>, Path(session): Path<String>) -> Result<Json<Value>, ApiError> {
    run(mgr, ApiRequest::Reset { session }).await
}

async fn perf(State(mgr): State<Shared>, Path(session): Path<String>) -> Result<Json<Value>, ApiError> {
    run(mgr, ApiRequest::Perf { session }).await
}

async fn candidates(State(mgr): State<Shared>, Path(session): Path<String>) -> Result<Json<Value>, ApiError> {
    run(mgr, ApiRequest::Candidates { session }).await
}

async fn snapshot(State(mgr): State<Shared>, Path(session): Path<String>) -> Result<Json<Value>, ApiError> {
    run(mgr, ApiRequest::Snapshot { session }).await
}

/// Library summary. The library never changes while served, so its
/// revision is always 0.
async fn library(State(mgr): State<Shared>) -> Json<Value> {
    let lib = &mgr.workspace().lib;
    let models: Vec<Value> = (0..lib.len())
        .map(|m| {
            json!({
                "model_id": m,
                "spec_id": lib.spec_id(m),
                "metrics": lib.model_metrics[m],
            })
        })
        .collect();
    Json(json!({
        "revision": 0,
        "classes": lib.classes(),
        "n_test": lib.n_test(),
        "grid": lib.manifest.grid,
        "models": models,
        "attributes": mgr.workspace().ds.attributes.iter().map(|a| a.name.clone()).collect::<Vec<_>>(),
    }))
}

pub fn router(mgr: Shared) -> Router {
    Router::new()
        .route("/library", get(library))
        .route("/sessions", post(create))
        .route("/sessions/{id}/frame", get(frame))
        .route("/sessions/{id}/selection", post(selection))
        .route("/sessions/{id}/models/{model_id}/toggle", post(toggle))
        .route("/sessions/{id}/errors-filter", post(errors_filter))
        .route("/sessions/{id}/model-space", get(model_space))
        .route("/sessions/{id}/axes", post(axes))
        .route("/sessions/{id}/layout", post(layout))
        .route("/sessions/{id}/guard", post(guard))
        .route("/sessions/{id}/cv", post(cv))
        .route("/sessions/{id}/reset", post(reset))
        .route("/sessions/{id}/perf", get(perf))
        .route("/sessions/{id}/candidates", get(candidates))
        .route("/sessions/{id}/snapshot", get(snapshot))
        .with_state(mgr)
}
