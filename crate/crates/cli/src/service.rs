//! JSON endpoints for the annotation UI.

use std::net::SocketAddr;

use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use ruleboost::annotation::{AnnotationError, Decision};

use crate::store::{SessionStore, StoreError};

/// Header naming the annotator when the query string does not.
pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

pub fn router(store: SessionStore) -> Router {
    Router::new()
        .route("/api/session", get(session))
        .route("/api/session/next", get(next))
        .route("/api/session/decision", post(decision))
        .route("/api/session/progress", get(progress))
        .route("/api/metrics", get(metrics))
        .route("/api/agreement", get(agreement))
        .with_state(store)
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let status = match &self {
            StoreError::NoSession => StatusCode::NOT_FOUND,
            StoreError::Annotation(e) => match e {
                AnnotationError::AlreadyDecided { .. } | AnnotationError::Closed(_) => StatusCode::CONFLICT,
                AnnotationError::UnknownRule(_) | AnnotationError::UnknownAnnotator(_) => StatusCode::NOT_FOUND,
                _ => StatusCode::UNPROCESSABLE_ENTITY,
            },
        };
        error(status, self)
    }
}

async fn session(State(store): State<SessionStore>) -> Response {
    match store.summary() {
        Some(s) => Json(s).into_response(),
        None => StoreError::NoSession.into_response(),
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

/// 204 once the annotator has nothing left to decide.
async fn next(State(store): State<SessionStore>, Query(q): Query<NextQuery>, headers: HeaderMap) -> Response {
    let annotator = q
        .annotator
        .or_else(|| headers.get(ANNOTATOR_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string));
    let Some(annotator) = annotator else {
        return error(StatusCode::BAD_REQUEST, "missing annotator");
    };
    match store.next_for(&annotator) {
        Ok(Some(card)) => Json(card).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => e.into_response(),
    }
}

#[derive(Deserialize)]
struct DecisionBody {
    rule_id: String,
    annotator: String,
    decision: Decision,
    #[serde(default)]
    elapsed_ms: Option<u64>,
}

async fn decision(State(store): State<SessionStore>, body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match store.record(&body.rule_id, &body.annotator, body.decision, body.elapsed_ms) {
        Ok(p) => Json(p).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn progress(State(store): State<SessionStore>) -> Response {
    match store.progress() {
        Some(p) => Json(p).into_response(),
        None => StoreError::NoSession.into_response(),
    }
}

async fn metrics(State(store): State<SessionStore>) -> Response {
    Json(store.reports()).into_response()
}

async fn agreement(State(store): State<SessionStore>) -> Response {
    Json(store.agreement()).into_response()
}

/// The service on its own runtime; dropping it stops serving.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    runtime: tokio::runtime::Runtime,
}

impl ServiceHandle {
    /// Serves until the process exits.
    pub fn serve_forever(self) -> ! {
        self.runtime.block_on(std::future::pending::<()>());
        unreachable!("pending future resolved")
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn(addr: SocketAddr, store: SessionStore) -> std::io::Result<ServiceHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_io()
        .build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    runtime.spawn(async move {
        if let Err(e) = axum::serve(listener, router(store)).await {
            log::error!("annotation service stopped: {e}");
        }
    });
    log::info!("annotation service listening on http://{addr}");
    Ok(ServiceHandle { addr, runtime })
}
