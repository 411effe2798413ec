//! HTTP server exposing any [`ScoringBackend`] over the wire protocol.
//! Used to serve the mock backend to out-of-process clients and in tests.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::oneshot;

use crate::backend::{
    BackendError, GenerateRequest, GenerateResponse, ScoreRequest, ScoringBackend,
    REQUEST_ID_HEADER,
};

type SharedBackend = Arc<dyn ScoringBackend>;

fn error_response(e: BackendError) -> Response {
    let (status, candidate) = match &e {
        BackendError::Precondition(_) => (StatusCode::BAD_REQUEST, None),
        BackendError::CandidateRejected { candidate, .. } => {
            (StatusCode::UNPROCESSABLE_ENTITY, Some(candidate.clone()))
        }
        _ => (StatusCode::INTERNAL_SERVER_ERROR, None),
    };
    (
        status,
        Json(json!({ "error": e.to_string(), "candidate": candidate })),
    )
        .into_response()
}

fn with_request_id(headers: &HeaderMap, mut resp: Response) -> Response {
    if let Some(id) = headers.get(REQUEST_ID_HEADER) {
        resp.headers_mut().insert(REQUEST_ID_HEADER, id.clone());
    }
    resp
}

async fn score(
    State(backend): State<SharedBackend>,
    headers: HeaderMap,
    Json(req): Json<ScoreRequest>,
) -> Response {
    let result = tokio::task::spawn_blocking(move || backend.score(&req)).await;
    let resp = match result {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(BackendError::Transport(e.to_string())),
    };
    with_request_id(&headers, resp)
}

async fn generate(
    State(backend): State<SharedBackend>,
    headers: HeaderMap,
    Json(req): Json<GenerateRequest>,
) -> Response {
    let result = tokio::task::spawn_blocking(move || backend.generate(&req)).await;
    let resp = match result {
        Ok(Ok(text)) => Json(GenerateResponse {
            text,
            greedy: Some(true),
        })
        .into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(BackendError::Transport(e.to_string())),
    };
    with_request_id(&headers, resp)
}

pub fn router(backend: SharedBackend) -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/generate", post(generate))
        .with_state(backend)
}

/// A server running on a background thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits (for foreground use).
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 for an ephemeral port) and serves `backend`.
pub fn spawn(backend: SharedBackend, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    spawn_router(router(backend), addr)
}

/// Serves an arbitrary router on a background thread.
pub fn spawn_router(app: Router, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    tracing::error!(error = %e, "cannot adopt listener");
                    return;
                }
            };
            let served = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = served.await {
                tracing::error!(error = %e, "server stopped");
            }
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
