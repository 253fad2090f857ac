//! Hosts any [`Backend`] behind the native JSON protocol.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::http::ErrorBody;
use super::{Backend, BackendError, GenerateRequest, ScoreRequest};

type Shared = Arc<dyn Backend>;

fn error_response(error: BackendError) -> Response {
    let status = match error {
        BackendError::Transport(_) => StatusCode::BAD_GATEWAY,
        BackendError::Capability(_) | BackendError::Protocol(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    };
    (status, Json(ErrorBody { error })).into_response()
}

async fn score(State(backend): State<Shared>, Json(req): Json<ScoreRequest>) -> Response {
    match tokio::task::spawn_blocking(move || backend.score(&req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(BackendError::Protocol(e.to_string())),
    }
}

async fn generate(State(backend): State<Shared>, Json(req): Json<GenerateRequest>) -> Response {
    match tokio::task::spawn_blocking(move || backend.generate(&req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(BackendError::Protocol(e.to_string())),
    }
}

pub fn router(backend: Shared) -> Router {
    Router::new()
        .route("/score", post(score))
        .route("/generate", post(generate))
        .with_state(backend)
}

/// Serves until the process exits.
pub fn serve_blocking(backend: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "serving backend");
        axum::serve(listener, router(backend)).await
    })
}

/// A server running on a background thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
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

/// Starts `app` on `addr` (port 0 picks a free port).
pub fn spawn_router(app: Router, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let thread = thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener registers with runtime");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

pub fn spawn(backend: Shared, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    spawn_router(router(backend), addr)
}
