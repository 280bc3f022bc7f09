//! HTTP/1.1 + JSON binding of the draft protocol.
//!
//! `POST /v1/draft` takes a [`DraftRequest`] and answers a [`DraftResponse`];
//! `GET /v1/meta` answers [`ServerMeta`]. Errors carry an [`ErrorBody`] with
//! status 400 (schema or vocabulary), 413 (context) or 503 (backend).

use std::future::Future;
use std::io;
use std::net::{SocketAddr, TcpListener as StdTcpListener, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use tokio::sync::oneshot;

use super::{
    decode_request, decode_response, encode_request, encode_response, DraftRequest, DraftResponse,
    DraftService, DraftTransport, ErrorBody, ProtocolError, ServerMeta, TransportError,
};

#[derive(Clone)]
struct AppState {
    service: Arc<DraftService>,
    request_timeout: Duration,
}

pub fn router(service: Arc<DraftService>, request_timeout: Duration) -> Router {
    Router::new()
        .route("/v1/draft", post(draft))
        .route("/v1/meta", get(meta))
        .with_state(AppState {
            service,
            request_timeout,
        })
}

fn json_response(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error_response(err: &ProtocolError) -> Response {
    let status = StatusCode::from_u16(err.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    json_response(status, serde_json::to_vec(&err.to_body()).expect("error body serializes"))
}

async fn meta(State(state): State<AppState>) -> Response {
    json_response(
        StatusCode::OK,
        serde_json::to_vec(&state.service.meta()).expect("meta serializes"),
    )
}

async fn draft(State(state): State<AppState>, body: Bytes) -> Response {
    let request = match decode_request(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    let service = state.service.clone();
    let work = tokio::task::spawn_blocking(move || service.serve(&request));
    match tokio::time::timeout(state.request_timeout, work).await {
        Ok(Ok(Ok(response))) => json_response(StatusCode::OK, encode_response(&response)),
        Ok(Ok(Err(e))) => error_response(&e),
        Ok(Err(join)) => error_response(&ProtocolError::BackendUnavailable(join.to_string())),
        Err(_) => error_response(&ProtocolError::BackendUnavailable(format!(
            "request exceeded {:?}",
            state.request_timeout
        ))),
    }
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve_until<F>(
    listener: tokio::net::TcpListener,
    service: Arc<DraftService>,
    request_timeout: Duration,
    shutdown: F,
) -> io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(service, request_timeout))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A draft server running on its own thread and runtime.
pub struct DraftServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl DraftServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| io::Error::other("draft server thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for DraftServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Binds synchronously (so bind failures surface to the caller) and serves
/// in the background.
pub fn spawn_draft_server(
    service: Arc<DraftService>,
    addr: impl ToSocketAddrs,
    request_timeout: Duration,
) -> io::Result<DraftServerHandle> {
    let listener = StdTcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("draft-server".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                serve_until(listener, service, request_timeout, async {
                    let _ = rx.await;
                })
                .await
            })
        })?;
    Ok(DraftServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: Duration::from_millis(100),
        }
    }
}

/// Blocking HTTP client for the draft service. Connection failures and
/// 503 answers are retried up to the policy's budget.
pub struct HttpTransport {
    base_url: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, timeout: Duration, retry: RetryPolicy) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Unreachable {
                attempts: 0,
                detail: e.to_string(),
            })?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
            retry,
        })
    }

    fn with_retries<T>(
        &self,
        mut attempt: impl FnMut() -> Result<T, (bool, TransportError)>,
    ) -> Result<T, TransportError> {
        let max = self.retry.max_attempts.max(1);
        let mut last = None;
        for n in 1..=max {
            match attempt() {
                Ok(v) => return Ok(v),
                Err((retryable, err)) => {
                    if !retryable {
                        return Err(err);
                    }
                    tracing::debug!(attempt = n, error = %err, "draft transport retry");
                    last = Some(err);
                    if n < max {
                        std::thread::sleep(self.retry.backoff * n as u32);
                    }
                }
            }
        }
        match last {
            Some(TransportError::Unreachable { detail, .. }) => Err(TransportError::Unreachable {
                attempts: max,
                detail,
            }),
            Some(other) => Err(other),
            None => unreachable!("at least one attempt"),
        }
    }

    fn decode_error(status: reqwest::StatusCode, body: &[u8]) -> (bool, TransportError) {
        let retryable = status == reqwest::StatusCode::SERVICE_UNAVAILABLE;
        match serde_json::from_slice::<ErrorBody>(body) {
            Ok(b) => (retryable, TransportError::Remote(ProtocolError::from_body(b))),
            Err(_) => (
                retryable,
                TransportError::Codec(format!("HTTP {status}: {}", String::from_utf8_lossy(body))),
            ),
        }
    }
}

fn unreachable_err(e: reqwest::Error) -> (bool, TransportError) {
    (
        true,
        TransportError::Unreachable {
            attempts: 1,
            detail: e.to_string(),
        },
    )
}

impl DraftTransport for HttpTransport {
    fn meta(&self) -> Result<ServerMeta, TransportError> {
        let url = format!("{}/v1/meta", self.base_url);
        self.with_retries(|| {
            let resp = self.client.get(&url).send().map_err(unreachable_err)?;
            let status = resp.status();
            let body = resp.bytes().map_err(unreachable_err)?;
            if !status.is_success() {
                return Err(Self::decode_error(status, &body));
            }
            serde_json::from_slice(&body).map_err(|e| (false, TransportError::Codec(e.to_string())))
        })
    }

    fn request_draft(&self, request: &DraftRequest) -> Result<DraftResponse, TransportError> {
        let url = format!("{}/v1/draft", self.base_url);
        let body = encode_request(request);
        self.with_retries(|| {
            let resp = self
                .client
                .post(&url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone())
                .send()
                .map_err(unreachable_err)?;
            let status = resp.status();
            let bytes = resp.bytes().map_err(unreachable_err)?;
            if !status.is_success() {
                return Err(Self::decode_error(status, &bytes));
            }
            decode_response(&bytes).map_err(|e| (false, TransportError::Codec(e.to_string())))
        })
    }
}
