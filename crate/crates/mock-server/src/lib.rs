//! Scripted HTTP server implementing `POST /v1/complete`.
//!
//! Used to exercise HTTP completion clients without a model: responses are
//! scripted, latency and failures can be injected, and the server records
//! how many requests it saw and the peak number handled concurrently.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct CompletionResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// How the server answers a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Script {
    Constant(String),
    /// "Yes"/"No" from the low bit of sha256(prompt), or
    /// "entailment"/"contradiction" when the prompt asks for those words.
    PromptHash,
    /// Exact prompt lookup with a default for everything else.
    Table {
        answers: HashMap<String, String>,
        default: String,
    },
}

impl Script {
    pub fn answer(&self, prompt: &str) -> String {
        match self {
            Script::Constant(text) => text.clone(),
            Script::PromptHash => {
                let entail = Sha256::digest(prompt.as_bytes())[0] & 1 == 1;
                if prompt.contains("'contradiction' or 'entailment'") {
                    if entail { "entailment" } else { "contradiction" }.to_string()
                } else {
                    if entail { "Yes" } else { "No" }.to_string()
                }
            }
            Script::Table { answers, default } => {
                answers.get(prompt).unwrap_or(default).clone()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub script: Script,
    /// Latency added to every completion.
    pub delay: Duration,
    /// The first `fail_first` completion requests get `fail_status`.
    pub fail_first: usize,
    pub fail_status: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            script: Script::PromptHash,
            delay: Duration::ZERO,
            fail_first: 0,
            fail_status: 503,
        }
    }
}

/// Counters shared between the server and its owner.
#[derive(Debug, Default)]
pub struct Stats {
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    rejected: AtomicUsize,
}

impl Stats {
    /// Completion requests received, including failed and malformed ones.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    /// Requests answered with an error status.
    pub fn rejected(&self) -> usize {
        self.rejected.load(Ordering::SeqCst)
    }
}

#[derive(Clone)]
struct AppState {
    config: Arc<ServerConfig>,
    stats: Arc<Stats>,
}

struct InFlight<'a>(&'a Stats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a Stats) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorResponse { error: message.into() })).into_response()
}

async fn complete(
    State(state): State<AppState>,
    body: Result<Json<CompletionRequest>, JsonRejection>,
) -> Response {
    let seq = state.stats.requests.fetch_add(1, Ordering::SeqCst);
    let _guard = InFlight::enter(&state.stats);
    let request = match body {
        Ok(Json(request)) => request,
        Err(rejection) => {
            state.stats.rejected.fetch_add(1, Ordering::SeqCst);
            return error(StatusCode::BAD_REQUEST, rejection.body_text());
        }
    };
    if !state.config.delay.is_zero() {
        tokio::time::sleep(state.config.delay).await;
    }
    if seq < state.config.fail_first {
        state.stats.rejected.fetch_add(1, Ordering::SeqCst);
        let status = StatusCode::from_u16(state.config.fail_status)
            .unwrap_or(StatusCode::SERVICE_UNAVAILABLE);
        return error(status, "injected failure");
    }
    let text = state.config.script.answer(&request.prompt);
    Json(CompletionResponse { text }).into_response()
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(config: ServerConfig, stats: Arc<Stats>) -> Router {
    Router::new()
        .route("/v1/complete", post(complete))
        .route("/health", get(health))
        .with_state(AppState {
            config: Arc::new(config),
            stats,
        })
}

/// A server running on its own thread and runtime; stopped on drop.
pub struct MockServer {
    addr: SocketAddr,
    stats: Arc<Stats>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl MockServer {
    /// Binds 127.0.0.1 on an ephemeral port and starts serving.
    pub fn spawn(config: ServerConfig) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let stats = Arc::new(Stats::default());
        let app = router(config, stats.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)
                    .expect("listener registers with runtime");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock server runs");
            });
        });
        Ok(MockServer {
            addr,
            stats,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL, e.g. `http://127.0.0.1:41234`.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}
