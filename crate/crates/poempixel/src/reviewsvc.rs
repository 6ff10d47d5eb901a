//! HTTP service the raters use during prompt tuning.
//!
//! Reads go straight to the session store. Score submissions are funnelled
//! through one writer thread so events for a session are appended in a
//! single order; a submission is acknowledged only after its event is on
//! disk. On shutdown the queue is drained before the writer exits.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::thread::JoinHandle;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use poempixel_core::pipeline::image_file_name;
use poempixel_core::tuning::{
    format_aggregate, CandidatePayload, RoundItem, RoundStatus, ScoreEvent, ScoreSource,
    SessionStore, TuningError, TuningSession,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

pub const TOKEN_HEADER: &str = "x-review-token";
pub const TOKEN_ENV: &str = "POEMPIXEL_REVIEW_TOKEN";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("session store {0} does not exist")]
    MissingStore(PathBuf),
    #[error("image directory {0} does not exist")]
    MissingImages(PathBuf),
    #[error("cannot listen on {addr}: {message}")]
    Bind { addr: SocketAddr, message: String },
    #[error("server error: {0}")]
    Runtime(String),
}

#[derive(Debug, Clone)]
pub struct ReviewConfig {
    pub store_root: PathBuf,
    pub images_dir: Option<PathBuf>,
    pub token: Option<String>,
    pub addr: SocketAddr,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<TuningError> for ApiError {
    fn from(e: TuningError) -> Self {
        let status = match &e {
            TuningError::InvalidValue { .. } | TuningError::ModeMismatch { .. } => StatusCode::BAD_REQUEST,
            TuningError::UnknownSession(_)
            | TuningError::UnknownRound(_)
            | TuningError::UnknownItem(_)
            | TuningError::NoEvents => StatusCode::NOT_FOUND,
            TuningError::State(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

struct Submission {
    session_id: String,
    item_id: String,
    rater_id: String,
    value: f64,
    ack: oneshot::Sender<Result<ScoreEvent, ApiError>>,
}

#[derive(Clone)]
struct AppState {
    store: SessionStore,
    images_dir: Option<PathBuf>,
    token: Option<String>,
    writer: mpsc::UnboundedSender<Submission>,
}

fn spawn_writer(store: SessionStore) -> (mpsc::UnboundedSender<Submission>, JoinHandle<()>) {
    let (tx, mut rx) = mpsc::unbounded_channel::<Submission>();
    let handle = std::thread::spawn(move || {
        while let Some(sub) = rx.blocking_recv() {
            let result = record(&store, &sub);
            let _ = sub.ack.send(result);
        }
    });
    (tx, handle)
}

fn record(store: &SessionStore, sub: &Submission) -> Result<ScoreEvent, ApiError> {
    if sub.rater_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "rater_id must not be empty"));
    }
    let session = store.load(&sub.session_id)?;
    let round = session.check_submission(&sub.item_id, sub.value)?;
    let event = ScoreEvent {
        round_index: round,
        item_id: sub.item_id.clone(),
        rater_id: sub.rater_id.clone(),
        value: sub.value,
        source: ScoreSource::Human,
        created_at: Utc::now(),
    };
    store.append_event(&sub.session_id, &event)?;
    Ok(event)
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    match &state.token {
        None => Ok(()),
        Some(expected) => {
            let given = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
            if given == Some(expected.as_str()) {
                Ok(())
            } else {
                Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong review token"))
            }
        }
    }
}

/// What a rater sees for one item. Summary items carry no template or
/// model information so the review stays blind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub poem_id: String,
    pub poem_text: String,
    pub kind: String,
    pub blind: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl From<&RoundItem> for ReviewItem {
    fn from(item: &RoundItem) -> Self {
        let mut out = ReviewItem {
            item_id: item.item_id.clone(),
            poem_id: item.poem_id.clone(),
            poem_text: item.poem_text.clone(),
            kind: String::new(),
            blind: false,
            summary_text: None,
            reference_text: None,
            image_ref: None,
        };
        match &item.candidate {
            CandidatePayload::Summary {
                summary_text,
                reference_text,
            } => {
                out.kind = "summary".into();
                out.blind = true;
                out.summary_text = Some(summary_text.clone());
                out.reference_text = Some(reference_text.clone());
            }
            CandidatePayload::Image { image_ref, .. } => {
                out.kind = "image".into();
                out.image_ref = Some(image_ref.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundView {
    pub index: u32,
    pub template_id: String,
    pub status: RoundStatus,
    pub aggregate: Option<f64>,
    pub rater_count: usize,
    pub complete: bool,
    pub item_count: usize,
    #[serde(default)]
    pub automated_metrics: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub mode: String,
    pub current_round: Option<u32>,
    pub stopped: bool,
    pub selected_round: Option<u32>,
    pub selected_template: Option<String>,
    pub max_rounds: u32,
    pub raters: Vec<String>,
    pub status: String,
    pub rounds: Vec<RoundView>,
}

pub fn session_view(session: &TuningSession, events: &[ScoreEvent]) -> SessionView {
    let rounds = session
        .rounds
        .iter()
        .map(|r| {
            let summary = session.round_summary(r.index, events).ok();
            RoundView {
                index: r.index,
                template_id: r.template_id.clone(),
                status: r.status,
                aggregate: r.aggregate.or(summary.map(|s| s.aggregate)),
                rater_count: summary.map_or(0, |s| s.rater_count),
                complete: summary.is_some_and(|s| s.complete),
                item_count: r.items.len(),
                automated_metrics: r.automated_metrics.clone(),
            }
        })
        .collect();
    SessionView {
        id: session.id.clone(),
        mode: session.mode.to_string(),
        current_round: session.current().map(|r| r.index),
        stopped: session.stopped,
        selected_round: session.selected_round,
        selected_template: session.selected_template().map(str::to_string),
        max_rounds: session.max_rounds,
        raters: session.raters.clone(),
        status: session.status_line(),
        rounds,
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn get_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    authorize(&state, &headers)?;
    let store = state.store.clone();
    blocking(move || {
        let session = store.load(&id)?;
        let events = store.events(&id)?;
        Ok(Json(session_view(&session, &events)))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct PendingQuery {
    rater: Option<String>,
}

async fn get_pending(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path((id, round)): Path<(String, u32)>,
    Query(q): Query<PendingQuery>,
) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers)?;
    let rater = q
        .rater
        .filter(|r| !r.trim().is_empty())
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "query parameter `rater` is required"))?;
    let store = state.store.clone();
    blocking(move || {
        let session = store.load(&id)?;
        let events = store.events(&id)?;
        let items: Vec<ReviewItem> = session
            .pending(round, &rater, &events)?
            .into_iter()
            .map(ReviewItem::from)
            .collect();
        Ok(Json(json!({
            "session_id": id,
            "round": round,
            "rater": rater,
            "pending_count": items.len(),
            "items": items,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct ScoreBody {
    rater_id: String,
    value: f64,
}

async fn post_score(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path((id, item)): Path<(String, String)>,
    Json(body): Json<ScoreBody>,
) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers)?;
    let (ack, done) = oneshot::channel();
    state
        .writer
        .send(Submission {
            session_id: id,
            item_id: item,
            rater_id: body.rater_id,
            value: body.value,
            ack,
        })
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down"))?;
    let event = done
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "writer stopped"))??;
    Ok(Json(json!({
        "accepted": true,
        "round": event.round_index,
        "item_id": event.item_id,
        "rater_id": event.rater_id,
        "value": event.value,
    })))
}

async fn get_aggregate(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path((id, round)): Path<(String, u32)>,
) -> Result<Json<Value>, ApiError> {
    authorize(&state, &headers)?;
    let store = state.store.clone();
    blocking(move || {
        let session = store.load(&id)?;
        let events = store.events(&id)?;
        let r = session.round(round)?;
        let s = session.round_summary(round, &events)?;
        let aggregate = r.aggregate.unwrap_or(s.aggregate);
        let body = json!({
            "round": round,
            "status": r.status,
            "aggregate": aggregate,
            "display": format_aggregate(aggregate),
            "rater_count": s.rater_count,
            "complete": s.complete,
        });
        Ok(Json(body))
    })
    .await
}

async fn get_image(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(file): Path<String>,
) -> Result<Response, ApiError> {
    authorize(&state, &headers)?;
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no image `{file}`"));
    let poem_id = file.strip_suffix(".png").ok_or_else(not_found)?;
    let dir = state.images_dir.clone().ok_or_else(not_found)?;
    let path = dir.join(image_file_name(poem_id));
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/rounds/{k}/pending", get(get_pending))
        .route("/sessions/{id}/rounds/{k}/aggregate", get(get_aggregate))
        .route("/sessions/{id}/items/{item}/score", post(post_score))
        .route("/images/{file}", get(get_image))
        .with_state(state)
}

fn check(cfg: &ReviewConfig) -> Result<SessionStore, ServeError> {
    let store = SessionStore::open(&cfg.store_root)
        .map_err(|_| ServeError::MissingStore(cfg.store_root.clone()))?;
    if let Some(dir) = &cfg.images_dir {
        if !dir.is_dir() {
            return Err(ServeError::MissingImages(dir.clone()));
        }
    }
    Ok(store)
}

/// Serves until `shutdown` resolves, then finishes in-flight requests and
/// drains the write queue.
pub async fn serve(
    cfg: ReviewConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    bound: Option<oneshot::Sender<SocketAddr>>,
) -> Result<(), ServeError> {
    let store = check(&cfg)?;
    let listener = tokio::net::TcpListener::bind(cfg.addr)
        .await
        .map_err(|e| ServeError::Bind {
            addr: cfg.addr,
            message: if e.kind() == std::io::ErrorKind::AddrInUse {
                "address already in use".to_string()
            } else {
                e.to_string()
            },
        })?;
    let local = listener
        .local_addr()
        .map_err(|e| ServeError::Runtime(e.to_string()))?;
    let (writer, writer_thread) = spawn_writer(store.clone());
    let state = AppState {
        store,
        images_dir: cfg.images_dir.clone(),
        token: cfg.token.clone(),
        writer,
    };
    if let Some(tx) = bound {
        let _ = tx.send(local);
    }
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServeError::Runtime(e.to_string()));
    // the router, and with it the last sender, is gone; the writer drains and exits
    let _ = writer_thread.join();
    result
}

/// A server on its own runtime thread, for tests and embedding.
pub struct RunningServer {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), ServeError>>>,
}

impl RunningServer {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    /// Graceful stop; returns once queued writes are on disk.
    pub fn stop(mut self) -> Result<(), ServeError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<(), ServeError> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| ServeError::Runtime("server thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

pub fn spawn(cfg: ReviewConfig) -> Result<RunningServer, ServeError> {
    check(&cfg)?;
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel::<Result<SocketAddr, ServeError>>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .map_err(|e| ServeError::Runtime(e.to_string()))?;
        rt.block_on(async move {
            let (bound_tx, bound_rx) = oneshot::channel();
            let report = addr_tx.clone();
            tokio::spawn(async move {
                if let Ok(addr) = bound_rx.await {
                    let _ = report.send(Ok(addr));
                }
            });
            let result = serve(
                cfg,
                async move {
                    let _ = stop_rx.await;
                },
                Some(bound_tx),
            )
            .await;
            if let Err(e) = &result {
                let _ = addr_tx.send(Err(ServeError::Runtime(e.to_string())));
            }
            result
        })
    });
    let addr = addr_rx
        .recv()
        .map_err(|_| ServeError::Runtime("server thread exited early".into()))??;
    Ok(RunningServer {
        addr,
        stop: Some(stop_tx),
        thread: Some(thread),
    })
}
