//! Loopback HTTP service that runs analyses for the browser companion.
//!
//! Sessions live only in memory. Deleting a session cancels any run in
//! progress and drops the key, the uploaded data and every result.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use quali_core::chunking::TokenBudget;
use quali_core::exporter::{render_csv, render_transcript};
use quali_core::llmgateway::{
    ApiKey, Backend, Cancellation, Clock, CostEstimate, HttpBackend, MockBackend, MockEntry, PingError, SystemClock,
    DEFAULT_ENDPOINT,
};
use quali_core::pipeline::{
    run_analysis, AbortCause, AnalysisSession, DatasetInput, IngestSpec, Observer, RecoveryLogEntry, RunContext,
    RunOptions, RunStatus,
};
use quali_core::PromptConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const DEFAULT_PORT: u16 = 8641;
const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;
const ERASE_WAIT: Duration = Duration::from_secs(5);
const HTTP_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            detail: serde_json::Value::Null,
        }
    }

    fn not_found() -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "session_not_found", "no such session")
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::CONFLICT, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"code": self.code, "message": self.message, "detail": self.detail});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Mock,
    Real,
}

#[derive(Clone)]
enum BackendSource {
    Mock(Arc<Vec<MockEntry>>),
    Real(Arc<HttpBackend>),
}

impl fmt::Debug for BackendSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSource::Mock(entries) => write!(f, "Mock({} entries)", entries.len()),
            BackendSource::Real(b) => write!(f, "Real({b:?})"),
        }
    }
}

#[derive(Debug)]
struct Upload {
    name: String,
    bytes: Arc<Vec<u8>>,
    spec: IngestSpec,
}

#[derive(Debug, Default)]
struct Progress {
    status: Option<RunStatus>,
    batches_total: usize,
    batches_done: usize,
    cost: Option<CostEstimate>,
    recovery_log: Vec<RecoveryLogEntry>,
}

struct ProgressObserver(Arc<Mutex<Progress>>);

impl Observer for ProgressObserver {
    fn status(&self, status: RunStatus) {
        // Terminal states are published by the worker together with the result.
        if !status.is_terminal() {
            self.0.lock().status = Some(status);
        }
    }

    fn planned(&self, batches: usize, cost: &CostEstimate) {
        let mut p = self.0.lock();
        p.batches_total = batches;
        p.cost = Some(*cost);
    }

    fn batch_done(&self, _index: usize) {
        self.0.lock().batches_done += 1;
    }

    fn recovery(&self, entry: &RecoveryLogEntry) {
        self.0.lock().recovery_log.push(entry.clone());
    }
}

#[derive(Debug)]
struct SessionState {
    api_key: Option<ApiKey>,
    backend: BackendSource,
    upload: Option<Upload>,
    progress: Arc<Mutex<Progress>>,
    cancel: Cancellation,
    worker: Option<JoinHandle<()>>,
    result: Option<AnalysisSession>,
    erased: bool,
}

impl SessionState {
    fn status(&self) -> RunStatus {
        self.progress.lock().status.unwrap_or(RunStatus::Idle)
    }

    fn running(&self) -> bool {
        !self.status().is_terminal() && self.status() != RunStatus::Idle
    }
}

type Slot = Arc<Mutex<SessionState>>;

/// Concurrent map of live sessions.
#[derive(Default)]
pub struct Registry {
    sessions: RwLock<HashMap<String, Slot>>,
}

impl Registry {
    fn get(&self, id: &str) -> ApiResult<Slot> {
        self.sessions.read().get(id).cloned().ok_or_else(ApiError::not_found)
    }

    pub fn len(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Debug rendering of every live session, for inspecting what the
    /// process still holds.
    pub fn dump(&self) -> String {
        let sessions = self.sessions.read();
        let mut ids: Vec<&String> = sessions.keys().collect();
        ids.sort();
        ids.into_iter()
            .map(|id| format!("{id}: {:#?}\n", sessions[id].lock()))
            .collect()
    }
}

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub clock: Arc<dyn Clock>,
}

impl Default for AppState {
    fn default() -> Self {
        AppState {
            registry: Arc::new(Registry::default()),
            clock: Arc::new(SystemClock),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id", axum::routing::delete(erase_session))
        .route("/sessions/:id/dataset", post(upload_dataset))
        .route("/sessions/:id/run", post(start_run))
        .route("/sessions/:id/status", get(get_status))
        .route("/sessions/:id/result", get(get_result))
        .route("/sessions/:id/result.csv", get(get_result_csv))
        .route("/sessions/:id/transcript.txt", get(get_transcript))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScriptField {
    Entries(Vec<MockEntry>),
    Text(String),
}

#[derive(Deserialize)]
struct CreateRequest {
    #[serde(default)]
    api_key: Option<String>,
    #[serde(default)]
    backend: BackendChoice,
    #[serde(default)]
    mock_script: Option<ScriptField>,
    #[serde(default)]
    endpoint: Option<String>,
}

async fn create_session(State(state): State<AppState>, Json(req): Json<CreateRequest>) -> ApiResult<Response> {
    let api_key = req.api_key.filter(|k| !k.is_empty()).map(ApiKey::new);
    let backend = match req.backend {
        BackendChoice::Mock => {
            let entries = match req.mock_script {
                Some(ScriptField::Entries(e)) => e,
                Some(ScriptField::Text(t)) => {
                    serde_json::from_str(&t).map_err(|e| ApiError::bad_request(format!("invalid mock script: {e}")))?
                }
                None => Vec::new(),
            };
            MockBackend::new(entries.clone()).map_err(|e| ApiError::bad_request(e.to_string()))?;
            BackendSource::Mock(Arc::new(entries))
        }
        BackendChoice::Real => {
            let key = api_key
                .clone()
                .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "auth_failed", "an API key is required"))?;
            let endpoint = req.endpoint.unwrap_or_else(|| DEFAULT_ENDPOINT.to_string());
            let backend = tokio::task::spawn_blocking(move || {
                let backend = HttpBackend::new(endpoint, key, HTTP_TIMEOUT)?;
                backend.ping()?;
                Ok::<_, PingError>(backend)
            })
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
            .map_err(|e| match e {
                PingError::AuthFailed(m) => ApiError::new(StatusCode::UNAUTHORIZED, "auth_failed", m),
                PingError::Unreachable(m) => ApiError::new(StatusCode::BAD_GATEWAY, "backend_unreachable", m),
            })?;
            BackendSource::Real(Arc::new(backend))
        }
    };

    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = SessionState {
        api_key,
        backend,
        upload: None,
        progress: Arc::new(Mutex::new(Progress::default())),
        cancel: Cancellation::new(),
        worker: None,
        result: None,
        erased: false,
    };
    state
        .registry
        .sessions
        .write()
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    tracing::info!(session = %id, backend = ?req.backend, "session created");
    Ok((
        StatusCode::CREATED,
        Json(json!({"session_id": id, "backend": req.backend})),
    )
        .into_response())
}

async fn upload_dataset(
    State(state): State<AppState>,
    Path(id): Path<String>,
    mut multipart: Multipart,
) -> ApiResult<Json<serde_json::Value>> {
    let slot = state.registry.get(&id)?;
    let mut file: Option<(String, Vec<u8>)> = None;
    let mut spec = IngestSpec::default();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        match field.name() {
            Some("file") => {
                let name = field.file_name().unwrap_or("upload").to_string();
                let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
                file = Some((name, bytes.to_vec()));
            }
            Some("mapping") => {
                let text = field.text().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
                spec = serde_json::from_str(&text)
                    .map_err(|e| ApiError::bad_request(format!("invalid mapping: {e}")))?;
            }
            _ => {}
        }
    }
    let (name, bytes) = file.ok_or_else(|| ApiError::bad_request("multipart field `file` is required"))?;
    let mut session = slot.lock();
    if session.running() {
        return Err(ApiError::conflict("run_in_progress", "a run is in progress"));
    }
    let size = bytes.len();
    session.upload = Some(Upload {
        name: name.clone(),
        bytes: Arc::new(bytes),
        spec,
    });
    Ok(Json(json!({"name": name, "bytes": size})))
}

#[derive(Deserialize)]
struct RunRequest {
    config: PromptConfig,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    temperature: Option<f64>,
    #[serde(default)]
    budget: Option<TokenBudget>,
    #[serde(default)]
    parallelism: Option<usize>,
}

async fn start_run(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<RunRequest>,
) -> ApiResult<Response> {
    let slot = state.registry.get(&id)?;
    let mut session = slot.lock();
    if session.running() {
        return Err(ApiError::conflict("run_in_progress", "a run is already in progress"));
    }
    let upload = session
        .upload
        .as_ref()
        .ok_or_else(|| ApiError::conflict("dataset_missing", "upload a dataset first"))?;
    let input = DatasetInput::Bytes {
        name: upload.name.clone(),
        bytes: upload.bytes.clone(),
    };
    let spec = upload.spec.clone();
    let defaults = RunOptions::default();
    let options = RunOptions {
        model_id: req.model.unwrap_or(defaults.model_id),
        temperature: req.temperature.unwrap_or(defaults.temperature),
        budget: req.budget.unwrap_or(defaults.budget),
        parallelism: req.parallelism.unwrap_or(1).max(1),
        rates: defaults.rates,
    };
    let backend: Arc<dyn Backend> = match &session.backend {
        BackendSource::Mock(entries) => Arc::new(
            MockBackend::new(entries.as_ref().clone()).map_err(|e| ApiError::bad_request(e.to_string()))?,
        ),
        BackendSource::Real(b) => b.clone(),
    };

    let progress = Arc::new(Mutex::new(Progress {
        status: Some(RunStatus::Running),
        ..Progress::default()
    }));
    let cancel = Cancellation::new();
    session.progress = progress.clone();
    session.cancel = cancel.clone();
    session.result = None;

    let clock = state.clock.clone();
    let config = req.config;
    let worker_slot = slot.clone();
    let handle = std::thread::spawn(move || {
        let observer = ProgressObserver(progress.clone());
        let ctx = RunContext {
            backend: backend.as_ref(),
            clock: clock.as_ref(),
            observer: &observer,
            cancel: &cancel,
        };
        let outcome = run_analysis(&input, &spec, &config, &options, &ctx);
        drop(input);
        let mut session = worker_slot.lock();
        if !session.erased {
            progress.lock().status = Some(outcome.status);
            session.result = Some(outcome);
        }
    });
    session.worker = Some(handle);
    Ok((StatusCode::ACCEPTED, Json(json!({"status": RunStatus::Running}))).into_response())
}

#[derive(Serialize)]
struct StatusBody {
    session_id: String,
    status: RunStatus,
    batches_total: usize,
    batches_done: usize,
    cost: Option<CostEstimate>,
    recovery_log: Vec<RecoveryLogEntry>,
    abort: Option<AbortCause>,
}

async fn get_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<StatusBody>> {
    let slot = state.registry.get(&id)?;
    let session = slot.lock();
    let progress = session.progress.lock();
    Ok(Json(StatusBody {
        session_id: id.clone(),
        status: progress.status.unwrap_or(RunStatus::Idle),
        batches_total: progress.batches_total,
        batches_done: progress.batches_done,
        cost: progress.cost,
        recovery_log: progress.recovery_log.clone(),
        abort: session.result.as_ref().and_then(|r| r.abort.clone()),
    }))
}

fn finished(slot: &Slot) -> ApiResult<AnalysisSession> {
    let session = slot.lock();
    session
        .result
        .clone()
        .ok_or_else(|| ApiError::conflict("result_not_ready", "no finished run for this session"))
}

async fn get_result(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let result = finished(&state.registry.get(&id)?)?;
    let batches: Vec<_> = result
        .batches
        .iter()
        .map(|b| json!({"index": b.index, "tables": b.tables, "provenance": b.provenance, "completed": b.completed}))
        .collect();
    let records = result.dataset.as_ref().map(|d| &d.records);
    Ok(Json(json!({
        "status": result.status,
        "merged": result.merged,
        "provenance": result.provenance,
        "warnings": result.merge_warnings,
        "batches": batches,
        "cost": result.cost,
        "recovery_log": result.recovery_log,
        "abort": result.abort,
        "preset_version": result.preset_version,
        "records": records,
    })))
}

async fn get_result_csv(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let result = finished(&state.registry.get(&id)?)?;
    let merged = result
        .merged
        .as_ref()
        .ok_or_else(|| ApiError::conflict("result_not_ready", "the run did not produce a table"))?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], render_csv(merged)).into_response())
}

async fn get_transcript(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = state.registry.get(&id)?;
    let result = finished(&slot)?;
    let key = slot.lock().api_key.clone();
    let secrets: Vec<&str> = key.iter().map(ApiKey::expose).collect();
    let text = render_transcript(&result, &secrets);
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

async fn erase_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = state
        .registry
        .sessions
        .write()
        .remove(&id)
        .ok_or_else(ApiError::not_found)?;
    let worker = {
        let mut session = slot.lock();
        session.erased = true;
        session.cancel.cancel();
        session.api_key = None;
        session.upload = None;
        session.result = None;
        session.backend = BackendSource::Mock(Arc::new(Vec::new()));
        session.worker.take()
    };
    if let Some(handle) = worker {
        let _ = tokio::task::spawn_blocking(move || {
            let deadline = Instant::now() + ERASE_WAIT;
            while !handle.is_finished() && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(5));
            }
            if handle.is_finished() {
                let _ = handle.join();
            }
        })
        .await;
    }
    tracing::info!(session = %id, "session erased");
    Ok((StatusCode::OK, Json(json!({"erased": id}))).into_response())
}
