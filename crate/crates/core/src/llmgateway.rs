//! Chat-completion gateway: request dispatch, failure classification,
//! recovery policy and cost estimation.
//!
//! Failure kinds follow the interaction-error taxonomy observed with hosted
//! chat models: transport failures and unprocessed requests are retried,
//! everything else needs the request transformed before it is sent again.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use zeroize::Zeroize;

use crate::chunking::{estimate_tokens, BatchPlan, MIN_FRAGMENT_TOKENS};
use crate::promptforge::PromptBundle;

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
pub const API_KEY_ENV: &str = "QUALI_API_KEY";

/// Retries allowed per recovery action before the batch is aborted.
pub const MAX_RETRIES: u32 = 5;
pub const BACKOFF_BASE: Duration = Duration::from_secs(1);
pub const BACKOFF_FACTOR: u32 = 2;
pub const RATE_LIMIT_WAIT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Network,
    NotProcessed,
    PolicyViolation,
    TokenLimit,
    RateLimit,
    Refusal,
    CountMismatch,
    FormatError,
    ContentMisread,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 9] = [
        ErrorKind::Network,
        ErrorKind::NotProcessed,
        ErrorKind::PolicyViolation,
        ErrorKind::TokenLimit,
        ErrorKind::RateLimit,
        ErrorKind::Refusal,
        ErrorKind::CountMismatch,
        ErrorKind::FormatError,
        ErrorKind::ContentMisread,
    ];

    pub fn retryable(self) -> bool {
        matches!(self, ErrorKind::Network | ErrorKind::NotProcessed | ErrorKind::RateLimit)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Network => "network",
            ErrorKind::NotProcessed => "not_processed",
            ErrorKind::PolicyViolation => "policy_violation",
            ErrorKind::TokenLimit => "token_limit",
            ErrorKind::RateLimit => "rate_limit",
            ErrorKind::Refusal => "refusal",
            ErrorKind::CountMismatch => "count_mismatch",
            ErrorKind::FormatError => "format_error",
            ErrorKind::ContentMisread => "content_misread",
        }
    }

    /// Message a hosted chat service shows for this failure.
    pub fn canonical_message(self) -> &'static str {
        match self {
            ErrorKind::Network => "Network error while contacting the service",
            ErrorKind::NotProcessed => "Something went wrong while processing the request",
            ErrorKind::PolicyViolation => "The request may violate our content policy",
            ErrorKind::TokenLimit => "The message you submitted was too long for the model",
            ErrorKind::RateLimit => "Rate limit reached, wait before sending another request",
            ErrorKind::Refusal => "I'm sorry, but I can't assist with that request.",
            ErrorKind::CountMismatch => "The reply covers fewer items than requested",
            ErrorKind::FormatError => "The reply does not follow the requested table format",
            ErrorKind::ContentMisread => "The reply misreads the analysis instructions",
        }
    }

    /// Failures that stem from the reply content rather than the transport.
    pub fn is_parse_failure(self) -> bool {
        matches!(
            self,
            ErrorKind::CountMismatch | ErrorKind::FormatError | ErrorKind::ContentMisread
        )
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| format!("unknown error kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{kind}: {detail}")]
pub struct GatewayError {
    pub kind: ErrorKind,
    pub raw_message: String,
    pub retryable: bool,
    #[serde(default)]
    pub detail: String,
}

impl GatewayError {
    pub fn new(kind: ErrorKind, raw_message: impl Into<String>) -> Self {
        let raw_message = raw_message.into();
        GatewayError {
            kind,
            retryable: kind.retryable(),
            detail: first_line(&raw_message),
            raw_message,
        }
    }

    pub fn with_detail(kind: ErrorKind, raw_message: impl Into<String>, detail: impl Into<String>) -> Self {
        GatewayError {
            detail: detail.into(),
            ..GatewayError::new(kind, raw_message)
        }
    }
}

fn first_line(s: &str) -> String {
    let line = s.lines().next().unwrap_or_default().trim();
    match line.char_indices().nth(160) {
        Some((i, _)) => format!("{}...", &line[..i]),
        None => line.to_string(),
    }
}

/// Outcome of the transport layer, used when classifying a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportStatus {
    /// The service answered normally; the text itself may signal a failure.
    Ok,
    Http(u16),
    ConnectionFailed,
}

const MESSAGE_PATTERNS: &[(&str, ErrorKind)] = &[
    ("network error", ErrorKind::Network),
    ("something went wrong", ErrorKind::NotProcessed),
    ("may violate our content policy", ErrorKind::PolicyViolation),
    ("violate our content policy", ErrorKind::PolicyViolation),
    ("the message you submitted was too long", ErrorKind::TokenLimit),
    ("maximum context length", ErrorKind::TokenLimit),
    ("context_length_exceeded", ErrorKind::TokenLimit),
    ("only one message at a time", ErrorKind::RateLimit),
    ("rate limit", ErrorKind::RateLimit),
    ("too many requests", ErrorKind::RateLimit),
    ("i'm sorry, but i can't assist", ErrorKind::Refusal),
    ("i'm sorry, but i won't be able to assist", ErrorKind::Refusal),
    ("i'm sorry, but i cannot assist", ErrorKind::Refusal),
];

/// Map a failure message and transport status to exactly one error kind.
/// Known service messages win; unknown transport failures are network
/// errors; unrecognized replies are left to the table parser as format
/// errors.
pub fn classify_error(raw_message: &str, status: TransportStatus) -> GatewayError {
    let folded = crate::normalize::normalize_source(raw_message);
    if let Some((_, kind)) = MESSAGE_PATTERNS.iter().find(|(p, _)| folded.contains(p)) {
        return GatewayError::new(*kind, raw_message);
    }
    let kind = match status {
        TransportStatus::Ok => ErrorKind::FormatError,
        TransportStatus::Http(429) => ErrorKind::RateLimit,
        TransportStatus::Http(413) => ErrorKind::TokenLimit,
        TransportStatus::Http(code) if code >= 500 => ErrorKind::NotProcessed,
        TransportStatus::Http(_) | TransportStatus::ConnectionFailed => ErrorKind::Network,
    };
    GatewayError::new(kind, raw_message)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    RetryBackoff,
    WaitThenRetry,
    ResplitSmaller,
    ReclarifyPrompt,
    ReinjectTail,
    ReassertFormat,
    Abort,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::RetryBackoff => "retry_backoff",
            ActionKind::WaitThenRetry => "wait_then_retry",
            ActionKind::ResplitSmaller => "resplit_smaller",
            ActionKind::ReclarifyPrompt => "reclarify_prompt",
            ActionKind::ReinjectTail => "reinject_tail",
            ActionKind::ReassertFormat => "reassert_format",
            ActionKind::Abort => "abort",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActionParams {
    None,
    Delay { millis: u64 },
    Budget { effective_budget: usize },
    Reason { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryAction {
    pub action: ActionKind,
    pub params: ActionParams,
}

impl RecoveryAction {
    fn plain(action: ActionKind) -> Self {
        RecoveryAction {
            action,
            params: ActionParams::None,
        }
    }

    fn abort(reason: impl Into<String>) -> Self {
        RecoveryAction {
            action: ActionKind::Abort,
            params: ActionParams::Reason { reason: reason.into() },
        }
    }

    pub fn delay(&self) -> Option<Duration> {
        match self.params {
            ActionParams::Delay { millis } => Some(Duration::from_millis(millis)),
            _ => None,
        }
    }
}

impl fmt::Display for RecoveryAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.params {
            ActionParams::None => write!(f, "{}", self.action),
            ActionParams::Delay { millis } => write!(f, "{} ({} ms)", self.action, millis),
            ActionParams::Budget { effective_budget } => {
                write!(f, "{} (budget {effective_budget} tokens)", self.action)
            }
            ActionParams::Reason { reason } => write!(f, "{}: {reason}", self.action),
        }
    }
}

/// Per-request recovery bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttemptState {
    pub retries: BTreeMap<ActionKind, u32>,
    /// Effective budget the current batch was packed against.
    pub effective_budget: usize,
}

impl AttemptState {
    pub fn new(effective_budget: usize) -> Self {
        AttemptState {
            retries: BTreeMap::new(),
            effective_budget,
        }
    }

    pub fn retries_for(&self, action: ActionKind) -> u32 {
        self.retries.get(&action).copied().unwrap_or(0)
    }

    /// Count an executed action against its cap.
    pub fn record(&mut self, action: &RecoveryAction) {
        *self.retries.entry(action.action).or_default() += 1;
        if let ActionParams::Budget { effective_budget } = action.params {
            self.effective_budget = effective_budget;
        }
    }
}

/// Default response to each failure kind.
pub fn recovery_policy(error: &GatewayError, attempt: &AttemptState) -> RecoveryAction {
    let capped = |action: ActionKind| {
        let used = attempt.retries_for(action);
        (used >= MAX_RETRIES).then(|| {
            RecoveryAction::abort(format!(
                "{} after {used} attempts of {action}",
                error.kind
            ))
        })
    };
    match error.kind {
        ErrorKind::Network | ErrorKind::NotProcessed => {
            if let Some(abort) = capped(ActionKind::RetryBackoff) {
                return abort;
            }
            let n = attempt.retries_for(ActionKind::RetryBackoff);
            let delay = BACKOFF_BASE * BACKOFF_FACTOR.pow(n);
            RecoveryAction {
                action: ActionKind::RetryBackoff,
                params: ActionParams::Delay {
                    millis: delay.as_millis() as u64,
                },
            }
        }
        ErrorKind::RateLimit => capped(ActionKind::WaitThenRetry).unwrap_or(RecoveryAction {
            action: ActionKind::WaitThenRetry,
            params: ActionParams::Delay {
                millis: RATE_LIMIT_WAIT.as_millis() as u64,
            },
        }),
        ErrorKind::TokenLimit => {
            let halved = attempt.effective_budget / 2;
            if halved < MIN_FRAGMENT_TOKENS {
                RecoveryAction::abort(format!(
                    "token_limit: halved budget {halved} is below the minimum fragment size {MIN_FRAGMENT_TOKENS}"
                ))
            } else {
                RecoveryAction {
                    action: ActionKind::ResplitSmaller,
                    params: ActionParams::Budget {
                        effective_budget: halved,
                    },
                }
            }
        }
        ErrorKind::PolicyViolation | ErrorKind::Refusal => capped(ActionKind::ReclarifyPrompt)
            .unwrap_or_else(|| RecoveryAction::plain(ActionKind::ReclarifyPrompt)),
        ErrorKind::CountMismatch => capped(ActionKind::ReinjectTail)
            .unwrap_or_else(|| RecoveryAction::plain(ActionKind::ReinjectTail)),
        ErrorKind::FormatError | ErrorKind::ContentMisread => capped(ActionKind::ReassertFormat)
            .unwrap_or_else(|| RecoveryAction::plain(ActionKind::ReassertFormat)),
    }
}

/// Cooperative cancellation shared between a run and its controller.
#[derive(Debug, Clone, Default)]
pub struct Cancellation(Arc<AtomicBool>);

impl Cancellation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Source of waiting, replaceable in tests.
pub trait Clock: Send + Sync {
    /// Wait for `duration`. Returns false if cancelled while waiting.
    fn sleep(&self, duration: Duration, cancel: &Cancellation) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn sleep(&self, duration: Duration, cancel: &Cancellation) -> bool {
        interruptible_sleep(duration, cancel)
    }
}

fn interruptible_sleep(duration: Duration, cancel: &Cancellation) -> bool {
    const SLICE: Duration = Duration::from_millis(10);
    let mut left = duration;
    while !left.is_zero() {
        if cancel.is_cancelled() {
            return false;
        }
        let step = left.min(SLICE);
        std::thread::sleep(step);
        left -= step;
    }
    !cancel.is_cancelled()
}

/// Records requested waits without sleeping.
#[derive(Debug, Default)]
pub struct ManualClock {
    slept: Mutex<Vec<Duration>>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.slept.lock().unwrap().clone()
    }

    pub fn total(&self) -> Duration {
        self.sleeps().iter().sum()
    }
}

impl Clock for ManualClock {
    fn sleep(&self, duration: Duration, cancel: &Cancellation) -> bool {
        self.slept.lock().unwrap().push(duration);
        !cancel.is_cancelled()
    }
}

/// API credential held in memory only. Debug output is redacted and the
/// bytes are wiped on drop.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        ApiKey(key.into())
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(API_KEY_ENV).ok().filter(|k| !k.trim().is_empty()).map(ApiKey)
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey([redacted])")
    }
}

impl Drop for ApiKey {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model_id: String,
    pub prompt: String,
    pub payload: String,
    pub temperature: f64,
    pub max_completion_tokens: usize,
    pub context_limit: usize,
    /// 1-based batch the request belongs to; used for routing scripted replies.
    pub batch_index: usize,
}

impl LlmRequest {
    pub fn estimated_tokens(&self) -> usize {
        estimate_tokens(&self.prompt) + estimate_tokens(&self.payload) + self.max_completion_tokens
    }

    pub fn within_context(&self) -> bool {
        self.estimated_tokens() <= self.context_limit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendFailure {
    Transport { status: TransportStatus, message: String },
    /// Backends that already know the failure kind (the scripted mock).
    Classified(GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PingError {
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &LlmRequest, cancel: &Cancellation) -> Result<RawResponse, BackendFailure>;

    /// Minimal authenticated call used to validate credentials.
    fn ping(&self) -> Result<(), PingError>;
}

fn looks_like_table(text: &str) -> bool {
    text.lines().any(|l| l.matches('|').count() >= 3)
}

/// Dispatch one request. Remote failures come back classified; nothing
/// is sent when the request would overflow the context window.
pub fn submit(
    request: &LlmRequest,
    backend: &dyn Backend,
    cancel: &Cancellation,
) -> Result<RawResponse, GatewayError> {
    if !request.within_context() {
        return Err(GatewayError::with_detail(
            ErrorKind::TokenLimit,
            ErrorKind::TokenLimit.canonical_message(),
            format!(
                "request estimates {} tokens, context limit is {}; not dispatched",
                request.estimated_tokens(),
                request.context_limit
            ),
        ));
    }
    match backend.complete(request, cancel) {
        Ok(raw) => {
            if !looks_like_table(&raw.text) {
                let classified = classify_error(&raw.text, TransportStatus::Ok);
                if classified.kind != ErrorKind::FormatError {
                    return Err(classified);
                }
            }
            Ok(raw)
        }
        Err(BackendFailure::Transport { status, message }) => Err(classify_error(&message, status)),
        Err(BackendFailure::Classified(e)) => Err(e),
    }
}

/// One line of a mock script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    /// 1-based batch index this entry answers; absent means any batch.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorKind>,
    /// Optional raw message for an `error` entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl MockEntry {
    pub fn reply(batch: Option<usize>, text: impl Into<String>) -> Self {
        MockEntry {
            batch,
            reply: Some(text.into()),
            error: None,
            message: None,
            delay_ms: None,
        }
    }

    pub fn error(batch: Option<usize>, kind: ErrorKind) -> Self {
        MockEntry {
            batch,
            reply: None,
            error: Some(kind),
            message: None,
            delay_ms: None,
        }
    }

    pub fn delayed(mut self, millis: u64) -> Self {
        self.delay_ms = Some(millis);
        self
    }
}

#[derive(Debug, Error)]
pub enum MockScriptError {
    #[error("cannot read mock script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid mock script: {0}")]
    Invalid(String),
}

/// Deterministic scripted backend.
///
/// Each batch consumes, in order, the entries matching its index followed by
/// the wildcard entries; once they run out the last one repeats.
#[derive(Debug)]
pub struct MockBackend {
    entries: Vec<MockEntry>,
    cursors: Mutex<HashMap<usize, usize>>,
    calls: Mutex<Vec<LlmRequest>>,
}

impl MockBackend {
    pub fn new(entries: Vec<MockEntry>) -> Result<Self, MockScriptError> {
        for (i, e) in entries.iter().enumerate() {
            if e.reply.is_some() == e.error.is_some() {
                return Err(MockScriptError::Invalid(format!(
                    "entry {i} must have exactly one of `reply` or `error`"
                )));
            }
            if e.batch == Some(0) {
                return Err(MockScriptError::Invalid(format!("entry {i}: batch indices start at 1")));
            }
        }
        Ok(MockBackend {
            entries,
            cursors: Mutex::new(HashMap::new()),
            calls: Mutex::new(Vec::new()),
        })
    }

    pub fn from_json(json: &str) -> Result<Self, MockScriptError> {
        let entries: Vec<MockEntry> =
            serde_json::from_str(json).map_err(|e| MockScriptError::Invalid(e.to_string()))?;
        Self::new(entries)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self, MockScriptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MockScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn always(reply: impl Into<String>) -> Self {
        Self::new(vec![MockEntry::reply(None, reply)]).expect("single reply entry is valid")
    }

    /// Requests received so far, in arrival order.
    pub fn calls(&self) -> Vec<LlmRequest> {
        self.calls.lock().unwrap().clone()
    }

    fn next_entry(&self, batch: usize) -> Option<&MockEntry> {
        let candidates: Vec<&MockEntry> = self
            .entries
            .iter()
            .filter(|e| e.batch == Some(batch))
            .chain(self.entries.iter().filter(|e| e.batch.is_none()))
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let mut cursors = self.cursors.lock().unwrap();
        let cursor = cursors.entry(batch).or_default();
        let pick = candidates[(*cursor).min(candidates.len() - 1)];
        *cursor += 1;
        Some(pick)
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &LlmRequest, cancel: &Cancellation) -> Result<RawResponse, BackendFailure> {
        self.calls.lock().unwrap().push(request.clone());
        let Some(entry) = self.next_entry(request.batch_index) else {
            return Err(BackendFailure::Classified(GatewayError::with_detail(
                ErrorKind::NotProcessed,
                ErrorKind::NotProcessed.canonical_message(),
                format!("mock script has no entry for batch {}", request.batch_index),
            )));
        };
        if let Some(ms) = entry.delay_ms {
            if !interruptible_sleep(Duration::from_millis(ms), cancel) {
                return Err(BackendFailure::Transport {
                    status: TransportStatus::ConnectionFailed,
                    message: "request cancelled".into(),
                });
            }
        }
        match (&entry.reply, entry.error) {
            (Some(text), _) => Ok(RawResponse {
                text: text.clone(),
                usage: Usage {
                    prompt_tokens: estimate_tokens(&request.prompt) + estimate_tokens(&request.payload),
                    completion_tokens: estimate_tokens(text),
                },
            }),
            (None, Some(kind)) => {
                let raw = entry
                    .message
                    .clone()
                    .unwrap_or_else(|| kind.canonical_message().to_string());
                Err(BackendFailure::Classified(GatewayError::new(kind, raw)))
            }
            (None, None) => unreachable!("validated in MockBackend::new"),
        }
    }

    fn ping(&self) -> Result<(), PingError> {
        Ok(())
    }
}

/// Chat-completion endpoint over HTTPS.
pub struct HttpBackend {
    endpoint: String,
    api_key: ApiKey,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key)
            .finish()
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: ApiKey, timeout: Duration) -> Result<Self, PingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| PingError::Unreachable(e.to_string()))?;
        Ok(HttpBackend {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn error_message(body: &str) -> String {
        serde_json::from_str::<serde_json::Value>(body)
            .ok()
            .and_then(|v| v.pointer("/error/message").and_then(|m| m.as_str()).map(str::to_string))
            .unwrap_or_else(|| body.to_string())
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "real"
    }

    fn complete(&self, request: &LlmRequest, _cancel: &Cancellation) -> Result<RawResponse, BackendFailure> {
        let body = ChatRequest {
            model: &request.model_id,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: &request.prompt,
                },
                ChatMessage {
                    role: "user",
                    content: &request.payload,
                },
            ],
            temperature: request.temperature,
            max_tokens: request.max_completion_tokens,
        };
        let response = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .bearer_auth(self.api_key.expose())
            .json(&body)
            .send()
            .map_err(|e| BackendFailure::Transport {
                status: TransportStatus::ConnectionFailed,
                message: format!("network error: {e}"),
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendFailure::Transport {
            status: TransportStatus::ConnectionFailed,
            message: format!("network error: {e}"),
        })?;
        if !status.is_success() {
            return Err(BackendFailure::Transport {
                status: TransportStatus::Http(status.as_u16()),
                message: Self::error_message(&text),
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| BackendFailure::Transport {
            status: TransportStatus::Http(status.as_u16()),
            message: format!("unreadable completion body: {e}"),
        })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        let usage = parsed.usage.unwrap_or(Usage {
            prompt_tokens: estimate_tokens(&request.prompt) + estimate_tokens(&request.payload),
            completion_tokens: estimate_tokens(&content),
        });
        Ok(RawResponse { text: content, usage })
    }

    fn ping(&self) -> Result<(), PingError> {
        let response = self
            .client
            .get(format!("{}/models", self.endpoint))
            .bearer_auth(self.api_key.expose())
            .send()
            .map_err(|e| PingError::Unreachable(e.to_string()))?;
        let status = response.status();
        if status.is_success() {
            return Ok(());
        }
        let message = Self::error_message(&response.text().unwrap_or_default());
        if status.as_u16() == 401 || status.as_u16() == 403 {
            Err(PingError::AuthFailed(message))
        } else {
            Err(PingError::Unreachable(format!("HTTP {}: {message}", status.as_u16())))
        }
    }
}

mod decimal_repr {
    use super::*;

    pub fn serialize<S: Serializer>(value: &Decimal, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&value.normalize().to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Decimal, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(serde_json::Number),
            Text(String),
        }
        let text = match Repr::deserialize(d)? {
            Repr::Number(n) => n.to_string(),
            Repr::Text(t) => t,
        };
        Decimal::from_str(text.trim())
            .or_else(|_| Decimal::from_scientific(text.trim()))
            .map_err(serde::de::Error::custom)
    }
}

/// Dollars per 1K tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rates {
    #[serde(with = "decimal_repr")]
    pub rate_in: Decimal,
    #[serde(with = "decimal_repr")]
    pub rate_out: Decimal,
}

impl Rates {
    pub fn new(rate_in: Decimal, rate_out: Decimal) -> Self {
        Rates { rate_in, rate_out }
    }
}

/// Per-model price list, loadable from JSON: `{"model": {"rate_in": 0.0015, "rate_out": 0.002}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RatesTable(pub BTreeMap<String, Rates>);

impl Default for RatesTable {
    fn default() -> Self {
        let mut table = BTreeMap::new();
        table.insert(
            "gpt-3.5-turbo".to_string(),
            Rates::new(Decimal::new(15, 4), Decimal::new(2, 3)),
        );
        table.insert("gpt-4".to_string(), Rates::new(Decimal::new(3, 2), Decimal::new(6, 2)));
        RatesTable(table)
    }
}

impl RatesTable {
    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    /// Exact model match, else the longest configured prefix
    /// (`gpt-4-0613` prices as `gpt-4`).
    pub fn lookup(&self, model: &str) -> Option<Rates> {
        self.0.get(model).copied().or_else(|| {
            self.0
                .iter()
                .filter(|(name, _)| model.starts_with(name.as_str()))
                .max_by_key(|(name, _)| name.len())
                .map(|(_, r)| *r)
        })
    }

    pub fn lookup_or_default(&self, model: &str) -> Rates {
        self.lookup(model)
            .or_else(|| self.lookup(DEFAULT_MODEL))
            .unwrap_or_else(|| RatesTable::default().lookup(DEFAULT_MODEL).unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub input_tokens: usize,
    pub output_tokens: usize,
    #[serde(with = "decimal_repr")]
    pub rate_in: Decimal,
    #[serde(with = "decimal_repr")]
    pub rate_out: Decimal,
    #[serde(with = "decimal_repr")]
    pub total: Decimal,
}

impl CostEstimate {
    /// `input/1000 * rate_in + output/1000 * rate_out`, rounded half-up to 6 decimals.
    pub fn compute(input_tokens: usize, output_tokens: usize, rates: Rates) -> Self {
        let thousand = Decimal::from(1000);
        let raw = Decimal::from(input_tokens as u64) / thousand * rates.rate_in
            + Decimal::from(output_tokens as u64) / thousand * rates.rate_out;
        CostEstimate {
            input_tokens,
            output_tokens,
            rate_in: rates.rate_in,
            rate_out: rates.rate_out,
            total: raw.round_dp_with_strategy(6, RoundingStrategy::MidpointAwayFromZero),
        }
    }

    pub fn zero(rates: Rates) -> Self {
        Self::compute(0, 0, rates)
    }
}

impl fmt::Display for CostEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "${} ({} input tokens at ${}/1K, up to {} output tokens at ${}/1K)",
            self.total.normalize(),
            self.input_tokens,
            self.rate_in.normalize(),
            self.output_tokens,
            self.rate_out.normalize()
        )
    }
}

/// Upper-bound cost of running `plan` with `bundle` as the per-batch prompt.
pub fn estimate_cost(plan: &BatchPlan, bundle: &PromptBundle, rates: Rates) -> CostEstimate {
    let payloads: Vec<usize> = plan.batches.iter().map(|b| b.estimated_tokens).collect();
    estimate_cost_from_parts(
        estimate_tokens(&bundle.assembled),
        &payloads,
        plan.budget.completion_reserve,
        rates,
    )
}

/// Cost of sending `prompt_tokens` with each payload, reserving
/// `completion_reserve` output tokens per batch.
pub fn estimate_cost_from_parts(
    prompt_tokens: usize,
    payload_tokens: &[usize],
    completion_reserve: usize,
    rates: Rates,
) -> CostEstimate {
    let input_tokens = payload_tokens.iter().map(|p| prompt_tokens + p).sum();
    let output_tokens = payload_tokens.len() * completion_reserve;
    CostEstimate::compute(input_tokens, output_tokens, rates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rust_decimal_macros::dec;

    fn request(batch: usize) -> LlmRequest {
        LlmRequest {
            model_id: DEFAULT_MODEL.into(),
            prompt: "p".into(),
            payload: "data".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_completion_tokens: 100,
            context_limit: 4096,
            batch_index: batch,
        }
    }

    const TABLE: &str = "| Themes | Description | Quotes | Participant Count |\n|---|---|---|---|\n| A | d | \"q\" | 1 |";

    #[test]
    fn retryable_mapping_is_fixed() {
        for kind in ErrorKind::ALL {
            let expected = matches!(kind, ErrorKind::Network | ErrorKind::NotProcessed | ErrorKind::RateLimit);
            assert_eq!(GatewayError::new(kind, "x").retryable, expected, "{kind}");
        }
    }

    #[test]
    fn service_messages_classify() {
        let cases = [
            ("Network errors", ErrorKind::Network),
            ("This content may violate our content policy", ErrorKind::PolicyViolation),
            ("I'm sorry, but I can't assist with that request.", ErrorKind::Refusal),
            ("I’m sorry, but I won’t be able to assist with that request", ErrorKind::Refusal),
            ("The message you submitted was too long", ErrorKind::TokenLimit),
            ("Only one message at a time.", ErrorKind::RateLimit),
            (ErrorKind::NotProcessed.canonical_message(), ErrorKind::NotProcessed),
        ];
        for (message, kind) in cases {
            assert_eq!(classify_error(message, TransportStatus::Ok).kind, kind, "{message}");
        }
    }

    #[test]
    fn unknown_failures_fall_back_by_transport() {
        assert_eq!(classify_error("boom", TransportStatus::ConnectionFailed).kind, ErrorKind::Network);
        assert_eq!(classify_error("boom", TransportStatus::Http(404)).kind, ErrorKind::Network);
        assert_eq!(classify_error("", TransportStatus::Http(429)).kind, ErrorKind::RateLimit);
        assert_eq!(classify_error("", TransportStatus::Http(503)).kind, ErrorKind::NotProcessed);
        assert_eq!(classify_error("Sure! Here you go", TransportStatus::Ok).kind, ErrorKind::FormatError);
        let err = classify_error(
            "This model's maximum context length is 4097 tokens",
            TransportStatus::Http(400),
        );
        assert_eq!(err.kind, ErrorKind::TokenLimit);
    }

    #[test]
    fn policy_examples() {
        let network = GatewayError::new(ErrorKind::Network, "Network errors");
        let fresh = AttemptState::new(2296);
        let action = recovery_policy(&network, &fresh);
        assert_eq!(action.action, ActionKind::RetryBackoff);
        assert_eq!(action.delay(), Some(Duration::from_secs(1)));

        let mut tried = fresh.clone();
        for expected in [1, 2, 4, 8, 16] {
            let a = recovery_policy(&network, &tried);
            assert_eq!(a.delay(), Some(Duration::from_secs(expected)));
            tried.record(&a);
        }
        assert_eq!(tried.retries_for(ActionKind::RetryBackoff), 5);
        assert_eq!(recovery_policy(&network, &tried).action, ActionKind::Abort);

        let token = GatewayError::new(ErrorKind::TokenLimit, "too long");
        let a = recovery_policy(&token, &fresh);
        assert_eq!(a.action, ActionKind::ResplitSmaller);
        assert_eq!(a.params, ActionParams::Budget { effective_budget: 1148 });
        assert_eq!(recovery_policy(&token, &AttemptState::new(127)).action, ActionKind::Abort);

        let rate = GatewayError::new(ErrorKind::RateLimit, "");
        assert_eq!(recovery_policy(&rate, &fresh).delay(), Some(Duration::from_secs(60)));
    }

    #[test]
    fn every_kind_has_one_default_action() {
        let expected = [
            (ErrorKind::Network, ActionKind::RetryBackoff),
            (ErrorKind::NotProcessed, ActionKind::RetryBackoff),
            (ErrorKind::RateLimit, ActionKind::WaitThenRetry),
            (ErrorKind::TokenLimit, ActionKind::ResplitSmaller),
            (ErrorKind::PolicyViolation, ActionKind::ReclarifyPrompt),
            (ErrorKind::Refusal, ActionKind::ReclarifyPrompt),
            (ErrorKind::CountMismatch, ActionKind::ReinjectTail),
            (ErrorKind::FormatError, ActionKind::ReassertFormat),
            (ErrorKind::ContentMisread, ActionKind::ReassertFormat),
        ];
        for (kind, action) in expected {
            let state = AttemptState::new(2296);
            assert_eq!(recovery_policy(&GatewayError::new(kind, ""), &state).action, action);
        }
    }

    #[test]
    fn recovery_terminates_for_every_kind() {
        for kind in ErrorKind::ALL {
            let err = GatewayError::new(kind, "");
            let mut state = AttemptState::new(2296);
            let mut steps = 0;
            loop {
                let action = recovery_policy(&err, &state);
                if action.action == ActionKind::Abort {
                    break;
                }
                state.record(&action);
                steps += 1;
                assert!(steps <= MAX_RETRIES as usize * 7, "{kind} does not terminate");
            }
        }
    }

    #[test]
    fn cost_examples() {
        let r = Rates::new(dec!(0.0015), dec!(0.002));
        assert_eq!(CostEstimate::compute(1000, 0, r).total, dec!(0.0015));
        assert_eq!(CostEstimate::compute(0, 0, r).total, Decimal::ZERO);
        // ((600*3 + 7500)/1000)*0.0015 + (3600/1000)*0.002
        assert_eq!(CostEstimate::compute(9300, 3600, r).total, dec!(0.02115));
        // half-up at the sixth decimal
        let odd = Rates::new(dec!(0.0000005), Decimal::ZERO);
        assert_eq!(CostEstimate::compute(1000, 0, odd).total, dec!(0.000001));
        assert_eq!(CostEstimate::compute(999, 0, odd).total, Decimal::ZERO);
        assert_eq!(CostEstimate::compute(1000, 0, Rates::new(dec!(0.0005), Decimal::ZERO)).total, dec!(0.0005));
        assert_eq!(CostEstimate::compute(1, 0, Rates::new(dec!(0.0015), Decimal::ZERO)).total, dec!(0.000002));
    }

    #[test]
    fn default_rates_and_lookup() {
        let table = RatesTable::default();
        assert_eq!(table.lookup("gpt-3.5-turbo").unwrap().rate_in, dec!(0.0015));
        assert_eq!(table.lookup("gpt-4").unwrap().rate_in, dec!(0.03));
        assert_eq!(table.lookup("gpt-4-0613").unwrap().rate_in, dec!(0.03));
        assert!(table.lookup("llama").is_none());
        assert_eq!(table.lookup_or_default("llama").rate_in, dec!(0.0015));
        let custom = RatesTable::from_json(r#"{"m": {"rate_in": 0.0001, "rate_out": "0.0002"}}"#).unwrap();
        assert_eq!(custom.lookup("m").unwrap(), Rates::new(dec!(0.0001), dec!(0.0002)));
    }

    #[test]
    fn mock_passes_tables_through() {
        let mock = MockBackend::always(TABLE);
        let raw = submit(&request(1), &mock, &Cancellation::new()).unwrap();
        assert_eq!(raw.text, TABLE);
    }

    #[test]
    fn mock_reply_texts_are_classified() {
        let mock = MockBackend::new(vec![
            MockEntry::reply(Some(1), "The message you submitted was too long."),
            MockEntry::reply(Some(2), "Only one message at a time."),
        ])
        .unwrap();
        let err = submit(&request(1), &mock, &Cancellation::new()).unwrap_err();
        assert_eq!((err.kind, err.retryable), (ErrorKind::TokenLimit, false));
        let err = submit(&request(2), &mock, &Cancellation::new()).unwrap_err();
        assert_eq!((err.kind, err.retryable), (ErrorKind::RateLimit, true));
    }

    #[test]
    fn tables_mentioning_errors_are_not_misclassified() {
        let text = "| Themes | Description | Quotes | Participant Count |\n| Tech | d | \"Network errors all day\" | 1 |";
        assert!(submit(&request(1), &MockBackend::always(text), &Cancellation::new()).is_ok());
    }

    #[test]
    fn mock_cursor_is_per_batch_and_sticky() {
        let mock = MockBackend::from_json(
            r#"[{"match": 1, "error": "network"}, {"match": 1, "reply": "one"}, {"reply": "any"}]"#,
        )
        .unwrap();
        let c = Cancellation::new();
        assert_eq!(submit(&request(1), &mock, &c).unwrap_err().kind, ErrorKind::Network);
        assert_eq!(submit(&request(2), &mock, &c).unwrap().text, "any");
        assert_eq!(submit(&request(1), &mock, &c).unwrap().text, "one");
        assert_eq!(submit(&request(1), &mock, &c).unwrap().text, "any");
        assert_eq!(submit(&request(1), &mock, &c).unwrap().text, "any");
        assert_eq!(mock.calls().len(), 5);
    }

    #[test]
    fn invalid_scripts_are_rejected() {
        assert!(MockBackend::from_json(r#"[{"match": 1}]"#).is_err());
        assert!(MockBackend::from_json(r#"[{"reply": "a", "error": "network"}]"#).is_err());
        assert!(MockBackend::from_json(r#"[{"match": 0, "reply": "a"}]"#).is_err());
        assert!(MockBackend::from_json(r#"[{"error": "gremlins"}]"#).is_err());
    }

    #[test]
    fn oversized_requests_are_not_dispatched() {
        let mock = MockBackend::always(TABLE);
        let mut req = request(1);
        req.payload = "x".repeat(20_000);
        let err = submit(&req, &mock, &Cancellation::new()).unwrap_err();
        assert_eq!(err.kind, ErrorKind::TokenLimit);
        assert!(mock.calls().is_empty());
    }

    #[test]
    fn api_key_is_redacted_in_debug() {
        let key = ApiKey::new("sk-secret-123");
        assert!(!format!("{key:?}").contains("sk-secret"));
        let backend = HttpBackend::new("http://127.0.0.1:9", key, Duration::from_secs(1)).unwrap();
        assert!(!format!("{backend:?}").contains("sk-secret"));
    }

    #[test]
    fn manual_clock_records_without_sleeping() {
        let clock = ManualClock::new();
        assert!(clock.sleep(Duration::from_secs(60), &Cancellation::new()));
        assert_eq!(clock.total(), Duration::from_secs(60));
    }
}
