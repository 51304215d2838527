//! Chat endpoint client with fixed decoding presets, response caching and
//! retry accounting.
//!
//! Every call is keyed by a digest of (model id, rendered messages,
//! decoding settings, call tag) and persisted to the run store before it
//! returns, so reruns replay completions byte-identically instead of
//! resampling. The `tag` field distinguishes deliberately independent
//! samples of the same prompt; it is empty for ordinary calls.

pub mod mock;
pub mod transport;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use thiserror::Error;

use crate::error::{Classify, ErrorClass};
use crate::runstore::{digest, now_ms, RecordKind, RunStore, StoreError};
pub use transport::{HttpTransport, Transport, TransportError};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("endpoint '{0}' is not registered")]
    UnknownEndpoint(String),
    #[error("invalid decoding config: {0}")]
    InvalidDecoding(String),
    #[error("endpoint '{endpoint}' failed after {attempts} attempt(s) [{cache_key}]: {source}")]
    CallFailed {
        endpoint: String,
        cache_key: String,
        attempts: u32,
        #[source]
        source: TransportError,
    },
    #[error("missing credential: environment variable '{0}' is not set")]
    MissingCredential(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl Classify for LlmError {
    fn class(&self) -> ErrorClass {
        match self {
            LlmError::UnknownEndpoint(_) | LlmError::MissingCredential(_) => ErrorClass::Config,
            LlmError::InvalidDecoding(_) => ErrorClass::Validation,
            LlmError::CallFailed { .. } => ErrorClass::Transport,
            LlmError::Store(e) => e.class(),
        }
    }
}

/// A named chat endpoint. `auth_env` names the environment variable that
/// holds the credential; secrets never appear in configuration files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub mode: DecodingMode,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub n_samples: u32,
}

impl DecodingConfig {
    pub fn greedy(max_new_tokens: u32) -> Self {
        Self {
            mode: DecodingMode::Greedy,
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens,
            n_samples: 1,
        }
    }

    pub fn sample(temperature: f64, top_p: f64, max_new_tokens: u32, n_samples: u32) -> Self {
        Self {
            mode: DecodingMode::Sample,
            temperature,
            top_p,
            max_new_tokens,
            n_samples,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.n_samples < 1 {
            return Err(LlmError::InvalidDecoding("n_samples must be >= 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(LlmError::InvalidDecoding("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidDecoding("top_p must be in (0, 1]".into()));
        }
        if self.mode == DecodingMode::Greedy && (self.temperature != 0.0 || self.n_samples != 1) {
            return Err(LlmError::InvalidDecoding(
                "greedy mode requires temperature 0 and n_samples 1".into(),
            ));
        }
        Ok(())
    }

    fn canon(&self) -> String {
        format!(
            "{:?}|t={}|p={}|max={}|n={}",
            self.mode, self.temperature, self.top_p, self.max_new_tokens, self.n_samples
        )
    }
}

/// The five decoding presets used across the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Short factual answers: greedy, 128 tokens.
    AnswerShort,
    /// Responses carrying a reasoning span: greedy, 512 tokens.
    Thinking,
    /// Math solution sampling: t=1, top_p=0.95, 2048 tokens, 5 samples.
    MathGenerate,
    /// Solution extraction: t=0.6, top_p=0.95, 2048 tokens, 5 samples.
    MathExtract,
    /// Verdict calls: greedy, 128 tokens.
    Judge,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::AnswerShort,
        Preset::Thinking,
        Preset::MathGenerate,
        Preset::MathExtract,
        Preset::Judge,
    ];
}

impl std::str::FromStr for Preset {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "answer_short" => Ok(Preset::AnswerShort),
            "thinking" => Ok(Preset::Thinking),
            "math_generate" => Ok(Preset::MathGenerate),
            "math_extract" => Ok(Preset::MathExtract),
            "judge" => Ok(Preset::Judge),
            other => Err(LlmError::InvalidDecoding(format!("unknown preset '{other}'"))),
        }
    }
}

/// Decoding settings for a preset.
pub fn preset(p: Preset) -> DecodingConfig {
    match p {
        Preset::AnswerShort => DecodingConfig::greedy(128),
        Preset::Thinking => DecodingConfig::greedy(512),
        Preset::MathGenerate => DecodingConfig::sample(1.0, 0.95, 2048, 5),
        Preset::MathExtract => DecodingConfig::sample(0.6, 0.95, 2048, 5),
        Preset::Judge => DecodingConfig::greedy(128),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// One logical request as handed to a transport.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub decoding: DecodingConfig,
    /// Distinguishes deliberately independent samples of the same prompt.
    pub tag: String,
}

impl ChatRequest {
    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct ChatResponse {
    pub completions: Vec<String>,
    pub usage: Option<TokenUsage>,
}

impl ChatResponse {
    pub fn of(texts: Vec<String>) -> Self {
        Self {
            completions: texts,
            usage: None,
        }
    }

    pub fn single(text: impl Into<String>) -> Self {
        Self::of(vec![text.into()])
    }
}

/// Full accounting for one logical call, including failed attempts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallRecord {
    pub cache_key: String,
    pub endpoint: String,
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub decoding: DecodingConfig,
    #[serde(default)]
    pub tag: String,
    pub completions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub attempt_count: u32,
    /// Per-attempt outcome strings; "ok" for the successful one.
    pub attempts: Vec<String>,
}

impl CallRecord {
    pub fn first_completion(&self) -> &str {
        self.completions.first().map(String::as_str).unwrap_or("")
    }
}

#[derive(Serialize, Deserialize)]
struct StoredCall {
    status: String,
    record: CallRecord,
}

/// Retry behavior for transient failures: exponential backoff with jitter,
/// applied only to network-level errors and rate-limit statuses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 1000,
            max_delay_ms: 30_000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No delays; used by tests and mock-backed runs.
    pub fn immediate() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 0,
            max_delay_ms: 0,
            jitter: false,
        }
    }

    fn delay_ms(&self, attempt: u32) -> u64 {
        let exp = self.base_delay_ms.saturating_mul(1u64 << attempt.min(16));
        let capped = exp.min(self.max_delay_ms);
        if self.jitter && capped > 0 {
            // Uniform jitter in [capped/2, capped]; timing only, never data.
            use rand::Rng;
            rand::thread_rng().gen_range(capped / 2..=capped)
        } else {
            capped
        }
    }
}

struct EndpointEntry {
    endpoint: ModelEndpoint,
    transport: Arc<dyn Transport>,
    limiter: Arc<Semaphore>,
}

/// Client over a roster of named endpoints. Calls are cached in the run
/// store; a hit returns the stored record without touching the transport.
pub struct LlmClient {
    store: Arc<RunStore>,
    endpoints: BTreeMap<String, EndpointEntry>,
    retry: RetryPolicy,
    use_cache: bool,
}

impl LlmClient {
    pub fn new(store: Arc<RunStore>) -> Self {
        Self {
            store,
            endpoints: BTreeMap::new(),
            retry: RetryPolicy::default(),
            use_cache: true,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Disables cache reads; fresh completions are stored under salted keys
    /// so existing records stay intact.
    pub fn with_cache(mut self, use_cache: bool) -> Self {
        self.use_cache = use_cache;
        self
    }

    pub fn store(&self) -> &Arc<RunStore> {
        &self.store
    }

    pub fn register(
        &mut self,
        endpoint: ModelEndpoint,
        transport: Arc<dyn Transport>,
        max_concurrency: usize,
    ) {
        self.endpoints.insert(
            endpoint.name.clone(),
            EndpointEntry {
                endpoint,
                transport,
                limiter: Arc::new(Semaphore::new(max_concurrency.max(1))),
            },
        );
    }

    pub fn endpoint(&self, name: &str) -> Result<&ModelEndpoint, LlmError> {
        self.endpoints
            .get(name)
            .map(|e| &e.endpoint)
            .ok_or_else(|| LlmError::UnknownEndpoint(name.to_string()))
    }

    pub fn chat(
        &self,
        endpoint_name: &str,
        messages: Vec<ChatMessage>,
        decoding: DecodingConfig,
    ) -> Result<CallRecord, LlmError> {
        self.chat_tagged(endpoint_name, messages, decoding, "")
    }

    /// Like [`chat`](Self::chat) but with an explicit tag participating in
    /// the cache key, for independent samples of one prompt.
    pub fn chat_tagged(
        &self,
        endpoint_name: &str,
        messages: Vec<ChatMessage>,
        decoding: DecodingConfig,
        tag: &str,
    ) -> Result<CallRecord, LlmError> {
        decoding.validate()?;
        let entry = self
            .endpoints
            .get(endpoint_name)
            .ok_or_else(|| LlmError::UnknownEndpoint(endpoint_name.to_string()))?;

        let request = ChatRequest {
            model_id: entry.endpoint.model_id.clone(),
            messages,
            decoding,
            tag: tag.to_string(),
        };
        let cache_key = request_digest(&request);

        if self.use_cache {
            if let Some(stored) = self.store.get(RecordKind::Call, &cache_key)? {
                if let Ok(call) = serde_json::from_value::<StoredCall>(stored.payload) {
                    if call.status == "ok" {
                        return Ok(call.record);
                    }
                }
            }
        }

        let _permit = entry.limiter.acquire();
        let started_at_ms = now_ms();
        let mut attempts: Vec<String> = Vec::new();
        let mut last_err: Option<TransportError> = None;

        for attempt in 0..self.retry.max_attempts {
            match entry.transport.send(&request) {
                Ok(response) => {
                    attempts.push("ok".into());
                    let record = CallRecord {
                        cache_key: cache_key.clone(),
                        endpoint: entry.endpoint.name.clone(),
                        model_id: request.model_id.clone(),
                        messages: request.messages.clone(),
                        decoding: request.decoding.clone(),
                        tag: request.tag.clone(),
                        completions: response.completions,
                        usage: response.usage,
                        started_at_ms,
                        finished_at_ms: now_ms(),
                        attempt_count: attempt + 1,
                        attempts,
                    };
                    self.persist(&cache_key, "ok", &record)?;
                    return Ok(record);
                }
                Err(e) => {
                    attempts.push(e.to_string());
                    let retryable = e.retryable();
                    last_err = Some(e);
                    if retryable && attempt + 1 < self.retry.max_attempts {
                        let delay = self.retry.delay_ms(attempt);
                        if delay > 0 {
                            std::thread::sleep(std::time::Duration::from_millis(delay));
                        }
                        continue;
                    }
                    break;
                }
            }
        }

        let source = last_err.expect("loop ran at least once");
        let attempt_count = attempts.len() as u32;
        let failure = CallRecord {
            cache_key: cache_key.clone(),
            endpoint: entry.endpoint.name.clone(),
            model_id: request.model_id.clone(),
            messages: request.messages.clone(),
            decoding: request.decoding.clone(),
            tag: request.tag.clone(),
            completions: Vec::new(),
            usage: None,
            started_at_ms,
            finished_at_ms: now_ms(),
            attempt_count,
            attempts,
        };
        // Failures are stored under a salted key so the logical cache slot
        // stays free for a later successful attempt.
        let failure_key = digest(&[&cache_key, "failed", &failure.finished_at_ms.to_string()]);
        self.persist(&failure_key, "failed", &failure)?;
        Err(LlmError::CallFailed {
            endpoint: entry.endpoint.name.clone(),
            cache_key,
            attempts: attempt_count,
            source,
        })
    }

    fn persist(&self, key: &str, status: &str, record: &CallRecord) -> Result<(), LlmError> {
        let key = if status == "ok" && !self.use_cache {
            digest(&[key, "nocache", &record.finished_at_ms.to_string()])
        } else {
            key.to_string()
        };
        let payload = serde_json::to_value(StoredCall {
            status: status.to_string(),
            record: record.clone(),
        })
        .expect("call record serializes");
        match self.store.put(RecordKind::Call, &key, &payload) {
            Ok(_) => Ok(()),
            // A concurrent worker already recorded the same completed call.
            Err(StoreError::Conflict { .. }) if status == "ok" => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

/// Cache key of a request: digest over model id, messages, decoding, tag.
pub fn request_digest(request: &ChatRequest) -> String {
    let mut parts: Vec<String> = vec![request.model_id.clone()];
    for m in &request.messages {
        parts.push(format!("{}\u{1e}{}", m.role, m.content));
    }
    parts.push(request.decoding.canon());
    parts.push(request.tag.clone());
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    digest(&refs)
}

/// Minimal counting semaphore for per-endpoint concurrency limits.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(self: &Arc<Self>) -> SemaphoreGuard {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard {
            sem: Arc::clone(self),
        }
    }
}

struct SemaphoreGuard {
    sem: Arc<Semaphore>,
}

impl Drop for SemaphoreGuard {
    fn drop(&mut self) {
        let mut permits = self.sem.permits.lock().unwrap();
        *permits += 1;
        self.sem.cv.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::mock::{FlakyTransport, ScriptedTransport};
    use super::*;

    fn client_with(transport: Arc<dyn Transport>) -> (tempfile::TempDir, LlmClient) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(RunStore::open(dir.path().join("store"), "cfg").unwrap());
        let mut client = LlmClient::new(store).with_retry(RetryPolicy::immediate());
        client.register(
            ModelEndpoint {
                name: "m".into(),
                base_url: "mock:".into(),
                model_id: "mock-model".into(),
                auth_env: None,
            },
            transport,
            4,
        );
        (dir, client)
    }

    #[test]
    fn preset_table_is_pinned() {
        let cases = [
            (Preset::AnswerShort, DecodingMode::Greedy, 0.0, 1.0, 128, 1),
            (Preset::Thinking, DecodingMode::Greedy, 0.0, 1.0, 512, 1),
            (Preset::MathGenerate, DecodingMode::Sample, 1.0, 0.95, 2048, 5),
            (Preset::MathExtract, DecodingMode::Sample, 0.6, 0.95, 2048, 5),
            (Preset::Judge, DecodingMode::Greedy, 0.0, 1.0, 128, 1),
        ];
        for (p, mode, t, top_p, max, n) in cases {
            let d = preset(p);
            assert_eq!(d.mode, mode, "{p:?}");
            assert_eq!(d.temperature, t, "{p:?}");
            assert_eq!(d.top_p, top_p, "{p:?}");
            assert_eq!(d.max_new_tokens, max, "{p:?}");
            assert_eq!(d.n_samples, n, "{p:?}");
            d.validate().unwrap();
        }
    }

    #[test]
    fn greedy_with_multiple_samples_is_invalid() {
        let mut d = DecodingConfig::greedy(128);
        d.n_samples = 2;
        assert!(matches!(d.validate(), Err(LlmError::InvalidDecoding(_))));
    }

    #[test]
    fn second_identical_call_hits_cache() {
        let transport = Arc::new(ScriptedTransport::new(|_req| {
            Ok(ChatResponse::single("hello"))
        }));
        let (_d, client) = client_with(transport.clone());
        let msgs = vec![ChatMessage::user("hi")];
        let a = client.chat("m", msgs.clone(), preset(Preset::AnswerShort)).unwrap();
        let b = client.chat("m", msgs, preset(Preset::AnswerShort)).unwrap();
        assert_eq!(transport.call_count(), 1);
        assert_eq!(a.completions, b.completions);
        assert_eq!(a.cache_key, b.cache_key);
    }

    #[test]
    fn tag_separates_otherwise_identical_calls() {
        let transport = Arc::new(ScriptedTransport::new(|req| {
            Ok(ChatResponse::single(format!("reply-{}", req.tag)))
        }));
        let (_d, client) = client_with(transport.clone());
        let msgs = vec![ChatMessage::user("hi")];
        let a = client
            .chat_tagged("m", msgs.clone(), preset(Preset::AnswerShort), "0")
            .unwrap();
        let b = client
            .chat_tagged("m", msgs, preset(Preset::AnswerShort), "1")
            .unwrap();
        assert_eq!(transport.call_count(), 2);
        assert_ne!(a.cache_key, b.cache_key);
        assert_ne!(a.completions, b.completions);
    }

    #[test]
    fn two_failures_then_success_counts_three_attempts() {
        let inner = Arc::new(ScriptedTransport::new(|_| Ok(ChatResponse::single("ok"))));
        let flaky = Arc::new(FlakyTransport::failing_first(2, inner));
        let (_d, client) = client_with(flaky);
        let record = client
            .chat("m", vec![ChatMessage::user("q")], preset(Preset::AnswerShort))
            .unwrap();
        assert_eq!(record.attempt_count, 3);
        assert_eq!(record.attempts.len(), 3);
        assert_eq!(record.attempts[2], "ok");
    }

    #[test]
    fn exhausted_retries_surface_transport_error_and_store_failure() {
        let transport = Arc::new(ScriptedTransport::new(|_| {
            Err(TransportError::Network("connection refused".into()))
        }));
        let (_d, client) = client_with(transport);
        let err = client
            .chat("m", vec![ChatMessage::user("q")], preset(Preset::AnswerShort))
            .unwrap_err();
        assert_eq!(err.class(), ErrorClass::Transport);
        // The failed call is accounted for in the store.
        let calls = client.store().count(RecordKind::Call).unwrap();
        assert_eq!(calls, 1);
    }

    #[test]
    fn non_retryable_status_fails_fast() {
        let transport = Arc::new(ScriptedTransport::new(|_| {
            Err(TransportError::Endpoint {
                status: 400,
                body: "bad request".into(),
            })
        }));
        let (_d, client) = client_with(transport.clone());
        let err = client
            .chat("m", vec![ChatMessage::user("q")], preset(Preset::AnswerShort))
            .unwrap_err();
        assert!(matches!(err, LlmError::CallFailed { attempts: 1, .. }));
        assert_eq!(transport.call_count(), 1);
    }

    #[test]
    fn unknown_endpoint_is_config_error() {
        let transport = Arc::new(ScriptedTransport::new(|_| Ok(ChatResponse::single("x"))));
        let (_d, client) = client_with(transport);
        let err = client
            .chat("ghost", vec![ChatMessage::user("q")], preset(Preset::Judge))
            .unwrap_err();
        assert_eq!(err.class(), ErrorClass::Config);
    }

    #[test]
    fn no_cache_mode_resends_but_preserves_existing_records() {
        let transport = Arc::new(ScriptedTransport::new(|_| Ok(ChatResponse::single("fresh"))));
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(RunStore::open(dir.path().join("store"), "cfg").unwrap());
        let endpoint = ModelEndpoint {
            name: "m".into(),
            base_url: "mock:".into(),
            model_id: "mock-model".into(),
            auth_env: None,
        };
        let mut cached = LlmClient::new(store.clone()).with_retry(RetryPolicy::immediate());
        cached.register(endpoint.clone(), transport.clone(), 1);
        cached
            .chat("m", vec![ChatMessage::user("q")], preset(Preset::AnswerShort))
            .unwrap();

        let mut fresh = LlmClient::new(store.clone())
            .with_retry(RetryPolicy::immediate())
            .with_cache(false);
        fresh.register(endpoint, transport.clone(), 1);
        fresh
            .chat("m", vec![ChatMessage::user("q")], preset(Preset::AnswerShort))
            .unwrap();

        assert_eq!(transport.call_count(), 2);
        // Both the original and the salted fresh record exist.
        assert_eq!(store.count(RecordKind::Call).unwrap(), 2);
    }
}
