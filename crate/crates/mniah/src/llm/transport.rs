//! Transport abstraction and the HTTP chat-completions implementation.

use serde::Deserialize;
use std::time::Duration;
use thiserror::Error;

use super::{ChatRequest, ChatResponse, LlmError, ModelEndpoint, TokenUsage};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("rate limited (status {status})")]
    RateLimited { status: u16 },
    #[error("endpoint returned status {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
}

impl TransportError {
    /// Only network-level failures and rate-limit statuses are retried.
    pub fn retryable(&self) -> bool {
        matches!(
            self,
            TransportError::Network(_) | TransportError::Timeout(_) | TransportError::RateLimited { .. }
        )
    }
}

/// One round trip to a model. Implementations must be safe to call from
/// multiple worker threads.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

pub const DEFAULT_TIMEOUT_SECS: u64 = 300;

/// Speaks the common chat-completions HTTP+JSON protocol: POST to
/// `{base_url}/chat/completions` with a messages array and decoding fields,
/// bearer auth from the endpoint's named environment variable.
pub struct HttpTransport {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn from_endpoint(endpoint: &ModelEndpoint, timeout_secs: u64) -> Result<Self, LlmError> {
        let api_key = match &endpoint.auth_env {
            None => None,
            Some(var) => Some(
                std::env::var(var).map_err(|_| LlmError::MissingCredential(var.clone()))?,
            ),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .map_err(|e| LlmError::InvalidDecoding(format!("http client: {e}")))?;
        Ok(Self {
            base_url: endpoint.base_url.trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let url = format!("{}/chat/completions", self.base_url);
        let body = serde_json::json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.decoding.temperature,
            "top_p": request.decoding.top_p,
            "max_tokens": request.decoding.max_new_tokens,
            "n": request.decoding.n_samples,
        });
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let response = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout(e.to_string())
            } else {
                TransportError::Network(e.to_string())
            }
        })?;

        let status = response.status();
        if status.as_u16() == 429 {
            return Err(TransportError::RateLimited { status: 429 });
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            let body = body.chars().take(500).collect();
            return Err(TransportError::Endpoint {
                status: status.as_u16(),
                body,
            });
        }
        let wire: WireResponse = response
            .json()
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        if wire.choices.is_empty() {
            return Err(TransportError::Protocol("response has no choices".into()));
        }
        Ok(ChatResponse {
            completions: wire.choices.into_iter().map(|c| c.message.content).collect(),
            usage: wire.usage.map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }
}
