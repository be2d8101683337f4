//! Completions-API client over blocking HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{truncate_at_stop, Backend, Completion, FinishReason, GatewayError, DEFAULT_RETRY_BUDGET};
use crate::model::GenerationParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Full URL of the completions endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Total transport attempts per request.
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    /// Delay before the first retry; doubles on each further retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_retry_budget() -> u32 {
    DEFAULT_RETRY_BUDGET
}

fn default_backoff_ms() -> u64 {
    250
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            auth_token: None,
            timeout_ms: default_timeout_ms(),
            retry_budget: default_retry_budget(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a [String],
    seed: u64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: Option<String>,
    #[serde(default)]
    finish_reason: Option<String>,
}

enum Failure {
    Retryable(String),
    Fatal(GatewayError),
}

pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    tag: String,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::BackendUnavailable {
                attempts: 0,
                message: e.to_string(),
            })?;
        let tag = format!("remote:{}", config.model);
        Ok(Self {
            config,
            client,
            tag,
        })
    }

    fn attempt(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, Failure> {
        let body = CompletionRequest {
            model: &self.config.model,
            prompt,
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            stop: &params.stop_sequences,
            seed: params.seed,
        };
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(token) = &self.config.auth_token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let detail = response.text().unwrap_or_default();
            return Err(Failure::Fatal(GatewayError::BackendUnavailable {
                attempts: 1,
                message: format!("HTTP {status}: {}", detail.trim()),
            }));
        }
        let bytes = response
            .bytes()
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let parsed: CompletionResponse = serde_json::from_slice(&bytes)
            .map_err(|e| Failure::Fatal(GatewayError::BackendMalformed(e.to_string())))?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            Failure::Fatal(GatewayError::BackendMalformed("empty choices list".into()))
        })?;
        let text = choice.text.ok_or_else(|| {
            Failure::Fatal(GatewayError::BackendMalformed("first choice has no text".into()))
        })?;
        let reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("error") => FinishReason::Error,
            _ => FinishReason::Stop,
        };
        if reason == FinishReason::Error {
            return Ok(Completion::new("", FinishReason::Error, &self.tag));
        }
        // Some servers ignore `stop`; cutting again is a no-op for those that don't.
        let (cut, stopped) = truncate_at_stop(&text, &params.stop_sequences);
        let reason = if stopped { FinishReason::Stop } else { reason };
        Ok(Completion::new(cut, reason, &self.tag))
    }
}

impl Backend for RemoteBackend {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        let budget = self.config.retry_budget.max(1);
        let mut last = String::new();
        for attempt in 0..budget {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(prompt, params) {
                Ok(completion) => return Ok(completion),
                Err(Failure::Fatal(err)) => return Err(err),
                Err(Failure::Retryable(message)) => {
                    tracing::warn!(attempt = attempt + 1, budget, %message, "completion request failed");
                    last = message;
                }
            }
        }
        Err(GatewayError::BackendUnavailable {
            attempts: budget,
            message: last,
        })
    }
}
