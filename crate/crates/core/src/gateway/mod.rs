//! Uniform access to text-completion backends plus critic-driven rejection
//! sampling.
//!
//! A [`Backend`] turns a prompt into a [`Completion`]. Critics are ordinary
//! backends driven at temperature 0 with a rubric; their output must start
//! with `ACCEPT` or `REJECT` (case-insensitive) followed by a reason.

mod remote;
mod scripted;

use std::sync::{Arc, Condvar, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GenerationParams;
use crate::seed::derive_seed;

pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{CountingBackend, ReplayBackend, ReplayEntry, ScriptedBackend, SequenceBackend};

/// Default number of rejection-sampling attempts per logical request.
pub const DEFAULT_MAX_ATTEMPTS: u32 = 8;

/// Default transport retry budget for remote calls.
pub const DEFAULT_RETRY_BUDGET: u32 = 3;

/// Final line of every critic prompt; the verdict follows it.
pub const VERDICT_CUE: &str = "Verdict:";

/// Opening line of every critic prompt.
pub const CRITIC_HEADER: &str = "You are reviewing a candidate text against a rubric.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("malformed backend response: {0}")]
    BackendMalformed(String),
    #[error("no scripted response for prompt {prompt_sha256} with seed {seed}")]
    ScriptMiss { prompt_sha256: String, seed: u64 },
    #[error("unparseable critic verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("no candidate accepted after {} attempt(s)", audit.len())]
    ExhaustedAttempts { audit: Vec<JudgeVerdict> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub backend_tag: String,
}

impl Completion {
    pub fn new(text: impl Into<String>, finish_reason: FinishReason, backend_tag: &str) -> Self {
        let text = match finish_reason {
            FinishReason::Error => String::new(),
            _ => text.into(),
        };
        Self {
            text,
            finish_reason,
            backend_tag: backend_tag.to_string(),
        }
    }

    /// Builds a completion from raw text, cutting at the earliest stop
    /// sequence.
    pub fn from_raw(raw: &str, params: &GenerationParams, backend_tag: &str) -> Self {
        let (text, stopped) = truncate_at_stop(raw, &params.stop_sequences);
        let reason = if stopped || raw.split_whitespace().count() <= params.max_tokens as usize {
            FinishReason::Stop
        } else {
            FinishReason::Length
        };
        Self::new(text, reason, backend_tag)
    }
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> (&'a str, bool) {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(at) => (&text[..at], true),
        None => (text, false),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub accept: bool,
    pub reason: String,
}

impl JudgeVerdict {
    pub fn accept(reason: impl Into<String>) -> Self {
        Self {
            accept: true,
            reason: reason.into(),
        }
    }

    pub fn reject(reason: impl Into<String>) -> Self {
        let reason = reason.into();
        Self {
            accept: false,
            reason: if reason.trim().is_empty() {
                "rejected".to_string()
            } else {
                reason
            },
        }
    }
}

pub trait Backend: Send + Sync {
    fn tag(&self) -> &str;

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn tag(&self) -> &str {
        (**self).tag()
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        (**self).complete(prompt, params)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn tag(&self) -> &str {
        (**self).tag()
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        (**self).complete(prompt, params)
    }
}

/// Checks request preconditions, then asks `backend` for a continuation.
pub fn complete(
    backend: &dyn Backend,
    prompt: &str,
    params: &GenerationParams,
) -> Result<Completion, GatewayError> {
    if prompt.is_empty() {
        return Err(GatewayError::InvalidRequest("empty prompt".into()));
    }
    if !params.is_valid() {
        return Err(GatewayError::InvalidRequest(format!(
            "temperature {} / max_tokens {}",
            params.temperature, params.max_tokens
        )));
    }
    backend.complete(prompt, params)
}

pub fn critic_prompt(candidate: &str, rubric: &str) -> String {
    format!(
        "{CRITIC_HEADER}\n\nRubric:\n{rubric}\n\nCandidate:\n<<<\n{candidate}\n>>>\n\n\
         Reply with ACCEPT or REJECT as the first word, followed by a one-line reason.\n{VERDICT_CUE}"
    )
}

/// Parses a critic reply: first word `ACCEPT`/`REJECT`, rest is the reason.
pub fn parse_verdict(text: &str) -> Result<JudgeVerdict, GatewayError> {
    let trimmed = text.trim_start();
    let (head, rest) = match trimmed.find(char::is_whitespace) {
        Some(at) => trimmed.split_at(at),
        None => (trimmed, ""),
    };
    let word = head.trim_end_matches(|c: char| !c.is_alphanumeric());
    let reason = rest
        .trim()
        .trim_start_matches([':', '-', ',', '.', ';'])
        .trim();
    let reason_line = reason.lines().next().unwrap_or("").trim();
    if word.eq_ignore_ascii_case("accept") {
        Ok(JudgeVerdict::accept(if reason_line.is_empty() {
            "accepted"
        } else {
            reason_line
        }))
    } else if word.eq_ignore_ascii_case("reject") {
        Ok(JudgeVerdict::reject(reason_line))
    } else {
        Err(GatewayError::UnparseableVerdict(text.to_string()))
    }
}

/// Asks a critic whether `candidate` satisfies `rubric`.
pub fn judge(
    critic: &dyn Backend,
    candidate: &str,
    rubric: &str,
    params: &GenerationParams,
) -> Result<JudgeVerdict, GatewayError> {
    if params.temperature != 0.0 {
        return Err(GatewayError::InvalidRequest(format!(
            "critic temperature must be 0, got {}",
            params.temperature
        )));
    }
    let completion = complete(critic, &critic_prompt(candidate, rubric), params)?;
    if completion.finish_reason == FinishReason::Error {
        return Err(GatewayError::BackendMalformed("critic returned an error completion".into()));
    }
    parse_verdict(&completion.text)
}

/// Seed used for the `attempt`-th sample of a logical request.
pub fn attempt_seed(base: u64, attempt: u32) -> u64 {
    if attempt == 0 {
        base
    } else {
        derive_seed(base, "attempt", &attempt.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accepted<T> {
    pub completion: Completion,
    pub value: T,
    pub attempts: u32,
    pub audit: Vec<JudgeVerdict>,
}

/// Draws completions until `evaluate` accepts one, at most `max_attempts`
/// times. Each attempt uses its own derived seed.
///
/// `evaluate` returns `Ok((verdict, value))`; `value` is kept only for the
/// accepted attempt.
pub fn sample_until<T, F>(
    generator: &dyn Backend,
    prompt: &str,
    gen: &GenerationParams,
    max_attempts: u32,
    mut evaluate: F,
) -> Result<Accepted<T>, GatewayError>
where
    F: FnMut(&Completion) -> Result<(JudgeVerdict, Option<T>), GatewayError>,
{
    if max_attempts == 0 {
        return Err(GatewayError::InvalidRequest("max_attempts must be at least 1".into()));
    }
    let mut audit = Vec::new();
    for attempt in 0..max_attempts {
        let params = gen.clone().with_seed(attempt_seed(gen.seed, attempt));
        let completion = complete(generator, prompt, &params)?;
        let (verdict, value) = if completion.finish_reason == FinishReason::Error {
            (JudgeVerdict::reject("backend returned an error completion"), None)
        } else {
            evaluate(&completion)?
        };
        let accepted = verdict.accept;
        audit.push(verdict);
        if accepted {
            if let Some(value) = value {
                return Ok(Accepted {
                    completion,
                    value,
                    attempts: attempt + 1,
                    audit,
                });
            }
        }
    }
    Err(GatewayError::ExhaustedAttempts { audit })
}

/// Rejection-samples `prompt` until the critic accepts the continuation.
pub fn sample_until_accepted(
    generator: &dyn Backend,
    critic: &dyn Backend,
    prompt: &str,
    gen: &GenerationParams,
    rubric: &str,
    max_attempts: u32,
) -> Result<Accepted<()>, GatewayError> {
    let critic_params = GenerationParams::critic(gen.seed);
    sample_until(generator, prompt, gen, max_attempts, |c| {
        let verdict = judge(critic, &c.text, rubric, &critic_params)?;
        Ok((verdict, Some(())))
    })
}

struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().expect("permit lock poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("permit lock poisoned");
        }
        *n -= 1;
        PermitGuard { permits: self }
    }
}

struct PermitGuard<'a> {
    permits: &'a Permits,
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.permits.available.lock().expect("permit lock poisoned") += 1;
        self.permits.freed.notify_one();
    }
}

/// Caps the number of in-flight requests to a shared backend.
pub struct Gateway {
    inner: Arc<dyn Backend>,
    permits: Permits,
    cap: usize,
}

impl Gateway {
    pub fn new(inner: Arc<dyn Backend>, max_in_flight: usize) -> Self {
        let cap = max_in_flight.max(1);
        Self {
            inner,
            permits: Permits {
                available: Mutex::new(cap),
                freed: Condvar::new(),
            },
            cap,
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.cap
    }

    /// Runs a batch concurrently; results come back in request order.
    pub fn complete_batch(
        &self,
        requests: &[(String, GenerationParams)],
    ) -> Vec<Result<Completion, GatewayError>> {
        requests
            .par_iter()
            .map(|(prompt, params)| complete(self, prompt, params))
            .collect()
    }
}

impl Backend for Gateway {
    fn tag(&self) -> &str {
        self.inner.tag()
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        let _permit = self.permits.acquire();
        self.inner.complete(prompt, params)
    }
}
