//! Deterministic backends for tests and offline runs.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, Completion, GatewayError};
use crate::model::GenerationParams;
use crate::seed::sha256_hex;

/// A backend whose output is a pure function of `(prompt, params)`.
pub struct ScriptedBackend<F> {
    tag: String,
    respond: F,
}

impl<F> ScriptedBackend<F>
where
    F: Fn(&str, &GenerationParams) -> String + Send + Sync,
{
    pub fn new(tag: impl Into<String>, respond: F) -> Self {
        Self {
            tag: tag.into(),
            respond,
        }
    }
}

impl<F> Backend for ScriptedBackend<F>
where
    F: Fn(&str, &GenerationParams) -> String + Send + Sync,
{
    fn tag(&self) -> &str {
        &self.tag
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        let raw = (self.respond)(prompt, params);
        Ok(Completion::from_raw(&raw, params, &self.tag))
    }
}

/// Replays a fixed list of replies in call order, then errors.
pub struct SequenceBackend {
    tag: String,
    replies: Vec<String>,
    next: AtomicUsize,
}

impl SequenceBackend {
    pub fn new(tag: impl Into<String>, replies: Vec<String>) -> Self {
        Self {
            tag: tag.into(),
            replies,
            next: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }
}

impl Backend for SequenceBackend {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn complete(&self, _prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        match self.replies.get(i) {
            Some(reply) => Ok(Completion::from_raw(reply, params, &self.tag)),
            None => Err(GatewayError::BackendUnavailable {
                attempts: 1,
                message: format!("sequence exhausted after {} replies", self.replies.len()),
            }),
        }
    }
}

/// Wraps a backend and records every prompt it receives.
pub struct CountingBackend<B> {
    inner: B,
    prompts: Mutex<Vec<String>>,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.prompts.lock().expect("prompt log poisoned").len()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn tag(&self) -> &str {
        self.inner.tag()
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(prompt.to_string());
        self.inner.complete(prompt, params)
    }
}

/// One recorded completion, keyed by the SHA-256 of the prompt and the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt_sha256: String,
    pub seed: u64,
    pub text: String,
}

/// Serves recorded completions from a JSONL fixture.
pub struct ReplayBackend {
    tag: String,
    entries: HashMap<(String, u64), String>,
}

impl ReplayBackend {
    pub fn new(tag: impl Into<String>, entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        Self {
            tag: tag.into(),
            entries: entries
                .into_iter()
                .map(|e| ((e.prompt_sha256, e.seed), e.text))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::File::open(path).map_err(|e| {
            GatewayError::BackendUnavailable {
                attempts: 1,
                message: format!("{}: {e}", path.display()),
            }
        })?;
        let mut entries = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::BackendMalformed(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line).map_err(|e| {
                GatewayError::BackendMalformed(format!("{} line {}: {e}", path.display(), n + 1))
            })?;
            entries.push(entry);
        }
        Ok(Self::new(format!("replay:{}", path.display()), entries))
    }

    pub fn key(prompt: &str) -> String {
        sha256_hex(prompt.as_bytes())
    }
}

impl Backend for ReplayBackend {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        let key = (Self::key(prompt), params.seed);
        match self.entries.get(&key) {
            Some(text) => Ok(Completion::from_raw(text, params, &self.tag)),
            None => Err(GatewayError::ScriptMiss {
                prompt_sha256: key.0,
                seed: key.1,
            }),
        }
    }
}
