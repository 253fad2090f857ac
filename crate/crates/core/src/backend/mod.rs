//! Scoring and generation protocol shared by every inference backend.
//!
//! A backend answers two questions: the natural-log probability of a
//! continuation given a context, and a sampled continuation of a context.
//! The native JSON wire format is exactly the serde form of the request and
//! response types in this module.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub mod http;
pub mod mock;
pub mod openai;
pub mod server;

pub use http::NativeClient;
pub use mock::{CanaryRule, ChainTemplates, Knowledge, LoggedRequest, MockBackend, MockConfig};
pub use openai::OpenAiCompletions;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub context: String,
    pub continuation: String,
}

impl ScoreRequest {
    pub fn new(context: impl Into<String>, continuation: impl Into<String>) -> Self {
        ScoreRequest {
            context: context.into(),
            continuation: continuation.into(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.continuation.is_empty() {
            return Err(BackendError::InvalidRequest("continuation must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub text: String,
    #[serde(with = "logprob_serde")]
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    /// Sum of the piece log-probabilities. `-inf` (JSON `null`) marks an
    /// exact zero probability.
    #[serde(with = "logprob_serde")]
    pub total_logprob: f64,
    pub pieces: Vec<TokenLogprob>,
}

impl ScoreResponse {
    pub fn from_pieces(pieces: Vec<TokenLogprob>) -> Self {
        let total_logprob = pieces.iter().map(|p| p.logprob).sum();
        ScoreResponse { total_logprob, pieces }
    }

    pub fn probability(&self) -> f64 {
        self.total_logprob.exp()
    }

    pub fn is_zero_probability(&self) -> bool {
        self.total_logprob == f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub context: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl GenerateRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Length,
    Stop,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("tokenization failed: {0}")]
    Tokenization(String),
    #[error("context length exceeded: {0}")]
    ContextOverflow(String),
    #[error("backend lacks a required capability: {0}")]
    Capability(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub trait Backend: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError>;

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(req)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(req)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(req)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        (**self).generate(req)
    }
}

/// Retries transport failures with linear backoff.
pub struct Retrying<B> {
    inner: B,
    attempts: u32,
    backoff: Duration,
}

impl<B: Backend> Retrying<B> {
    pub fn new(inner: B, attempts: u32, backoff: Duration) -> Self {
        Retrying {
            inner,
            attempts: attempts.max(1),
            backoff,
        }
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 1;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < self.attempts => {
                    tracing::warn!(attempt, error = %e, "retrying backend call");
                    thread::sleep(self.backoff * attempt);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl<B: Backend> Backend for Retrying<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.with_retries(|| self.inner.score(req))
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        self.with_retries(|| self.inner.generate(req))
    }
}

/// How the bare label or canary word is attached to its context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadingSpace {
    /// Score both forms and keep the more probable one.
    Auto,
    /// Trailing spaces move from the context onto the word: `" Yes"`.
    #[default]
    On,
    /// Word appended as-is: `"Yes"`.
    Off,
}

impl std::str::FromStr for LeadingSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(LeadingSpace::Auto),
            "on" => Ok(LeadingSpace::On),
            "off" => Ok(LeadingSpace::Off),
            other => Err(format!("unknown leading-space policy {other:?}")),
        }
    }
}

/// Probability of `word` continuing `context` under `policy`.
pub fn word_probability(
    backend: &dyn Backend,
    context: &str,
    word: &str,
    policy: LeadingSpace,
) -> Result<f64, BackendError> {
    let spaced = || {
        let req = ScoreRequest::new(context.trim_end_matches(' '), format!(" {word}"));
        backend.score(&req).map(|r| r.probability())
    };
    let bare = || backend.score(&ScoreRequest::new(context, word)).map(|r| r.probability());
    match policy {
        LeadingSpace::On => spaced(),
        LeadingSpace::Off => bare(),
        LeadingSpace::Auto => Ok(spaced()?.max(bare()?)),
    }
}

/// JSON has no infinities; `-inf` travels as `null`.
mod logprob_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            s.serialize_f64(*value)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}
