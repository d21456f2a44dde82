//! Language-model backends.
//!
//! Two capabilities are kept apart: [`ChatBackend`] generates text (used only
//! by offline feature extraction) and [`EmbedBackend`] turns a chat-formatted
//! prompt into a dense vector (used online). Every implementation in this
//! module provides one or both:
//!
//! * [`MockBackend`]: digest-driven pseudo-words and pseudo-random vectors;
//! * [`PlantedTopicBackend`]: maps `TOPIC_k` marker tokens onto basis
//!   directions so that relevance structure is controllable in tests;
//! * [`RemoteBackend`]: OpenAI-compatible chat endpoint plus a JSON embed
//!   endpoint, with retries and timeouts;
//! * [`CountingBackend`]: wraps another backend and counts calls.

mod counting;
mod mock;
mod planted;
mod remote;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use counting::{CallCounts, CountingBackend};
pub use mock::{mock_generate, MockBackend};
pub use planted::{marker_ids, PlantedTopicBackend, RankSensitivity};
pub use remote::{RemoteBackend, RemoteConfig, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Checks a message list: non-empty, and only assistant turns may be empty.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::InvalidRequest("empty message list".into()));
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != Role::Assistant && m.content.is_empty())
    {
        return Err(BackendError::InvalidRequest(format!(
            "empty {:?} message",
            m.role
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    /// Temperature defaults to 0.
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>, max_tokens: u32) -> Self {
        Self {
            model: model.into(),
            messages,
            max_tokens,
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        validate_messages(&self.messages)?;
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be >= 1".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "invalid temperature {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub latency_ms: f64,
}

/// A dense vector with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(components: Vec<f32>) -> Result<Self, BackendError> {
        if components.is_empty() {
            return Err(BackendError::InvalidResponse(
                "zero-dimensional vector".into(),
            ));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(BackendError::InvalidResponse(
                "vector has non-finite components".into(),
            ));
        }
        Ok(Self(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&c| f64::from(c) * f64::from(c))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("backend returned HTTP {status}: {body}")]
    Api { status: u16, body: String },
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0} not supported by this backend")]
    Unsupported(&'static str),
    #[error("giving up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        last: Box<BackendError>,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport(_) | Self::Timeout(_))
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub trait EmbedBackend: Send + Sync {
    /// Fixed output dimension of this backend instance.
    fn dim(&self) -> usize;

    /// Vectors are not required to be normalized.
    fn embed(&self, messages: &[ChatMessage]) -> Result<Vector, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }
}

impl<T: EmbedBackend + ?Sized> EmbedBackend for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, messages: &[ChatMessage]) -> Result<Vector, BackendError> {
        (**self).embed(messages)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).chat(request)
    }
}

impl<T: EmbedBackend + ?Sized> EmbedBackend for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, messages: &[ChatMessage]) -> Result<Vector, BackendError> {
        (**self).embed(messages)
    }
}

/// Length-prefixed SHA-256 over a sequence of byte strings.
pub(crate) fn digest_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Rough whitespace token count used by the mocks.
pub(crate) fn count_words(messages: &[ChatMessage]) -> u32 {
    messages
        .iter()
        .map(|m| m.content.split_whitespace().count() as u32)
        .sum()
}
