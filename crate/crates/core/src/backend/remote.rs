//! HTTP backend.
//!
//! Chat goes to an OpenAI-compatible `chat/completions` endpoint. Embeddings
//! go to an endpoint that accepts `{"model", "messages"}` and answers
//! `{"embedding": [...], "dim": N}`; it is meant to front an inference
//! server that reads the hidden state of the generated word.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{
    validate_messages, BackendError, ChatBackend, ChatMessage, ChatRequest, ChatResponse,
    EmbedBackend, Vector,
};

pub const ENV_API_BASE: &str = "PROMPTPRF_API_BASE";
pub const ENV_API_KEY: &str = "PROMPTPRF_API_KEY";
pub const ENV_TIMEOUT_SECS: &str = "PROMPTPRF_TIMEOUT_SECS";

/// Retries apply to transport failures and timeouts only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let attempts = self.max_attempts.max(1);
        let mut backoff = self.initial_backoff;
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    tracing::warn!(attempt, error = %e, "retrying backend call");
                    thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(BackendError::RetriesExhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// e.g. `http://localhost:8000/v1`
    pub base_url: String,
    pub api_key: Option<String>,
    pub chat_path: String,
    pub embed_path: String,
    /// Model id sent with embed requests.
    pub embed_model: String,
    pub dim: usize,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, embed_model: impl Into<String>, dim: usize) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            chat_path: "/chat/completions".into(),
            embed_path: "/embed".into(),
            embed_model: embed_model.into(),
            dim,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
        }
    }

    /// Reads base URL, API key and timeout from the environment.
    pub fn from_env(embed_model: impl Into<String>, dim: usize) -> Result<Self, BackendError> {
        let base = std::env::var(ENV_API_BASE)
            .map_err(|_| BackendError::InvalidRequest(format!("{ENV_API_BASE} is not set")))?;
        let mut cfg = Self::new(base, embed_model, dim);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        if let Ok(secs) = std::env::var(ENV_TIMEOUT_SECS) {
            let secs: f64 = secs.parse().map_err(|_| {
                BackendError::InvalidRequest(format!("{ENV_TIMEOUT_SECS}: invalid number `{secs}`"))
            })?;
            cfg.timeout = Duration::from_secs_f64(secs);
        }
        Ok(cfg)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.cv.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    in_flight: Semaphore,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
    #[serde(default)]
    dim: Option<usize>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let permits = config.max_in_flight.max(1);
        Self {
            config,
            agent,
            in_flight: Semaphore {
                permits: Mutex::new(permits),
                cv: Condvar::new(),
            },
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, url: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let _permit = self.in_flight.acquire();
        let mut req = self.agent.post(url);
        if let Some(key) = &self.config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => resp.into_string().map_err(|e| classify_io(&e.to_string())),
            Err(ureq::Error::Status(status, resp)) => Err(BackendError::Api {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => Err(classify_io(&t.to_string())),
        }
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<String, BackendError> {
        let url = self.url(path);
        self.config.retry.run(|| self.post_once(&url, &body))
    }
}

fn classify_io(msg: &str) -> BackendError {
    let lower = msg.to_ascii_lowercase();
    if lower.contains("timed out") || lower.contains("timeout") {
        BackendError::Timeout(msg.to_string())
    } else {
        BackendError::Transport(msg.to_string())
    }
}

impl ChatBackend for RemoteBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        let start = Instant::now();
        let raw = self.post(&self.config.chat_path, body)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let parsed: ChatCompletion = serde_json::from_str(&raw)
            .map_err(|e| BackendError::InvalidResponse(format!("chat completion: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::InvalidResponse("no choices".into()))?
            .message
            .content
            .unwrap_or_default();
        let usage = parsed.usage.unwrap_or(Usage {
            prompt_tokens: 0,
            completion_tokens: text.split_whitespace().count() as u32,
        });
        if usage.completion_tokens > request.max_tokens {
            return Err(BackendError::InvalidResponse(format!(
                "completion_tokens {} exceeds max_tokens {}",
                usage.completion_tokens, request.max_tokens
            )));
        }
        Ok(ChatResponse {
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            latency_ms,
        })
    }
}

impl EmbedBackend for RemoteBackend {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, messages: &[ChatMessage]) -> Result<Vector, BackendError> {
        validate_messages(messages)?;
        let body = json!({ "model": self.config.embed_model, "messages": messages });
        let raw = self.post(&self.config.embed_path, body)?;
        let parsed: EmbedResponse = serde_json::from_str(&raw)
            .map_err(|e| BackendError::InvalidResponse(format!("embed: {e}")))?;
        let got = parsed.embedding.len();
        if let Some(declared) = parsed.dim {
            if declared != got {
                return Err(BackendError::InvalidResponse(format!(
                    "declared dim {declared} but embedding has {got} components"
                )));
            }
        }
        if got != self.config.dim {
            return Err(BackendError::DimensionMismatch {
                expected: self.config.dim,
                got,
            });
        }
        Vector::new(parsed.embedding)
    }
}
