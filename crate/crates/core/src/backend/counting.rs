use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    BackendError, ChatBackend, ChatMessage, ChatRequest, ChatResponse, EmbedBackend, Vector,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub chat_calls: u64,
    pub embed_calls: u64,
}

/// Counts the calls that reach the wrapped backend.
#[derive(Debug, Default)]
pub struct CountingBackend<B> {
    inner: B,
    chat_calls: AtomicU64,
    embed_calls: AtomicU64,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            chat_calls: AtomicU64::new(0),
            embed_calls: AtomicU64::new(0),
        }
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            chat_calls: self.chat_calls.load(Ordering::SeqCst),
            embed_calls: self.embed_calls.load(Ordering::SeqCst),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for CountingBackend<B> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.chat(request)
    }
}

impl<B: EmbedBackend> EmbedBackend for CountingBackend<B> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, messages: &[ChatMessage]) -> Result<Vector, BackendError> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(messages)
    }
}
