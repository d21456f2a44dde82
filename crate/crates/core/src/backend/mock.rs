use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    count_words, digest_parts, validate_messages, BackendError, ChatBackend, ChatMessage,
    ChatRequest, ChatResponse, EmbedBackend, Vector,
};

/// Upper bound of the digest-derived generation length.
const MAX_MOCK_WORDS: u32 = 128;

/// Deterministic in-process backend.
///
/// Chat output is a sequence of lowercase pseudo-words whose count is
/// `min(max_tokens, L)` with `L` drawn from a digest of the seed, every
/// message content and the model name. Embeddings are standard-normal
/// vectors drawn from a digest of the seed and the messages.
#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    dim: usize,
}

impl MockBackend {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be >= 1");
        Self { seed, dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

pub(crate) fn rng_for(
    seed: u64,
    domain: &str,
    messages: &[ChatMessage],
    extra: &[u8],
) -> ChaCha8Rng {
    let seed_bytes = seed.to_le_bytes();
    let parts = [&seed_bytes[..], domain.as_bytes(), extra]
        .into_iter()
        .chain(messages.iter().map(|m| m.content.as_bytes()));
    ChaCha8Rng::from_seed(digest_parts(parts))
}

pub(crate) fn pseudo_word(rng: &mut impl Rng) -> String {
    let len = rng.gen_range(3..=9);
    (0..len)
        .map(|_| char::from(b'a' + rng.gen_range(0..26u8)))
        .collect()
}

/// The mock's defined chat behavior, exposed for direct testing.
pub fn mock_generate(seed: u64, request: &ChatRequest) -> ChatResponse {
    let mut rng = rng_for(seed, "chat", &request.messages, request.model.as_bytes());
    let natural_len = rng.gen_range(1..=MAX_MOCK_WORDS);
    let n = natural_len.min(request.max_tokens);
    let words: Vec<String> = (0..n).map(|_| pseudo_word(&mut rng)).collect();
    ChatResponse {
        text: words.join(" "),
        prompt_tokens: count_words(&request.messages),
        completion_tokens: n,
        latency_ms: 0.0,
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        Ok(mock_generate(self.seed, request))
    }
}

impl EmbedBackend for MockBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, messages: &[ChatMessage]) -> Result<Vector, BackendError> {
        validate_messages(messages)?;
        let mut rng = rng_for(self.seed, "embed", messages, &[]);
        let v = (0..self.dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        Vector::new(v)
    }
}
