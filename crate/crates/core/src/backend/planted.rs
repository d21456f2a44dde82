//! Planted-topic mock backend.
//!
//! Text containing the marker token `TOPIC_k` embeds near unit basis
//! direction `k` (mod the dimension), plus a seeded noise vector of fixed
//! magnitude. Text without markers embeds to a digest-seeded random
//! direction. Lines of a feedback prompt (`... Retrieved Passage: ...`) are
//! embedded separately and summed onto the main segment, which is how a
//! refined query picks up the topics of its feedback.
//!
//! Chat generation copies the salient markers of the passage (those that
//! occur at least `salience_min` times) followed by filler pseudo-words.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::mock::{pseudo_word, rng_for};
use super::{
    count_words, digest_parts, validate_messages, BackendError, ChatBackend, ChatMessage,
    ChatRequest, ChatResponse, EmbedBackend, Role, Vector,
};

const MARKER_PREFIX: &str = "TOPIC_";
const FEEDBACK_ANCHOR: &str = "Retrieved Passage: ";

/// Marker ids (`k` of `TOPIC_k`) in order of occurrence.
pub fn marker_ids(text: &str) -> Vec<usize> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter_map(|tok| tok.strip_prefix(MARKER_PREFIX))
        .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
        .filter_map(|rest| rest.parse().ok())
        .collect()
}

/// Makes deeper feedback lines noisier and lets rank labels down-weight them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSensitivity {
    /// Extra noise magnitude per feedback position beyond the first.
    pub noise_per_rank: f64,
}

impl Default for RankSensitivity {
    fn default() -> Self {
        Self {
            noise_per_rank: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedTopicBackend {
    seed: u64,
    dim: usize,
    noise: f64,
    salience_min: usize,
    rank_sensitivity: Option<RankSensitivity>,
}

impl PlantedTopicBackend {
    pub const DEFAULT_NOISE: f64 = 0.05;

    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be >= 1");
        Self {
            seed,
            dim,
            noise: Self::DEFAULT_NOISE,
            salience_min: 2,
            rank_sensitivity: None,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_salience_min(mut self, n: usize) -> Self {
        self.salience_min = n.max(1);
        self
    }

    pub fn with_rank_sensitivity(mut self, rs: RankSensitivity) -> Self {
        self.rank_sensitivity = Some(rs);
        self
    }

    fn unit_random(&self, domain: &str, parts: &[&[u8]]) -> Vec<f64> {
        let seed_bytes = self.seed.to_le_bytes();
        let digest = digest_parts(
            [&seed_bytes[..], domain.as_bytes()]
                .into_iter()
                .chain(parts.iter().copied()),
        );
        let mut rng = ChaCha8Rng::from_seed(digest);
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        normalized(v)
    }

    fn segment_vec(&self, text: &str) -> Vec<f64> {
        let ids = marker_ids(text);
        if ids.is_empty() {
            return self.unit_random("segment", &[text.as_bytes()]);
        }
        let mut v = vec![0.0; self.dim];
        for id in ids {
            v[id % self.dim] += 1.0;
        }
        normalized(v)
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

struct FeedbackLine<'a> {
    rank_label: Option<u32>,
    content: &'a str,
}

fn parse_feedback_line(line: &str) -> Option<FeedbackLine<'_>> {
    let idx = line.find(FEEDBACK_ANCHOR)?;
    let label = &line[..idx];
    let content = &line[idx + FEEDBACK_ANCHOR.len()..];
    let rank_label = label
        .rsplit_once(" for top ")
        .and_then(|(_, rank)| rank.trim().parse().ok());
    Some(FeedbackLine {
        rank_label,
        content,
    })
}

impl ChatBackend for PlantedTopicBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let text: String = request
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for id in marker_ids(&text) {
            match counts.iter_mut().find(|(k, _)| *k == id) {
                Some((_, c)) => *c += 1,
                None => counts.push((id, 1)),
            }
        }
        let salient: Vec<usize> = if counts.iter().any(|&(_, c)| c >= self.salience_min) {
            counts
                .iter()
                .filter(|&&(_, c)| c >= self.salience_min)
                .map(|&(k, _)| k)
                .collect()
        } else {
            counts.iter().map(|&(k, _)| k).collect()
        };
        let mut rng = rng_for(
            self.seed,
            "planted-chat",
            &request.messages,
            request.model.as_bytes(),
        );
        let filler = rng.gen_range(4..=40);
        let words: Vec<String> = salient
            .iter()
            .map(|k| format!("{MARKER_PREFIX}{k}"))
            .chain((0..filler).map(|_| pseudo_word(&mut rng)))
            .take(request.max_tokens as usize)
            .collect();
        Ok(ChatResponse {
            completion_tokens: words.len() as u32,
            text: words.join(" "),
            prompt_tokens: count_words(&request.messages),
            latency_ms: 0.0,
        })
    }
}

impl EmbedBackend for PlantedTopicBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, messages: &[ChatMessage]) -> Result<Vector, BackendError> {
        validate_messages(messages)?;
        let mut main = String::new();
        let mut feedback = Vec::new();
        for m in messages.iter().filter(|m| m.role == Role::User) {
            for line in m.content.split('\n') {
                match parse_feedback_line(line) {
                    Some(fb) => feedback.push(fb),
                    None => {
                        main.push_str(line);
                        main.push('\n');
                    }
                }
            }
        }

        let mut clean = self.segment_vec(&main);
        // Label-free digest input, so rank-aware and rank-agnostic prompts
        // with the same feedback draw identical noise.
        let mut canonical = main.clone();
        for (pos, fb) in feedback.iter().enumerate() {
            canonical.push_str(fb.content);
            canonical.push('\n');
            let seg = self.segment_vec(fb.content);
            let (weight, line_noise) = match self.rank_sensitivity {
                Some(rs) => {
                    let weight = fb.rank_label.map_or(1.0, |r| 1.0 / f64::from(r.max(1)));
                    (weight, rs.noise_per_rank * pos as f64)
                }
                None => (1.0, 0.0),
            };
            let noise_dir = if line_noise > 0.0 {
                self.unit_random(
                    "line",
                    &[&(pos as u64).to_le_bytes(), fb.content.as_bytes()],
                )
            } else {
                vec![0.0; self.dim]
            };
            for ((c, s), n) in clean.iter_mut().zip(&seg).zip(&noise_dir) {
                *c += weight * (s + line_noise * n);
            }
        }

        let clean = normalized(clean);
        let noise = self.unit_random("noise", &[canonical.as_bytes()]);
        let v = clean
            .iter()
            .zip(&noise)
            .map(|(c, n)| (c + self.noise * n) as f32)
            .collect();
        Vector::new(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &Vector, b: &Vector) -> f64 {
        let dot: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum();
        dot / (a.norm() * b.norm())
    }

    #[test]
    fn marker_parsing() {
        assert_eq!(
            marker_ids("a TOPIC_3, TOPIC_12. TOPIC_ xTOPIC_4 TOPIC_5a"),
            vec![3, 12]
        );
    }

    #[test]
    fn shared_marker_means_close_vectors() {
        let b = PlantedTopicBackend::new(7, 32);
        let a = b
            .embed(&[ChatMessage::user("Query: TOPIC_3 stuff.")])
            .unwrap();
        let p = b
            .embed(&[ChatMessage::user("Passage: more TOPIC_3 text.")])
            .unwrap();
        let o = b
            .embed(&[ChatMessage::user("Passage: TOPIC_4 text.")])
            .unwrap();
        assert!(cos(&a, &p) > 0.99);
        assert!(cos(&a, &o) < 0.2);
    }

    #[test]
    fn noise_has_the_configured_magnitude() {
        let b = PlantedTopicBackend::new(7, 32);
        let v = b.embed(&[ChatMessage::user("TOPIC_1")]).unwrap();
        let mut e = vec![0.0f64; 32];
        e[1] = 1.0;
        let dist: f64 = v
            .as_slice()
            .iter()
            .zip(&e)
            .map(|(x, y)| (f64::from(*x) - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((dist - 0.05).abs() < 1e-6, "{dist}");
    }

    #[test]
    fn chat_keeps_salient_markers_only() {
        let b = PlantedTopicBackend::new(1, 8);
        let r = ChatRequest::new(
            "x",
            vec![ChatMessage::user(
                "Passage: TOPIC_1 a TOPIC_2 b TOPIC_1 c TOPIC_9 TOPIC_2\n\nBased on the passage, write a summary:",
            )],
            256,
        );
        let out = b.chat(&r).unwrap();
        assert_eq!(marker_ids(&out.text), vec![1, 2]);
        let r1 = ChatRequest { max_tokens: 1, ..r };
        assert_eq!(b.chat(&r1).unwrap().text, "TOPIC_1");
    }

    #[test]
    fn feedback_lines_pull_the_query() {
        let b = PlantedTopicBackend::new(1, 32);
        let base = b.embed(&[ChatMessage::user("Query: TOPIC_1.")]).unwrap();
        let refined = b
            .embed(&[ChatMessage::user(
                "Query: TOPIC_1.\nSummary for top 1 Retrieved Passage: TOPIC_1 TOPIC_5.\nUse one word.",
            )])
            .unwrap();
        let facet = b.embed(&[ChatMessage::user("TOPIC_5")]).unwrap();
        assert!(cos(&refined, &facet) > cos(&base, &facet) + 0.2);
    }

    #[test]
    fn rank_labels_only_matter_when_rank_sensitive() {
        let aware = "Query: TOPIC_1.\nS for top 1 Retrieved Passage: TOPIC_2.\nS for top 2 Retrieved Passage: TOPIC_3.";
        let agnostic =
            "Query: TOPIC_1.\nS for Retrieved Passage: TOPIC_2.\nS for Retrieved Passage: TOPIC_3.";
        let plain = PlantedTopicBackend::new(1, 16);
        assert_eq!(
            plain.embed(&[ChatMessage::user(aware)]).unwrap(),
            plain.embed(&[ChatMessage::user(agnostic)]).unwrap()
        );
        let sensitive = plain.with_rank_sensitivity(RankSensitivity {
            noise_per_rank: 0.3,
        });
        assert_ne!(
            sensitive.embed(&[ChatMessage::user(aware)]).unwrap(),
            sensitive.embed(&[ChatMessage::user(agnostic)]).unwrap()
        );
    }
}
