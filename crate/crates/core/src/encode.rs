//! Prompt-based dense encoding of queries, passages and feedback-refined queries.
//!
//! Every prompt has the same three-turn shape: a fixed system message, a
//! user message carrying the text (and, for refined queries, one line per
//! feedback item), and the assistant prefix `The word is "` so that the
//! model's next token is the one-word summary whose hidden state becomes the
//! embedding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatMessage, EmbedBackend, Vector};
use crate::prf::{FeedbackBundle, FeedbackItem};

pub const SYSTEM_PROMPT: &str = "You are an AI assistant that can understand human language.";
pub const ASSISTANT_PREFIX: &str = "The word is \"";

const BASE_INSTRUCTION_QUERY: &str =
    "Use one word to represent the query in a retrieval task. Make sure your word is in lowercase.";
const BASE_INSTRUCTION_PASSAGE: &str =
    "Use one word to represent the passage in a retrieval task. Make sure your word is in lowercase.";
const REFINED_INSTRUCTION: &str = "Use one word to represent the query and the top passages in a retrieval task. Make sure your word is in lowercase.";

/// Tolerance on the unit norm of stored representations.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodePromptKind {
    QueryBase,
    PassageBase,
    RefinedWithRank,
    RefinedWithoutRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationSource {
    Query,
    Passage,
    RefinedQuery,
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("{0:?} is not a base prompt kind")]
    NotABaseKind(EncodePromptKind),
    #[error("feedback bundle is empty")]
    EmptyBundle,
    #[error("feedback ranks must increase strictly from 1, got {0:?}")]
    RankOrder(Vec<u32>),
    #[error("backend returned a zero vector")]
    ZeroNorm,
    #[error("vector is not unit-norm (norm {0})")]
    NotUnitNorm(f64),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseRepresentation {
    vector: Vector,
    source: RepresentationSource,
}

impl DenseRepresentation {
    /// Wraps a vector that is already unit-norm within [`UNIT_NORM_TOLERANCE`].
    pub fn from_unit(vector: Vector, source: RepresentationSource) -> Result<Self, EncodeError> {
        let n = vector.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EncodeError::NotUnitNorm(n));
        }
        Ok(Self { vector, source })
    }

    /// L2-normalizes `vector`. Zero vectors are rejected.
    pub fn normalize(vector: Vector, source: RepresentationSource) -> Result<Self, EncodeError> {
        let n = vector.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(EncodeError::ZeroNorm);
        }
        let unit: Vec<f32> = vector
            .as_slice()
            .iter()
            .map(|&c| (f64::from(c) / n) as f32)
            .collect();
        Self::from_unit(Vector::new(unit)?, source)
    }

    pub fn vector(&self) -> &Vector {
        &self.vector
    }

    pub fn as_slice(&self) -> &[f32] {
        self.vector.as_slice()
    }

    pub fn dim(&self) -> usize {
        self.vector.dim()
    }

    pub fn source(&self) -> RepresentationSource {
        self.source
    }
}

fn wrap(user: String) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(SYSTEM_PROMPT),
        ChatMessage::user(user),
        ChatMessage::assistant(ASSISTANT_PREFIX),
    ]
}

/// Prompt for encoding a query or passage on its own.
pub fn build_base_prompt(
    kind: EncodePromptKind,
    text: &str,
) -> Result<Vec<ChatMessage>, EncodeError> {
    if text.trim().is_empty() {
        return Err(EncodeError::EmptyText);
    }
    let (label, instruction) = match kind {
        EncodePromptKind::QueryBase => ("Query", BASE_INSTRUCTION_QUERY),
        EncodePromptKind::PassageBase => ("Passage", BASE_INSTRUCTION_PASSAGE),
        other => return Err(EncodeError::NotABaseKind(other)),
    };
    Ok(wrap(format!("{label}: {text}.\n{instruction}")))
}

fn feedback_line(item: &FeedbackItem, rank_aware: bool) -> String {
    if rank_aware {
        format!(
            "{} for top {} Retrieved Passage: {}.",
            item.feature_name, item.rank, item.content
        )
    } else {
        format!(
            "{} for Retrieved Passage: {}.",
            item.feature_name, item.content
        )
    }
}

/// Prompt for encoding `query` together with its feedback items.
///
/// With `rank_aware` each line is labelled `for top {rank}`; otherwise the
/// labels are dropped and rank survives only as line order.
pub fn build_refined_prompt(
    query: &str,
    bundle: &FeedbackBundle,
    rank_aware: bool,
) -> Result<Vec<ChatMessage>, EncodeError> {
    if query.trim().is_empty() {
        return Err(EncodeError::EmptyText);
    }
    if bundle.is_empty() {
        return Err(EncodeError::EmptyBundle);
    }
    bundle.validate()?;
    let mut user = format!("Query: {query}.\n");
    for item in bundle.items() {
        user.push_str(&feedback_line(item, rank_aware));
        user.push('\n');
    }
    user.push_str(REFINED_INSTRUCTION);
    Ok(wrap(user))
}

pub fn refined_kind(rank_aware: bool) -> EncodePromptKind {
    if rank_aware {
        EncodePromptKind::RefinedWithRank
    } else {
        EncodePromptKind::RefinedWithoutRank
    }
}

/// Embeds `messages` and L2-normalizes the result.
pub fn encode<B: EmbedBackend + ?Sized>(
    messages: &[ChatMessage],
    backend: &B,
    source: RepresentationSource,
) -> Result<DenseRepresentation, EncodeError> {
    let v = backend.embed(messages)?;
    if v.dim() != backend.dim() {
        return Err(EncodeError::DimensionMismatch {
            expected: backend.dim(),
            got: v.dim(),
        });
    }
    DenseRepresentation::normalize(v, source)
}

pub fn encode_query<B: EmbedBackend + ?Sized>(
    text: &str,
    backend: &B,
) -> Result<DenseRepresentation, EncodeError> {
    let msgs = build_base_prompt(EncodePromptKind::QueryBase, text)?;
    encode(&msgs, backend, RepresentationSource::Query)
}

pub fn encode_passage<B: EmbedBackend + ?Sized>(
    text: &str,
    backend: &B,
) -> Result<DenseRepresentation, EncodeError> {
    let msgs = build_base_prompt(EncodePromptKind::PassageBase, text)?;
    encode(&msgs, backend, RepresentationSource::Passage)
}

/// Cuts `text` to at most `max_chars` characters, at a whitespace boundary when one exists.
fn truncate_at_whitespace(text: &str, max_chars: usize) -> &str {
    let Some((cut, next)) = text.char_indices().nth(max_chars) else {
        return text;
    };
    let prefix = &text[..cut];
    if next.is_whitespace() {
        return prefix.trim_end();
    }
    match prefix.rfind(char::is_whitespace) {
        Some(ws) if !prefix[..ws].trim().is_empty() => prefix[..ws].trim_end(),
        _ => prefix,
    }
}

/// Fits the feedback contents into `max_chars` characters in total.
///
/// Items are consumed in rank order, so the deepest ranks are truncated or
/// dropped first and rank 1 survives longest. Only content characters count
/// towards the budget.
pub fn truncate_bundle_to_context(bundle: &FeedbackBundle, max_chars: usize) -> FeedbackBundle {
    let mut remaining = max_chars;
    let mut items = Vec::new();
    for item in bundle.items() {
        if remaining == 0 {
            break;
        }
        let len = item.content.chars().count();
        if len <= remaining {
            remaining -= len;
            items.push(item.clone());
            continue;
        }
        let cut = truncate_at_whitespace(&item.content, remaining);
        if !cut.trim().is_empty() {
            items.push(FeedbackItem {
                content: cut.to_string(),
                ..item.clone()
            });
        }
        break;
    }
    FeedbackBundle::from_items(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    struct Fixed(Vec<f32>, usize);

    impl EmbedBackend for Fixed {
        fn dim(&self) -> usize {
            self.1
        }
        fn embed(&self, _: &[ChatMessage]) -> Result<Vector, BackendError> {
            Vector::new(self.0.clone())
        }
    }

    fn item(rank: u32, content: &str) -> FeedbackItem {
        FeedbackItem {
            rank,
            feature_name: "Summary".into(),
            content: content.into(),
        }
    }

    #[test]
    fn base_prompts() {
        let q = build_base_prompt(EncodePromptKind::QueryBase, "dog").unwrap();
        assert_eq!(q[0].content, SYSTEM_PROMPT);
        assert!(q[1].content.starts_with("Query: dog."));
        assert_eq!(q[2].content, "The word is \"");
        let p = build_base_prompt(EncodePromptKind::PassageBase, "x").unwrap();
        assert!(p[1].content.contains("represent the passage"));
        assert!(p[1].content.starts_with("Passage: x.\n"));
        assert!(matches!(
            build_base_prompt(EncodePromptKind::QueryBase, " "),
            Err(EncodeError::EmptyText)
        ));
        assert!(build_base_prompt(EncodePromptKind::RefinedWithRank, "x").is_err());
    }

    #[test]
    fn refined_lines() {
        let b = FeedbackBundle::from_items(vec![item(1, "cats")]);
        let aware = build_refined_prompt("q", &b, true).unwrap();
        assert!(aware[1]
            .content
            .contains("\nSummary for top 1 Retrieved Passage: cats.\n"));
        let agnostic = build_refined_prompt("q", &b, false).unwrap();
        assert!(agnostic[1]
            .content
            .contains("\nSummary for Retrieved Passage: cats.\n"));
        assert_eq!(aware[0], agnostic[0]);
        assert_eq!(aware[2], agnostic[2]);
    }

    #[test]
    fn refined_rejects_bad_bundles() {
        let bad = FeedbackBundle::from_items(vec![item(2, "a"), item(1, "b")]);
        assert!(matches!(
            build_refined_prompt("q", &bad, true),
            Err(EncodeError::RankOrder(_))
        ));
        assert!(matches!(
            build_refined_prompt("q", &FeedbackBundle::default(), true),
            Err(EncodeError::EmptyBundle)
        ));
    }

    #[test]
    fn encode_normalizes_three_four_five() {
        let r = encode(
            &[ChatMessage::user("x")],
            &Fixed(vec![3.0, 4.0], 2),
            RepresentationSource::Query,
        )
        .unwrap();
        assert_eq!(r.as_slice(), &[0.6, 0.8]);
        assert!(matches!(
            encode(
                &[ChatMessage::user("x")],
                &Fixed(vec![0.0, 0.0], 2),
                RepresentationSource::Query
            ),
            Err(EncodeError::ZeroNorm)
        ));
        assert!(matches!(
            encode(
                &[ChatMessage::user("x")],
                &Fixed(vec![1.0, 0.0, 0.0], 2),
                RepresentationSource::Query
            ),
            Err(EncodeError::DimensionMismatch {
                expected: 2,
                got: 3
            })
        ));
    }

    #[test]
    fn encode_is_deterministic_and_unit() {
        let b = MockBackend::new(5, 64);
        let a = encode_query("hello world", &b).unwrap();
        assert_eq!(a, encode_query("hello world", &b).unwrap());
        assert!((a.vector().norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE);
    }

    #[test]
    fn truncation_rules() {
        let b = FeedbackBundle::from_items(vec![
            item(1, "aaaa bbbb"),
            item(2, "cc dd"),
            item(3, "eee"),
        ]);
        assert_eq!(truncate_bundle_to_context(&b, 100), b);
        // exactly ranks 1-2
        let t = truncate_bundle_to_context(&b, 14);
        assert_eq!(t.items().len(), 2);
        assert_eq!(t.items()[..], b.items()[..2]);
        // smaller than rank 1
        let t = truncate_bundle_to_context(&b, 6);
        assert_eq!(t.items().len(), 1);
        assert_eq!(t.items()[0].content, "aaaa");
        // no whitespace to cut at
        let t = truncate_bundle_to_context(&FeedbackBundle::from_items(vec![item(1, "abcdef")]), 3);
        assert_eq!(t.items()[0].content, "abc");
        // rank 3 partially kept at a word boundary
        let t = truncate_bundle_to_context(
            &FeedbackBundle::from_items(vec![item(1, "ab"), item(2, "cd"), item(3, "ef gh")]),
            7,
        );
        assert_eq!(t.items()[2].content, "ef");
    }

    #[test]
    fn truncation_counts_chars_not_bytes() {
        let b = FeedbackBundle::from_items(vec![item(1, "ééé ééé")]);
        let t = truncate_bundle_to_context(&b, 5);
        assert_eq!(t.items()[0].content, "ééé");
    }
}
