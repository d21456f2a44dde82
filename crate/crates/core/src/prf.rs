//! Feedback-augmented retrieval.
//!
//! For each query: encode it, retrieve a first-stage ranking, gather the
//! stored features (or raw text) of the top `k` passages into a
//! [`FeedbackBundle`], re-encode the query with that bundle in the prompt,
//! and retrieve again with the refined representation. Only embedding calls
//! happen here; features come from the offline store.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{ChatMessage, EmbedBackend};
use crate::corpus::{Corpus, CorpusError, PassageId, Query, QueryId, RunFile};
use crate::encode::{
    build_refined_prompt, encode, encode_query, truncate_bundle_to_context, EncodeError,
    RepresentationSource,
};
use crate::features::{FeatureError, FeatureStore, FeatureType};
use crate::index::{to_run_entries, DenseIndex, IndexError, SearchResult};

pub const DEFAULT_POOL_DEPTH: usize = 1000;
pub const DEFAULT_MAX_FEEDBACK_CHARS: usize = 16_000;

/// What fills the feedback lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "feature")]
pub enum FeedbackSource {
    /// Raw passage text (the passage-feedback baseline).
    PassageText,
    Feature(FeatureType),
}

impl FeedbackSource {
    pub fn display_name(self) -> &'static str {
        match self {
            FeedbackSource::PassageText => "Passage",
            FeedbackSource::Feature(t) => t.display_name(),
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            FeedbackSource::PassageText => "passage",
            FeedbackSource::Feature(t) => t.slug(),
        }
    }

    /// Accepts `passage` or any feature-type name.
    pub fn parse(s: &str) -> Result<Self, FeatureError> {
        if s.trim().eq_ignore_ascii_case("passage") {
            Ok(FeedbackSource::PassageText)
        } else {
            Ok(FeedbackSource::Feature(s.parse()?))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfConfig {
    pub depth: usize,
    pub source: FeedbackSource,
    /// Ignored for [`FeedbackSource::PassageText`].
    pub extractor_model: String,
    pub rank_aware: bool,
    /// Per-rank feature weights; empty means all 1. Only 1 is supported.
    #[serde(default)]
    pub beta: Vec<f64>,
    pub max_feedback_chars: usize,
    /// First-stage pool; the effective pool is `max(depth, first_stage_depth)`.
    pub first_stage_depth: usize,
    pub final_depth: usize,
}

impl Default for PrfConfig {
    fn default() -> Self {
        Self {
            depth: 0,
            source: FeedbackSource::PassageText,
            extractor_model: String::new(),
            rank_aware: true,
            beta: Vec::new(),
            max_feedback_chars: DEFAULT_MAX_FEEDBACK_CHARS,
            first_stage_depth: DEFAULT_POOL_DEPTH,
            final_depth: DEFAULT_POOL_DEPTH,
        }
    }
}

impl PrfConfig {
    pub fn no_prf() -> Self {
        Self::default()
    }

    pub fn with_features(
        depth: usize,
        feature: FeatureType,
        extractor_model: impl Into<String>,
    ) -> Self {
        Self {
            depth,
            source: FeedbackSource::Feature(feature),
            extractor_model: extractor_model.into(),
            ..Self::default()
        }
    }

    pub fn with_passages(depth: usize) -> Self {
        Self {
            depth,
            source: FeedbackSource::PassageText,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PrfError> {
        if !self.beta.is_empty() && self.beta.len() != self.depth {
            return Err(PrfError::Config(format!(
                "beta has {} weights for depth {}",
                self.beta.len(),
                self.depth
            )));
        }
        if let Some(b) = self.beta.iter().find(|&&b| b != 1.0) {
            return Err(PrfError::Config(format!(
                "feature weight {b} is not supported; only 1 is"
            )));
        }
        if self.max_feedback_chars == 0 {
            return Err(PrfError::Config("max_feedback_chars must be >= 1".into()));
        }
        if self.final_depth == 0 {
            return Err(PrfError::Config("final_depth must be >= 1".into()));
        }
        if self.depth > 0
            && matches!(self.source, FeedbackSource::Feature(_))
            && self.extractor_model.is_empty()
        {
            return Err(PrfError::Config(
                "feature feedback needs an extractor model".into(),
            ));
        }
        Ok(())
    }

    pub fn first_stage_pool(&self) -> usize {
        self.depth.max(self.first_stage_depth).max(1)
    }

    /// Canonical description of what determines the output ranking.
    ///
    /// Depth 0 collapses to the plain retrieval description, so its runs
    /// carry the same tag as the no-feedback baseline.
    pub fn canonical(&self, encoder_id: &str) -> String {
        if self.depth == 0 {
            format!("dense;encoder={encoder_id};final={}", self.final_depth)
        } else {
            let model = match self.source {
                FeedbackSource::PassageText => "",
                FeedbackSource::Feature(_) => self.extractor_model.as_str(),
            };
            format!(
                "prf;encoder={encoder_id};final={};pool={};depth={};source={};model={model};rank_aware={};max_chars={}",
                self.final_depth,
                self.first_stage_pool(),
                self.depth,
                self.source.slug(),
                self.rank_aware,
                self.max_feedback_chars,
            )
        }
    }

    /// Run tag: a short prefix plus the first 12 hex digits of the config digest.
    pub fn run_tag(&self, encoder_id: &str) -> String {
        let digest = Sha256::digest(self.canonical(encoder_id).as_bytes());
        let hex: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        let prefix = if self.depth == 0 { "dense" } else { "prf" };
        format!("{prefix}-{hex}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub rank: u32,
    pub feature_name: String,
    pub content: String,
}

/// Ordered feedback items; ranks increase strictly from 1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    items: Vec<FeedbackItem>,
}

impl FeedbackBundle {
    /// Unchecked; see [`FeedbackBundle::validate`].
    pub fn from_items(items: Vec<FeedbackItem>) -> Self {
        Self { items }
    }

    pub fn items(&self) -> &[FeedbackItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        let ranks: Vec<u32> = self.items.iter().map(|i| i.rank).collect();
        let ok = ranks.first().map_or(true, |&r| r == 1) && ranks.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(EncodeError::RankOrder(ranks))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode_query_ms: f64,
    pub first_search_ms: f64,
    pub encode_refined_ms: f64,
    pub second_search_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub fn encode_ms(&self) -> f64 {
        self.encode_query_ms + self.encode_refined_ms
    }

    pub fn search_ms(&self) -> f64 {
        self.first_search_ms + self.second_search_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfRunRecord {
    pub query_id: QueryId,
    pub first_stage: Vec<SearchResult>,
    pub feedback: FeedbackBundle,
    /// `None` when no feedback was applied.
    pub refined_prompt: Option<Vec<ChatMessage>>,
    pub second_stage: Vec<SearchResult>,
    pub timings: StageTimings,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum PrfError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("query {query_id}: {source}")]
    Encode {
        query_id: QueryId,
        #[source]
        source: EncodeError,
    },
    #[error("query {query_id}: {source}")]
    Search {
        query_id: QueryId,
        #[source]
        source: IndexError,
    },
    #[error("query {query_id}: {source}")]
    Feature {
        query_id: QueryId,
        #[source]
        source: FeatureError,
    },
    #[error("feature feedback requested but no feature store was given")]
    NoFeatureStore,
    #[error("passage {0} is in the index but not in the corpus")]
    MissingPassage(PassageId),
    #[error("{} of {total} queries failed: {}", failures.len(), summarize(failures))]
    Batch {
        total: usize,
        failures: Vec<(QueryId, String)>,
    },
    #[error(transparent)]
    Run(#[from] CorpusError),
}

fn summarize(failures: &[(QueryId, String)]) -> String {
    failures
        .iter()
        .take(5)
        .map(|(q, e)| format!("{q} ({e})"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledFeedback {
    pub bundle: FeedbackBundle,
    pub warnings: Vec<String>,
}

/// Builds the feedback bundle from the top `config.depth` first-stage results.
pub fn assemble_bundle(
    first_stage: &[SearchResult],
    config: &PrfConfig,
    corpus: &Corpus,
    store: Option<&FeatureStore>,
) -> Result<AssembledFeedback, PrfError> {
    let mut warnings = Vec::new();
    let depth = if first_stage.len() < config.depth {
        let w = format!(
            "feedback depth {} exceeds the {} first-stage results; using all of them",
            config.depth,
            first_stage.len()
        );
        tracing::warn!("{w}");
        warnings.push(w);
        first_stage.len()
    } else {
        config.depth
    };
    let mut items = Vec::with_capacity(depth);
    for (i, r) in first_stage[..depth].iter().enumerate() {
        let content = match config.source {
            FeedbackSource::PassageText => corpus
                .get(&r.passage_id)
                .ok_or_else(|| PrfError::MissingPassage(r.passage_id.clone()))?
                .text
                .clone(),
            FeedbackSource::Feature(t) => {
                let store = store.ok_or(PrfError::NoFeatureStore)?;
                store
                    .get(&r.passage_id, t, &config.extractor_model)
                    .ok_or_else(|| FeatureError::Missing {
                        passage_id: r.passage_id.clone(),
                        feature_type: t,
                        extractor_model: config.extractor_model.clone(),
                    })
                    .map_err(|source| PrfError::Feature {
                        query_id: QueryId::new("-").expect("valid id"),
                        source,
                    })?
                    .text
                    .clone()
            }
        };
        items.push(FeedbackItem {
            rank: i as u32 + 1,
            feature_name: config.source.display_name().to_string(),
            content,
        });
    }
    let full = FeedbackBundle::from_items(items);
    let bundle = truncate_bundle_to_context(&full, config.max_feedback_chars);
    if bundle != full {
        warnings.push(format!(
            "feedback truncated to {} characters ({} of {} items kept)",
            config.max_feedback_chars,
            bundle.len(),
            full.len()
        ));
    }
    Ok(AssembledFeedback { bundle, warnings })
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the four stages for one query.
pub fn run_promptprf<E: EmbedBackend + ?Sized>(
    query: &Query,
    index: &DenseIndex,
    config: &PrfConfig,
    embedder: &E,
    corpus: &Corpus,
    store: Option<&FeatureStore>,
) -> Result<PrfRunRecord, PrfError> {
    config.validate()?;
    let qid = &query.id;
    let enc_err = |source| PrfError::Encode {
        query_id: qid.clone(),
        source,
    };
    let search_err = |source| PrfError::Search {
        query_id: qid.clone(),
        source,
    };
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let q = encode_query(&query.text, embedder).map_err(enc_err)?;
    timings.encode_query_ms = ms_since(t);

    let t = Instant::now();
    let first_stage = index
        .search(&q, config.first_stage_pool())
        .map_err(search_err)?;
    timings.first_search_ms = ms_since(t);

    if config.depth == 0 {
        let second_stage = first_stage[..first_stage.len().min(config.final_depth)].to_vec();
        timings.total_ms = ms_since(start);
        return Ok(PrfRunRecord {
            query_id: qid.clone(),
            first_stage,
            feedback: FeedbackBundle::default(),
            refined_prompt: None,
            second_stage,
            timings,
            warnings: Vec::new(),
        });
    }

    let assembled = assemble_bundle(&first_stage, config, corpus, store).map_err(|e| match e {
        PrfError::Feature { source, .. } => PrfError::Feature {
            query_id: qid.clone(),
            source,
        },
        other => other,
    })?;
    let mut warnings = assembled.warnings;
    if assembled.bundle.is_empty() {
        warnings.push("empty feedback; returning the first-stage ranking".into());
        let second_stage = first_stage[..first_stage.len().min(config.final_depth)].to_vec();
        timings.total_ms = ms_since(start);
        return Ok(PrfRunRecord {
            query_id: qid.clone(),
            first_stage,
            feedback: assembled.bundle,
            refined_prompt: None,
            second_stage,
            timings,
            warnings,
        });
    }

    let t = Instant::now();
    let prompt =
        build_refined_prompt(&query.text, &assembled.bundle, config.rank_aware).map_err(enc_err)?;
    let refined = encode(&prompt, embedder, RepresentationSource::RefinedQuery).map_err(enc_err)?;
    timings.encode_refined_ms = ms_since(t);

    let t = Instant::now();
    let second_stage = index
        .search(&refined, config.final_depth)
        .map_err(search_err)?;
    timings.second_search_ms = ms_since(t);
    timings.total_ms = ms_since(start);

    Ok(PrfRunRecord {
        query_id: qid.clone(),
        first_stage,
        feedback: assembled.bundle,
        refined_prompt: Some(prompt),
        second_stage,
        timings,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    /// Fail the batch if any query fails (otherwise only if all fail).
    pub strict: bool,
    pub parallelism: usize,
    /// Identifies the query/passage encoder in the run tag.
    pub encoder_id: String,
}

impl BatchOptions {
    pub fn new(encoder_id: impl Into<String>) -> Self {
        Self {
            strict: false,
            parallelism: 1,
            encoder_id: encoder_id.into(),
        }
    }
}

#[derive(Debug)]
pub struct BatchOutput {
    pub run: RunFile,
    pub records: Vec<PrfRunRecord>,
    pub failures: Vec<(QueryId, PrfError)>,
}

fn collect_batch(
    queries: &[Query],
    results: Vec<Result<PrfRunRecord, PrfError>>,
    strict: bool,
    tag: &str,
    stage: impl Fn(&PrfRunRecord) -> &[SearchResult],
) -> Result<BatchOutput, PrfError> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (q, r) in queries.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push((q.id.clone(), e)),
        }
    }
    let all_failed = !queries.is_empty() && failures.len() == queries.len();
    // A missing stored feature is a setup problem, never a per-query blip.
    let missing_feature = failures
        .iter()
        .any(|(_, e)| matches!(e, PrfError::Feature { .. } | PrfError::NoFeatureStore));
    if (strict && !failures.is_empty()) || all_failed || missing_feature {
        return Err(PrfError::Batch {
            total: queries.len(),
            failures: failures
                .into_iter()
                .map(|(q, e)| (q, e.to_string()))
                .collect(),
        });
    }
    let entries = records
        .iter()
        .flat_map(|rec| to_run_entries(&rec.query_id, stage(rec), tag))
        .collect();
    Ok(BatchOutput {
        run: RunFile::new(entries)?,
        records,
        failures,
    })
}

fn run_parallel<T: Send>(
    parallelism: usize,
    queries: &[Query],
    f: impl Fn(&Query) -> T + Sync + Send,
) -> Vec<T> {
    if parallelism <= 1 {
        return queries.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
    {
        Ok(pool) => pool.install(|| queries.par_iter().map(&f).collect()),
        Err(_) => queries.iter().map(f).collect(),
    }
}

/// Runs every query and assembles the second-stage run.
///
/// Output order follows `queries` regardless of parallelism.
pub fn run_batch<E: EmbedBackend + ?Sized>(
    queries: &[Query],
    index: &DenseIndex,
    config: &PrfConfig,
    embedder: &E,
    corpus: &Corpus,
    store: Option<&FeatureStore>,
    options: &BatchOptions,
) -> Result<BatchOutput, PrfError> {
    config.validate()?;
    let tag = config.run_tag(&options.encoder_id);
    let results = run_parallel(options.parallelism, queries, |q| {
        run_promptprf(q, index, config, embedder, corpus, store)
    });
    collect_batch(queries, results, options.strict, &tag, |r| &r.second_stage)
}

/// Plain dense retrieval, no feedback: one encode and one search per query.
pub fn run_dense_baseline<E: EmbedBackend + ?Sized>(
    queries: &[Query],
    index: &DenseIndex,
    final_depth: usize,
    embedder: &E,
    options: &BatchOptions,
) -> Result<BatchOutput, PrfError> {
    let config = PrfConfig {
        final_depth,
        ..PrfConfig::no_prf()
    };
    config.validate()?;
    let tag = config.run_tag(&options.encoder_id);
    let results = run_parallel(options.parallelism, queries, |query| {
        let start = Instant::now();
        let q = encode_query(&query.text, embedder).map_err(|source| PrfError::Encode {
            query_id: query.id.clone(),
            source,
        })?;
        let encode_query_ms = ms_since(start);
        let t = Instant::now();
        let results = index
            .search(&q, final_depth)
            .map_err(|source| PrfError::Search {
                query_id: query.id.clone(),
                source,
            })?;
        Ok(PrfRunRecord {
            query_id: query.id.clone(),
            second_stage: results.clone(),
            first_stage: results,
            feedback: FeedbackBundle::default(),
            refined_prompt: None,
            timings: StageTimings {
                encode_query_ms,
                first_search_ms: ms_since(t),
                total_ms: ms_since(start),
                ..StageTimings::default()
            },
            warnings: Vec::new(),
        })
    });
    collect_batch(queries, results, options.strict, &tag, |r| &r.second_stage)
}
