//! Offline, query-independent passage feature generation.
//!
//! Each [`FeatureType`] has a fixed instruction template and output token
//! budget. Generated features are persisted in a [`FeatureStore`]: an
//! append-only `features.jsonl` plus an atomically rewritten
//! `manifest.json`. Extraction jobs skip pairs already in the store, so an
//! interrupted job is resumed by running it again.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::corpus::{Passage, PassageId};

pub const FEATURES_FILE: &str = "features.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureType {
    Document,
    Essay,
    NewsArticle,
    Summary,
    Facts,
    KeywordsCot,
    EntitiesCot,
    QueryKeyword,
    Keywords,
    Entities,
}

impl FeatureType {
    pub const ALL: [FeatureType; 10] = [
        FeatureType::Document,
        FeatureType::Essay,
        FeatureType::NewsArticle,
        FeatureType::Summary,
        FeatureType::Facts,
        FeatureType::KeywordsCot,
        FeatureType::EntitiesCot,
        FeatureType::QueryKeyword,
        FeatureType::Keywords,
        FeatureType::Entities,
    ];

    /// Maximum number of generated tokens.
    pub fn token_budget(self) -> u32 {
        use FeatureType::*;
        match self {
            Document | Essay | NewsArticle => 512,
            Summary | Facts | KeywordsCot | EntitiesCot | QueryKeyword => 256,
            Keywords | Entities => 64,
        }
    }

    /// Name used in refinement prompts.
    pub fn display_name(self) -> &'static str {
        use FeatureType::*;
        match self {
            Document => "Document",
            Essay => "Essay",
            NewsArticle => "News Article",
            Summary => "Summary",
            Facts => "Facts",
            KeywordsCot => "Keywords-COT",
            EntitiesCot => "Entities-COT",
            QueryKeyword => "Query Keyword",
            Keywords => "Keywords",
            Entities => "Entities",
        }
    }

    /// Identifier used on the command line and in the store.
    pub fn slug(self) -> &'static str {
        use FeatureType::*;
        match self {
            Document => "document",
            Essay => "essay",
            NewsArticle => "news-article",
            Summary => "summary",
            Facts => "facts",
            KeywordsCot => "keywords-cot",
            EntitiesCot => "entities-cot",
            QueryKeyword => "query-keyword",
            Keywords => "keywords",
            Entities => "entities",
        }
    }

    fn instruction(self) -> &'static str {
        use FeatureType::*;
        match self {
            Document => "generate a similar passage:",
            Essay => "write an essay:",
            NewsArticle => "write a news article:",
            Summary => "write a summary:",
            Facts => "generate a bullet-point list of relevant facts:",
            KeywordsCot => {
                "generate a bullet-point list of relevant keywords. Next to each point, briefly explain why:"
            }
            EntitiesCot => {
                "generate a bullet-point list of relevant entities. Next to each point, briefly explain why:"
            }
            QueryKeyword => {
                "generate a bullet-point list of diverse keyword queries that will find this passage:"
            }
            Keywords => "generate a bullet-point list of relevant keywords:",
            Entities => "generate a bullet-point list of relevant entities:",
        }
    }

    /// The user-message template with a `{passage}` placeholder.
    pub fn template(self) -> String {
        format!(
            "Passage: {{passage}}\n\nBased on the passage, {}",
            self.instruction()
        )
    }
}

impl fmt::Display for FeatureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for FeatureType {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        FeatureType::ALL
            .into_iter()
            .find(|t| t.slug() == norm)
            .ok_or_else(|| FeatureError::UnknownFeatureType(s.to_string()))
    }
}

pub fn parse_feature_types(list: &str) -> Result<Vec<FeatureType>, FeatureError> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let t: FeatureType = part.parse()?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown feature type `{0}`")]
    UnknownFeatureType(String),
    #[error("passage {0} has empty text")]
    EmptyPassage(PassageId),
    #[error("extracting {feature_type} for passage {passage_id}: {source}")]
    Backend {
        passage_id: PassageId,
        feature_type: FeatureType,
        #[source]
        source: BackendError,
    },
    #[error("{feature_type} for passage {passage_id}: {completion_tokens} tokens exceed the budget of {budget}")]
    BudgetExceeded {
        passage_id: PassageId,
        feature_type: FeatureType,
        completion_tokens: u32,
        budget: u32,
    },
    #[error("no {feature_type} feature from `{extractor_model}` for passage {passage_id}")]
    Missing {
        passage_id: PassageId,
        feature_type: FeatureType,
        extractor_model: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The single user message for extracting `feature_type` from `passage`.
///
/// There is no system message and no assistant prefix.
pub fn build_feature_prompt(feature_type: FeatureType, passage: &Passage) -> Vec<ChatMessage> {
    let content = feature_type.template().replace("{passage}", &passage.text);
    vec![ChatMessage::user(content)]
}

/// Feature prompt wrapped in a request whose `max_tokens` is the type's budget.
pub fn build_feature_request(
    feature_type: FeatureType,
    passage: &Passage,
    model: &str,
) -> ChatRequest {
    ChatRequest::new(
        model,
        build_feature_prompt(feature_type, passage),
        feature_type.token_budget(),
    )
}

/// Case-insensitive substring patterns that mark off-topic generations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefusalFilter {
    patterns: Vec<String>,
}

impl Default for RefusalFilter {
    fn default() -> Self {
        Self::new([
            "i don't see a passage",
            "i do not see a passage",
            "no passage provided",
            "no passage was provided",
            "please provide the passage",
            "i'm sorry, but",
            "as an ai language model",
        ])
    }
}

impl RefusalFilter {
    pub fn new<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        Self {
            patterns: patterns
                .into_iter()
                .map(|p| p.into().to_lowercase())
                .collect(),
        }
    }

    pub fn none() -> Self {
        Self { patterns: vec![] }
    }

    pub fn matches(&self, text: &str) -> bool {
        let lower = text.to_lowercase();
        self.patterns.iter().any(|p| lower.contains(p.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub passage_id: PassageId,
    pub feature_type: FeatureType,
    pub extractor_model: String,
    pub text: String,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub created_at: DateTime<Utc>,
    /// Backend returned nothing (after trimming).
    #[serde(default)]
    pub empty: bool,
    /// Matched a refusal pattern.
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureKey {
    pub passage_id: PassageId,
    pub feature_type: FeatureType,
    pub extractor_model: String,
}

impl FeatureRecord {
    pub fn key(&self) -> FeatureKey {
        FeatureKey {
            passage_id: self.passage_id.clone(),
            feature_type: self.feature_type,
            extractor_model: self.extractor_model.clone(),
        }
    }
}

pub fn extract_feature<B: ChatBackend + ?Sized>(
    passage: &Passage,
    feature_type: FeatureType,
    backend: &B,
    extractor_model: &str,
    filter: &RefusalFilter,
) -> Result<FeatureRecord, FeatureError> {
    if passage.text.trim().is_empty() {
        return Err(FeatureError::EmptyPassage(passage.id.clone()));
    }
    let request = build_feature_request(feature_type, passage, extractor_model);
    let response = backend
        .chat(&request)
        .map_err(|source| FeatureError::Backend {
            passage_id: passage.id.clone(),
            feature_type,
            source,
        })?;
    let budget = feature_type.token_budget();
    if response.completion_tokens > budget {
        return Err(FeatureError::BudgetExceeded {
            passage_id: passage.id.clone(),
            feature_type,
            completion_tokens: response.completion_tokens,
            budget,
        });
    }
    let text = response.text.trim().to_string();
    Ok(FeatureRecord {
        passage_id: passage.id.clone(),
        feature_type,
        extractor_model: extractor_model.to_string(),
        empty: text.is_empty(),
        flagged: filter.matches(&text),
        text,
        prompt_tokens: response.prompt_tokens,
        completion_tokens: response.completion_tokens,
        created_at: Utc::now(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub extractor_model: String,
    pub feature_types: Vec<FeatureType>,
    pub total_pairs: usize,
    pub generated: usize,
    pub skipped: usize,
    pub failed: usize,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub record_count: usize,
    pub updated_at: DateTime<Utc>,
    #[serde(default)]
    pub jobs: Vec<JobProgress>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            record_count: 0,
            updated_at: Utc::now(),
            jobs: Vec::new(),
        }
    }
}

/// Directory-backed feature store; one writer, any number of readers.
#[derive(Debug)]
pub struct FeatureStore {
    dir: PathBuf,
    records: Vec<FeatureRecord>,
    index: HashMap<FeatureKey, usize>,
    manifest: Manifest,
    /// Lines in `features.jsonl`, which exceeds `records.len()` when
    /// superseded duplicates are waiting for compaction.
    file_lines: usize,
}

impl FeatureStore {
    /// Opens (creating if needed) the store in `dir`.
    ///
    /// A torn final line left by an interrupted writer is discarded and the
    /// manifest is reconciled with the records actually present.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(FEATURES_FILE);
        let mut records = Vec::new();
        let mut index = HashMap::new();
        let mut file_lines = 0;
        if path.exists() {
            let content = fs::read_to_string(&path).map_err(io_err(&path))?;
            let complete_len = match content.rfind('\n') {
                Some(i) => i + 1,
                None => 0,
            };
            if complete_len < content.len() {
                tracing::warn!(path = %path.display(), "discarding torn final line");
                let f = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(io_err(&path))?;
                f.set_len(complete_len as u64).map_err(io_err(&path))?;
            }
            for (i, line) in content[..complete_len].lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: FeatureRecord =
                    serde_json::from_str(line).map_err(|e| FeatureError::Corrupt {
                        path: path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                file_lines += 1;
                match index.get(&rec.key()) {
                    Some(&pos) => records[pos] = rec,
                    None => {
                        index.insert(rec.key(), records.len());
                        records.push(rec);
                    }
                }
            }
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest = if manifest_path.exists() {
            let raw = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            serde_json::from_str(&raw).map_err(|e| FeatureError::Corrupt {
                path: manifest_path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?
        } else {
            Manifest::default()
        };
        let mut store = Self {
            dir,
            records,
            index,
            manifest: Manifest::default(),
            file_lines,
        };
        if manifest.record_count != store.records.len() || !manifest_path.exists() {
            manifest.record_count = store.records.len();
            store.manifest = manifest;
            store.write_manifest()?;
        } else {
            store.manifest = manifest;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn contains(&self, key: &FeatureKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn get(
        &self,
        passage_id: &PassageId,
        feature_type: FeatureType,
        extractor_model: &str,
    ) -> Option<&FeatureRecord> {
        let key = FeatureKey {
            passage_id: passage_id.clone(),
            feature_type,
            extractor_model: extractor_model.to_string(),
        };
        self.index.get(&key).map(|&i| &self.records[i])
    }

    fn open_append(&self) -> Result<File, FeatureError> {
        let path = self.dir.join(FEATURES_FILE);
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))
    }

    fn append_to(&mut self, file: &mut File, record: FeatureRecord) -> Result<(), FeatureError> {
        let path = self.dir.join(FEATURES_FILE);
        let mut line = serde_json::to_string(&record).expect("feature records serialize");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.file_lines += 1;
        match self.index.get(&record.key()) {
            Some(&pos) => self.records[pos] = record,
            None => {
                self.index.insert(record.key(), self.records.len());
                self.records.push(record);
            }
        }
        self.manifest.record_count = self.records.len();
        Ok(())
    }

    /// Appends one record; an existing record with the same key is superseded.
    pub fn insert(&mut self, record: FeatureRecord) -> Result<(), FeatureError> {
        let mut f = self.open_append()?;
        self.append_to(&mut f, record)?;
        self.write_manifest()
    }

    fn write_manifest(&mut self) -> Result<(), FeatureError> {
        self.manifest.updated_at = Utc::now();
        self.manifest.record_count = self.records.len();
        let path = self.dir.join(MANIFEST_FILE);
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        let body = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Rewrites `features.jsonl` without superseded lines. Returns lines removed.
    pub fn compact(&mut self) -> Result<usize, FeatureError> {
        let path = self.dir.join(FEATURES_FILE);
        let tmp = self.dir.join(format!("{FEATURES_FILE}.tmp"));
        let mut body = String::new();
        for r in &self.records {
            body.push_str(&serde_json::to_string(r).expect("feature records serialize"));
            body.push('\n');
        }
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        let removed = self.file_lines - self.records.len();
        self.file_lines = self.records.len();
        self.write_manifest()?;
        Ok(removed)
    }

    /// Lines currently in `features.jsonl`.
    pub fn file_lines(&self) -> usize {
        self.file_lines
    }
}

/// Records for `passage_ids`, in that order. Missing keys are errors.
pub fn get_features<'s>(
    store: &'s FeatureStore,
    passage_ids: &[PassageId],
    feature_type: FeatureType,
    extractor_model: &str,
) -> Result<Vec<&'s FeatureRecord>, FeatureError> {
    passage_ids
        .iter()
        .map(|id| {
            store
                .get(id, feature_type, extractor_model)
                .ok_or_else(|| FeatureError::Missing {
                    passage_id: id.clone(),
                    feature_type,
                    extractor_model: extractor_model.to_string(),
                })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct JobOptions {
    pub extractor_model: String,
    pub parallelism: usize,
    pub refusal_filter: RefusalFilter,
    /// Manifest progress is rewritten after this many new records.
    pub checkpoint_every: usize,
}

impl JobOptions {
    pub fn new(extractor_model: impl Into<String>) -> Self {
        Self {
            extractor_model: extractor_model.into(),
            parallelism: 4,
            refusal_filter: RefusalFilter::default(),
            checkpoint_every: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedPair {
    pub passage_id: PassageId,
    pub feature_type: FeatureType,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct JobSummary {
    pub generated: usize,
    pub skipped: usize,
    pub flagged: usize,
    pub empty: usize,
    pub failed: Vec<FailedPair>,
}

impl JobSummary {
    pub fn is_success(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Generates every missing `(passage, feature type)` pair into `store`.
///
/// Work fans out over `parallelism` threads; this thread is the only writer.
/// Failures are collected, not fatal. Only I/O errors on the store abort.
pub fn run_extraction_job<B: ChatBackend + ?Sized>(
    passages: &[Passage],
    feature_types: &[FeatureType],
    backend: &B,
    store: &mut FeatureStore,
    options: &JobOptions,
) -> Result<JobSummary, FeatureError> {
    let model = options.extractor_model.as_str();
    let mut summary = JobSummary::default();
    let mut pending: Vec<(&Passage, FeatureType)> = Vec::new();
    for p in passages {
        for &t in feature_types {
            let key = FeatureKey {
                passage_id: p.id.clone(),
                feature_type: t,
                extractor_model: model.to_string(),
            };
            if store.contains(&key) {
                summary.skipped += 1;
            } else {
                pending.push((p, t));
            }
        }
    }

    store.manifest.jobs.push(JobProgress {
        extractor_model: model.to_string(),
        feature_types: feature_types.to_vec(),
        total_pairs: passages.len() * feature_types.len(),
        generated: 0,
        skipped: summary.skipped,
        failed: 0,
        started_at: Utc::now(),
        finished_at: None,
    });
    store.write_manifest()?;

    if !pending.is_empty() {
        let mut file = store.open_append()?;
        let next = AtomicUsize::new(0);
        let workers = options.parallelism.clamp(1, pending.len());
        let (tx, rx) = mpsc::channel();
        let pending = &pending;
        let next = &next;
        let mut write_result = Ok(());
        thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(p, t)) = pending.get(i) else { break };
                    let res = extract_feature(p, t, backend, model, &options.refusal_filter);
                    if tx.send((p.id.clone(), t, res)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (pid, t, res) in rx {
                if write_result.is_err() {
                    continue;
                }
                match res {
                    Ok(rec) => {
                        summary.flagged += usize::from(rec.flagged);
                        summary.empty += usize::from(rec.empty);
                        if let Err(e) = store.append_to(&mut file, rec) {
                            write_result = Err(e);
                            // Stop handing out work.
                            next.store(usize::MAX / 2, Ordering::Relaxed);
                            continue;
                        }
                        summary.generated += 1;
                    }
                    Err(e) => {
                        tracing::warn!(passage = %pid, feature = %t, error = %e, "extraction failed");
                        summary.failed.push(FailedPair {
                            passage_id: pid,
                            feature_type: t,
                            error: e.to_string(),
                        });
                    }
                }
                if summary.generated % options.checkpoint_every.max(1) == 0 {
                    let job = store.manifest.jobs.last_mut().expect("job pushed");
                    job.generated = summary.generated;
                    job.failed = summary.failed.len();
                    if let Err(e) = store.write_manifest() {
                        write_result = Err(e);
                    }
                }
            }
        });
        write_result?;
        file.sync_data()
            .map_err(io_err(&store.dir.join(FEATURES_FILE)))?;
    }

    // Failures arrive in completion order; report them in job order.
    let order: HashMap<(&PassageId, FeatureType), usize> = passages
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            feature_types
                .iter()
                .enumerate()
                .map(move |(j, &t)| ((&p.id, t), i * feature_types.len() + j))
        })
        .collect();
    summary
        .failed
        .sort_by_key(|f| order.get(&(&f.passage_id, f.feature_type)).copied());

    let job = store.manifest.jobs.last_mut().expect("job pushed");
    job.generated = summary.generated;
    job.failed = summary.failed.len();
    job.finished_at = Some(Utc::now());
    store.write_manifest()?;
    Ok(summary)
}
