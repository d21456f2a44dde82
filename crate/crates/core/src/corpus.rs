//! Corpus, topic, relevance-judgment and run-file handling.
//!
//! All formats are the usual TREC shapes:
//!
//! * corpus: JSONL objects with `id` and `text`, or `id<TAB>text` lines;
//! * topics: the same two shapes as the corpus;
//! * qrels: `qid 0 docid grade`;
//! * runs: `qid Q0 docid rank score tag`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: empty text for id `{id}`")]
    EmptyText {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("invalid id `{0}`: ids must be non-empty and contain no whitespace")]
    InvalidId(String),
    #[error("invalid run: {0}")]
    InvalidRun(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn valid_id(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Result<Self, CorpusError> {
                let value = value.into();
                if valid_id(&value) {
                    Ok(Self(value))
                } else {
                    Err(CorpusError::InvalidId(value))
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl TryFrom<String> for $name {
            type Error = CorpusError;
            fn try_from(value: String) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

id_type!(
    /// Identifier of a corpus passage.
    PassageId
);
id_type!(
    /// Identifier of a topic (query).
    QueryId
);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: PassageId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: QueryId,
    pub text: String,
}

/// An ordered passage collection with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<PassageId, usize>,
}

impl Corpus {
    /// Fails on the first duplicate id.
    pub fn new(passages: Vec<Passage>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId {
                    path: PathBuf::new(),
                    line: i + 1,
                    id: p.id.to_string(),
                });
            }
        }
        Ok(Self { passages, by_id })
    }

    pub fn get(&self, id: &PassageId) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    id: String,
    text: String,
}

/// A loaded `(id, text)` record before it is typed as a passage or query.
struct TextRecord {
    line: usize,
    id: String,
    text: String,
}

fn read_jsonl_records(path: &Path) -> Result<Vec<TextRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(TextRecord {
            line: i + 1,
            id: rec.id,
            text: rec.text,
        });
    }
    Ok(out)
}

fn read_tsv_records(path: &Path) -> Result<Vec<TextRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, text)) = line.split_once('\t') else {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `id<TAB>text`".into(),
            });
        };
        out.push(TextRecord {
            line: i + 1,
            id: id.to_string(),
            text: text.to_string(),
        });
    }
    Ok(out)
}

fn validate_records(
    path: &Path,
    records: Vec<TextRecord>,
) -> Result<Vec<(String, String)>, CorpusError> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        if !valid_id(&rec.id) {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line: rec.line,
                message: format!("invalid id `{}`", rec.id),
            });
        }
        if rec.text.trim().is_empty() {
            return Err(CorpusError::EmptyText {
                path: path.to_path_buf(),
                line: rec.line,
                id: rec.id,
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line: rec.line,
                id: rec.id,
            });
        }
        out.push((rec.id, rec.text));
    }
    Ok(out)
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    )
}

pub fn load_corpus_jsonl(path: impl AsRef<Path>) -> Result<Vec<Passage>, CorpusError> {
    let path = path.as_ref();
    let recs = validate_records(path, read_jsonl_records(path)?)?;
    Ok(recs
        .into_iter()
        .map(|(id, text)| Passage {
            id: PassageId(id),
            text,
        })
        .collect())
}

pub fn load_corpus_tsv(path: impl AsRef<Path>) -> Result<Vec<Passage>, CorpusError> {
    let path = path.as_ref();
    let recs = validate_records(path, read_tsv_records(path)?)?;
    Ok(recs
        .into_iter()
        .map(|(id, text)| Passage {
            id: PassageId(id),
            text,
        })
        .collect())
}

/// Picks the JSONL loader for `.jsonl`/`.json` files and the TSV loader otherwise.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let passages = if is_jsonl(path) {
        load_corpus_jsonl(path)?
    } else {
        load_corpus_tsv(path)?
    };
    Corpus::new(passages)
}

/// Topics use the same two shapes as corpora.
pub fn load_topics(path: impl AsRef<Path>) -> Result<Vec<Query>, CorpusError> {
    let path = path.as_ref();
    let recs = if is_jsonl(path) {
        read_jsonl_records(path)?
    } else {
        read_tsv_records(path)?
    };
    Ok(validate_records(path, recs)?
        .into_iter()
        .map(|(id, text)| Query {
            id: QueryId(id),
            text,
        })
        .collect())
}

pub fn write_corpus_jsonl(path: impl AsRef<Path>, passages: &[Passage]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut buf = String::new();
    for p in passages {
        let line = serde_json::json!({ "id": p.id.as_str(), "text": p.text });
        buf.push_str(&line.to_string());
        buf.push('\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn write_topics_tsv(path: impl AsRef<Path>, queries: &[Query]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut buf = String::new();
    for q in queries {
        buf.push_str(q.id.as_str());
        buf.push('\t');
        buf.push_str(&q.text.replace(['\t', '\n'], " "));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Lookup outcome for a (query, passage) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Judgment {
    Judged(u32),
    Unjudged,
}

/// Graded relevance judgments. Unjudged pairs are absent, not grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QrelSet {
    grades: HashMap<QueryId, HashMap<PassageId, u32>>,
    order: Vec<QueryId>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` (and leaves the set unchanged) when the pair is already judged.
    pub fn insert(&mut self, query: QueryId, passage: PassageId, grade: u32) -> bool {
        if !self.grades.contains_key(&query) {
            self.order.push(query.clone());
        }
        let per_query = self.grades.entry(query).or_default();
        if per_query.contains_key(&passage) {
            return false;
        }
        per_query.insert(passage, grade);
        true
    }

    pub fn judgment(&self, query: &QueryId, passage: &PassageId) -> Judgment {
        match self.grades.get(query).and_then(|m| m.get(passage)) {
            Some(&g) => Judgment::Judged(g),
            None => Judgment::Unjudged,
        }
    }

    /// Grade with unjudged treated as 0.
    pub fn grade_or_zero(&self, query: &QueryId, passage: &PassageId) -> u32 {
        match self.judgment(query, passage) {
            Judgment::Judged(g) => g,
            Judgment::Unjudged => 0,
        }
    }

    pub fn contains_query(&self, query: &QueryId) -> bool {
        self.grades.contains_key(query)
    }

    pub fn query_judgments(&self, query: &QueryId) -> Option<&HashMap<PassageId, u32>> {
        self.grades.get(query)
    }

    /// Query ids in first-seen order.
    pub fn queries(&self) -> &[QueryId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lines in `qid 0 docid grade` form, queries in first-seen order and docids sorted.
    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for q in &self.order {
            let mut docs: Vec<_> = self.grades[q].iter().collect();
            docs.sort_by(|a, b| a.0.cmp(b.0));
            for (d, g) in docs {
                out.push_str(&format!("{q} 0 {d} {g}\n"));
            }
        }
        out
    }
}

pub fn parse_qrels(path: &Path, content: &str) -> Result<QrelSet, CorpusError> {
    let mut qrels = QrelSet::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(malformed(format!(
                "expected 4 columns, found {}",
                cols.len()
            )));
        }
        let grade: i64 = cols[3]
            .parse()
            .map_err(|_| malformed(format!("non-integer grade `{}`", cols[3])))?;
        // Negative grades occur in some TREC collections; they carry no gain.
        let grade =
            u32::try_from(grade.max(0)).map_err(|_| malformed("grade out of range".into()))?;
        let q = QueryId::new(cols[0]).map_err(|e| malformed(e.to_string()))?;
        let d = PassageId::new(cols[2]).map_err(|e| malformed(e.to_string()))?;
        if !qrels.insert(q, d, grade) {
            return Err(malformed(format!(
                "duplicate judgment for ({}, {})",
                cols[0], cols[2]
            )));
        }
    }
    Ok(qrels)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<QrelSet, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    parse_qrels(path, &content)
}

pub fn write_qrels(path: impl AsRef<Path>, qrels: &QrelSet) -> Result<(), CorpusError> {
    let path = path.as_ref();
    fs::write(path, qrels.to_trec_string()).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub query_id: QueryId,
    pub passage_id: PassageId,
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

/// A validated TREC run: entries grouped by query, each group ranked 1..n.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    entries: Vec<RunEntry>,
    /// (query, start, end) spans into `entries`.
    groups: Vec<(QueryId, usize, usize)>,
}

impl RunFile {
    pub fn new(entries: Vec<RunEntry>) -> Result<Self, CorpusError> {
        let mut groups: Vec<(QueryId, usize, usize)> = Vec::new();
        let mut seen_queries = HashSet::new();
        let mut seen_pairs = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !e.score.is_finite() {
                return Err(CorpusError::InvalidRun(format!(
                    "non-finite score for ({}, {})",
                    e.query_id, e.passage_id
                )));
            }
            if e.tag.is_empty() || e.tag.chars().any(char::is_whitespace) {
                return Err(CorpusError::InvalidRun(format!(
                    "invalid run tag `{}`",
                    e.tag
                )));
            }
            let new_group = groups.last().map_or(true, |g| g.0 != e.query_id);
            if new_group {
                if !seen_queries.insert(e.query_id.clone()) {
                    return Err(CorpusError::InvalidRun(format!(
                        "entries for query {} are not contiguous",
                        e.query_id
                    )));
                }
                groups.push((e.query_id.clone(), i, i));
            }
            let group = groups.last_mut().expect("group pushed above");
            let expected = (i - group.1 + 1) as u32;
            if e.rank != expected {
                return Err(CorpusError::InvalidRun(format!(
                    "query {}: expected rank {expected}, found {} (rank gap or disorder)",
                    e.query_id, e.rank
                )));
            }
            if i > group.1 && e.score > entries[i - 1].score {
                return Err(CorpusError::InvalidRun(format!(
                    "query {}: score increases at rank {}",
                    e.query_id, e.rank
                )));
            }
            if !seen_pairs.insert((e.query_id.clone(), e.passage_id.clone())) {
                return Err(CorpusError::InvalidRun(format!(
                    "duplicate passage {} for query {}",
                    e.passage_id, e.query_id
                )));
            }
            group.2 = i + 1;
        }
        Ok(Self { entries, groups })
    }

    pub fn entries(&self) -> &[RunEntry] {
        &self.entries
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &QueryId> {
        self.groups.iter().map(|g| &g.0)
    }

    pub fn ranking(&self, query: &QueryId) -> Option<&[RunEntry]> {
        self.groups
            .iter()
            .find(|g| &g.0 == query)
            .map(|&(_, s, e)| &self.entries[s..e])
    }

    pub fn rankings(&self) -> impl Iterator<Item = (&QueryId, &[RunEntry])> {
        self.groups
            .iter()
            .map(|(q, s, e)| (q, &self.entries[*s..*e]))
    }

    pub fn num_queries(&self) -> usize {
        self.groups.len()
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 40);
        for e in &self.entries {
            out.push_str(&format!(
                "{} Q0 {} {} {} {}\n",
                e.query_id,
                e.passage_id,
                e.rank,
                format_score(e.score),
                e.tag
            ));
        }
        out
    }
}

/// Six decimals when that is lossless, otherwise the shortest exact representation.
pub fn format_score(score: f64) -> String {
    let fixed = format!("{score:.6}");
    if fixed.parse::<f64>().ok() == Some(score) {
        fixed
    } else {
        format!("{score}")
    }
}

pub fn parse_run(path: &Path, content: &str) -> Result<RunFile, CorpusError> {
    let mut entries = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(malformed(format!(
                "expected 6 columns, found {}",
                cols.len()
            )));
        }
        let rank: u32 = cols[3]
            .parse()
            .map_err(|_| malformed(format!("invalid rank `{}`", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| malformed(format!("invalid score `{}`", cols[4])))?;
        entries.push(RunEntry {
            query_id: QueryId::new(cols[0]).map_err(|e| malformed(e.to_string()))?,
            passage_id: PassageId::new(cols[2]).map_err(|e| malformed(e.to_string()))?,
            rank,
            score,
            tag: cols[5].to_string(),
        });
    }
    RunFile::new(entries)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<RunFile, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    parse_run(path, &content)
}

pub fn write_run(path: impl AsRef<Path>, run: &RunFile) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(run.to_trec_string().as_bytes())
        .map_err(io_err(path))
}
