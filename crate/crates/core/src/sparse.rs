//! BM25 and BM25+RM3 over an in-memory inverted index.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, PassageId};
use crate::index::SearchResult;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("passage {0} has no indexable tokens")]
    EmptyDocument(PassageId),
    #[error("duplicate passage id {0}")]
    DuplicateId(PassageId),
    #[error("query has no indexable tokens")]
    EmptyQuery,
    #[error("RM3 needs at least one feedback document")]
    EmptyFeedback,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Lowercase, split on anything that is not alphanumeric, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), SparseError> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(SparseError::InvalidParameter(format!("k1 = {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(SparseError::InvalidParameter(format!("b = {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rm3Config {
    pub fb_docs: usize,
    pub fb_terms: usize,
    pub original_query_weight: f64,
}

impl Default for Rm3Config {
    fn default() -> Self {
        Self {
            fb_docs: 3,
            fb_terms: 10,
            original_query_weight: 0.5,
        }
    }
}

impl Rm3Config {
    pub fn validate(&self) -> Result<(), SparseError> {
        if self.fb_docs == 0 || self.fb_terms == 0 {
            return Err(SparseError::InvalidParameter(
                "fb_docs and fb_terms must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.original_query_weight) {
            return Err(SparseError::InvalidParameter(format!(
                "original query weight {} is outside [0, 1]",
                self.original_query_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    ids: Vec<PassageId>,
    positions: HashMap<PassageId, usize>,
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_terms: Vec<HashMap<String, u32>>,
    doc_lengths: Vec<u32>,
    avgdl: f64,
}

impl InvertedIndex {
    pub fn build(passages: &[Passage]) -> Result<Self, SparseError> {
        if passages.is_empty() {
            return Err(SparseError::EmptyCorpus);
        }
        let mut ids = Vec::with_capacity(passages.len());
        let mut positions = HashMap::with_capacity(passages.len());
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_terms = Vec::with_capacity(passages.len());
        let mut doc_lengths = Vec::with_capacity(passages.len());
        for (pos, p) in passages.iter().enumerate() {
            if positions.insert(p.id.clone(), pos).is_some() {
                return Err(SparseError::DuplicateId(p.id.clone()));
            }
            let tokens = tokenize(&p.text);
            if tokens.is_empty() {
                return Err(SparseError::EmptyDocument(p.id.clone()));
            }
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (t, &n) in &tf {
                postings.entry(t.clone()).or_default().push((pos as u32, n));
            }
            ids.push(p.id.clone());
            doc_lengths.push(tokens.len() as u32);
            doc_terms.push(tf);
        }
        let avgdl = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64;
        Ok(Self {
            ids,
            positions,
            postings,
            doc_terms,
            doc_lengths,
            avgdl,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_length(&self, id: &PassageId) -> Option<u32> {
        self.positions.get(id).map(|&p| self.doc_lengths[p])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_freq(&self, id: &PassageId, term: &str) -> u32 {
        self.positions
            .get(id)
            .and_then(|&p| self.doc_terms[p].get(term).copied())
            .unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, dl: u32, params: Bm25Params) -> f64 {
        let tf = tf as f64;
        let norm = params.k1 * (1.0 - params.b + params.b * dl as f64 / self.avgdl);
        idf * tf * (params.k1 + 1.0) / (tf + norm)
    }

    /// BM25 of one passage; repeated query terms count once per occurrence.
    pub fn bm25_score(&self, query_terms: &[String], id: &PassageId, params: Bm25Params) -> f64 {
        let Some(&pos) = self.positions.get(id) else {
            return 0.0;
        };
        query_terms
            .iter()
            .map(|t| match self.doc_terms[pos].get(t) {
                Some(&tf) => self.term_weight(self.idf(t), tf, self.doc_lengths[pos], params),
                None => 0.0,
            })
            .sum()
    }

    /// Scores every passage matching at least one weighted term.
    pub fn search_weighted(
        &self,
        weights: &[(String, f64)],
        k: usize,
        params: Bm25Params,
    ) -> Vec<SearchResult> {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for (term, w) in weights {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(pos, tf) in list {
                *acc.entry(pos).or_default() +=
                    w * self.term_weight(idf, tf, self.doc_lengths[pos as usize], params);
            }
        }
        let mut scored: Vec<(f64, &PassageId)> = acc
            .into_iter()
            .map(|(pos, s)| (s, &self.ids[pos as usize]))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.cmp(b.1))
        });
        scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (score, id))| SearchResult {
                passage_id: id.clone(),
                score,
                rank: i as u32 + 1,
            })
            .collect()
    }

    pub fn search(&self, query: &str, k: usize, params: Bm25Params) -> Vec<SearchResult> {
        let weights: Vec<(String, f64)> = count_terms(&tokenize(query))
            .into_iter()
            .map(|(t, n)| (t, n as f64))
            .collect();
        self.search_weighted(&weights, k, params)
    }
}

fn count_terms(tokens: &[String]) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut v: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(t, n)| (t.to_string(), n))
        .collect();
    v.sort();
    v
}

fn sort_weights(v: &mut [(String, f64)]) {
    v.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Expanded query as `(term, weight)` pairs, heaviest first; weights sum to 1.
pub fn rm3_expand(
    query: &str,
    first_stage: &[SearchResult],
    index: &InvertedIndex,
    config: &Rm3Config,
) -> Result<Vec<(String, f64)>, SparseError> {
    config.validate()?;
    let q_tokens = tokenize(query);
    if q_tokens.is_empty() {
        return Err(SparseError::EmptyQuery);
    }
    let fb: Vec<&SearchResult> = first_stage
        .iter()
        .filter(|r| index.positions.contains_key(&r.passage_id))
        .take(config.fb_docs)
        .collect();
    if fb.is_empty() {
        return Err(SparseError::EmptyFeedback);
    }

    let total: f64 = fb.iter().map(|r| r.score.max(0.0)).sum();
    let doc_weight = |r: &SearchResult| {
        if total > 0.0 {
            r.score.max(0.0) / total
        } else {
            1.0 / fb.len() as f64
        }
    };
    let mut rm: HashMap<&str, f64> = HashMap::new();
    for r in &fb {
        let pos = index.positions[&r.passage_id];
        let dl = index.doc_lengths[pos] as f64;
        let w = doc_weight(r);
        for (t, &tf) in &index.doc_terms[pos] {
            *rm.entry(t.as_str()).or_default() += w * tf as f64 / dl;
        }
    }
    let mut rm: Vec<(String, f64)> = rm.into_iter().map(|(t, w)| (t.to_string(), w)).collect();
    sort_weights(&mut rm);
    rm.truncate(config.fb_terms);
    let rm_total: f64 = rm.iter().map(|(_, w)| w).sum();

    let lambda = config.original_query_weight;
    let qlen = q_tokens.len() as f64;
    let mut mixed: HashMap<String, f64> = HashMap::new();
    for (t, n) in count_terms(&q_tokens) {
        *mixed.entry(t).or_default() += lambda * n as f64 / qlen;
    }
    if rm_total > 0.0 {
        for (t, w) in rm {
            *mixed.entry(t).or_default() += (1.0 - lambda) * w / rm_total;
        }
    }
    let mut out: Vec<(String, f64)> = mixed.into_iter().filter(|(_, w)| *w > 0.0).collect();
    sort_weights(&mut out);
    Ok(out)
}

/// BM25 first stage, RM3 expansion, weighted BM25 second stage.
pub fn bm25_rm3_search(
    index: &InvertedIndex,
    query: &str,
    k: usize,
    params: Bm25Params,
    config: &Rm3Config,
) -> Result<Vec<SearchResult>, SparseError> {
    let first = index.search(query, config.fb_docs.max(k), params);
    if first.is_empty() {
        return Ok(first);
    }
    let expanded = rm3_expand(query, &first, index, config)?;
    Ok(index.search_weighted(&expanded, k, params))
}
