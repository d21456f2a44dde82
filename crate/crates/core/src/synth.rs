//! Planted-topic synthetic corpus.
//!
//! Query `i` mentions the marker `TOPIC_i`. Each query has a few relevant
//! passages carrying `TOPIC_i` twice plus a facet marker shared by all of
//! that query's relevant passages. Hard negatives carry `TOPIC_i` just as
//! often but with a facet of their own, so the query alone cannot separate
//! them from the relevant set; feedback from the top of the first-stage
//! ranking can. Every passage also mentions, once each, a couple of the
//! negative facets of its own query. Those side mentions show up in raw
//! passage text but not in salience-filtered features, so feeding raw text
//! back pulls the refined query towards the hard negatives.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, PassageId, QrelSet, Query, QueryId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub passages: usize,
    pub queries: usize,
    pub relevant_per_query: usize,
    pub hard_negatives_per_query: usize,
    pub side_mentions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            passages: 200,
            queries: 20,
            relevant_per_query: 5,
            hard_negatives_per_query: 5,
            side_mentions: 2,
            seed: 7,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("{0} must be at least 1")]
    TooSmall(&'static str),
    #[error(
        "{passages} passages cannot hold {needed} relevant ones ({queries} queries x {per_query})"
    )]
    NotEnoughPassages {
        passages: usize,
        queries: usize,
        per_query: usize,
        needed: usize,
    },
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub passages: Vec<Passage>,
    pub queries: Vec<Query>,
    pub qrels: QrelSet,
}

pub fn marker(i: usize) -> String {
    format!("TOPIC_{i}")
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tu", "sa", "vel", "no", "ri", "dan", "pe", "shi", "or", "ul", "mar",
    "te",
];

fn filler_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n)
        .map(|_| *SYLLABLES.choose(rng).expect("non-empty"))
        .collect()
}

fn render(
    rng: &mut ChaCha8Rng,
    markers: Vec<String>,
    filler: std::ops::RangeInclusive<usize>,
) -> String {
    let mut words: Vec<String> = (0..rng.gen_range(filler))
        .map(|_| filler_word(rng))
        .collect();
    for m in markers {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, m);
    }
    words.join(" ")
}

/// Deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    let SynthConfig {
        passages: n_passages,
        queries: nq,
        relevant_per_query: n_rel,
        hard_negatives_per_query: n_neg,
        side_mentions,
        seed,
    } = *config;
    if n_passages == 0 {
        return Err(SynthError::TooSmall("passages"));
    }
    if nq == 0 {
        return Err(SynthError::TooSmall("queries"));
    }
    if n_rel == 0 {
        return Err(SynthError::TooSmall("relevant_per_query"));
    }
    let needed = nq * n_rel;
    if needed > n_passages {
        return Err(SynthError::NotEnoughPassages {
            passages: n_passages,
            queries: nq,
            per_query: n_rel,
            needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Marker layout: topics [0, nq), relevant facets [nq, 2nq), then one
    // facet per non-relevant passage. Hard negative j belongs to query j % nq.
    let n_other = n_passages - needed;
    let n_hard = n_other.min(nq * n_neg);
    let facet = |j: usize| marker(2 * nq + j);
    let owner = |j: usize| (j < n_hard).then_some(j % nq);
    let side = |rng: &mut ChaCha8Rng, query: Option<usize>, own: Option<usize>| -> Vec<String> {
        let pool: Vec<usize> = (0..n_other)
            .filter(|&j| owner(j) == query && Some(j) != own)
            .collect();
        (0..side_mentions)
            .filter_map(|_| pool.choose(rng).map(|&j| facet(j)))
            .collect()
    };

    // (text, relevant-to query)
    let mut drafts: Vec<(String, Option<usize>)> = Vec::with_capacity(n_passages);
    for q in 0..nq {
        for _ in 0..n_rel {
            let mut m = vec![marker(q), marker(q), marker(nq + q), marker(nq + q)];
            m.extend(side(&mut rng, Some(q), None));
            drafts.push((render(&mut rng, m, 20..=40), Some(q)));
        }
    }
    for j in 0..n_other {
        let mut m = match owner(j) {
            Some(q) => vec![marker(q), marker(q), facet(j), facet(j)],
            None => vec![facet(j), facet(j)],
        };
        m.extend(side(&mut rng, owner(j), Some(j)));
        drafts.push((render(&mut rng, m, 20..=40), None));
    }
    drafts.shuffle(&mut rng);

    let width = (n_passages.saturating_sub(1)).to_string().len().max(4);
    let mut passages = Vec::with_capacity(n_passages);
    let mut relevant: BTreeMap<usize, Vec<PassageId>> = BTreeMap::new();
    for (i, (text, rel)) in drafts.into_iter().enumerate() {
        let id = PassageId::new(format!("p{i:0width$}")).expect("generated id is valid");
        if let Some(q) = rel {
            relevant.entry(q).or_default().push(id.clone());
        }
        passages.push(Passage { id, text });
    }

    let qwidth = (nq.saturating_sub(1)).to_string().len().max(2);
    let mut queries = Vec::with_capacity(nq);
    let mut qrels = QrelSet::default();
    for q in 0..nq {
        let id = QueryId::new(format!("q{q:0qwidth$}")).expect("generated id is valid");
        let text = render(&mut rng, vec![marker(q)], 2..=5);
        for pid in &relevant[&q] {
            qrels.insert(id.clone(), pid.clone(), 1);
        }
        queries.push(Query { id, text });
    }
    Ok(SynthCorpus {
        passages,
        queries,
        qrels,
    })
}
