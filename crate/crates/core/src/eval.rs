//! nDCG, paired significance, per-query deltas, and cost/latency summaries.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::backend::CallCounts;
use crate::corpus::{QrelSet, QueryId, RunFile};
use crate::features::FeatureType;
use crate::prf::PrfRunRecord;

pub const DEFAULT_CUTOFF: usize = 10;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const UNCHANGED_EPSILON: f64 = 1e-9;
pub const DEFAULT_MS_PER_TOKEN: f64 = 73.0;
const DEGENERATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cutoff must be >= 1")]
    ZeroCutoff,
    #[error("run contains query {0} which is not in the topic set")]
    UnknownQuery(QueryId),
    #[error("no query in the run has a judged relevant passage")]
    NoEvaluableQueries,
    #[error("query sets differ: {only_a} only in the first report, {only_b} only in the second (e.g. {example})")]
    MismatchedQueries {
        only_a: usize,
        only_b: usize,
        example: QueryId,
    },
    #[error("paired test needs at least 2 queries, got {0}")]
    TooFewPairs(usize),
    #[error("per-query differences are all {0} with zero variance; the t statistic is undefined")]
    DegenerateVariance(f64),
    #[error("no records to summarize")]
    NoRecords,
    #[error("{0} chat-generation calls happened during online retrieval")]
    OnlineGeneration(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub cutoff: usize,
    pub per_query: BTreeMap<QueryId, f64>,
    pub mean: f64,
    /// Run queries with no judged relevant passage; not part of the mean.
    pub excluded: Vec<QueryId>,
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

/// DCG of the first `k` grades, in rank order.
pub fn dcg(grades: &[u32], k: usize) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum()
}

/// nDCG@k for every run query; queries with zero ideal DCG are excluded.
pub fn ndcg_at_k(run: &RunFile, qrels: &QrelSet, k: usize) -> Result<MetricReport, EvalError> {
    ndcg_impl(run, qrels, k, None)
}

/// As [`ndcg_at_k`], but rejects run queries outside `topics`.
pub fn ndcg_for_topics(
    run: &RunFile,
    qrels: &QrelSet,
    topics: &HashSet<QueryId>,
    k: usize,
) -> Result<MetricReport, EvalError> {
    ndcg_impl(run, qrels, k, Some(topics))
}

fn ndcg_impl(
    run: &RunFile,
    qrels: &QrelSet,
    k: usize,
    topics: Option<&HashSet<QueryId>>,
) -> Result<MetricReport, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    for (qid, ranking) in run.rankings() {
        if let Some(topics) = topics {
            if !topics.contains(qid) {
                return Err(EvalError::UnknownQuery(qid.clone()));
            }
        }
        let mut ideal: Vec<u32> = qrels
            .query_judgments(qid)
            .map(|j| j.values().copied().collect())
            .unwrap_or_default();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(&ideal, k);
        if idcg <= 0.0 {
            excluded.push(qid.clone());
            continue;
        }
        let grades: Vec<u32> = ranking
            .iter()
            .take(k)
            .map(|e| qrels.grade_or_zero(qid, &e.passage_id))
            .collect();
        per_query.insert(qid.clone(), dcg(&grades, k) / idcg);
    }
    if per_query.is_empty() {
        return Err(EvalError::NoEvaluableQueries);
    }
    let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(MetricReport {
        metric: format!("ndcg@{k}"),
        cutoff: k,
        per_query,
        mean,
        excluded,
    })
}

fn paired(a: &MetricReport, b: &MetricReport) -> Result<Vec<(QueryId, f64)>, EvalError> {
    let only_a: Vec<&QueryId> = a
        .per_query
        .keys()
        .filter(|q| !b.per_query.contains_key(*q))
        .collect();
    let only_b: Vec<&QueryId> = b
        .per_query
        .keys()
        .filter(|q| !a.per_query.contains_key(*q))
        .collect();
    if let Some(example) = only_a.first().or(only_b.first()) {
        return Err(EvalError::MismatchedQueries {
            only_a: only_a.len(),
            only_b: only_b.len(),
            example: (*example).clone(),
        });
    }
    Ok(a.per_query
        .iter()
        .map(|(q, va)| (q.clone(), b.per_query[q] - va))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub n: usize,
    pub mean_diff: f64,
}

/// Two-sided paired t-test on per-query differences `b - a`.
pub fn paired_significance(
    a: &MetricReport,
    b: &MetricReport,
) -> Result<SignificanceResult, EvalError> {
    let diffs: Vec<f64> = paired(a, b)?.into_iter().map(|(_, d)| d).collect();
    paired_t_test(&diffs)
}

pub fn paired_t_test(diffs: &[f64]) -> Result<SignificanceResult, EvalError> {
    let n = diffs.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let result = |statistic: f64, p_value: f64| SignificanceResult {
        test: "paired-t".into(),
        statistic,
        p_value,
        significant: p_value < SIGNIFICANCE_LEVEL,
        n,
        mean_diff: mean,
    };
    // Constant differences (up to rounding) leave the statistic undefined.
    if diffs
        .iter()
        .all(|&d| (d - diffs[0]).abs() <= DEGENERATE_TOLERANCE)
    {
        return if diffs.iter().all(|d| d.abs() <= DEGENERATE_TOLERANCE) {
            Ok(result(0.0, 1.0))
        } else {
            Err(EvalError::DegenerateVariance(diffs[0]))
        };
    }
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof >= 1");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(result(t, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// `b - a` per query, largest gain first.
    pub per_query_delta: Vec<(QueryId, f64)>,
    pub improved: usize,
    pub degraded: usize,
    pub unchanged: usize,
    pub mean_delta: f64,
}

pub fn delta_report(a: &MetricReport, b: &MetricReport) -> Result<DeltaReport, EvalError> {
    let mut deltas = paired(a, b)?;
    if deltas.is_empty() {
        return Err(EvalError::NoEvaluableQueries);
    }
    let (mut improved, mut degraded, mut unchanged) = (0, 0, 0);
    for (_, d) in &deltas {
        if d.abs() < UNCHANGED_EPSILON {
            unchanged += 1;
        } else if *d > 0.0 {
            improved += 1;
        } else {
            degraded += 1;
        }
    }
    let mean_delta = deltas.iter().map(|(_, d)| d).sum::<f64>() / deltas.len() as f64;
    deltas.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    Ok(DeltaReport {
        per_query_delta: deltas,
        improved,
        degraded,
        unchanged,
        mean_delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub ms_per_token: f64,
    pub token_budget_per_feature: BTreeMap<FeatureType, u32>,
    /// Tokens generated per query at search time (0 when features are precomputed).
    pub per_query_online_tokens: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            ms_per_token: DEFAULT_MS_PER_TOKEN,
            token_budget_per_feature: FeatureType::ALL
                .iter()
                .map(|&t| (t, t.token_budget()))
                .collect(),
            per_query_online_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfCost {
    pub total_tokens: u64,
    pub latency_ms: f64,
}

/// Generation cost of producing `features` at query time.
pub fn grf_cost(model: &CostModel, features: &[FeatureType]) -> GrfCost {
    let total_tokens: u64 = features
        .iter()
        .map(|t| {
            model
                .token_budget_per_feature
                .get(t)
                .copied()
                .unwrap_or_else(|| t.token_budget()) as u64
        })
        .sum();
    GrfCost {
        total_tokens,
        latency_ms: total_tokens as f64 * model.ms_per_token,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

/// Nearest-rank percentile: the smallest value with at least `pct`% of the
/// sample at or below it.
pub fn percentile(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

pub fn stage_stats(values: &[f64]) -> Option<StageStats> {
    Some(StageStats {
        mean: values.iter().sum::<f64>() / values.len().max(1) as f64,
        median: median(values)?,
        p95: percentile(values, 95.0)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub queries: usize,
    pub encode_ms: StageStats,
    pub search_ms: StageStats,
    pub total_ms: StageStats,
    pub chat_calls: u64,
    pub embed_calls: u64,
}

/// Summarizes per-stage timings. `calls` are the backend counters observed
/// over the same run; any chat call is an error.
pub fn online_latency_report(
    records: &[PrfRunRecord],
    calls: CallCounts,
) -> Result<LatencyReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    if calls.chat_calls > 0 {
        return Err(EvalError::OnlineGeneration(calls.chat_calls));
    }
    let pick = |f: fn(&PrfRunRecord) -> f64| -> StageStats {
        let v: Vec<f64> = records.iter().map(f).collect();
        stage_stats(&v).expect("non-empty")
    };
    Ok(LatencyReport {
        queries: records.len(),
        encode_ms: pick(|r| r.timings.encode_ms()),
        search_ms: pick(|r| r.timings.search_ms()),
        total_ms: pick(|r| r.timings.encode_ms() + r.timings.search_ms()),
        chat_calls: calls.chat_calls,
        embed_calls: calls.embed_calls,
    })
}
