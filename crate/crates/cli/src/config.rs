//! Declarative pipeline config (TOML). Command-line flags override it.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Seeded pseudo-random text and vectors.
    Mock,
    /// Topic-marker aware mock for the synthetic corpus.
    Planted,
    /// Planted mock whose feedback lines get noisier with depth.
    PlantedRank,
    /// OpenAI-compatible HTTP endpoint.
    Remote,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Mock => "mock",
            BackendKind::Planted => "planted",
            BackendKind::PlantedRank => "planted-rank",
            BackendKind::Remote => "remote",
        }
    }

    /// Kinds that generate identical text share a default extractor name,
    /// so their feature stores are interchangeable.
    pub fn chat_family(self) -> &'static str {
        match self {
            BackendKind::PlantedRank => BackendKind::Planted.name(),
            k => k.name(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<BackendKind>,
    pub dim: Option<usize>,
    pub model: Option<String>,
    pub embed_model: Option<String>,
    pub base_url: Option<String>,
    pub timeout_secs: Option<u64>,
    pub parallelism: Option<usize>,
    pub noise_per_rank: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub topics: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub types: Option<Vec<String>>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrfSection {
    #[serde(rename = "type")]
    pub feature_type: Option<String>,
    pub depth: Option<usize>,
    pub rank_aware: Option<bool>,
    pub extractor_model: Option<String>,
    pub max_feedback_chars: Option<usize>,
    pub first_stage_depth: Option<usize>,
    pub final_depth: Option<usize>,
    pub strict: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Section {
    pub k1: Option<f64>,
    pub b: Option<f64>,
    pub fb_docs: Option<usize>,
    pub fb_terms: Option<usize>,
    pub original_query_weight: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metric: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Single source of randomness for generators and mock backends.
    pub seed: Option<u64>,
    pub backend: BackendSection,
    pub paths: PathsSection,
    pub extract: ExtractSection,
    pub prf: PrfSection,
    pub bm25: Bm25Section,
    pub eval: EvalSection,
}

impl PipelineConfig {
    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(base) = path.parent() {
            cfg.paths.rebase(base);
        }
        Ok(cfg)
    }
}

impl PathsSection {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.topics,
            &mut self.qrels,
            &mut self.store,
            &mut self.index,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
