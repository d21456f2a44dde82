use std::time::Duration;

use anyhow::{bail, Context};
use clap::Args;
use promptprf::backend::RemoteConfig;
use promptprf::{
    ChatBackend, EmbedBackend, MockBackend, PlantedTopicBackend, RankSensitivity, RemoteBackend,
};
use serde::Serialize;

use crate::config::{BackendKind, PipelineConfig};

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_MOCK_DIM: usize = 256;

/// A backend that serves both chat generation and embeddings.
pub trait Backend: ChatBackend + EmbedBackend {}
impl<T: ChatBackend + EmbedBackend + ?Sized> Backend for T {}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    /// Backend for generation and embedding.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Seed for mock backends and generators.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Chat model used for feature extraction.
    #[arg(long)]
    pub model: Option<String>,
    /// Embedding model name (remote backend).
    #[arg(long)]
    pub embed_model: Option<String>,
    /// API base URL (remote backend; falls back to PROMPTPRF_API_BASE).
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Worker threads / concurrent requests.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Extra noise per feedback position (planted-rank backend).
    #[arg(long)]
    pub noise_per_rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub seed: u64,
    pub dim: usize,
    pub model: String,
    pub embed_model: String,
    pub base_url: Option<String>,
    pub timeout_secs: Option<u64>,
    pub parallelism: usize,
    pub noise_per_rank: Option<f64>,
}

impl BackendSettings {
    pub fn resolve(args: &BackendArgs, cfg: &PipelineConfig) -> anyhow::Result<Self> {
        let b = &cfg.backend;
        let kind = args.backend.or(b.kind).unwrap_or(BackendKind::Mock);
        let dim = match args.dim.or(b.dim) {
            Some(d) => d,
            None if kind == BackendKind::Remote => {
                bail!("the remote backend needs --dim (or backend.dim in the config)")
            }
            None => DEFAULT_MOCK_DIM,
        };
        if dim == 0 {
            bail!("--dim must be >= 1");
        }
        let model = args
            .model
            .clone()
            .or_else(|| b.model.clone())
            .unwrap_or_else(|| format!("{}-extractor", kind.chat_family()));
        let embed_model = args
            .embed_model
            .clone()
            .or_else(|| b.embed_model.clone())
            .unwrap_or_else(|| format!("{}-encoder", kind.name()));
        let noise_per_rank = match kind {
            BackendKind::PlantedRank => Some(
                args.noise_per_rank
                    .or(b.noise_per_rank)
                    .unwrap_or(RankSensitivity::default().noise_per_rank),
            ),
            _ => None,
        };
        Ok(Self {
            kind,
            seed: args.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED),
            dim,
            model,
            embed_model,
            base_url: args.base_url.clone().or_else(|| b.base_url.clone()),
            timeout_secs: args.timeout_secs.or(b.timeout_secs),
            parallelism: args.parallelism.or(b.parallelism).unwrap_or(4).max(1),
            noise_per_rank,
        })
    }

    /// Identifies the embedding function; part of every dense run tag.
    pub fn encoder_id(&self) -> String {
        match self.kind {
            BackendKind::Remote => format!("remote:{}:dim={}", self.embed_model, self.dim),
            BackendKind::PlantedRank => format!(
                "planted-rank:seed={}:dim={}:npr={}",
                self.seed,
                self.dim,
                self.noise_per_rank.unwrap_or_default()
            ),
            k => format!("{}:seed={}:dim={}", k.name(), self.seed, self.dim),
        }
    }

    pub fn build(&self) -> anyhow::Result<Box<dyn Backend>> {
        Ok(match self.kind {
            BackendKind::Mock => Box::new(MockBackend::new(self.seed, self.dim)),
            BackendKind::Planted => Box::new(PlantedTopicBackend::new(self.seed, self.dim)),
            BackendKind::PlantedRank => Box::new(
                PlantedTopicBackend::new(self.seed, self.dim).with_rank_sensitivity(
                    RankSensitivity {
                        noise_per_rank: self.noise_per_rank.unwrap_or_default(),
                    },
                ),
            ),
            BackendKind::Remote => {
                let mut cfg = match &self.base_url {
                    Some(url) => {
                        let mut c =
                            RemoteConfig::new(url.clone(), self.embed_model.clone(), self.dim);
                        c.api_key = std::env::var("PROMPTPRF_API_KEY").ok();
                        c
                    }
                    None => RemoteConfig::from_env(self.embed_model.clone(), self.dim)
                        .context("configuring the remote backend")?,
                };
                if let Some(t) = self.timeout_secs {
                    cfg.timeout = Duration::from_secs(t);
                }
                cfg.max_in_flight = self.parallelism;
                Box::new(RemoteBackend::new(cfg))
            }
        })
    }
}
