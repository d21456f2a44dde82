//! Command-line front end: synthetic data, feature extraction, indexing,
//! dense/sparse/feedback retrieval and evaluation.

pub mod backend;
pub mod commands;
pub mod config;
pub mod provenance;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::*;
use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(
    name = "promptprf",
    version,
    about = "Dense retrieval with prompt-based feedback from precomputed passage features"
)]
pub struct Cli {
    /// TOML config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-topic corpus, topics and qrels.
    SynthCorpus(SynthArgs),
    /// Generate passage features offline into a store.
    Extract(ExtractArgs),
    /// Encode the corpus into a dense index.
    Index(IndexArgs),
    /// Dense retrieval without feedback.
    Search(SearchArgs),
    /// BM25 retrieval.
    Bm25Search(Bm25Args),
    /// BM25 with RM3 expansion.
    Bm25Rm3Search(Rm3Args),
    /// Dense retrieval with feature (or passage) feedback.
    PrfSearch(PrfSearchArgs),
    /// Score a run (optionally against a baseline run).
    Evaluate(EvaluateArgs),
    /// Compare rank-aware and rank-agnostic feedback prompts.
    AblateRank(AblateArgs),
}

pub fn execute(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let ctx = Ctx { config, argv };
    match &cli.command {
        Command::SynthCorpus(a) => cmd_synth_corpus(&ctx, a),
        Command::Extract(a) => cmd_extract(&ctx, a),
        Command::Index(a) => cmd_index(&ctx, a),
        Command::Search(a) => cmd_search(&ctx, a),
        Command::Bm25Search(a) => cmd_bm25_search(&ctx, a),
        Command::Bm25Rm3Search(a) => cmd_bm25_rm3_search(&ctx, a),
        Command::PrfSearch(a) => cmd_prf_search(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::AblateRank(a) => cmd_ablate_rank(&ctx, a),
    }
}

/// Parses and runs one command in-process. The first item is the program name.
pub fn run_from<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let cli = Cli::try_parse_from(args)?;
    execute(cli, argv)
}
