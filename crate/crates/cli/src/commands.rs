use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::Args;
use promptprf::corpus::{
    load_corpus, load_qrels, load_run, load_topics, write_corpus_jsonl, write_qrels, write_run,
    write_topics_tsv,
};
use promptprf::eval::{
    delta_report, ndcg_at_k, ndcg_for_topics, online_latency_report, paired_significance,
    DeltaReport,
};
use promptprf::features::{parse_feature_types, run_extraction_job, JobOptions, FEATURES_FILE};
use promptprf::index::{index_corpus, to_run_entries};
use promptprf::prf::{
    run_batch, run_dense_baseline, BatchOptions, BatchOutput, FeedbackSource, PrfConfig,
};
use promptprf::sparse::{bm25_rm3_search, Bm25Params, InvertedIndex, Rm3Config};
use promptprf::synth::{generate, SynthConfig};
use promptprf::{
    CountingBackend, DenseIndex, FeatureStore, FeatureType, MetricReport, RunFile,
    SignificanceResult,
};
use serde::Serialize;

use crate::backend::{BackendArgs, BackendSettings};
use crate::config::PipelineConfig;
use crate::provenance::{sha256_hex, Recorder};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TOPICS_FILE: &str = "topics.tsv";
pub const QRELS_FILE: &str = "qrels.txt";

/// Shared per-invocation context.
pub struct Ctx {
    pub config: PipelineConfig,
    pub argv: Vec<String>,
}

fn required(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| anyhow!("missing --{name} (or paths.{name} in the config)"))
}

fn require_exists(path: &Path, what: &str, producer: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!(
            "{what} {} not found; run `{producer}` first",
            path.display()
        );
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn short_tag(prefix: &str, canonical: &str) -> String {
    format!("{prefix}-{}", &sha256_hex(canonical.as_bytes())[..12])
}

// ---------------------------------------------------------------- synth-corpus

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Directory for corpus.jsonl, topics.tsv and qrels.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub passages: usize,
    #[arg(long, default_value_t = 20)]
    pub queries: usize,
    #[arg(long, default_value_t = 5)]
    pub relevant: usize,
    #[arg(long, default_value_t = 5)]
    pub hard_negatives: usize,
    #[arg(long, default_value_t = 2)]
    pub side_mentions: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_synth_corpus(ctx: &Ctx, args: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        passages: args.passages,
        queries: args.queries,
        relevant_per_query: args.relevant,
        hard_negatives_per_query: args.hard_negatives,
        side_mentions: args.side_mentions,
        seed: args
            .seed
            .or(ctx.config.seed)
            .unwrap_or(crate::backend::DEFAULT_SEED),
    };
    let rec = Recorder::start("synth-corpus", &ctx.argv, &cfg)?;
    let synth = generate(&cfg)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let corpus = args.out_dir.join(CORPUS_FILE);
    let topics = args.out_dir.join(TOPICS_FILE);
    let qrels = args.out_dir.join(QRELS_FILE);
    write_corpus_jsonl(&corpus, &synth.passages)?;
    write_topics_tsv(&topics, &synth.queries)?;
    write_qrels(&qrels, &synth.qrels)?;
    for p in [&corpus, &topics, &qrels] {
        rec.write_for(p)?;
    }
    println!(
        "wrote {} passages, {} topics, {} judgments to {}",
        synth.passages.len(),
        synth.queries.len(),
        synth.qrels.len(),
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- extract

#[derive(Debug, Clone, Default, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Feature store directory.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Comma-separated feature types, or `all`.
    #[arg(long)]
    pub types: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Serialize)]
struct ExtractResolved<'a> {
    corpus: &'a Path,
    store: &'a Path,
    types: &'a [FeatureType],
    checkpoint_every: usize,
    backend: &'a BackendSettings,
}

pub fn cmd_extract(ctx: &Ctx, args: &ExtractArgs) -> anyhow::Result<()> {
    let paths = &ctx.config.paths;
    let corpus_path = required(&args.corpus, &paths.corpus, "corpus")?;
    let store_path = required(&args.store, &paths.store, "store")?;
    require_exists(&corpus_path, "corpus", "synth-corpus")?;
    let types = match args
        .types
        .clone()
        .or_else(|| ctx.config.extract.types.as_ref().map(|t| t.join(",")))
    {
        None => FeatureType::ALL.to_vec(),
        Some(s) if s.trim().eq_ignore_ascii_case("all") => FeatureType::ALL.to_vec(),
        Some(s) => parse_feature_types(&s)?,
    };
    let settings = BackendSettings::resolve(&args.backend, &ctx.config)?;
    let checkpoint_every = args
        .checkpoint_every
        .or(ctx.config.extract.checkpoint_every)
        .unwrap_or(64);
    let mut rec = Recorder::start(
        "extract",
        &ctx.argv,
        &ExtractResolved {
            corpus: &corpus_path,
            store: &store_path,
            types: &types,
            checkpoint_every,
            backend: &settings,
        },
    )?;
    rec.input(&corpus_path)?;

    let corpus = load_corpus(&corpus_path)?;
    let backend = CountingBackend::new(settings.build()?);
    let mut store = FeatureStore::open(&store_path)?;
    let options = JobOptions {
        parallelism: settings.parallelism,
        checkpoint_every,
        ..JobOptions::new(settings.model.clone())
    };
    let summary = run_extraction_job(corpus.passages(), &types, &backend, &mut store, &options)?;
    rec.call_counts = Some(backend.counts());
    for f in &summary.failed {
        eprintln!("failed: {} {}: {}", f.passage_id, f.feature_type, f.error);
        rec.notes.push(format!(
            "failed {} {}: {}",
            f.passage_id, f.feature_type, f.error
        ));
    }
    rec.write_for(&store_path)?;
    println!(
        "generated {}, skipped {}, flagged {}, empty {}, failed {}",
        summary.generated,
        summary.skipped,
        summary.flagged,
        summary.empty,
        summary.failed.len()
    );
    if !summary.is_success() {
        bail!(
            "{} extraction(s) failed; rerun `extract` to retry only the missing pairs",
            summary.failed.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- index

#[derive(Debug, Clone, Default, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output index file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

pub fn cmd_index(ctx: &Ctx, args: &IndexArgs) -> anyhow::Result<()> {
    let corpus_path = required(&args.corpus, &ctx.config.paths.corpus, "corpus")?;
    let out = args
        .out
        .clone()
        .or_else(|| ctx.config.paths.index.clone())
        .ok_or_else(|| anyhow!("missing --out (or paths.index in the config)"))?;
    require_exists(&corpus_path, "corpus", "synth-corpus")?;
    let settings = BackendSettings::resolve(&args.backend, &ctx.config)?;
    let mut rec = Recorder::start(
        "index",
        &ctx.argv,
        &serde_json::json!({
            "corpus": corpus_path,
            "out": out,
            "encoder": settings.encoder_id(),
            "backend": settings,
        }),
    )?;
    rec.input(&corpus_path)?;
    let corpus = load_corpus(&corpus_path)?;
    let backend = CountingBackend::new(settings.build()?);
    let index = index_corpus(corpus.passages(), &backend, settings.parallelism)?;
    ensure_parent(&out)?;
    index.save(&out)?;
    rec.call_counts = Some(backend.counts());
    rec.write_for(&out)?;
    println!(
        "indexed {} passages (dim {}) into {}",
        index.len(),
        index.dim(),
        out.display()
    );
    Ok(())
}

fn load_index_for(path: &Path, settings: &BackendSettings) -> anyhow::Result<DenseIndex> {
    require_exists(path, "index", "index")?;
    let index =
        DenseIndex::load(path).with_context(|| format!("loading index {}", path.display()))?;
    if index.dim() != settings.dim {
        bail!(
            "index {} has dimension {} but the backend produces {}; rebuild it with `index`",
            path.display(),
            index.dim(),
            settings.dim
        );
    }
    Ok(index)
}

fn report_batch(rec: &mut Recorder, out: &BatchOutput) {
    for (q, e) in &out.failures {
        eprintln!("query {q} failed: {e}");
        rec.notes.push(format!("query {q} failed: {e}"));
    }
    for r in &out.records {
        for w in &r.warnings {
            rec.notes.push(format!("query {}: {w}", r.query_id));
        }
    }
    if !out.failures.is_empty() {
        eprintln!(
            "warning: {} of {} queries failed (non-strict mode); the run omits them",
            out.failures.len(),
            out.failures.len() + out.records.len()
        );
    }
}

// ---------------------------------------------------------------- search

#[derive(Debug, Clone, Default, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub topics: Option<PathBuf>,
    /// Output run file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub final_depth: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub strict: Option<bool>,
    /// Optional JSON latency summary.
    #[arg(long)]
    pub latency_report: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

pub fn cmd_search(ctx: &Ctx, args: &SearchArgs) -> anyhow::Result<()> {
    let paths = &ctx.config.paths;
    let index_path = required(&args.index, &paths.index, "index")?;
    let topics_path = required(&args.topics, &paths.topics, "topics")?;
    let settings = BackendSettings::resolve(&args.backend, &ctx.config)?;
    let final_depth = args
        .final_depth
        .or(ctx.config.prf.final_depth)
        .unwrap_or(promptprf::prf::DEFAULT_POOL_DEPTH);
    let strict = args.strict.or(ctx.config.prf.strict).unwrap_or(false);
    let mut rec = Recorder::start(
        "search",
        &ctx.argv,
        &serde_json::json!({
            "index": index_path,
            "topics": topics_path,
            "final_depth": final_depth,
            "strict": strict,
            "encoder": settings.encoder_id(),
            "backend": settings,
        }),
    )?;
    let index = load_index_for(&index_path, &settings)?;
    require_exists(&topics_path, "topics", "synth-corpus")?;
    rec.input(&index_path)?;
    rec.input(&topics_path)?;
    let queries = load_topics(&topics_path)?;
    let backend = CountingBackend::new(settings.build()?);
    let options = BatchOptions {
        strict,
        parallelism: settings.parallelism,
        encoder_id: settings.encoder_id(),
    };
    let out = run_dense_baseline(&queries, &index, final_depth, &backend, &options)?;
    let counts = backend.counts();
    rec.call_counts = Some(counts);
    report_batch(&mut rec, &out);
    let latency = online_latency_report(&out.records, counts)?;
    ensure_parent(&args.out)?;
    write_run(&args.out, &out.run)?;
    rec.write_for(&args.out)?;
    if let Some(p) = &args.latency_report {
        write_json(p, &latency)?;
    }
    println!(
        "wrote {} queries to {}",
        out.run.num_queries(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- bm25

#[derive(Debug, Clone, Default, Args)]
pub struct Bm25Args {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub topics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub final_depth: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Rm3Args {
    #[command(flatten)]
    pub bm25: Bm25Args,
    #[arg(long)]
    pub fb_docs: Option<usize>,
    #[arg(long)]
    pub fb_terms: Option<usize>,
    /// Weight of the original query in the interpolation.
    #[arg(long)]
    pub original_query_weight: Option<f64>,
}

fn sparse_run(
    ctx: &Ctx,
    command: &str,
    args: &Bm25Args,
    rm3: Option<Rm3Config>,
) -> anyhow::Result<()> {
    let paths = &ctx.config.paths;
    let corpus_path = required(&args.corpus, &paths.corpus, "corpus")?;
    let topics_path = required(&args.topics, &paths.topics, "topics")?;
    require_exists(&corpus_path, "corpus", "synth-corpus")?;
    require_exists(&topics_path, "topics", "synth-corpus")?;
    let defaults = Bm25Params::default();
    let params = Bm25Params {
        k1: args.k1.or(ctx.config.bm25.k1).unwrap_or(defaults.k1),
        b: args.b.or(ctx.config.bm25.b).unwrap_or(defaults.b),
    };
    params.validate()?;
    if let Some(c) = &rm3 {
        c.validate()?;
    }
    let final_depth = args
        .final_depth
        .or(ctx.config.prf.final_depth)
        .unwrap_or(promptprf::prf::DEFAULT_POOL_DEPTH);
    let resolved = serde_json::json!({
        "corpus": corpus_path,
        "topics": topics_path,
        "bm25": params,
        "rm3": rm3,
        "final_depth": final_depth,
    });
    let mut rec = Recorder::start(command, &ctx.argv, &resolved)?;
    rec.input(&corpus_path)?;
    rec.input(&topics_path)?;
    let canonical =
        serde_json::json!({ "bm25": params, "rm3": rm3, "final_depth": final_depth }).to_string();
    let tag = short_tag(if rm3.is_some() { "bm25rm3" } else { "bm25" }, &canonical);

    let corpus = load_corpus(&corpus_path)?;
    let queries = load_topics(&topics_path)?;
    let index = InvertedIndex::build(corpus.passages())?;
    let mut entries = Vec::new();
    for q in &queries {
        let results = match &rm3 {
            None => index.search(&q.text, final_depth, params),
            Some(c) => match bm25_rm3_search(&index, &q.text, final_depth, params, c) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("query {}: {e}", q.id);
                    rec.notes.push(format!("query {}: {e}", q.id));
                    continue;
                }
            },
        };
        if results.is_empty() {
            rec.notes
                .push(format!("query {}: no matching passages", q.id));
        }
        entries.extend(to_run_entries(&q.id, &results, &tag));
    }
    let run = RunFile::new(entries)?;
    ensure_parent(&args.out)?;
    write_run(&args.out, &run)?;
    rec.write_for(&args.out)?;
    println!(
        "wrote {} queries to {}",
        run.num_queries(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_bm25_search(ctx: &Ctx, args: &Bm25Args) -> anyhow::Result<()> {
    sparse_run(ctx, "bm25-search", args, None)
}

pub fn cmd_bm25_rm3_search(ctx: &Ctx, args: &Rm3Args) -> anyhow::Result<()> {
    let d = Rm3Config::default();
    let b = &ctx.config.bm25;
    let rm3 = Rm3Config {
        fb_docs: args.fb_docs.or(b.fb_docs).unwrap_or(d.fb_docs),
        fb_terms: args.fb_terms.or(b.fb_terms).unwrap_or(d.fb_terms),
        original_query_weight: args
            .original_query_weight
            .or(b.original_query_weight)
            .unwrap_or(d.original_query_weight),
    };
    sparse_run(ctx, "bm25-rm3-search", &args.bm25, Some(rm3))
}

// ---------------------------------------------------------------- prf-search

#[derive(Debug, Clone, Default, Args)]
pub struct PrfArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub topics: Option<PathBuf>,
    /// Feature store directory (not needed with `--type passage`).
    #[arg(long = "features")]
    pub store: Option<PathBuf>,
    /// Feature type for feedback, or `passage` for raw passage text.
    #[arg(long = "type")]
    pub feature_type: Option<String>,
    /// Number of top first-stage passages used as feedback.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Extractor model whose stored features are used (defaults to --model).
    #[arg(long)]
    pub extractor_model: Option<String>,
    #[arg(long)]
    pub max_feedback_chars: Option<usize>,
    #[arg(long)]
    pub first_stage_depth: Option<usize>,
    #[arg(long)]
    pub final_depth: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub strict: Option<bool>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PrfSearchArgs {
    #[command(flatten)]
    pub prf: PrfArgs,
    /// Label feedback lines with their first-stage rank (default true).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub rank_aware: Option<bool>,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSONL of per-query records (first stage, prompt, timings).
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Optional JSON latency summary.
    #[arg(long)]
    pub latency_report: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedPrf {
    pub index: PathBuf,
    pub corpus: PathBuf,
    pub topics: PathBuf,
    pub store: Option<PathBuf>,
    pub prf: PrfConfig,
    pub strict: bool,
    pub encoder: String,
    pub backend: BackendSettings,
}

fn resolve_prf(ctx: &Ctx, args: &PrfArgs, rank_aware: Option<bool>) -> anyhow::Result<ResolvedPrf> {
    let paths = &ctx.config.paths;
    let cp = &ctx.config.prf;
    let backend = BackendSettings::resolve(&args.backend, &ctx.config)?;
    let source = FeedbackSource::parse(
        args.feature_type
            .as_deref()
            .or(cp.feature_type.as_deref())
            .ok_or_else(|| anyhow!("missing --type (a feature type or `passage`)"))?,
    )?;
    let defaults = PrfConfig::default();
    let prf = PrfConfig {
        depth: args.depth.or(cp.depth).unwrap_or(5),
        source,
        extractor_model: args
            .extractor_model
            .clone()
            .or_else(|| cp.extractor_model.clone())
            .unwrap_or_else(|| backend.model.clone()),
        rank_aware: rank_aware.or(cp.rank_aware).unwrap_or(true),
        beta: Vec::new(),
        max_feedback_chars: args
            .max_feedback_chars
            .or(cp.max_feedback_chars)
            .unwrap_or(defaults.max_feedback_chars),
        first_stage_depth: args
            .first_stage_depth
            .or(cp.first_stage_depth)
            .unwrap_or(defaults.first_stage_depth),
        final_depth: args
            .final_depth
            .or(cp.final_depth)
            .unwrap_or(defaults.final_depth),
    };
    prf.validate()?;
    let store = match source {
        FeedbackSource::PassageText => None,
        FeedbackSource::Feature(_) => Some(required(&args.store, &paths.store, "features")?),
    };
    Ok(ResolvedPrf {
        index: required(&args.index, &paths.index, "index")?,
        corpus: required(&args.corpus, &paths.corpus, "corpus")?,
        topics: required(&args.topics, &paths.topics, "topics")?,
        store,
        prf,
        strict: args.strict.or(cp.strict).unwrap_or(false),
        encoder: backend.encoder_id(),
        backend,
    })
}

struct PrfInputs {
    index: DenseIndex,
    corpus: promptprf::Corpus,
    queries: Vec<promptprf::Query>,
    store: Option<FeatureStore>,
}

fn load_prf_inputs(r: &ResolvedPrf, rec: &mut Recorder) -> anyhow::Result<PrfInputs> {
    let index = load_index_for(&r.index, &r.backend)?;
    require_exists(&r.corpus, "corpus", "synth-corpus")?;
    require_exists(&r.topics, "topics", "synth-corpus")?;
    rec.input(&r.index)?;
    rec.input(&r.corpus)?;
    rec.input(&r.topics)?;
    let store = match &r.store {
        None => None,
        Some(dir) => {
            require_exists(&dir.join(FEATURES_FILE), "feature store", "extract")?;
            rec.input(&dir.join(FEATURES_FILE))?;
            Some(FeatureStore::open(dir)?)
        }
    };
    Ok(PrfInputs {
        index,
        corpus: load_corpus(&r.corpus)?,
        queries: load_topics(&r.topics)?,
        store,
    })
}

fn run_prf(
    r: &ResolvedPrf,
    prf: &PrfConfig,
    inputs: &PrfInputs,
    rec: &mut Recorder,
) -> anyhow::Result<(BatchOutput, promptprf::eval::LatencyReport)> {
    let backend = CountingBackend::new(r.backend.build()?);
    let options = BatchOptions {
        strict: r.strict,
        parallelism: r.backend.parallelism,
        encoder_id: r.encoder.clone(),
    };
    let out = run_batch(
        &inputs.queries,
        &inputs.index,
        prf,
        &backend,
        &inputs.corpus,
        inputs.store.as_ref(),
        &options,
    )
    .map_err(|e| match e {
        promptprf::PrfError::Batch { .. } if prf.depth > 0 => {
            anyhow!("{e}\nhint: missing features are produced by `extract` with the same --model")
        }
        e => e.into(),
    })?;
    let counts = backend.counts();
    let mut total = rec.call_counts.unwrap_or_default();
    total.chat_calls += counts.chat_calls;
    total.embed_calls += counts.embed_calls;
    rec.call_counts = Some(total);
    report_batch(rec, &out);
    let latency = online_latency_report(&out.records, counts)?;
    Ok((out, latency))
}

pub fn cmd_prf_search(ctx: &Ctx, args: &PrfSearchArgs) -> anyhow::Result<()> {
    let r = resolve_prf(ctx, &args.prf, args.rank_aware)?;
    let mut rec = Recorder::start("prf-search", &ctx.argv, &r)?;
    let inputs = load_prf_inputs(&r, &mut rec)?;
    let (out, latency) = run_prf(&r, &r.prf, &inputs, &mut rec)?;
    ensure_parent(&args.out)?;
    write_run(&args.out, &out.run)?;
    rec.write_for(&args.out)?;
    if let Some(p) = &args.records {
        ensure_parent(p)?;
        let mut text = String::new();
        for record in &out.records {
            text.push_str(&serde_json::to_string(record)?);
            text.push('\n');
        }
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &args.latency_report {
        write_json(p, &latency)?;
    }
    println!(
        "wrote {} queries to {} (tag {}, mean total {:.2} ms/query)",
        out.run.num_queries(),
        args.out.display(),
        r.prf.run_tag(&r.encoder),
        latency.total_ms.mean
    );
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Default, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Restrict to (and validate against) this topic set.
    #[arg(long)]
    pub topics: Option<PathBuf>,
    /// Metric, `ndcg@K`.
    #[arg(long)]
    pub metric: Option<String>,
    /// Second run to compare against (paired test and per-query deltas).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn parse_metric(s: &str) -> anyhow::Result<usize> {
    let lower = s.trim().to_ascii_lowercase();
    let k = lower
        .strip_prefix("ndcg@")
        .ok_or_else(|| anyhow!("unsupported metric `{s}` (only ndcg@K is available)"))?;
    let k: usize = k.parse().map_err(|_| anyhow!("bad cutoff in `{s}`"))?;
    if k == 0 {
        bail!("cutoff must be >= 1");
    }
    Ok(k)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_tag: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub metric: String,
    pub run: RunSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<RunSummary>,
    /// Paired test of run against baseline (differences are run minus baseline).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub significance: Option<SignificanceResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<DeltaReport>,
}

fn run_tag(run: &RunFile) -> String {
    run.entries()
        .first()
        .map(|e| e.tag.clone())
        .unwrap_or_default()
}

pub fn cmd_evaluate(ctx: &Ctx, args: &EvaluateArgs) -> anyhow::Result<()> {
    let qrels_path = required(&args.qrels, &ctx.config.paths.qrels, "qrels")?;
    let metric = args
        .metric
        .clone()
        .or_else(|| ctx.config.eval.metric.clone())
        .unwrap_or_else(|| "ndcg@10".into());
    let k = parse_metric(&metric)?;
    let mut rec = Recorder::start(
        "evaluate",
        &ctx.argv,
        &serde_json::json!({
            "run": args.run,
            "qrels": qrels_path,
            "topics": args.topics,
            "metric": metric,
            "baseline": args.baseline,
        }),
    )?;
    require_exists(&args.run, "run file", "search` or `prf-search")?;
    require_exists(&qrels_path, "qrels", "synth-corpus")?;
    rec.input(&args.run)?;
    rec.input(&qrels_path)?;
    let qrels = load_qrels(&qrels_path)?;
    let topics: Option<HashSet<promptprf::QueryId>> = match &args.topics {
        None => None,
        Some(p) => {
            rec.input(p)?;
            Some(load_topics(p)?.into_iter().map(|q| q.id).collect())
        }
    };
    let score = |run: &RunFile| match &topics {
        None => ndcg_at_k(run, &qrels, k),
        Some(t) => ndcg_for_topics(run, &qrels, t, k),
    };
    let run = load_run(&args.run)?;
    let report = score(&run)?;
    let mut out = EvalReport {
        metric: report.metric.clone(),
        run: RunSummary {
            run_tag: run_tag(&run),
            report,
        },
        baseline: None,
        significance: None,
        delta: None,
    };
    if let Some(b) = &args.baseline {
        require_exists(b, "baseline run", "search")?;
        rec.input(b)?;
        let base = load_run(b)?;
        let base_report = score(&base)?;
        out.significance = Some(paired_significance(&base_report, &out.run.report)?);
        out.delta = Some(delta_report(&base_report, &out.run.report)?);
        out.baseline = Some(RunSummary {
            run_tag: run_tag(&base),
            report: base_report,
        });
    }
    println!(
        "{} = {:.4} over {} queries ({} excluded)",
        out.metric,
        out.run.report.mean,
        out.run.report.per_query.len(),
        out.run.report.excluded.len()
    );
    if let (Some(b), Some(s)) = (&out.baseline, &out.significance) {
        println!(
            "baseline = {:.4}; t = {:.4}, p = {:.4}{}",
            b.report.mean,
            s.statistic,
            s.p_value,
            if s.significant { " (significant)" } else { "" }
        );
    }
    if let Some(p) = &args.report {
        write_json(p, &out)?;
        rec.write_for(p)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- ablate-rank

#[derive(Debug, Clone, Default, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub prf: PrfArgs,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long)]
    pub metric: Option<String>,
    /// JSON report with both runs and the paired comparison.
    #[arg(long)]
    pub report: PathBuf,
    /// Also write the two run files here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationArm {
    pub rank_aware: bool,
    pub run_tag: String,
    pub mean: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub metric: String,
    pub encoder: String,
    pub prf: PrfConfig,
    pub rank_aware: AblationArm,
    pub rank_agnostic: AblationArm,
    /// Differences are rank-aware minus rank-agnostic.
    pub significance: SignificanceResult,
    pub delta: DeltaReport,
}

pub fn cmd_ablate_rank(ctx: &Ctx, args: &AblateArgs) -> anyhow::Result<()> {
    let r = resolve_prf(ctx, &args.prf, Some(true))?;
    let qrels_path = required(&args.qrels, &ctx.config.paths.qrels, "qrels")?;
    let metric = args
        .metric
        .clone()
        .or_else(|| ctx.config.eval.metric.clone())
        .unwrap_or_else(|| "ndcg@10".into());
    let k = parse_metric(&metric)?;
    let mut rec = Recorder::start(
        "ablate-rank",
        &ctx.argv,
        &serde_json::json!({ "prf": r, "qrels": qrels_path, "metric": metric }),
    )?;
    require_exists(&qrels_path, "qrels", "synth-corpus")?;
    let inputs = load_prf_inputs(&r, &mut rec)?;
    rec.input(&qrels_path)?;
    let qrels = load_qrels(&qrels_path)?;

    let mut arms = Vec::new();
    for aware in [true, false] {
        let cfg = PrfConfig {
            rank_aware: aware,
            ..r.prf.clone()
        };
        let (out, _) = run_prf(&r, &cfg, &inputs, &mut rec)?;
        let report = ndcg_at_k(&out.run, &qrels, k)?;
        if let Some(dir) = &args.out_dir {
            std::fs::create_dir_all(dir)?;
            let name = if aware {
                "run.rank-aware.txt"
            } else {
                "run.rank-agnostic.txt"
            };
            let path = dir.join(name);
            write_run(&path, &out.run)?;
            rec.write_for(&path)?;
        }
        arms.push(AblationArm {
            rank_aware: aware,
            run_tag: cfg.run_tag(&r.encoder),
            mean: report.mean,
            report,
        });
    }
    let agnostic = arms.pop().expect("two arms");
    let aware = arms.pop().expect("two arms");
    let report = AblationReport {
        metric: aware.report.metric.clone(),
        encoder: r.encoder.clone(),
        prf: r.prf.clone(),
        significance: paired_significance(&agnostic.report, &aware.report)?,
        delta: delta_report(&agnostic.report, &aware.report)?,
        rank_aware: aware,
        rank_agnostic: agnostic,
    };
    write_json(&args.report, &report)?;
    rec.write_for(&args.report)?;
    println!(
        "rank-aware {} = {:.4}, rank-agnostic = {:.4}, p = {:.4}",
        report.metric,
        report.rank_aware.mean,
        report.rank_agnostic.mean,
        report.significance.p_value
    );
    Ok(())
}
