//! Acceptance checks. Runs as its own harness so every criterion prints a
//! PASS/FAIL line; exits non-zero if any criterion fails.
// `ensure!(a >= b)` negates float comparisons on purpose: NaN must fail.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use promptprf::corpus::{Passage, QrelSet, RunEntry, RunFile};
use promptprf::encode::{build_refined_prompt, encode_passage};
use promptprf::eval::{
    grf_cost, ndcg_at_k, paired_significance, paired_t_test, CostModel, MetricReport,
};
use promptprf::features::build_feature_request;
use promptprf::index::DenseIndex;
use promptprf::prf::{run_promptprf, FeedbackBundle, FeedbackItem, PrfConfig};
use promptprf::synth::{generate, SynthConfig};
use promptprf::{
    ChatMessage, Corpus, DenseRepresentation, FeatureType, PassageId, PlantedTopicBackend, QueryId,
    Vector,
};
use promptprf_cli::run_from;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

type Check = fn() -> Result<(), String>;
type NdcgFixture<'a> = (Vec<&'a str>, Vec<(&'a str, u32)>, f64);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, Duration, Check); 11] = [
        ("1 prompt fidelity", Duration::from_secs(1), prompt_fidelity),
        (
            "2 refinement prompt structure",
            Duration::from_secs(1),
            refinement_structure,
        ),
        ("3 metric oracle", Duration::from_secs(5), metric_oracle),
        (
            "4 index exactness",
            Duration::from_secs(30),
            index_exactness,
        ),
        (
            "5 depth-0 identity",
            Duration::from_secs(10),
            depth_zero_identity,
        ),
        (
            "6 planted-topic improvement",
            Duration::from_secs(60),
            planted_improvement,
        ),
        (
            "7 rank-ablation direction",
            Duration::from_secs(60),
            rank_ablation,
        ),
        ("8 cost model fixture", Duration::from_secs(1), cost_model),
        (
            "9 offline/online separation",
            Duration::from_secs(10),
            online_separation,
        ),
        (
            "10 end-to-end determinism",
            Duration::from_secs(120),
            determinism,
        ),
        (
            "11 significance machinery",
            Duration::from_secs(1),
            significance,
        ),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if elapsed <= budget {
                Ok(())
            } else {
                Err(format!("took {elapsed:.2?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(()) => println!("PASS  criterion {name} ({elapsed:.2?})"),
            Err(e) => {
                failed += 1;
                println!("FAIL  criterion {name} ({elapsed:.2?}): {e}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ------------------------------------------------------------------ helpers

fn goldens_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/goldens/prompts")
}

fn golden(name: &str) -> serde_json::Value {
    let path = goldens_dir().join(name);
    serde_json::from_str(
        &std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display())),
    )
    .unwrap()
}

fn golden_messages(v: &serde_json::Value) -> Vec<ChatMessage> {
    Vec::<ChatMessage>::deserialize(&v["messages"]).unwrap()
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["promptprf"];
    argv.extend_from_slice(args);
    run_from(argv).map_err(|e| format!("`{}` failed: {e:#}", args.join(" ")))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// synth-corpus + extract (summary) + index under `dir` with the planted backend.
fn prepare(dir: &Path, backend: &str) -> Result<(), String> {
    let data = dir.join("data");
    cli(&["synth-corpus", "--out-dir", s(&data), "--seed", "7"])?;
    let corpus = data.join("corpus.jsonl");
    cli(&[
        "extract",
        "--corpus",
        s(&corpus),
        "--store",
        s(&dir.join("store")),
        "--types",
        "summary",
        "--backend",
        backend,
        "--seed",
        "7",
    ])?;
    cli(&[
        "index",
        "--corpus",
        s(&corpus),
        "--out",
        s(&dir.join("index.bin")),
        "--backend",
        backend,
        "--seed",
        "7",
    ])
}

fn prf_search(dir: &Path, backend: &str, ty: &str, depth: &str, out: &Path) -> Result<(), String> {
    let data = dir.join("data");
    cli(&[
        "prf-search",
        "--index",
        s(&dir.join("index.bin")),
        "--corpus",
        s(&data.join("corpus.jsonl")),
        "--topics",
        s(&data.join("topics.tsv")),
        "--features",
        s(&dir.join("store")),
        "--type",
        ty,
        "--depth",
        depth,
        "--backend",
        backend,
        "--seed",
        "7",
        "--out",
        s(out),
    ])
}

fn search(dir: &Path, backend: &str, out: &Path) -> Result<(), String> {
    cli(&[
        "search",
        "--index",
        s(&dir.join("index.bin")),
        "--topics",
        s(&dir.join("data/topics.tsv")),
        "--backend",
        backend,
        "--seed",
        "7",
        "--out",
        s(out),
    ])
}

fn evaluate(dir: &Path, run: &Path, report: &Path) -> Result<f64, String> {
    cli(&[
        "evaluate",
        "--run",
        s(run),
        "--qrels",
        s(&dir.join("data/qrels.txt")),
        "--report",
        s(report),
    ])?;
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    v["run"]["report"]["mean"]
        .as_f64()
        .ok_or_else(|| "report without mean".to_string())
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

// ------------------------------------------------------------------ criteria

fn prompt_fidelity() -> Result<(), String> {
    let passage = Passage {
        id: PassageId::new("p1").unwrap(),
        text: "Rivers carry sediment to the sea.".into(),
    };
    let mut budgets = 0u64;
    for ft in FeatureType::ALL {
        let g = golden(&format!("feature-{}.json", ft.slug()));
        let req = build_feature_request(ft, &passage, "m");
        ensure!(
            req.messages == golden_messages(&g),
            "{ft} prompt differs from golden"
        );
        let want = g["max_tokens"].as_u64().unwrap();
        ensure!(
            u64::from(req.max_tokens) == want,
            "{ft}: max_tokens {} != {want}",
            req.max_tokens
        );
        budgets += want;
    }
    ensure!(budgets == 2944, "golden budgets sum to {budgets}");
    let contents = [
        "- river: carries sediment",
        "- delta: forms at the mouth",
        "- sea",
    ];
    let bundle = FeedbackBundle::from_items(
        contents
            .iter()
            .enumerate()
            .map(|(i, c)| FeedbackItem {
                rank: i as u32 + 1,
                feature_name: "Entities-COT".into(),
                content: (*c).into(),
            })
            .collect(),
    );
    for (file, aware) in [
        ("refined-rank-aware.json", true),
        ("refined-rank-agnostic.json", false),
    ] {
        let g = golden(file);
        let got = build_refined_prompt(g["query"].as_str().unwrap(), &bundle, aware)
            .map_err(|e| e.to_string())?;
        ensure!(got == golden_messages(&g), "{file} differs");
        ensure!(
            got[0].content == "You are an AI assistant that can understand human language.",
            "system message"
        );
        ensure!(
            got.last().unwrap().content == "The word is \"",
            "assistant prefix"
        );
    }
    Ok(())
}

fn refinement_structure() -> Result<(), String> {
    let synth = generate(&SynthConfig::default()).unwrap();
    let be = PlantedTopicBackend::new(7, 256);
    let reps: Vec<(PassageId, DenseRepresentation)> = synth
        .passages
        .iter()
        .map(|p| (p.id.clone(), encode_passage(&p.text, &be).unwrap()))
        .collect();
    let index = DenseIndex::build(reps).unwrap();
    let corpus = Corpus::new(synth.passages.clone()).unwrap();
    let query = &synth.queries[3];
    for k in [1usize, 3, 5, 10] {
        let aware_cfg = PrfConfig::with_passages(k);
        let agnostic_cfg = PrfConfig {
            rank_aware: false,
            ..aware_cfg.clone()
        };
        let aware = run_promptprf(query, &index, &aware_cfg, &be, &corpus, None)
            .map_err(|e| e.to_string())?;
        let agnostic = run_promptprf(query, &index, &agnostic_cfg, &be, &corpus, None)
            .map_err(|e| e.to_string())?;
        ensure!(
            aware.first_stage == agnostic.first_stage,
            "first stages differ"
        );
        let user = &aware.refined_prompt.as_ref().unwrap()[1].content;
        let lines: Vec<&str> = user
            .lines()
            .filter(|l| l.contains("Retrieved Passage: "))
            .collect();
        ensure!(lines.len() == k, "k={k}: {} feedback lines", lines.len());
        for (i, line) in lines.iter().enumerate() {
            let rank = i + 1;
            let text = &corpus.get(&aware.first_stage[i].passage_id).unwrap().text;
            let want = format!("Passage for top {rank} Retrieved Passage: {text}.");
            ensure!(*line == want, "k={k} line {rank}: {line:?}");
        }
        for r in 1..=k {
            let needle = format!(" top {r} ");
            ensure!(
                user.matches(&needle).count() == 1,
                "rank {r} appears {} times",
                user.matches(&needle).count()
            );
        }
        let mut stripped = user.clone();
        for r in 1..=k {
            stripped = stripped.replacen(&format!(" top {r}"), "", 1);
        }
        let agn = &agnostic.refined_prompt.as_ref().unwrap()[1].content;
        ensure!(
            &stripped == agn,
            "k={k}: agnostic prompt is not the aware prompt minus rank labels"
        );
        ensure!(
            aware.refined_prompt.as_ref().unwrap()[0]
                == agnostic.refined_prompt.as_ref().unwrap()[0],
            "system differs"
        );
    }
    Ok(())
}

fn qid(s: &str) -> QueryId {
    QueryId::new(s).unwrap()
}

fn run_of(q: &str, docs: &[&str]) -> RunFile {
    RunFile::new(
        docs.iter()
            .enumerate()
            .map(|(i, d)| RunEntry {
                query_id: qid(q),
                passage_id: PassageId::new(*d).unwrap(),
                rank: i as u32 + 1,
                score: (docs.len() - i) as f64,
                tag: "t".into(),
            })
            .collect(),
    )
    .unwrap()
}

fn qrels_of(q: &str, rows: &[(&str, u32)]) -> QrelSet {
    let mut set = QrelSet::new();
    for (d, g) in rows {
        set.insert(qid(q), PassageId::new(*d).unwrap(), *g);
    }
    set
}

/// Independent DCG/IDCG recomputation.
fn brute_ndcg(ranking: &[String], judged: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let mut dcg = 0.0;
    for (i, d) in ranking.iter().take(k).enumerate() {
        let rel = judged.get(d).copied().unwrap_or(0);
        dcg += (2f64.powi(rel as i32) - 1.0) / ((i + 2) as f64).log2();
    }
    let mut grades: Vec<u32> = judged.values().copied().collect();
    grades.sort_by(|a, b| b.cmp(a));
    let mut idcg = 0.0;
    for (i, g) in grades.iter().take(k).enumerate() {
        idcg += (2f64.powi(*g as i32) - 1.0) / ((i + 2) as f64).log2();
    }
    (idcg > 0.0).then(|| dcg / idcg)
}

fn metric_oracle() -> Result<(), String> {
    let x: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
    let mut ten_then_r: Vec<&str> = x.iter().map(String::as_str).collect();
    ten_then_r.push("r");
    // Hand-computed expectations.
    let fixtures: Vec<NdcgFixture> = vec![
        (vec!["d1"], vec![("d1", 3)], 1.0),
        (vec!["d2", "d1"], vec![("d1", 3)], 0.63093),
        (
            vec!["d1", "d2", "d3"],
            vec![("d1", 1), ("d2", 1), ("d3", 1)],
            1.0,
        ),
        (vec!["d3", "d2", "d1"], vec![("d1", 2), ("d2", 1)], 0.586883),
        (vec!["a", "b", "c", "d"], vec![("d", 1)], 0.430677),
        (vec!["a", "b"], vec![("a", 1), ("z", 1)], 0.613147),
        (ten_then_r, vec![("r", 2)], 0.0),
        (vec!["r", "x"], vec![("r", 1), ("s", 2)], 0.275412),
        (vec!["a", "b", "c"], vec![("a", 3), ("b", 2), ("c", 1)], 1.0),
        (
            vec!["c", "b", "a"],
            vec![("a", 3), ("b", 2), ("c", 1)],
            0.680606,
        ),
        (vec!["b", "a"], vec![("a", 1), ("b", 0)], 0.63093),
        (
            vec!["n1", "n2", "a", "n3", "b"],
            vec![("a", 2), ("b", 2), ("c", 2)],
            0.416181,
        ),
    ];
    for (i, (docs, rows, want)) in fixtures.iter().enumerate() {
        let r =
            ndcg_at_k(&run_of("q", docs), &qrels_of("q", rows), 10).map_err(|e| e.to_string())?;
        let got = r.per_query[&qid("q")];
        ensure!((got - want).abs() < 1e-5, "fixture {i}: {got} vs {want}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let pool: Vec<String> = (0..rng.gen_range(2..40)).map(|i| format!("d{i}")).collect();
        let mut judged = BTreeMap::new();
        for d in &pool {
            if rng.gen_bool(0.5) {
                judged.insert(d.clone(), rng.gen_range(0..4u32));
            }
        }
        judged.insert(
            pool[rng.gen_range(0..pool.len())].clone(),
            rng.gen_range(1..4u32),
        );
        let mut ranking = pool.clone();
        for i in (1..ranking.len()).rev() {
            ranking.swap(i, rng.gen_range(0..=i));
        }
        ranking.truncate(rng.gen_range(1..=ranking.len()));
        let k = rng.gen_range(1..=15);
        let rows: Vec<(&str, u32)> = judged.iter().map(|(d, g)| (d.as_str(), *g)).collect();
        let names: Vec<&str> = ranking.iter().map(String::as_str).collect();
        let want = brute_ndcg(&ranking, &judged, k).expect("a positive grade was planted");
        let got =
            ndcg_at_k(&run_of("q", &names), &qrels_of("q", &rows), k).map_err(|e| e.to_string())?;
        let got = got.per_query[&qid("q")];
        ensure!(
            (got - want).abs() <= 1e-12,
            "random case {case}: {got} vs {want}"
        );
    }
    Ok(())
}

fn unit(v: Vec<f32>) -> DenseRepresentation {
    DenseRepresentation::normalize(
        Vector::new(v).unwrap(),
        promptprf::encode::RepresentationSource::Passage,
    )
    .unwrap()
}

fn index_exactness() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dir = tempfile::tempdir().unwrap();
    for case in 0..200 {
        let n = rng.gen_range(1..=1000);
        let dim = rng.gen_range(1..=64);
        // Coarse integer components make exact score ties common.
        let draw = |rng: &mut ChaCha8Rng| loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-2i32..=2) as f32).collect();
            if v.iter().any(|&x| x != 0.0) {
                return v;
            }
        };
        let mut ids: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
        let reps: Vec<(PassageId, DenseRepresentation)> = ids
            .iter()
            .map(|i| {
                (
                    PassageId::new(format!("p{i:04}")).unwrap(),
                    unit(draw(&mut rng)),
                )
            })
            .collect();
        let idx = DenseIndex::build(reps).map_err(|e| e.to_string())?;
        let q = unit(draw(&mut rng));
        let k = rng.gen_range(1..=n + 5);

        let mut all: Vec<(f64, String)> = (0..idx.len())
            .map(|pos| {
                let v = idx.vector(pos);
                let dot: f64 = v
                    .iter()
                    .zip(q.as_slice())
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                (dot.clamp(-1.0, 1.0), idx.ids()[pos].to_string())
            })
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        all.truncate(k);
        let got: Vec<(f64, String)> = idx
            .search(&q, k)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|r| (r.score, r.passage_id.to_string()))
            .collect();
        ensure!(
            got == all,
            "case {case}: top-{k} differs from full-sort oracle (n={n}, dim={dim})"
        );

        if case % 10 == 0 {
            let path = dir.path().join(format!("i{case}.bin"));
            idx.save(&path).map_err(|e| e.to_string())?;
            let back = DenseIndex::load(&path).map_err(|e| e.to_string())?;
            ensure!(
                back.to_bytes() == idx.to_bytes(),
                "case {case}: reload not bit-exact"
            );
            ensure!(
                std::fs::read(&path).unwrap() == idx.to_bytes(),
                "case {case}: file bytes differ"
            );
        }
    }
    Ok(())
}

fn depth_zero_identity() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, "planted")?;
    search(d, "planted", &d.join("base.txt"))?;
    prf_search(d, "planted", "summary", "0", &d.join("d0.txt"))?;
    ensure!(
        read(&d.join("base.txt")) == read(&d.join("d0.txt")),
        "depth-0 run differs from the no-feedback run"
    );
    Ok(())
}

fn planted_improvement() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, "planted")?;
    search(d, "planted", &d.join("base.txt"))?;
    prf_search(d, "planted", "summary", "5", &d.join("prompt.txt"))?;
    prf_search(d, "planted", "passage", "5", &d.join("pass.txt"))?;
    let base = evaluate(d, &d.join("base.txt"), &d.join("base.json"))?;
    let prompt = evaluate(d, &d.join("prompt.txt"), &d.join("prompt.json"))?;
    let pass = evaluate(d, &d.join("pass.txt"), &d.join("pass.json"))?;
    println!("      no-PRF {base:.4}, feature PRF {prompt:.4}, passage PRF {pass:.4}");
    ensure!(prompt - base >= 0.05, "gain {:.4} < 0.05", prompt - base);
    ensure!(
        prompt >= pass,
        "feature PRF {prompt:.4} < passage PRF {pass:.4}"
    );
    Ok(())
}

fn rank_ablation() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, "planted-rank")?;
    let data = d.join("data");
    let report = d.join("ablation.json");
    cli(&[
        "ablate-rank",
        "--index",
        s(&d.join("index.bin")),
        "--corpus",
        s(&data.join("corpus.jsonl")),
        "--topics",
        s(&data.join("topics.tsv")),
        "--features",
        s(&d.join("store")),
        "--type",
        "summary",
        "--depth",
        "5",
        "--backend",
        "planted-rank",
        "--seed",
        "7",
        "--qrels",
        s(&data.join("qrels.txt")),
        "--report",
        s(&report),
    ])?;
    let v: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&report)).unwrap()).unwrap();
    let aware = v["rank_aware"]["mean"].as_f64().unwrap();
    let agnostic = v["rank_agnostic"]["mean"].as_f64().unwrap();
    ensure!(
        v["significance"]["p_value"].is_number(),
        "report lacks a significance block"
    );
    println!("      rank-aware {aware:.4}, rank-agnostic {agnostic:.4}");
    ensure!(
        aware >= agnostic,
        "rank-aware {aware:.4} < rank-agnostic {agnostic:.4}"
    );
    Ok(())
}

fn cost_model() -> Result<(), String> {
    let c = grf_cost(&CostModel::default(), &FeatureType::ALL);
    ensure!(c.total_tokens == 2944, "tokens {}", c.total_tokens);
    ensure!(c.latency_ms == 214_912.0, "latency {}", c.latency_ms);
    Ok(())
}

fn call_counts(artifact: &Path) -> (u64, u64) {
    let v = promptprf_cli::provenance::read_sidecar(artifact).unwrap();
    let c = &v["call_counts"];
    (
        c["chat_calls"].as_u64().unwrap(),
        c["embed_calls"].as_u64().unwrap(),
    )
}

fn online_separation() -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, "planted")?;
    let (extract_chat, _) = call_counts(&d.join("store"));
    ensure!(
        extract_chat == 200,
        "offline extraction made {extract_chat} chat calls, expected 200"
    );
    search(d, "planted", &d.join("base.txt"))?;
    prf_search(d, "planted", "summary", "5", &d.join("prf.txt"))?;
    let (chat, embed) = call_counts(&d.join("base.txt"));
    ensure!(
        chat == 0 && embed == 20,
        "search: {chat} chat / {embed} embed calls"
    );
    let (chat, embed) = call_counts(&d.join("prf.txt"));
    ensure!(
        chat == 0 && embed == 40,
        "prf-search: {chat} chat / {embed} embed calls"
    );
    Ok(())
}

fn determinism() -> Result<(), String> {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        prepare(d, "planted")?;
        prf_search(d, "planted", "summary", "5", &d.join("run.txt"))?;
        evaluate(d, &d.join("run.txt"), &d.join("report.json"))?;
        outputs.push((
            read(&d.join("data/corpus.jsonl")),
            read(&d.join("index.bin")),
            read(&d.join("run.txt")),
            read(&d.join("report.json")),
        ));
    }
    ensure!(outputs[0].0 == outputs[1].0, "corpus differs");
    ensure!(outputs[0].1 == outputs[1].1, "index differs");
    ensure!(outputs[0].2 == outputs[1].2, "run files differ");
    ensure!(outputs[0].3 == outputs[1].3, "reports differ");
    Ok(())
}

fn report(values: &[f64]) -> MetricReport {
    let per_query: BTreeMap<QueryId, f64> = values
        .iter()
        .enumerate()
        .map(|(i, v)| (qid(&format!("q{i}")), *v))
        .collect();
    MetricReport {
        metric: "ndcg@10".into(),
        cutoff: 10,
        mean: values.iter().sum::<f64>() / values.len() as f64,
        per_query,
        excluded: vec![],
    }
}

/// Two-sided p for Student's t with 4 degrees of freedom (closed form).
fn p_two_sided_dof4(t: f64) -> f64 {
    let t = t.abs();
    let u = 1.0 + t * t / 4.0;
    let cdf = 0.5 + 0.375 * (t / u.sqrt()) * (1.0 - t * t / (12.0 * u));
    2.0 * (1.0 - cdf)
}

fn significance() -> Result<(), String> {
    let a = report(&[0.3, 0.5, 0.7, 0.2, 0.9]);
    let same = paired_significance(&a, &a).map_err(|e| e.to_string())?;
    ensure!(
        same.p_value == 1.0 && !same.significant,
        "identical reports: p = {}",
        same.p_value
    );

    let diffs = [0.1, 0.12, 0.09, 0.11, 0.10];
    let zero = report(&[0.0; 5]);
    let b = report(&diffs);
    let r = paired_significance(&zero, &b).map_err(|e| e.to_string())?;
    // Oracle: t = sum(d) / sqrt((n sum(d^2) - sum(d)^2) / (n - 1)).
    let n = diffs.len() as f64;
    let sum: f64 = diffs.iter().sum();
    let sum_sq: f64 = diffs.iter().map(|d| d * d).sum();
    let t_oracle = sum / ((n * sum_sq - sum * sum) / (n - 1.0)).sqrt();
    ensure!(
        (r.statistic - t_oracle).abs() < 1e-6,
        "t {} vs oracle {t_oracle}",
        r.statistic
    );
    ensure!((r.statistic - 20.396_078).abs() < 1e-5, "t {}", r.statistic);
    let p_oracle = p_two_sided_dof4(t_oracle);
    ensure!(
        (r.p_value - p_oracle).abs() < 1e-9,
        "p {} vs oracle {p_oracle}",
        r.p_value
    );
    ensure!(r.p_value < 0.001 && r.significant, "p = {}", r.p_value);
    let direct = paired_t_test(&diffs).map_err(|e| e.to_string())?;
    ensure!(
        direct.statistic == r.statistic,
        "direct and report-based t differ"
    );
    Ok(())
}
