//! Direction checks on the planted-topic corpus across several seeds.

use promptprf::encode::encode_passage;
use promptprf::eval::ndcg_at_k;
use promptprf::features::{run_extraction_job, JobOptions};
use promptprf::prf::{run_batch, run_dense_baseline, BatchOptions};
use promptprf::synth::{generate, SynthConfig};
use promptprf::*;

struct Setup {
    corpus: Corpus,
    queries: Vec<Query>,
    qrels: QrelSet,
    index: DenseIndex,
    store: FeatureStore,
    _dir: tempfile::TempDir,
}

fn setup(seed: u64, be: &PlantedTopicBackend) -> Setup {
    let synth = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let reps = synth
        .passages
        .iter()
        .map(|p| (p.id.clone(), encode_passage(&p.text, be).unwrap()))
        .collect();
    let index = DenseIndex::build(reps).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut store = FeatureStore::open(dir.path()).unwrap();
    let summary = run_extraction_job(
        &synth.passages,
        &[FeatureType::Summary],
        be,
        &mut store,
        &JobOptions::new("planted"),
    )
    .unwrap();
    assert!(summary.is_success());
    Setup {
        corpus: Corpus::new(synth.passages).unwrap(),
        queries: synth.queries,
        qrels: synth.qrels,
        index,
        store,
        _dir: dir,
    }
}

fn mean_ndcg(s: &Setup, cfg: Option<&PrfConfig>, be: &PlantedTopicBackend) -> f64 {
    let opts = BatchOptions::new("planted");
    let out = match cfg {
        None => run_dense_baseline(&s.queries, &s.index, 1000, be, &opts).unwrap(),
        Some(c) => run_batch(
            &s.queries,
            &s.index,
            c,
            be,
            &s.corpus,
            Some(&s.store),
            &opts,
        )
        .unwrap(),
    };
    ndcg_at_k(&out.run, &s.qrels, 10).unwrap().mean
}

fn summary_prf() -> PrfConfig {
    PrfConfig::with_features(5, FeatureType::Summary, "planted")
}

#[test]
fn feature_feedback_beats_baseline_and_raw_text() {
    for seed in [1u64, 2, 3, 7] {
        let be = PlantedTopicBackend::new(seed, 256);
        let s = setup(seed, &be);
        let base = mean_ndcg(&s, None, &be);
        let prompt = mean_ndcg(&s, Some(&summary_prf()), &be);
        let pass = mean_ndcg(&s, Some(&PrfConfig::with_passages(5)), &be);
        assert!(prompt > base, "seed {seed}: {prompt} vs {base}");
        assert!(prompt >= pass, "seed {seed}: {prompt} vs {pass}");
    }
}

#[test]
fn rank_labels_help_under_rank_sensitive_noise() {
    for seed in [1u64, 2, 3, 7] {
        let be =
            PlantedTopicBackend::new(seed, 256).with_rank_sensitivity(RankSensitivity::default());
        let s = setup(seed, &be);
        let aware = mean_ndcg(&s, Some(&summary_prf()), &be);
        let agnostic = mean_ndcg(
            &s,
            Some(&PrfConfig {
                rank_aware: false,
                ..summary_prf()
            }),
            &be,
        );
        assert!(aware >= agnostic, "seed {seed}: {aware} vs {agnostic}");
    }
}
