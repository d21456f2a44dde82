use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use promptprf::corpus::{Passage, PassageId, QrelSet, QueryId, RunEntry, RunFile};
use promptprf::encode::{build_refined_prompt, RepresentationSource};
use promptprf::eval::ndcg_at_k;
use promptprf::index::DenseIndex;
use promptprf::prf::{FeedbackBundle, FeedbackItem};
use promptprf::sparse::{bm25_rm3_search, Bm25Params, InvertedIndex, Rm3Config};
use promptprf::synth::{generate, SynthConfig};
use promptprf::{DenseRepresentation, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rep(rng: &mut ChaCha8Rng, dim: usize) -> DenseRepresentation {
    let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    DenseRepresentation::normalize(Vector::new(v).unwrap(), RepresentationSource::Passage).unwrap()
}

fn dense_search(c: &mut Criterion) {
    let mut group = c.benchmark_group("dense_search");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [1_000usize, 10_000] {
        let dim = 256;
        let reps = (0..n)
            .map(|i| {
                (
                    PassageId::new(format!("p{i:06}")).unwrap(),
                    random_rep(&mut rng, dim),
                )
            })
            .collect();
        let index = DenseIndex::build(reps).unwrap();
        let query = random_rep(&mut rng, dim);
        group.bench_with_input(BenchmarkId::new("top1000", n), &n, |b, _| {
            b.iter(|| index.search(black_box(&query), 1000).unwrap())
        });
    }
    group.finish();
}

fn ndcg(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut entries = Vec::new();
    let mut qrels = QrelSet::new();
    for q in 0..100 {
        let qid = QueryId::new(format!("q{q}")).unwrap();
        for r in 0..1000u32 {
            let pid = PassageId::new(format!("d{r}")).unwrap();
            if rng.gen_bool(0.02) {
                qrels.insert(qid.clone(), pid.clone(), rng.gen_range(1..4));
            }
            entries.push(RunEntry {
                query_id: qid.clone(),
                passage_id: pid,
                rank: r + 1,
                score: -f64::from(r),
                tag: "b".into(),
            });
        }
        qrels.insert(qid, PassageId::new("d0").unwrap(), 1);
    }
    let run = RunFile::new(entries).unwrap();
    c.bench_function("ndcg@10 100 queries x 1000", |b| {
        b.iter(|| ndcg_at_k(black_box(&run), &qrels, 10).unwrap())
    });
}

fn sparse(c: &mut Criterion) {
    let synth = generate(&SynthConfig {
        passages: 2000,
        ..SynthConfig::default()
    })
    .unwrap();
    let index = InvertedIndex::build(&synth.passages).unwrap();
    let query = &synth.queries[0].text;
    c.bench_function("bm25 top1000 2000 docs", |b| {
        b.iter(|| index.search(black_box(query), 1000, Bm25Params::default()))
    });
    c.bench_function("bm25+rm3 top1000 2000 docs", |b| {
        b.iter(|| {
            bm25_rm3_search(
                &index,
                black_box(query),
                1000,
                Bm25Params::default(),
                &Rm3Config::default(),
            )
            .unwrap()
        })
    });
}

fn prompts(c: &mut Criterion) {
    let passage = Passage {
        id: PassageId::new("p").unwrap(),
        text: "word ".repeat(120),
    };
    let bundle = FeedbackBundle::from_items(
        (1..=10)
            .map(|rank| FeedbackItem {
                rank,
                feature_name: "Summary".into(),
                content: passage.text.clone(),
            })
            .collect(),
    );
    c.bench_function("refined prompt depth 10", |b| {
        b.iter(|| {
            build_refined_prompt(black_box("how do rivers shape coastlines"), &bundle, true)
                .unwrap()
        })
    });
}

criterion_group!(benches, dense_search, ndcg, sparse, prompts);
criterion_main!(benches);
