use adversarial_news::backends::{EmbeddingBackend, StubEmbedding, StubEmbeddingSettings};
use adversarial_news::corpus::{self, CorpusStore};
use adversarial_news::retrieval::{self, Metric};
use adversarial_news::{Article, Exec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "council", "budget", "mayor", "river", "bridge", "school", "hospital", "election", "vote", "farm", "harvest",
    "port", "traffic", "court", "judge", "fire", "park", "library", "tax", "bill", "police", "festival", "water",
];

fn store(n: usize) -> CorpusStore {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    CorpusStore::from_articles((0..n).map(|i| {
        let len = rng.random_range(20..60);
        let text = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" ");
        Article::new(format!("a{i:05}"), text)
    }))
    .unwrap()
}

const MODES: [(&str, Exec); 2] = [("Sequential", Exec::Sequential), ("Parallel", Exec::Parallel)];

fn bench_index(c: &mut Criterion) {
    let emb = StubEmbedding::new(StubEmbeddingSettings { dimension: 128, ..Default::default() });
    let mut group = c.benchmark_group("build_index");
    for n in [500, 2000] {
        let s = store(n);
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &s, |b, s| {
                b.iter(|| retrieval::build_index_with(s, &emb, Metric::Cosine, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_search(c: &mut Criterion) {
    let emb = StubEmbedding::new(StubEmbeddingSettings { dimension: 128, ..Default::default() });
    let mut group = c.benchmark_group("search");
    for n in [2000, 10000] {
        let index = retrieval::build_index(&store(n), &emb, Metric::InnerProduct).unwrap();
        let q = emb.embed_query("council budget vote").unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &index, |b, idx| b.iter(|| idx.search(&q, 5, exec).unwrap()));
        }
    }
    group.finish();
}

fn bench_dedup(c: &mut Criterion) {
    let mut group = c.benchmark_group("deduplicate");
    group.sample_size(10);
    for n in [200, 800] {
        let s = store(n);
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &s, |b, s| {
                b.iter(|| corpus::deduplicate_with(s.clone(), 3, 0.9, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_index, bench_search, bench_dedup);
criterion_main!(benches);
