use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tcan::pipeline::{
    build_index, generate_synthetic_corpus, retrieve, retrieve_exhaustive, SyntheticConfig, VideoTable,
};
use tcan::scoring::cross_similarity;
use tcan::tree::BuildConfig;
use tcan::{AttentionLayerParams, HiddenSequence, ModelConfig, ModelParams, Tensor, TokenRole};

fn bench_cross_similarity(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("cross_similarity");
    for d in [16, 64, 256] {
        let q = Tensor::uniform(d, 8, 1.0, &mut rng);
        let v = Tensor::uniform(d, 24, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| cross_similarity(black_box(&q), black_box(&v)).unwrap())
        });
    }
    group.finish();
}

fn bench_attention_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("attention_forward");
    for (d, heads) in [(16, 2), (64, 4), (256, 8)] {
        let layer = AttentionLayerParams::init(d, heads, &mut rng).unwrap();
        let tokens = Tensor::uniform(d, 16, 1.0, &mut rng);
        let seq = HiddenSequence::new(tokens, vec![TokenRole::TitleWord; 16]).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| layer.forward(black_box(&seq), false).unwrap())
        });
    }
    group.finish();
}

fn bench_beam_vs_exhaustive(c: &mut Criterion) {
    let corpus = generate_synthetic_corpus(&SyntheticConfig {
        clusters: 32,
        per_cluster: 32,
        noise: 0.3,
        ..Default::default()
    })
    .unwrap();
    let params = ModelParams::init(ModelConfig::desk_scale(), 0).unwrap();
    let videos = VideoTable::from_corpus(&corpus).unwrap();
    let tree = build_index(&params, videos.features(), None, &BuildConfig::default()).unwrap();
    let query = &corpus.records()[0].queries[0].features;
    let mut scorer = params.scorer();

    let mut group = c.benchmark_group("retrieve_1024");
    group.sample_size(20);
    for beam in [1, 4, 16] {
        group.bench_with_input(BenchmarkId::new("beam", beam), &beam, |b, &k| {
            b.iter(|| retrieve(&mut scorer, &tree, &videos, black_box(query), k).unwrap())
        });
    }
    group.bench_function("exhaustive", |b| {
        b.iter(|| retrieve_exhaustive(&mut scorer, &videos, black_box(query), 16).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_cross_similarity,
    bench_attention_forward,
    bench_beam_vs_exhaustive
);
criterion_main!(benches);
