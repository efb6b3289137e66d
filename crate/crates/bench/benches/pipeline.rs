use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use aomd_bench::{caption_tokens, forward_fixture};
use aomd_core::cluster::{cluster_tokens, ClusterConfig};

fn bench_cluster_tokens(c: &mut Criterion) {
    let config = ClusterConfig::default();
    let mut group = c.benchmark_group("cluster_tokens");
    for n in [10, 50, 200] {
        let tokens = caption_tokens(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &tokens, |b, t| {
            b.iter(|| cluster_tokens(black_box(t), &config))
        });
    }
    group.finish();
}

fn bench_forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    for d in [32, 100] {
        let f = forward_fixture(d);
        group.bench_with_input(BenchmarkId::new("forward", d), &f, |b, f| {
            b.iter(|| f.model.predict(&f.store, black_box(&f.post)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", d), &f, |b, f| {
            b.iter(|| {
                f.model
                    .loss_and_grads(&f.store, black_box(&f.post), 1.0)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_cluster_tokens, bench_forward_backward);
criterion_main!(benches);
