//! Criterion benchmarks: primitive kernels and one layer's forward+backward
//! under each stochastic estimator.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use varigrad::{EstimatorMode, Matrix, RngStream};
use varigrad_bench::square_layer_fixture;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for k in [64usize, 256] {
        let mut rng = RngStream::new(7, 0);
        let a = Matrix::from_fn(128, k, |_, _| rng.next_uniform());
        let b = Matrix::from_fn(k, k, |_, _| rng.next_uniform());
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()));
        });
    }
    group.finish();
}

fn bench_normal_sampling(c: &mut Criterion) {
    c.bench_function("normal_draws_100k", |bench| {
        let mut rng = RngStream::new(11, 0);
        bench.iter(|| {
            let mut acc = 0.0;
            for _ in 0..100_000 {
                acc += rng.next_normal();
            }
            black_box(acc)
        });
    });
}

fn bench_layer_modes(c: &mut Criterion) {
    let m = 128;
    let k = 128;
    let (layer, input) = square_layer_fixture(k, m, 21);
    let ones = Matrix::filled(m, k, 1.0);
    let mut group = c.benchmark_group("layer_forward_backward");
    for mode in [
        EstimatorMode::NoNoise,
        EstimatorMode::LocalReparam,
        EstimatorMode::WeightPerMinibatch,
        EstimatorMode::WeightPerDatapoint,
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(mode.label()), &mode, |bench, &mode| {
            let mut rng = RngStream::new(22, 0);
            bench.iter(|| {
                let (_, cache) = layer.forward(&input, mode, &mut rng).unwrap();
                black_box(layer.backward(&cache, &ones).unwrap())
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_normal_sampling, bench_layer_modes);
criterion_main!(benches);
