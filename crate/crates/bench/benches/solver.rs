//! Closed-form output-layer training: Gram build, Cholesky, and the full
//! primal/dual solve.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lbcnn_bench::random_dataset;
use lbcnn_core::linalg::{cholesky_in_place, gram_cols};
use lbcnn_core::rng::SplitMix64;
use lbcnn_core::search::generate_kernels;
use lbcnn_core::solver::{solve_output_weights, FeatureMatrix, OneHotTargets, SolverConfig};
use lbcnn_core::tensor::{feature_expand, Architecture};
use ndarray::Array2;

fn random_features(n_samples: usize, n_features: usize, seed: u64) -> FeatureMatrix {
    let mut rng = SplitMix64::new(seed);
    let m = Array2::from_shape_fn((n_samples, n_features), |_| {
        rng.next_below(1000) as f32 / 500.0 - 1.0
    });
    FeatureMatrix::new(m).unwrap()
}

fn bench_gram(c: &mut Criterion) {
    let h = random_features(2048, 512, 1);
    c.bench_function("gram_cols_512x2048", |b| {
        b.iter(|| gram_cols(h.values().view()))
    });
}

fn bench_cholesky(c: &mut Criterion) {
    let h = random_features(2048, 512, 2);
    let mut g = gram_cols(h.values().view());
    for i in 0..512 {
        g[(i, i)] += 1.0;
    }
    c.bench_function("cholesky_512", |b| {
        b.iter_batched(
            || g.clone(),
            |mut a| cholesky_in_place(&mut a).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

fn bench_solve_branches(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_output_weights");
    g.sample_size(10);
    let cfg = SolverConfig::default();
    // Primal: fewer features than samples; dual: the reverse.
    for (name, n_s, n_f) in [("primal_1024x384", 1024usize, 384usize), ("dual_256x1024", 256, 1024)] {
        let h = random_features(n_s, n_f, 3);
        let mut rng = SplitMix64::new(4);
        let labels: Vec<usize> = (0..n_s).map(|_| rng.next_below(10) as usize).collect();
        let y = OneHotTargets::from_labels(&labels, 10).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(name), &name, |b, _| {
            b.iter(|| solve_output_weights(&h, &y, &cfg).unwrap())
        });
    }
    g.finish();
}

fn bench_end_to_end_trial(c: &mut Criterion) {
    let arch = Architecture::new((28, 28, 1), vec![8, 8], 10).unwrap();
    let ds = random_dataset(512, &arch, 5);
    let kernels = generate_kernels(&arch, 6);
    let cfg = SolverConfig::default();
    let mut g = c.benchmark_group("trial_512_samples_8x8");
    g.sample_size(10);
    g.bench_function("expand_plus_solve", |b| {
        b.iter(|| {
            let h = feature_expand(&ds.images, &arch, &kernels).unwrap();
            let y = OneHotTargets::from_labels(&ds.labels, 10).unwrap();
            solve_output_weights(&h, &y, &cfg).unwrap()
        })
    });
    g.finish();
}

criterion_group!(
    benches,
    bench_gram,
    bench_cholesky,
    bench_solve_branches,
    bench_end_to_end_trial
);
criterion_main!(benches);
