use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use densefield_bench::{models, pack};
use densefield_core::field::DEFAULT_CLAMP_FLOOR;
use densefield_core::quantizer::lloyd_max_default;
use densefield_core::rates::{centralized_rate, find_pmax, DEFAULT_PMAX_REL_TOL};
use densefield_core::sim::simulate_dsc;
use densefield_core::{covariance_matrix, optimize_k, sensor_positions};

fn eigendecomposition(c: &mut Criterion) {
    let mut g = c.benchmark_group("covariance");
    for (name, model) in models() {
        for n in [64, 256] {
            let grid = sensor_positions(n).unwrap();
            g.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| covariance_matrix(&model, black_box(&grid), DEFAULT_CLAMP_FLOOR).unwrap())
            });
        }
    }
    g.finish();
}

fn rate_solvers(c: &mut Criterion) {
    let mut g = c.benchmark_group("rates");
    for (name, model) in models() {
        let cov = pack(&model, 256);
        g.bench_function(BenchmarkId::new("find_pmax", name), |b| {
            b.iter(|| find_pmax(&cov, black_box(0.08), DEFAULT_PMAX_REL_TOL).unwrap())
        });
        g.bench_function(BenchmarkId::new("waterfill", name), |b| {
            b.iter(|| centralized_rate(&cov, black_box(0.15)).unwrap())
        });
        g.bench_function(BenchmarkId::new("optimize_k", name), |b| {
            b.iter(|| optimize_k(&model, black_box(0.1), None).unwrap())
        });
    }
    g.finish();
}

fn quantizer(c: &mut Criterion) {
    let mut g = c.benchmark_group("lloyd_max");
    for levels in [4, 16, 64] {
        g.bench_with_input(BenchmarkId::from_parameter(levels), &levels, |b, &l| {
            b.iter(|| lloyd_max_default(black_box(l)).unwrap())
        });
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate_dsc");
    g.sample_size(10);
    for (name, model) in models() {
        g.bench_function(name, |b| b.iter(|| simulate_dsc(&model, 32, 0.5, 2000, 8, black_box(1)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, eigendecomposition, rate_solvers, quantizer, monte_carlo);
criterion_main!(benches);
