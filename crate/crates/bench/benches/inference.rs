use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use txforce::gp::{log_marginal_likelihood, posterior_predict};
use txforce::train::{fit_patient, nll_and_gradient, FitConfig, Schema};
use txforce::ForceConvention;
use txforce_bench::benchmark_patient;

fn likelihood(c: &mut Criterion) {
    let (model, series, _) = benchmark_patient();
    c.bench_function("log_marginal_likelihood/2x60", |b| {
        b.iter(|| log_marginal_likelihood(black_box(&model), &series).unwrap())
    });
    let schema = Schema::for_model(&model);
    let x = schema.unconstrain(&model).unwrap().values;
    c.bench_function("nll_and_gradient/2x60", |b| {
        b.iter(|| nll_and_gradient(&schema, black_box(&x), &series).unwrap())
    });
    let query: Vec<f64> = (0..200).map(|k| k as f64 * 0.36).collect();
    c.bench_function("posterior_predict/200", |b| {
        b.iter(|| posterior_predict(&model, &series, 0, black_box(&query), false).unwrap())
    });
}

fn fitting(c: &mut Criterion) {
    let (_, _, record) = benchmark_patient();
    let config = FitConfig {
        restarts: 1,
        convention: ForceConvention::Zeroed,
        parallel: false,
        ..FitConfig::default()
    };
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("fit_patient/one_restart", |b| b.iter(|| fit_patient(black_box(&record), &config).unwrap()));
    group.finish();
}

criterion_group!(benches, likelihood, fitting);
criterion_main!(benches);
