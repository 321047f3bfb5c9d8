use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dpar_core::ar::{ar1_loglik, mean_shift_loglik, ArParams, MeanShiftScale};
use dpar_core::dense::{ar1_loglik_dense, mean_shift_loglik_dense};
use dpar_core::panel::ObservedSeries;
use dpar_core::rng::rng_from;
use dpar_core::simulation::simulate_ar1;
use std::hint::black_box;

fn likelihoods(c: &mut Criterion) {
    let theta = ArParams::new(0.6, 0.3).unwrap();
    let scale = MeanShiftScale::new(1.0).unwrap();
    let mut g = c.benchmark_group("ar1_loglik");
    for t in [10usize, 40, 160] {
        let y = simulate_ar1(&theta, t, &mut rng_from(t as u64));
        let s = ObservedSeries::contiguous("b", y).unwrap();
        g.bench_with_input(BenchmarkId::new("fast", t), &s, |b, s| b.iter(|| ar1_loglik(black_box(s.view()), &theta)));
        g.bench_with_input(BenchmarkId::new("dense", t), &s, |b, s| {
            b.iter(|| ar1_loglik_dense(black_box(s.view()), &theta).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("mean_shift_fast", t), &s, |b, s| {
            b.iter(|| mean_shift_loglik(black_box(s.view()), &theta, scale))
        });
        g.bench_with_input(BenchmarkId::new("mean_shift_dense", t), &s, |b, s| {
            b.iter(|| mean_shift_loglik_dense(black_box(s.view()), &theta, scale).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, likelihoods);
criterion_main!(benches);
