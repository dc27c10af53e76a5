use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfdpm::{best_f1_search, ExtractorKind, SamplerNoise, SchedulerNet, Tfdpm};
use tfdpm_bench::{model, windows};

const DIM: usize = 12;

fn extractors(c: &mut Criterion) {
    let mut g = c.benchmark_group("features");
    let (h, _) = windows(64, 12, DIM, 1);
    for kind in [ExtractorKind::Gru, ExtractorKind::TcnGat, ExtractorKind::DoubleGat] {
        let m = model(kind, DIM);
        g.bench_with_input(BenchmarkId::from_parameter(kind), &h, |b, h| {
            b.iter(|| m.features(black_box(h)).unwrap())
        });
    }
    g.finish();
}

fn eps_network(c: &mut Criterion) {
    let m = model(ExtractorKind::TcnGat, DIM);
    let (h, x) = windows(64, 12, DIM, 2);
    let f = m.features(&h).unwrap();
    let levels = vec![0.5; 64];
    c.bench_function("eps_forward_64", |b| {
        b.iter(|| m.predict_eps(black_box(&x), &levels, &f).unwrap())
    });
}

fn samplers(c: &mut Criterion) {
    let m = model(ExtractorKind::TcnGat, DIM);
    let (h, _) = windows(8, 12, DIM, 3);
    let f = m.features(&h).unwrap();
    let mut sched = SchedulerNet::for_model(&m).unwrap();
    sched.init_alpha_bar = 0.7;
    sched.init_beta = 0.1;
    let rngs = || (0..8).map(|t| Tfdpm::row_rng(0, t, 0)).collect::<Vec<_>>();
    let mut g = c.benchmark_group("sample_8_rows");
    g.sample_size(10);
    g.bench_function("full", |b| {
        b.iter(|| m.sample_full(&f, &mut rngs(), SamplerNoise::Gaussian).unwrap())
    });
    g.bench_function("fast", |b| {
        b.iter(|| sched.fast_sample(&m, &f, &mut rngs(), SamplerNoise::Gaussian).unwrap())
    });
    g.finish();
}

fn threshold_search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scores: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..2000).map(|t| u8::from((t / 100) % 5 == 0)).collect();
    c.bench_function("best_f1_search_2000", |b| {
        b.iter(|| best_f1_search(black_box(&scores), &labels).unwrap())
    });
}

criterion_group!(benches, extractors, eps_network, samplers, threshold_search);
criterion_main!(benches);
