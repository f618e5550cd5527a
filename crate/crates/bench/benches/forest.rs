use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gforest::data::apply_mcar;
use gforest::evaluator::{sinkhorn_ot, FeatureStats, OtOptions};
use gforest::imputer::impute_dataset;
use gforest::sampler::generate;
use gforest::{train, Ordering, TrainConfig};
use gforest_bench::{domain, trained};

fn training(c: &mut Criterion) {
    let data = domain("ringGauss");
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    for (trees, splits) in [(1, 50), (10, 200)] {
        g.bench_function(format!("ringGauss T={trees} J={splits}"), |b| {
            b.iter_batched(|| data.clone(), |d| train(d, &TrainConfig::new(trees, splits)).unwrap(), BatchSize::LargeInput)
        });
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let gf = trained("ringGauss", 10, 200);
    let eogt = gf.to_eogt().unwrap();
    let mut g = c.benchmark_group("generate 1000");
    g.bench_function("gf iterative", |b| b.iter(|| generate(&gf, 1000, 7, Ordering::Iterative).unwrap()));
    g.bench_function("gf randomized", |b| b.iter(|| generate(&gf, 1000, 7, Ordering::Randomized).unwrap()));
    g.bench_function("eogt", |b| b.iter(|| generate(&eogt, 1000, 7, Ordering::Iterative).unwrap()));
    g.finish();
}

fn partition(c: &mut Criterion) {
    let gf = trained("circGauss", 5, 60);
    c.bench_function("enumerate partition circGauss T=5 J=60", |b| {
        b.iter(|| black_box(gf.enumerate_partition(1 << 22).unwrap().len()))
    });
}

fn imputation(c: &mut Criterion) {
    let gf = trained("gridGauss", 10, 100);
    let (masked, _) = apply_mcar(&domain("gridGauss"), 0.1, 3).unwrap();
    let mut g = c.benchmark_group("impute");
    g.sample_size(10);
    g.bench_function("gridGauss 10% MCAR", |b| b.iter(|| impute_dataset(&gf, &masked, 1).unwrap()));
    g.finish();
}

fn transport(c: &mut Criterion) {
    let data = domain("ringGauss");
    let a = data.subset(&(0..500).collect::<Vec<_>>());
    let b2 = data.subset(&(500..1000).collect::<Vec<_>>());
    let stats = FeatureStats::from_dataset(&data);
    let opts = OtOptions::default();
    let mut g = c.benchmark_group("sinkhorn");
    g.sample_size(10);
    g.bench_function("500 x 500", |b| b.iter(|| sinkhorn_ot(&a, &b2, &stats, &opts).unwrap()));
    g.finish();
}

criterion_group!(benches, training, sampling, partition, imputation, transport);
criterion_main!(benches);
