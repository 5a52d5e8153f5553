use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphhn_core::granger::granger_test;
use sphhn_core::synth::{self, SynthConfig};
use sphhn_core::{FeatureReduction, GrangerConfig};

fn pair(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..500).map(|t| if t > 0 { 0.8 * x[t - 1] } else { 0.0 } + rng.random_range(-1.0..1.0)).collect();
    let cfg = GrangerConfig::default();
    c.bench_function("granger_test_t500", |b| b.iter(|| granger_test(black_box(&x), black_box(&y), &cfg)));
}

fn graph(c: &mut Criterion) {
    let cfg = SynthConfig { n_nodes: 60, ..synth::preset("toy").unwrap() };
    let (ds, _) = synth::generate(&cfg).unwrap();
    let gc = GrangerConfig::default();
    c.bench_function("infer_graph_60_nodes", |b| {
        b.iter(|| sphhn_core::granger::infer_from_dataset(&ds, &gc, FeatureReduction::Pca1).unwrap())
    });
}

criterion_group!(benches, pair, graph);
criterion_main!(benches);
