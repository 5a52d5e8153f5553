use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphhn_core::granger::infer_from_dataset;
use sphhn_core::model;
use sphhn_core::synth;
use sphhn_core::train::{gradients, TrainConfig};
use sphhn_core::{FeatureReduction, GrangerConfig, ModelConfig, ModelParams, PreparedGraph};

fn forward_backward(c: &mut Criterion) {
    let (ds, _) = synth::generate(&synth::preset("toy").unwrap()).unwrap();
    let causal = infer_from_dataset(&ds, &GrangerConfig::default(), FeatureReduction::Pca1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = ModelParams::init(ModelConfig::default(), ds.dim, ds.classes, ds.context_types(), &mut rng).unwrap();
    let graph = PreparedGraph::new(&ds, &causal, &params).unwrap();
    let cfg = TrainConfig::default();
    let batch = ds.splits.train.clone();

    c.bench_function("forward_toy", |b| b.iter(|| model::forward::<ChaCha8Rng>(&params, &graph, None)));
    c.bench_function("forward_backward_toy", |b| {
        b.iter(|| {
            let mut drop = ChaCha8Rng::seed_from_u64(1);
            gradients(&params, &graph, &ds.labels, &batch, &cfg, Some(&mut drop)).unwrap()
        })
    });
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
