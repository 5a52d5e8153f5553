mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sphhn_core::model::{self, edge_attention};
use sphhn_core::train::{self, Ablation};
use sphhn_core::{CausalGraph, Dataset, ModelConfig, ModelParams, PreparedGraph, RunConfig, Splits};

use common::{edge, link, node, random_problem};

fn params_for(ds: &Dataset, cfg: ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(cfg, ds.dim, ds.classes, ds.context_types(), &mut rng).unwrap();
    // Move the temperatures and head bias off their initial values.
    p.log_gamma_temp = 0.3;
    p.log_attn_temp = 1.1;
    p.head_b.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    p.kappa_w.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    p
}

fn mat(m: &sphhn_core::Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m.get(r, c) * v[c]).sum())
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        let mut e1 = vec![0.0; v.len()];
        e1[0] = 1.0;
        return e1;
    }
    v.into_iter().map(|x| x / n).collect()
}

/// Straight-line forward for the 3-node instance below: nodes 0, 1, 2, one
/// hyperedge {0, 1}, one causal link 0 → 2. Node 2 is in no hyperedge.
fn straight_line(ds: &Dataset, p: &ModelParams) -> Vec<Vec<f64>> {
    let x: Vec<&[f64]> = (0..3).map(|i| ds.last_features(i)).collect();
    let mut h: Vec<Vec<f64>> = x
        .iter()
        .map(|xi| {
            let z: Vec<f64> = mat(&p.w, xi).iter().zip(&p.b).map(|(a, b)| a + b).collect();
            unit(z)
        })
        .collect();
    let tau = p.log_attn_temp.exp();
    for _ in 0..p.config.layers {
        let cos01: f64 = h[0].iter().zip(&h[1]).map(|(a, b)| a * b).sum();
        let cos00: f64 = h[0].iter().map(|a| a * a).sum();
        let cos11: f64 = h[1].iter().map(|a| a * a).sum();
        let a00 = 1.0 / (1.0 + (tau * (cos01 - cos00)).exp());
        let a11 = 1.0 / (1.0 + (tau * (cos01 - cos11)).exp());
        let w0 = mat(&p.w_e[0], &h[0]);
        let w1 = mat(&p.w_e[0], &h[1]);
        let m0: Vec<f64> = (0..w0.len()).map(|k| a00 * w0[k] + (1.0 - a00) * w1[k]).collect();
        let m1: Vec<f64> = (0..w0.len()).map(|k| (1.0 - a11) * w0[k] + a11 * w1[k]).collect();
        let relu = |m: Vec<f64>| unit(m.into_iter().map(|v| v.max(0.0)).collect());
        let mut e1 = vec![0.0; w0.len()];
        e1[0] = 1.0;
        h = vec![relu(m0), relu(m1), e1];
    }
    // A single parent takes all of the causal weight.
    let c = mat(&p.w_c, &h[0]);
    h[2] = unit(h[2].iter().zip(&c).map(|(a, b)| a + b).collect());
    h.iter()
        .map(|hi| mat(&p.head_w, hi).iter().zip(&p.head_b).map(|(a, b)| a + b).collect())
        .collect()
}

#[test]
fn forward_matches_straight_line_reimplementation() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = 3;
        let ds = Dataset {
            dim: d,
            timesteps: 1,
            classes: 3,
            horizon: 1,
            nodes: (0..3)
                .map(|i| node(i, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect(),
            hyperedges: vec![edge(0, vec![0, 1], "group")],
            labels: vec![0, 1, 2],
            splits: Splits::default(),
        };
        let graph = CausalGraph { alpha: 0.01, lag: 2, edges: vec![link(0, 2, 7.5)] };
        let cfg = ModelConfig { embed_dim: 4, layers: 2, dropout: 0.0, kappa_init: 5.0, euclidean: false };
        let p = params_for(&ds, cfg, seed);
        let prepared = PreparedGraph::new(&ds, &graph, &p).unwrap();
        let trace = model::forward::<ChaCha8Rng>(&p, &prepared, None);
        let expect = straight_line(&ds, &p);
        for (i, (got, want)) in trace.logits.iter().zip(&expect).enumerate() {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() <= 1e-10, "seed {seed} node {i}: {g} vs {w}");
            }
        }
    }
}

fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // Gram–Schmidt on a Gaussian matrix.
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let s: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= s * y);
        }
        q.push(unit(v));
    }
    q
}

#[test]
fn attention_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let embeds: Vec<Vec<f64>> = (0..5)
        .map(|_| unit((0..d).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();
    let members = [0, 1, 2, 3, 4];
    let base = edge_attention(&members, &embeds, 20.0);
    for _ in 0..10 {
        let q = random_rotation(d, &mut rng);
        let rotated: Vec<Vec<f64>> = embeds
            .iter()
            .map(|h| q.iter().map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum()).collect())
            .collect();
        let alpha = edge_attention(&members, &rotated, 20.0);
        for (a, b) in base.iter().zip(&alpha) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn removing_causal_edges_matches_ablation_path() {
    let (ds, graph) = random_problem(3, 12, 5, 3);
    let p = params_for(&ds, ModelConfig { embed_dim: 6, ..ModelConfig::default() }, 1);
    let with = PreparedGraph::new(&ds, &graph, &p).unwrap();
    let stripped = model::forward::<ChaCha8Rng>(&p, &with.without_causal(), None);
    let empty = PreparedGraph::new(&ds, &CausalGraph::empty(0.01, 2), &p).unwrap();
    let ablated = model::forward::<ChaCha8Rng>(&p, &empty, None);
    assert_eq!(stripped.logits, ablated.logits);
    let full = model::forward::<ChaCha8Rng>(&p, &with, None);
    assert_ne!(full.logits, ablated.logits);

    let mut split = ds.clone();
    split.splits = Splits { train: (0..8).collect(), val: (8..12).collect(), test: vec![] };
    let mut run = RunConfig::default();
    run.model.embed_dim = 6;
    run.train.max_epochs = 5;
    run.ablation = Ablation { no_causal: true, pairwise: false };
    let a = train::train(&split, &graph, &run).unwrap();
    let b = train::train(&split, &CausalGraph::empty(0.01, 2), &run).unwrap();
    assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json());
}

#[test]
fn outputs_are_normalized() {
    for seed in 0..10 {
        let (ds, graph) = random_problem(seed, 15, 4, 3);
        let p = params_for(&ds, ModelConfig { embed_dim: 5, ..ModelConfig::default() }, seed);
        let prepared = PreparedGraph::new(&ds, &graph, &p).unwrap();
        let trace = model::forward::<ChaCha8Rng>(&p, &prepared, None);
        for h in trace.layers.iter().flatten().chain(&trace.final_embeddings) {
            let n: f64 = h.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        for row in &trace.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
