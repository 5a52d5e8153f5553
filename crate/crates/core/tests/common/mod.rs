#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphhn_core::{CausalEdge, CausalGraph, Dataset, Hyperedge, Matrix, NodeFeatureSeries, Splits};

pub fn node(i: usize, x: Vec<f64>) -> NodeFeatureSeries {
    let d = x.len();
    NodeFeatureSeries {
        id: format!("v{i}"),
        features: Matrix::from_vec(1, d, x).unwrap(),
    }
}

pub fn edge(id: usize, members: Vec<usize>, ctx: &str) -> Hyperedge {
    Hyperedge {
        id: format!("e{id}"),
        members,
        context_type: ctx.into(),
    }
}

pub fn link(src: usize, dst: usize, f: f64) -> CausalEdge {
    CausalEdge {
        src: format!("v{src}"),
        dst: format!("v{dst}"),
        f,
        p: 0.001,
    }
}

/// Random features, random hyperedges of size 2..=4 over two context
/// types, a few random causal links; every node is in the train split.
pub fn random_problem(seed: u64, n: usize, d: usize, classes: usize) -> (Dataset, CausalGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..n)
        .map(|i| node(i, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let mut hyperedges = Vec::new();
    for e in 0..n {
        let k = rng.random_range(2..=4.min(n));
        let mut members: Vec<usize> = Vec::new();
        while members.len() < k {
            let v = rng.random_range(0..n);
            if !members.contains(&v) {
                members.push(v);
            }
        }
        members.sort_unstable();
        hyperedges.push(edge(e, members, if e % 2 == 0 { "a" } else { "b" }));
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut edges = Vec::new();
    for _ in 0..n / 2 {
        let (s, t) = (rng.random_range(0..n), rng.random_range(0..n));
        if s != t && !edges.iter().any(|e: &CausalEdge| e.src == format!("v{s}") && e.dst == format!("v{t}")) {
            edges.push(link(s, t, rng.random_range(4.0..20.0)));
        }
    }
    let ds = Dataset {
        dim: d,
        timesteps: 1,
        classes,
        horizon: 1,
        nodes,
        hyperedges,
        labels,
        splits: Splits {
            train: (0..n).collect(),
            ..Default::default()
        },
    };
    let graph = CausalGraph {
        alpha: 0.01,
        lag: 2,
        edges,
    };
    (ds, graph)
}
