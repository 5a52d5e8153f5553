//! Finite-difference verification of [`crate::model::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::granger::{CausalEdge, CausalGraph};
use crate::hypergraph::{Dataset, Hyperedge, NodeFeatureSeries, Splits};
use crate::linalg::Matrix;
use crate::model::{ModelConfig, ModelParams, PreparedGraph};
use crate::train::{self, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub euclidean: bool,
    /// Perturbs the analytic gradient before comparison (negative control).
    pub corrupt: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub groups: Vec<GroupReport>,
}

/// The fixed tiny problem: 6 nodes, 4 features, 4-dimensional embeddings,
/// one 5-member hyperedge, node 5 outside it and fed by two causal parents,
/// node 3 fed by one.
pub fn tiny_problem(seed: u64, euclidean: bool) -> (Dataset, CausalGraph, ModelParams, TrainConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (6, 4);
    let nodes = (0..n)
        .map(|i| NodeFeatureSeries {
            id: format!("v{i}"),
            features: Matrix::from_vec(1, d, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .expect("finite"),
        })
        .collect();
    let ds = Dataset {
        dim: d,
        timesteps: 1,
        classes: 2,
        horizon: 1,
        nodes,
        hyperedges: vec![Hyperedge {
            id: "e0".into(),
            members: vec![0, 1, 2, 3, 4],
            context_type: "group".into(),
        }],
        labels: vec![0, 1, 1, 0, 1, 0],
        splits: Splits {
            train: (0..n).collect(),
            ..Default::default()
        },
    };
    let edge = |s: &str, t: &str, f: f64| CausalEdge {
        src: s.into(),
        dst: t.into(),
        f,
        p: 0.001,
    };
    let causal = CausalGraph {
        alpha: 0.01,
        lag: 2,
        edges: vec![edge("v0", "v5", 6.0), edge("v1", "v5", 3.5), edge("v2", "v3", 8.0)],
    };
    let cfg = ModelConfig {
        embed_dim: 4,
        layers: 2,
        dropout: 0.0,
        kappa_init: 3.0,
        euclidean,
    };
    let mut params =
        ModelParams::init(cfg, d, 2, vec!["group".into()], &mut rng).expect("valid config");
    // Move every tensor away from its structured initial value.
    for (_, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    params.log_attn_temp = if euclidean { 0.0 } else { 2f64.ln() };
    params.log_gamma_temp = 0.3f64.ln();
    let train_cfg = TrainConfig {
        lambda1: 0.5,
        lambda2: 0.7,
        ..TrainConfig::default()
    };
    (ds, causal, params, train_cfg)
}

fn objective(params: &ModelParams, graph: &PreparedGraph, labels: &[usize], batch: &[usize], cfg: &TrainConfig) -> f64 {
    train::evaluate_loss(params, graph, labels, batch, cfg)
        .expect("labels in range")
        .total
}

/// Compares reverse-mode gradients with central differences on every
/// scalar of the tiny problem.
pub fn run(opts: &GradcheckOptions) -> GradcheckReport {
    let (ds, causal, params, cfg) = tiny_problem(opts.seed, opts.euclidean);
    let graph = PreparedGraph::new(&ds, &causal, &params).expect("tiny problem is consistent");
    let batch: Vec<usize> = (0..ds.nodes.len()).collect();
    let (_, mut grad) = train::gradients(&params, &graph, &ds.labels, &batch, &cfg, None)
        .expect("finite gradients");
    if opts.corrupt {
        for (_, t) in grad.tensors_mut() {
            if let Some(v) = t.first_mut() {
                *v = *v * 1.5 + 1e-2;
            }
        }
    }

    let analytic = grad.tensors();
    let mut probe = params.clone();
    let mut groups = Vec::new();
    for (k, (name, values)) in params.tensors().into_iter().enumerate() {
        let mut report = GroupReport {
            name,
            entries: values.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..values.len() {
            let original = values[j];
            probe.tensors_mut()[k].1[j] = original + FD_STEP;
            let plus = objective(&probe, &graph, &ds.labels, &batch, &cfg);
            probe.tensors_mut()[k].1[j] = original - FD_STEP;
            let minus = objective(&probe, &graph, &ds.labels, &batch, &cfg);
            probe.tensors_mut()[k].1[j] = original;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[k].1[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || j == 0 {
                report.max_rel_error = rel;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        groups.push(report);
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    GradcheckReport {
        seed: opts.seed,
        step: FD_STEP,
        tolerance: TOLERANCE,
        max_rel_error,
        passed: max_rel_error <= TOLERANCE,
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spherical_model_passes() {
        for seed in 0..5 {
            let r = run(&GradcheckOptions { seed, ..Default::default() });
            assert!(r.passed, "seed {seed}: {:#?}", r.groups);
        }
    }

    #[test]
    fn euclidean_model_passes() {
        let r = run(&GradcheckOptions { seed: 1, euclidean: true, ..Default::default() });
        assert!(r.passed, "{:#?}", r.groups);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = run(&GradcheckOptions { seed: 0, corrupt: true, ..Default::default() });
        assert!(!r.passed);
    }

    #[test]
    fn every_group_reported() {
        let r = run(&GradcheckOptions::default());
        let names: Vec<&str> = r.groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "W", "b", "kappa_w", "kappa_b", "W_e[group]", "log_attn_temp", "W_c",
                "log_gamma_temp", "head_w", "head_b"
            ]
        );
    }
}
