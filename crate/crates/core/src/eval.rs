//! Evaluation of a trained model on a dataset split.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::granger::CausalGraph;
use crate::hypergraph::{feature_dropout, Dataset, DatasetError};
use crate::metrics::{self, EvalConfig, EvalReport, MetricError, ScoredEdge};
use crate::model::{self, ForwardTrace, ModelError, ModelParams, PreparedGraph};
use crate::subseed;
use crate::train::Checkpoint;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Causal edge scores read off the model: the causal-attention logit
/// `gamma_temp · F` of every edge in the graph, plus the normalized weight
/// `γ` it receives at its target.
pub fn causal_edge_scores(
    ds: &Dataset,
    graph: &PreparedGraph,
    trace: &ForwardTrace,
) -> Vec<(ScoredEdge, f64)> {
    let mut out = Vec::new();
    for (dst, parents) in graph.parents.iter().enumerate() {
        for (&(src, f), &gamma) in parents.iter().zip(&trace.causal_weights[dst]) {
            out.push((
                ScoredEdge {
                    src: ds.nodes[src].id.clone(),
                    dst: ds.nodes[dst].id.clone(),
                    score: trace.gamma_temp * f,
                },
                gamma,
            ));
        }
    }
    // Equal logits are ordered by γ, then by (src, dst) inside the ranking.
    out.sort_by(|a, b| {
        b.0.score
            .total_cmp(&a.0.score)
            .then(b.1.total_cmp(&a.1))
            .then_with(|| (&a.0.src, &a.0.dst).cmp(&(&b.0.src, &b.0.dst)))
    });
    out
}

/// Ranks causal edges and returns the top-`k` precision against `truth`.
pub fn causal_precision(scored: &[(ScoredEdge, f64)], truth: &HashSet<(String, String)>, k: usize) -> (f64, bool) {
    // Ranks are encoded as strictly decreasing scores so the γ tie-break
    // survives the metric's own sort.
    let ranked: Vec<ScoredEdge> = scored
        .iter()
        .enumerate()
        .map(|(r, (e, _))| ScoredEdge { score: -(r as f64), ..e.clone() })
        .collect();
    metrics::precision_at_k(&ranked, truth, k)
}

/// Forward pass in eval mode and every report metric on the test split
/// (all nodes when the split is empty). `dropout_rate` zeroes input
/// features first, using a generator derived from `seed`.
pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    causal: &CausalGraph,
    truth: Option<&HashSet<(String, String)>>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "eval-dropout"));
    let data = feature_dropout(ds, cfg.dropout_rate, &mut rng)?;
    let graph = PreparedGraph::new(&data, causal, params)?;
    let trace = model::forward::<ChaCha8Rng>(params, &graph, None);

    let nodes: Vec<usize> = if data.splits.test.is_empty() {
        (0..data.nodes.len()).collect()
    } else {
        data.splits.test.clone()
    };
    let all_preds = trace.predictions();
    let preds: Vec<usize> = nodes.iter().map(|&i| all_preds[i]).collect();
    let labels: Vec<usize> = nodes.iter().map(|&i| data.labels[i]).collect();
    let probs: Vec<Vec<f64>> = nodes.iter().map(|&i| trace.probs[i].clone()).collect();
    let vmf_entropy = nodes.iter().map(|&i| trace.entropy[i]).sum::<f64>() / nodes.len().max(1) as f64;

    let scored = causal_edge_scores(&data, &graph, &trace);
    let mut p_at_k = BTreeMap::new();
    if let Some(truth) = truth {
        let (p, _) = causal_precision(&scored, truth, cfg.k);
        p_at_k.insert(cfg.k, p);
    }
    let causal_rank_correlation = if scored.len() >= 2 {
        let gammas: Vec<f64> = scored.iter().map(|(_, g)| *g).collect();
        let fs: Vec<f64> = scored.iter().map(|(e, _)| e.score).collect();
        metrics::rank_correlation(&gammas, &fs)?
    } else {
        None
    };

    Ok(EvalReport {
        accuracy: metrics::accuracy(&preds, &labels)?,
        macro_f1: metrics::macro_f1(&preds, &labels, data.classes)?,
        auc: metrics::auc_ovr(&probs, &labels, data.classes)?,
        ece: metrics::ece(&probs, &labels, cfg.ece_bins)?,
        mean_entropy: metrics::mean_predictive_entropy(&probs),
        mean_vmf_entropy: vmf_entropy,
        p_at_k,
        causal_rank_correlation,
        per_class_f1: metrics::per_class_f1(&preds, &labels, data.classes)?,
        n_eval: nodes.len(),
        config: cfg.clone(),
        dataset_digest: ds.digest(),
    })
}

/// [`evaluate`] with the checkpoint's ablation applied to the inputs.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    ds: &Dataset,
    causal: &CausalGraph,
    truth: Option<&HashSet<(String, String)>>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let (data, graph) = ck.config.ablation.apply(ds, causal);
    let mut report = evaluate(&ck.params, &data, &graph, truth, cfg, seed)?;
    report.dataset_digest = ds.digest();
    Ok(report)
}
