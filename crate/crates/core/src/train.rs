//! Joint objective, reverse-mode gradients, Adam and the training loop.
//!
//! `L = L_pred + λ1·L_entropy + λ2·L_causal` where
//! * `L_pred` is the batch-mean cross-entropy,
//! * `L_entropy` is the batch-mean vMF entropy of the node concentrations,
//! * `L_causal` is the mean, over batch nodes with causal parents, of
//!   `KL(ĝ_i ‖ γ_i)` with `ĝ_i = softmax(F)` over the parents of `i`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::granger::CausalGraph;
use crate::hypergraph::Dataset;
use crate::linalg::logsumexp;
use crate::model::{self, ForwardTrace, ModelConfig, ModelError, ModelParams, PreparedGraph, Upstream};
use crate::{subseed, vmf};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("label {label} of node {node} is outside 0..{classes}")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite gradient in parameter group {0}")]
    NumericalError(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Best-validation parameters seen before the failure.
        last_good: Box<Checkpoint>,
        history: Vec<EpochRecord>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the entropy term.
    pub lambda1: f64,
    /// Weight of the causal alignment term.
    pub lambda2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.1,
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if self.patience == 0 || self.batch_size == 0 {
            return bad("patience and batch_size must be ≥ 1");
        }
        Ok(())
    }
}

/// Structural ablations applied to the inputs before training and
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Ablation {
    /// Drop every causal edge.
    pub no_causal: bool,
    /// Replace each hyperedge by the 2-member edges of its clique.
    pub pairwise: bool,
}

impl Ablation {
    pub fn apply(&self, ds: &Dataset, causal: &CausalGraph) -> (Dataset, CausalGraph) {
        let data = if self.pairwise { ds.pairwise_expansion() } else { ds.clone() };
        let graph = if self.no_causal {
            CausalGraph::empty(causal.alpha, causal.lag)
        } else {
            causal.clone()
        };
        (data, graph)
    }
}

/// Model and optimizer settings together; the `--config` file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub pred: f64,
    pub entropy: f64,
    pub causal: f64,
}

/// Evaluates the objective on `batch` and the matching loss sensitivities.
pub fn loss(
    trace: &ForwardTrace,
    labels: &[usize],
    batch: &[usize],
    graph: &PreparedGraph,
    lambda1: f64,
    lambda2: f64,
) -> Result<(LossBreakdown, Upstream), TrainError> {
    let n = trace.probs.len();
    let classes = trace.probs.first().map_or(0, Vec::len);
    let dp = trace.final_embeddings.first().map_or(2, Vec::len);
    let mut up = Upstream {
        logits: vec![vec![0.0; classes]; n],
        kappa: vec![0.0; n],
        causal_scores: vec![Vec::new(); n],
    };
    if batch.is_empty() {
        return Ok((LossBreakdown::default(), up));
    }
    let inv = 1.0 / batch.len() as f64;

    let mut pred = 0.0;
    let mut entropy = 0.0;
    for &i in batch {
        let y = labels[i];
        if y >= classes {
            return Err(TrainError::LabelOutOfRange {
                node: i,
                label: y,
                classes,
            });
        }
        // log p_y from logits keeps the loss finite for confident wrong answers.
        let lse = logsumexp(&trace.logits[i]).expect("non-empty logits");
        pred -= trace.logits[i][y] - lse;
        let row = &mut up.logits[i];
        for (c, g) in row.iter_mut().enumerate() {
            *g = inv * (trace.probs[i][c] - f64::from(c == y));
        }
        entropy += trace.entropy[i];
        up.kappa[i] = lambda1 * inv * vmf::entropy_grad_kappa(dp, trace.kappa[i]);
    }
    pred *= inv;
    entropy *= inv;

    let with_parents: Vec<usize> = batch
        .iter()
        .copied()
        .filter(|&i| !trace.causal_weights[i].is_empty())
        .collect();
    let mut causal = 0.0;
    if !with_parents.is_empty() {
        let inv_c = 1.0 / with_parents.len() as f64;
        let g_temp = trace.gamma_temp;
        for &i in &with_parents {
            let f: Vec<f64> = graph.parents[i].iter().map(|&(_, f)| f).collect();
            let lse_ref = logsumexp(&f).expect("parents present");
            let scores: Vec<f64> = f.iter().map(|v| g_temp * v).collect();
            let lse_model = logsumexp(&scores).expect("parents present");
            let gamma = &trace.causal_weights[i];
            let mut kl = 0.0;
            let mut grads = Vec::with_capacity(f.len());
            for (k, &fk) in f.iter().enumerate() {
                let log_ref = fk - lse_ref;
                let log_model = scores[k] - lse_model;
                let r = log_ref.exp();
                if r > 0.0 {
                    kl += r * (log_ref - log_model);
                }
                grads.push(lambda2 * inv_c * (gamma[k] - r));
            }
            causal += kl;
            up.causal_scores[i] = grads;
        }
        causal *= inv_c;
    }

    let total = pred + lambda1 * entropy + lambda2 * causal;
    Ok((
        LossBreakdown {
            total,
            pred,
            entropy,
            causal,
        },
        up,
    ))
}

/// Gradients of the objective on one batch, plus the loss.
pub fn gradients(
    params: &ModelParams,
    graph: &PreparedGraph,
    labels: &[usize],
    batch: &[usize],
    cfg: &TrainConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossBreakdown, ModelParams), TrainError> {
    let trace = model::forward(params, graph, dropout_rng);
    let (lb, up) = loss(&trace, labels, batch, graph, cfg.lambda1, cfg.lambda2)?;
    let grad = model::backward(params, graph, &trace, &up);
    if let Some((name, _)) = grad
        .tensors()
        .into_iter()
        .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
    {
        return Err(TrainError::NumericalError(name));
    }
    Ok((lb, grad))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let grads = grad.tensors();
        for (k, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[k].1;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub pred: f64,
    pub entropy: f64,
    pub causal: f64,
    pub wallclock_ms: u128,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,pred,entropy,causal,wallclock_ms\n");
    for r in history {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.pred, r.entropy, r.causal, r.wallclock_ms
        ));
    }
    out
}

/// Serialized training result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_digest: String,
    pub config: RunConfig,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let ck: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            ));
        }
        if ck.config.digest() != ck.config_digest {
            return Err("checkpoint config digest does not match its config".into());
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Eval-mode objective on a node set.
pub fn evaluate_loss(
    params: &ModelParams,
    graph: &PreparedGraph,
    labels: &[usize],
    nodes: &[usize],
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let trace = model::forward::<ChaCha8Rng>(params, graph, None);
    Ok(loss(&trace, labels, nodes, graph, cfg.lambda1, cfg.lambda2)?.0)
}

/// Trains on the dataset's train split with early stopping on the
/// validation loss, returning the best-validation parameters.
///
/// The run's [`Ablation`] is applied to `ds` and `causal` first.
pub fn train(ds: &Dataset, causal: &CausalGraph, run: &RunConfig) -> Result<TrainOutcome, TrainError> {
    let cfg = &run.train;
    cfg.validate()?;
    let (ablated, causal) = run.ablation.apply(ds, causal);
    let ds = &ablated;
    let causal = &causal;
    if ds.splits.train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "model-init"));
    let mut params = ModelParams::init(
        run.model.clone(),
        ds.dim,
        ds.classes,
        ds.context_types(),
        &mut init_rng,
    )?;
    let graph = PreparedGraph::new(ds, causal, &params)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "batches"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "dropout"));
    let mut adam = Adam::new(&params, cfg);
    let monitor: &[usize] = if ds.splits.val.is_empty() {
        &ds.splits.train
    } else {
        &ds.splits.val
    };

    let start = Instant::now();
    let mut best = params.clone();
    let mut best_val = evaluate_loss(&params, &graph, &ds.labels, monitor, cfg)?.total;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order = ds.splits.train.clone();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = gradients(&params, &graph, &ds.labels, batch, cfg, Some(&mut dropout_rng));
            let (lb, grad) = match step {
                Ok(r) => r,
                Err(TrainError::NumericalError(name)) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        reason: format!("non-finite gradient in {name}"),
                        last_good: Box::new(snapshot(run, best, best_epoch, best_val)),
                        history,
                    })
                }
                Err(e) => return Err(e),
            };
            if !lb.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    reason: "loss is not finite".into(),
                    last_good: Box::new(snapshot(run, best, best_epoch, best_val)),
                    history,
                });
            }
            adam.step(&mut params, &grad);
        }
        if !params.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                reason: "parameters are not finite".into(),
                last_good: Box::new(snapshot(run, best, best_epoch, best_val)),
                history,
            });
        }

        let trace = model::forward::<ChaCha8Rng>(&params, &graph, None);
        let tr = loss(&trace, &ds.labels, &ds.splits.train, &graph, cfg.lambda1, cfg.lambda2)?.0;
        let val = loss(&trace, &ds.labels, monitor, &graph, cfg.lambda1, cfg.lambda2)?.0.total;
        history.push(EpochRecord {
            epoch,
            train_loss: tr.total,
            val_loss: val,
            pred: tr.pred,
            entropy: tr.entropy,
            causal: tr.causal,
            wallclock_ms: start.elapsed().as_millis(),
        });
        if !(tr.total.is_finite() && val.is_finite()) {
            return Err(TrainError::Diverged {
                epoch,
                reason: "evaluation loss is not finite".into(),
                last_good: Box::new(snapshot(run, best, best_epoch, best_val)),
                history,
            });
        }
        if val < best_val {
            best_val = val;
            best = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        checkpoint: snapshot(run, best, best_epoch, best_val),
        history,
    })
}

fn snapshot(run: &RunConfig, params: ModelParams, best_epoch: usize, best_val_loss: f64) -> Checkpoint {
    Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config_digest: run.digest(),
        config: run.clone(),
        best_epoch,
        best_val_loss,
        params,
    }
}
