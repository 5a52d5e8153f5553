//! Forward and backward passes of the causal spherical hypergraph network.
//!
//! Pipeline per node `i`:
//! 1. `z_i = W x_i + b`, `h_i = z_i / ‖z_i‖`, `κ_i = softplus(w_κ·z_i + b_κ)`;
//! 2. `L` layers of angular attention inside every hyperedge followed by
//!    type-specific aggregation, ReLU and re-projection to the sphere;
//! 3. after the last layer, a causal message from Granger parents weighted by
//!    a softmax of their F statistics;
//! 4. a linear softmax classifier.
//!
//! Gradients are derived by hand; [`backward`] mirrors [`forward`] step by
//! step and is checked against central differences in the test suite.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::granger::CausalGraph;
use crate::hypergraph::{build_index, Dataset, DatasetError, IncidenceIndex};
use crate::linalg::{self, axpy, dot, norm2, Matrix};
use crate::vmf;

/// Norms below this take the degenerate branch (`e₁`, `κ = 0`).
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown context type '{0}' (not seen when the model was built)")]
    UnknownContext(String),
    #[error("causal edge references unknown node '{0}'")]
    UnknownNode(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension d′.
    pub embed_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Initial attention temperature and initial per-node concentration.
    pub kappa_init: f64,
    /// Skip every sphere projection; attention on raw dot products.
    #[serde(default)]
    pub euclidean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            dropout: 0.2,
            kappa_init: 20.0,
            euclidean: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim < 2 {
            return Err(ModelError::Config("embed_dim must be ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.kappa_init.is_finite() && self.kappa_init > 0.0) {
            return Err(ModelError::Config("kappa_init must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable tensors plus the static shape information needed to use them.
///
/// The two temperatures are stored as logs so that unconstrained updates keep
/// them positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub classes: usize,
    pub context_types: Vec<String>,
    pub w: Matrix,
    pub b: Vec<f64>,
    pub kappa_w: Vec<f64>,
    pub kappa_b: f64,
    pub w_e: Vec<Matrix>,
    pub log_attn_temp: f64,
    pub w_c: Matrix,
    pub log_gamma_temp: f64,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

fn softplus(q: f64) -> f64 {
    q.max(0.0) + (-q.abs()).exp().ln_1p()
}

fn sigmoid(q: f64) -> f64 {
    if q >= 0.0 {
        1.0 / (1.0 + (-q).exp())
    } else {
        let e = q.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for positive arguments.
fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite")
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        input_dim: usize,
        classes: usize,
        context_types: Vec<String>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let dp = config.embed_dim;
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = random_matrix(dp, input_dim, glorot(input_dim, dp), rng);
        let b = (0..dp).map(|_| rng.random_range(-0.1..0.1)).collect();
        let w_e = context_types
            .iter()
            .map(|_| {
                let mut m = random_matrix(dp, dp, 0.1 / (dp as f64).sqrt(), rng);
                for k in 0..dp {
                    m.set(k, k, m.get(k, k) + 1.0);
                }
                m
            })
            .collect();
        let mut w_c = random_matrix(dp, dp, 0.1 / (dp as f64).sqrt(), rng);
        for k in 0..dp {
            w_c.set(k, k, w_c.get(k, k) + 0.5);
        }
        let head_w = random_matrix(classes, dp, glorot(dp, classes), rng);
        Ok(Self {
            input_dim,
            classes,
            context_types,
            w,
            b,
            kappa_w: vec![0.0; dp],
            kappa_b: softplus_inv(config.kappa_init),
            w_e,
            log_attn_temp: config.kappa_init.ln(),
            w_c,
            log_gamma_temp: 0.0,
            head_w,
            head_b: vec![0.0; classes],
            config,
        })
    }

    pub fn attn_temp(&self) -> f64 {
        self.log_attn_temp.exp()
    }

    pub fn gamma_temp(&self) -> f64 {
        self.log_gamma_temp.exp()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Same shapes, all values zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Named views of every learnable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("W".into(), self.w.data()),
            ("b".into(), &self.b),
            ("kappa_w".into(), &self.kappa_w),
            ("kappa_b".into(), std::slice::from_ref(&self.kappa_b)),
        ];
        for (t, m) in self.context_types.iter().zip(&self.w_e) {
            out.push((format!("W_e[{t}]"), m.data()));
        }
        out.push(("log_attn_temp".into(), std::slice::from_ref(&self.log_attn_temp)));
        out.push(("W_c".into(), self.w_c.data()));
        out.push(("log_gamma_temp".into(), std::slice::from_ref(&self.log_gamma_temp)));
        out.push(("head_w".into(), self.head_w.data()));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("W".into(), self.w.data_mut()),
            ("b".into(), &mut self.b),
            ("kappa_w".into(), &mut self.kappa_w),
            ("kappa_b".into(), std::slice::from_mut(&mut self.kappa_b)),
        ];
        for (t, m) in self.context_types.iter().zip(self.w_e.iter_mut()) {
            out.push((format!("W_e[{t}]"), m.data_mut()));
        }
        out.push(("log_attn_temp".into(), std::slice::from_mut(&mut self.log_attn_temp)));
        out.push(("W_c".into(), self.w_c.data_mut()));
        out.push(("log_gamma_temp".into(), std::slice::from_mut(&mut self.log_gamma_temp)));
        out.push(("head_w".into(), self.head_w.data_mut()));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("params serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A point on the sphere with its vMF concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalEmbedding {
    pub h: Vec<f64>,
    pub kappa: f64,
}

fn basis(d: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[0] = 1.0;
    e
}

/// Normalizes `v` in place; returns its original norm, or `None` (and
/// writes `e₁`) when the norm is below [`DEGENERATE_NORM`].
fn renormalize(v: &mut [f64]) -> Option<f64> {
    let n = norm2(v);
    if n < DEGENERATE_NORM {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
        None
    } else {
        v.iter_mut().for_each(|x| *x /= n);
        Some(n)
    }
}

/// Projects raw features onto the sphere and produces the concentration.
pub fn project(x: &[f64], params: &ModelParams) -> Result<SphericalEmbedding, ModelError> {
    if x.len() != params.input_dim {
        return Err(ModelError::DimensionMismatch {
            what: "features",
            expected: params.input_dim,
            got: x.len(),
        });
    }
    let mut z = vec![0.0; params.embed_dim()];
    linalg::matvec_into(&params.w, x, &mut z);
    axpy(1.0, &params.b, &mut z);
    let q = dot(&params.kappa_w, &z) + params.kappa_b;
    if params.config.euclidean {
        return Ok(SphericalEmbedding { h: z, kappa: softplus(q) });
    }
    match renormalize(&mut z) {
        Some(_) => Ok(SphericalEmbedding { h: z, kappa: softplus(q) }),
        None => Ok(SphericalEmbedding {
            h: basis(params.embed_dim()),
            kappa: 0.0,
        }),
    }
}

/// Row-major `k × k` attention inside one hyperedge:
/// `α_ab = softmax_b(τ · h_a·h_b)`, self term included.
pub fn edge_attention(members: &[usize], embeds: &[Vec<f64>], attn_temp: f64) -> Vec<f64> {
    let k = members.len();
    let mut alpha = vec![0.0; k * k];
    for (a, &i) in members.iter().enumerate() {
        let row = &mut alpha[a * k..(a + 1) * k];
        for (b, &j) in members.iter().enumerate() {
            row[b] = attn_temp * dot(&embeds[i], &embeds[j]);
        }
        linalg::softmax_in_place(row);
    }
    alpha
}

/// Pre-activation message of node `i`:
/// `m_i = Σ_{e∋i} Σ_{j∈e} α_ij^e W_{type(e)} h_j`.
fn message(
    node: usize,
    embeds: &[Vec<f64>],
    graph: &PreparedGraph,
    params: &ModelParams,
    attention: &[Vec<f64>],
) -> Vec<f64> {
    let dp = params.embed_dim();
    let mut m = vec![0.0; dp];
    let mut u = vec![0.0; dp];
    for &e in graph.index.edges_of(node) {
        let members = graph.index.members_of(e);
        let k = members.len();
        let a = members.iter().position(|&v| v == node).expect("incidence is consistent");
        let w_e = &params.w_e[graph.edge_type[e]];
        for (b, &j) in members.iter().enumerate() {
            linalg::matvec_into(w_e, &embeds[j], &mut u);
            axpy(attention[e][a * k + b], &u, &mut m);
        }
    }
    m
}

/// `W_t h_j` for every node `j` that sits in a hyperedge of type `t`;
/// empty vectors elsewhere.
fn transformed_members(
    embeds: &[Vec<f64>],
    graph: &PreparedGraph,
    params: &ModelParams,
) -> Vec<Vec<Vec<f64>>> {
    let dp = params.embed_dim();
    let mut u = vec![vec![Vec::new(); embeds.len()]; params.w_e.len()];
    for (e, members) in graph.index.edge_nodes.iter().enumerate() {
        let t = graph.edge_type[e];
        for &j in members {
            if u[t][j].is_empty() {
                let mut v = vec![0.0; dp];
                linalg::matvec_into(&params.w_e[t], &embeds[j], &mut v);
                u[t][j] = v;
            }
        }
    }
    u
}

/// [`message`] over precomputed member transforms.
fn message_from(
    node: usize,
    graph: &PreparedGraph,
    attention: &[Vec<f64>],
    u: &[Vec<Vec<f64>>],
    dp: usize,
) -> Vec<f64> {
    let mut m = vec![0.0; dp];
    for &e in graph.index.edges_of(node) {
        let members = graph.index.members_of(e);
        let k = members.len();
        let a = members.iter().position(|&v| v == node).expect("incidence is consistent");
        let ut = &u[graph.edge_type[e]];
        for (b, &j) in members.iter().enumerate() {
            axpy(attention[e][a * k + b], &ut[j], &mut m);
        }
    }
    m
}

/// One hyperedge update for node `i`: aggregate, ReLU, back to the sphere.
/// A node outside every hyperedge (or with an all-nonpositive message) gets
/// `e₁`.
pub fn hyperedge_aggregate(
    node: usize,
    embeds: &[Vec<f64>],
    graph: &PreparedGraph,
    params: &ModelParams,
    attention: &[Vec<f64>],
) -> Vec<f64> {
    let mut m = message(node, embeds, graph, params, attention);
    m.iter_mut().for_each(|v| *v = v.max(0.0));
    if !params.config.euclidean {
        renormalize(&mut m);
    }
    m
}

/// `γ_i = softmax_j(g · F_{j→i})` over the causal parents of `i`.
pub fn causal_weights(parents: &[(usize, f64)], gamma_temp: f64) -> Vec<f64> {
    let mut g: Vec<f64> = parents.iter().map(|&(_, f)| gamma_temp * f).collect();
    if !g.is_empty() {
        linalg::softmax_in_place(&mut g);
    }
    g
}

/// `renormalize(h_i′ + Σ_j γ_ij W_c h_j)`; identity without parents.
pub fn causal_aggregate(
    h_layer: &[f64],
    parents: &[(usize, f64)],
    embeds: &[Vec<f64>],
    params: &ModelParams,
) -> Vec<f64> {
    if parents.is_empty() {
        return h_layer.to_vec();
    }
    let gamma = causal_weights(parents, params.gamma_temp());
    let mut v = h_layer.to_vec();
    let mut u = vec![0.0; v.len()];
    for (&(j, _), g) in parents.iter().zip(&gamma) {
        linalg::matvec_into(&params.w_c, &embeds[j], &mut u);
        axpy(*g, &u, &mut v);
    }
    if !params.config.euclidean {
        renormalize(&mut v);
    }
    v
}

/// Dataset structure resolved against a parameter set: incidence lists,
/// hyperedge type indices, causal parents by node index, input features.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub index: IncidenceIndex,
    pub edge_type: Vec<usize>,
    /// Per target node: `(parent index, F statistic)`.
    pub parents: Vec<Vec<(usize, f64)>>,
    /// Features at the last observed timestep.
    pub inputs: Vec<Vec<f64>>,
}

impl PreparedGraph {
    pub fn new(
        ds: &Dataset,
        causal: &CausalGraph,
        params: &ModelParams,
    ) -> Result<Self, ModelError> {
        if ds.dim != params.input_dim {
            return Err(ModelError::DimensionMismatch {
                what: "dataset feature dimension",
                expected: params.input_dim,
                got: ds.dim,
            });
        }
        if ds.classes != params.classes {
            return Err(ModelError::DimensionMismatch {
                what: "class count",
                expected: params.classes,
                got: ds.classes,
            });
        }
        let index = build_index(ds)?;
        let types: HashMap<&str, usize> = params
            .context_types
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        let edge_type = ds
            .hyperedges
            .iter()
            .map(|e| {
                types
                    .get(e.context_type.as_str())
                    .copied()
                    .ok_or_else(|| ModelError::UnknownContext(e.context_type.clone()))
            })
            .collect::<Result<_, _>>()?;
        let ids = ds.node_index();
        let mut parents = vec![Vec::new(); ds.nodes.len()];
        for e in &causal.edges {
            let src = *ids.get(e.src.as_str()).ok_or_else(|| ModelError::UnknownNode(e.src.clone()))?;
            let dst = *ids.get(e.dst.as_str()).ok_or_else(|| ModelError::UnknownNode(e.dst.clone()))?;
            parents[dst].push((src, e.f));
        }
        let inputs = (0..ds.nodes.len()).map(|i| ds.last_features(i).to_vec()).collect();
        Ok(Self {
            index,
            edge_type,
            parents,
            inputs,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.inputs.len()
    }

    /// Same structure with every causal edge removed.
    pub fn without_causal(&self) -> Self {
        Self {
            parents: vec![Vec::new(); self.parents.len()],
            ..self.clone()
        }
    }
}

/// Everything computed by [`forward`]; doubles as the backward cache.
#[derive(Debug, Clone, Serialize)]
pub struct ForwardTrace {
    /// Embeddings after projection (`layers[0]`) and after each layer.
    pub layers: Vec<Vec<Vec<f64>>>,
    /// Per layer, per hyperedge: row-major `k × k` attention weights.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Per node: causal weights aligned with its parents.
    pub causal_weights: Vec<Vec<f64>>,
    pub final_embeddings: Vec<Vec<f64>>,
    pub kappa: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    /// vMF entropy per node, in nats.
    pub entropy: Vec<f64>,
    pub gamma_temp: f64,
    #[serde(skip)]
    cache: Cache,
}

#[derive(Debug, Clone, Default)]
struct Cache {
    z: Vec<Vec<f64>>,
    /// `None` marks the degenerate branch.
    z_norm: Vec<Option<f64>>,
    kappa_logit: Vec<f64>,
    /// Per layer: post-dropout pre-activations.
    pre: Vec<Vec<Vec<f64>>>,
    /// Per layer: dropout scale per entry (empty in eval mode).
    masks: Vec<Vec<Vec<f64>>>,
    act_norm: Vec<Vec<Option<f64>>>,
    causal_norm: Vec<Option<f64>>,
}

impl ForwardTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Full-graph forward pass. `dropout_rng = Some(..)` selects training mode.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    graph: &PreparedGraph,
    mut dropout_rng: Option<&mut R>,
) -> ForwardTrace {
    let n = graph.num_nodes();
    let dp = params.embed_dim();
    let euclid = params.config.euclidean;
    let tau = params.attn_temp();
    let drop = params.config.dropout;

    let mut cache = Cache::default();
    let mut h0 = Vec::with_capacity(n);
    let mut kappa = Vec::with_capacity(n);
    for x in &graph.inputs {
        let mut z = vec![0.0; dp];
        linalg::matvec_into(&params.w, x, &mut z);
        axpy(1.0, &params.b, &mut z);
        let q = dot(&params.kappa_w, &z) + params.kappa_b;
        let mut h = z.clone();
        let zn = if euclid { Some(1.0) } else { renormalize(&mut h) };
        kappa.push(if zn.is_some() { softplus(q) } else { 0.0 });
        cache.z.push(z);
        cache.z_norm.push(zn);
        cache.kappa_logit.push(q);
        h0.push(h);
    }

    let mut layers = vec![h0];
    let mut attention = Vec::with_capacity(params.config.layers);
    for _ in 0..params.config.layers {
        let input = layers.last().expect("at least the projection");
        let att: Vec<Vec<f64>> = (0..graph.index.edge_nodes.len())
            .map(|e| edge_attention(graph.index.members_of(e), input, tau))
            .collect();
        let u = transformed_members(input, graph, params);
        let mut pre = Vec::with_capacity(n);
        let mut masks = Vec::new();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut m = message_from(i, graph, &att, &u, dp);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                let scale = 1.0 / (1.0 - drop);
                let mask: Vec<f64> = (0..dp)
                    .map(|_| if drop > 0.0 && rng.random::<f64>() < drop { 0.0 } else { scale })
                    .collect();
                m.iter_mut().zip(&mask).for_each(|(v, s)| *v *= s);
                masks.push(mask);
            }
            let mut a: Vec<f64> = m.iter().map(|v| v.max(0.0)).collect();
            let an = if euclid { Some(1.0) } else { renormalize(&mut a) };
            pre.push(m);
            norms.push(an);
            out.push(a);
        }
        cache.pre.push(pre);
        cache.masks.push(masks);
        cache.act_norm.push(norms);
        attention.push(att);
        layers.push(out);
    }

    let last = layers.last().expect("non-empty");
    let mut causal_w = vec![Vec::new(); n];
    let mut finals = Vec::with_capacity(n);
    cache.causal_norm = vec![Some(1.0); n];
    for i in 0..n {
        let parents = &graph.parents[i];
        if params.config.layers == 0 || parents.is_empty() {
            finals.push(last[i].clone());
            continue;
        }
        let gamma = causal_weights(parents, params.gamma_temp());
        let mut v = last[i].clone();
        let mut u = vec![0.0; dp];
        for (&(j, _), g) in parents.iter().zip(&gamma) {
            linalg::matvec_into(&params.w_c, &last[j], &mut u);
            axpy(*g, &u, &mut v);
        }
        if !euclid {
            cache.causal_norm[i] = renormalize(&mut v);
        }
        causal_w[i] = gamma;
        finals.push(v);
    }

    let mut logits = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for h in &finals {
        let mut l = vec![0.0; params.classes];
        linalg::matvec_into(&params.head_w, h, &mut l);
        axpy(1.0, &params.head_b, &mut l);
        let mut p = l.clone();
        linalg::softmax_in_place(&mut p);
        logits.push(l);
        probs.push(p);
    }
    let entropy = kappa.iter().map(|&k| vmf::entropy_of(dp, k)).collect();

    ForwardTrace {
        layers,
        attention,
        causal_weights: causal_w,
        final_embeddings: finals,
        kappa,
        logits,
        probs,
        entropy,
        gamma_temp: params.gamma_temp(),
        cache,
    }
}

/// Loss sensitivities handed to [`backward`].
#[derive(Debug, Clone)]
pub struct Upstream {
    /// `∂L/∂logits`, one row per node (zero rows allowed).
    pub logits: Vec<Vec<f64>>,
    /// `∂L/∂κ_i`.
    pub kappa: Vec<f64>,
    /// `∂L/∂s_ij` for the causal attention scores `s_ij = g·F_ji`, aligned
    /// with each node's parents (empty rows allowed).
    pub causal_scores: Vec<Vec<f64>>,
}

/// `(I − h hᵀ) g / n`: gradient through `h = v / ‖v‖`.
fn through_normalize(h: &[f64], g: &[f64], n: f64) -> Vec<f64> {
    let s = dot(h, g);
    h.iter().zip(g).map(|(hi, gi)| (gi - s * hi) / n).collect()
}

/// Reverse pass; returns gradients shaped like `params`.
pub fn backward(
    params: &ModelParams,
    graph: &PreparedGraph,
    trace: &ForwardTrace,
    up: &Upstream,
) -> ModelParams {
    let n = graph.num_nodes();
    let dp = params.embed_dim();
    let euclid = params.config.euclidean;
    let tau = params.attn_temp();
    let g_temp = params.gamma_temp();
    let cache = &trace.cache;
    let mut grad = params.zeros_like();

    // Classifier.
    let mut d_h: Vec<Vec<f64>> = vec![vec![0.0; dp]; n];
    for i in 0..n {
        let dl = &up.logits[i];
        if dl.iter().all(|v| *v == 0.0) {
            continue;
        }
        linalg::outer_acc(&mut grad.head_w, 1.0, dl, &trace.final_embeddings[i]);
        axpy(1.0, dl, &mut grad.head_b);
        linalg::matvec_t_acc(&params.head_w, dl, &mut d_h[i]);
    }

    // Causal aggregation.
    let last = trace.layers.last().expect("non-empty");
    let mut d_last = vec![vec![0.0; dp]; n];
    for i in 0..n {
        let parents = &graph.parents[i];
        let extra = up.causal_scores.get(i).filter(|s| !s.is_empty());
        if params.config.layers == 0 || parents.is_empty() {
            axpy(1.0, &d_h[i], &mut d_last[i]);
            continue;
        }
        let d_v = if euclid {
            d_h[i].clone()
        } else {
            match cache.causal_norm[i] {
                Some(norm) => through_normalize(&trace.final_embeddings[i], &d_h[i], norm),
                None => vec![0.0; dp],
            }
        };
        axpy(1.0, &d_v, &mut d_last[i]);
        let gamma = &trace.causal_weights[i];
        let mut d_gamma = vec![0.0; parents.len()];
        let mut back = vec![0.0; dp];
        linalg::matvec_t_acc(&params.w_c, &d_v, &mut back);
        for (p, &(j, _)) in parents.iter().enumerate() {
            d_gamma[p] = dot(&back, &last[j]);
            linalg::outer_acc(&mut grad.w_c, gamma[p], &d_v, &last[j]);
            axpy(gamma[p], &back, &mut d_last[j]);
        }
        let avg: f64 = gamma.iter().zip(&d_gamma).map(|(g, d)| g * d).sum();
        for (p, &(_, f)) in parents.iter().enumerate() {
            let mut ds = gamma[p] * (d_gamma[p] - avg);
            if let Some(extra) = extra {
                ds += extra[p];
            }
            grad.log_gamma_temp += ds * f * g_temp;
        }
    }

    // Message-passing layers, last to first.
    let mut d_out = d_last;
    for l in (0..params.config.layers).rev() {
        let input = &trace.layers[l];
        let output = &trace.layers[l + 1];
        let att = &trace.attention[l];
        let mut d_in = vec![vec![0.0; dp]; n];
        let mut d_m = vec![vec![0.0; dp]; n];
        for i in 0..n {
            let d_a = if euclid {
                d_out[i].clone()
            } else {
                match cache.act_norm[l][i] {
                    Some(norm) => through_normalize(&output[i], &d_out[i], norm),
                    None => continue,
                }
            };
            let pre = &cache.pre[l][i];
            let mask = cache.masks[l].get(i);
            for k in 0..dp {
                if pre[k] > 0.0 {
                    d_m[i][k] = d_a[k] * mask.map_or(1.0, |m| m[k]);
                }
            }
        }

        let n_types = params.w_e.len();
        let mut d_u: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n]; n_types];
        let u_cache = transformed_members(input, graph, params);
        for (e, members) in graph.index.edge_nodes.iter().enumerate() {
            let t = graph.edge_type[e];
            let k = members.len();
            let alpha = &att[e];
            for (a, &i) in members.iter().enumerate() {
                if d_m[i].iter().all(|v| *v == 0.0) {
                    continue;
                }
                let row = &alpha[a * k..(a + 1) * k];
                let d_alpha: Vec<f64> = members.iter().map(|&j| dot(&d_m[i], &u_cache[t][j])).collect();
                for (b, &j) in members.iter().enumerate() {
                    let slot = d_u[t][j].get_or_insert_with(|| vec![0.0; dp]);
                    axpy(row[b], &d_m[i], slot);
                }
                let avg: f64 = row.iter().zip(&d_alpha).map(|(p, d)| p * d).sum();
                for (b, &j) in members.iter().enumerate() {
                    let ds = row[b] * (d_alpha[b] - avg);
                    if ds == 0.0 {
                        continue;
                    }
                    let cos = dot(&input[i], &input[j]);
                    grad.log_attn_temp += ds * cos * tau;
                    axpy(tau * ds, &input[j], &mut d_in[i]);
                    axpy(tau * ds, &input[i], &mut d_in[j]);
                }
            }
        }
        for (t, per_node) in d_u.iter().enumerate() {
            for (j, du) in per_node.iter().enumerate() {
                if let Some(du) = du {
                    linalg::outer_acc(&mut grad.w_e[t], 1.0, du, &input[j]);
                    linalg::matvec_t_acc(&params.w_e[t], du, &mut d_in[j]);
                }
            }
        }
        d_out = d_in;
    }

    // Projection and concentration head.
    for i in 0..n {
        let Some(zn) = cache.z_norm[i] else {
            continue;
        };
        let z = &cache.z[i];
        let mut d_z = if euclid {
            d_out[i].clone()
        } else {
            through_normalize(&trace.layers[0][i], &d_out[i], zn)
        };
        let dk = up.kappa[i];
        if dk != 0.0 {
            let dq = dk * sigmoid(cache.kappa_logit[i]);
            axpy(dq, z, &mut grad.kappa_w);
            grad.kappa_b += dq;
            axpy(dq, &params.kappa_w, &mut d_z);
        }
        if d_z.iter().all(|v| *v == 0.0) {
            continue;
        }
        linalg::outer_acc(&mut grad.w, 1.0, &d_z, &graph.inputs[i]);
        axpy(1.0, &d_z, &mut grad.b);
    }
    grad
}
