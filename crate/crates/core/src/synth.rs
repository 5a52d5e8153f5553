//! Seeded synthetic social dynamics with planted Granger-causal edges.
//!
//! Nodes belong to communities. Each node's feature vector follows a
//! first-order vector autoregression
//!
//! ```text
//! x_j(t+1) = a·x_j(t) + Σ_{i→j} c_ij·x_i(t) + m_k(j) + ε,   ε ~ N(0, σ²I)
//! ```
//!
//! where `m_k` is a constant offset shared by community `k`. Hyperedges are
//! drawn inside communities (with some cross-community mixing), and a
//! community's class is the prototype closest to its mean final-step
//! direction. A fraction of labels is then flipped.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergraph::{Dataset, DatasetError, Hyperedge, NodeFeatureSeries, Splits};
use crate::linalg::{dot, norm2, Matrix};
use crate::subseed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("unknown preset {0:?} (expected toy, small or medium)")]
    UnknownPreset(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// A planted influence `src → dst` by node index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedEdge {
    pub src: usize,
    pub dst: usize,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Planting {
    /// Fixed edge list.
    Explicit(Vec<PlantedEdge>),
    /// `count` edges drawn from the run seed. Sources and targets are
    /// disjoint, every target has one parent in its own community.
    Random { count: usize, coef: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Class whose seeded prototype has the largest cosine with the
    /// community's mean final-step feature vector.
    NearestPrototype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_hyperedges: usize,
    pub mean_edge_size: f64,
    pub feature_dim: usize,
    pub timesteps: usize,
    pub classes: usize,
    pub communities: usize,
    pub planted: Planting,
    /// Own-lag coefficient `a`.
    pub self_coef: f64,
    pub noise_sigma: f64,
    /// Norm of the offset component shared by every community.
    pub baseline: f64,
    /// Norm of the community-specific part of the offset `m_k`.
    pub community_scale: f64,
    /// Probability that a hyperedge member is drawn from the whole graph.
    pub mixing: f64,
    /// Standard deviation of the log of each node's activity level. A node's
    /// observed features are its latent series scaled by its level.
    pub activity_spread: f64,
    pub label_rule: LabelRule,
    pub label_noise: f64,
    /// Keep planted targets out of every hyperedge, so their only
    /// structural link to their community is the causal parent.
    pub isolate_targets: bool,
    pub context_types: usize,
    pub burn_in: usize,
    /// Train and validation fractions; the rest is test.
    pub split: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 40,
            n_hyperedges: 120,
            mean_edge_size: 3.0,
            feature_dim: 8,
            timesteps: 200,
            classes: 4,
            communities: 8,
            planted: Planting::Explicit(Vec::new()),
            self_coef: 0.1,
            noise_sigma: 1.0,
            baseline: 0.0,
            community_scale: 0.5,
            mixing: 0.1,
            activity_spread: 0.0,
            label_rule: LabelRule::NearestPrototype,
            label_noise: 0.05,
            isolate_targets: false,
            context_types: 2,
            burn_in: 100,
            split: (0.6, 0.2),
            seed: 0,
        }
    }
}

/// Granger lag the `timesteps ≥ 4·lag` check is made against.
const REFERENCE_LAG: usize = 2;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_nodes < 2 {
            return bad("need at least 2 nodes");
        }
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.communities == 0 || self.communities > self.n_nodes {
            return bad("communities must be in 1..=n_nodes");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.timesteps < 4 * REFERENCE_LAG {
            return bad("timesteps must be at least 4·lag");
        }
        if self.n_hyperedges > 0 && !(self.mean_edge_size >= 2.0 && self.mean_edge_size.is_finite()) {
            return bad("mean_edge_size must be at least 2");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive");
        }
        if !self.baseline.is_finite() || self.baseline < 0.0 {
            return bad("baseline must be non-negative");
        }
        if !self.community_scale.is_finite() || self.community_scale < 0.0 {
            return bad("community_scale must be non-negative");
        }
        if !self.activity_spread.is_finite() || self.activity_spread < 0.0 {
            return bad("activity_spread must be non-negative");
        }
        for (name, p) in [("mixing", self.mixing), ("label_noise", self.label_noise)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("{name} must be in [0, 1]")));
            }
        }
        let (tr, va) = self.split;
        if !(tr > 0.0 && va >= 0.0 && tr + va < 1.0) {
            return bad("split fractions must leave a non-empty train and test share");
        }
        if self.context_types == 0 {
            return bad("context_types must be positive");
        }
        match &self.planted {
            Planting::Explicit(edges) => {
                let mut inflow = vec![0.0; self.n_nodes];
                let mut seen = HashSet::new();
                for e in edges {
                    if e.src >= self.n_nodes || e.dst >= self.n_nodes {
                        return bad("planted edge references a node out of range");
                    }
                    if e.src == e.dst {
                        return bad("planted self-loop");
                    }
                    if !(e.coef.abs() < 1.0) {
                        return bad("planted coefficients must lie in (-1, 1)");
                    }
                    if !seen.insert((e.src, e.dst)) {
                        return bad("duplicate planted edge");
                    }
                    inflow[e.dst] += e.coef.abs();
                }
                if inflow.iter().any(|s| self.self_coef.abs() + s >= 1.0) {
                    return bad("unstable dynamics: |a| + Σ|c| must stay below 1 per node");
                }
            }
            Planting::Random { count, coef } => {
                if !(coef.abs() < 1.0) {
                    return bad("planted coefficients must lie in (-1, 1)");
                }
                if self.self_coef.abs() + coef.abs() >= 1.0 {
                    return bad("unstable dynamics: |a| + |c| must stay below 1");
                }
                if 2 * count > self.n_nodes {
                    return bad("too many random planted edges for the node count");
                }
            }
        }
        if self.self_coef.abs() >= 1.0 {
            return bad("self_coef must lie in (-1, 1)");
        }
        Ok(())
    }

    /// Whether an explicit planted edge set contains a directed cycle.
    /// Influence is lagged, so cycles are legal, but they are worth a
    /// warning.
    pub fn planted_cycle(&self) -> bool {
        let Planting::Explicit(edges) = &self.planted else {
            return false;
        };
        let n = self.n_nodes;
        let mut adj = vec![Vec::new(); n];
        for e in edges {
            adj[e.src].push(e.dst);
        }
        // 0 unvisited, 1 on stack, 2 done
        let mut state = vec![0u8; n];
        for root in 0..n {
            if state[root] != 0 {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            state[root] = 1;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if let Some(&w) = adj[v].get(*next) {
                    *next += 1;
                    match state[w] {
                        1 => return true,
                        0 => {
                            state[w] = 1;
                            stack.push((w, 0));
                        }
                        _ => {}
                    }
                } else {
                    state[v] = 2;
                    stack.pop();
                }
            }
        }
        false
    }

    pub fn community_of(&self, node: usize) -> usize {
        node % self.communities
    }
}

/// Named configurations. Each fixes its own default seed; callers may
/// override `seed` afterwards.
pub fn preset(name: &str) -> Result<SynthConfig, SynthError> {
    match name {
        "toy" => Ok(SynthConfig {
            n_nodes: 40,
            n_hyperedges: 120,
            mean_edge_size: 3.0,
            classes: 4,
            communities: 8,
            // Two chains inside communities 0 and 1.
            planted: Planting::Explicit(vec![
                PlantedEdge { src: 0, dst: 8, coef: 0.8 },
                PlantedEdge { src: 8, dst: 16, coef: 0.8 },
                PlantedEdge { src: 1, dst: 9, coef: 0.8 },
                PlantedEdge { src: 9, dst: 17, coef: 0.8 },
            ]),
            community_scale: 1.0,
            seed: 7,
            ..SynthConfig::default()
        }),
        "small" => Ok(SynthConfig {
            n_nodes: 540,
            n_hyperedges: 1120,
            mean_edge_size: 4.0,
            timesteps: 120,
            classes: 3,
            communities: 12,
            planted: Planting::Random { count: 20, coef: 0.8 },
            isolate_targets: true,
            baseline: 6.0,
            community_scale: 1.0,
            activity_spread: 1.5,
            seed: 11,
            ..SynthConfig::default()
        }),
        "medium" => Ok(SynthConfig {
            n_nodes: 1000,
            n_hyperedges: 2000,
            mean_edge_size: 4.0,
            timesteps: 120,
            classes: 4,
            communities: 20,
            planted: Planting::Random { count: 40, coef: 0.8 },
            isolate_targets: true,
            baseline: 6.0,
            community_scale: 1.0,
            activity_spread: 1.5,
            seed: 13,
            ..SynthConfig::default()
        }),
        other => Err(SynthError::UnknownPreset(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEdge {
    pub src: String,
    pub dst: String,
    pub coef: f64,
}

/// Ground truth written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTruth {
    pub true_edges: Vec<TrueEdge>,
}

impl SynthTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn edge_set(&self) -> HashSet<(String, String)> {
        self.true_edges
            .iter()
            .map(|e| (e.src.clone(), e.dst.clone()))
            .collect()
    }
}

pub fn node_id(i: usize) -> String {
    format!("v{i:04}")
}

fn gaussian_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(d, rng);
        let n = norm2(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

fn draw_planted(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<PlantedEdge> {
    match &cfg.planted {
        Planting::Explicit(edges) => edges.clone(),
        Planting::Random { count, coef } => {
            let mut order: Vec<usize> = (0..cfg.n_nodes).collect();
            order.shuffle(rng);
            let mut used = vec![false; cfg.n_nodes];
            let mut out = Vec::with_capacity(*count);
            for &dst in &order {
                if out.len() == *count {
                    break;
                }
                if used[dst] {
                    continue;
                }
                let k = cfg.community_of(dst);
                let candidates: Vec<usize> = (k..cfg.n_nodes)
                    .step_by(cfg.communities)
                    .filter(|&s| s != dst && !used[s])
                    .collect();
                let Some(&src) = candidates.choose(rng) else {
                    continue;
                };
                used[src] = true;
                used[dst] = true;
                out.push(PlantedEdge { src, dst, coef: *coef });
            }
            out.sort_by_key(|e| (e.src, e.dst));
            out
        }
    }
}

fn draw_hyperedges(
    cfg: &SynthConfig,
    excluded: &HashSet<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Hyperedge>, SynthError> {
    if cfg.n_hyperedges == 0 {
        return Ok(Vec::new());
    }
    let pools: Vec<Vec<usize>> = (0..cfg.communities)
        .map(|k| {
            (k..cfg.n_nodes)
                .step_by(cfg.communities)
                .filter(|v| !excluded.contains(v))
                .collect()
        })
        .collect();
    let everyone: Vec<usize> = (0..cfg.n_nodes).filter(|v| !excluded.contains(v)).collect();
    let usable: Vec<usize> = (0..cfg.communities).filter(|&k| pools[k].len() >= 2).collect();
    if usable.is_empty() || everyone.len() < 2 {
        return Err(SynthError::Config("communities too small to host hyperedges".into()));
    }
    let extra = cfg.mean_edge_size - 2.0;
    let poisson = (extra > 0.0)
        .then(|| Poisson::new(extra).map_err(|e| SynthError::Config(e.to_string())))
        .transpose()?;
    let mut edges = Vec::with_capacity(cfg.n_hyperedges);
    for id in 0..cfg.n_hyperedges {
        let k = usable[id % usable.len()];
        let pool = &pools[k];
        let size = 2 + poisson.as_ref().map_or(0, |p| p.sample(rng) as usize);
        let size = size.min(pool.len());
        let mut members: BTreeSet<usize> = pool.choose_multiple(rng, size).copied().collect();
        let picked: Vec<usize> = members.iter().copied().collect();
        for v in picked {
            if rng.random::<f64>() < cfg.mixing {
                let w = everyone[rng.random_range(0..everyone.len())];
                if !members.contains(&w) {
                    members.remove(&v);
                    members.insert(w);
                }
            }
        }
        edges.push(Hyperedge {
            id: format!("e{id:05}"),
            members: members.into_iter().collect(),
            context_type: format!("ctx{}", rng.random_range(0..cfg.context_types)),
        });
    }
    Ok(edges)
}

/// Simulates the dynamics; returns per-node `T × d` row-major series.
fn simulate(cfg: &SynthConfig, planted: &[PlantedEdge], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (n, d) = (cfg.n_nodes, cfg.feature_dim);
    let mut parents: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for e in planted {
        parents[e.dst].push((e.src, e.coef));
    }
    let offsets = community_offsets(cfg);
    let mut state = vec![vec![0.0; d]; n];
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.timesteps * d); n];
    for step in 0..cfg.burn_in + cfg.timesteps {
        let next: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let m = &offsets[cfg.community_of(j)];
                (0..d)
                    .map(|c| {
                        let mut v = cfg.self_coef * state[j][c] + m[c];
                        for &(i, coef) in &parents[j] {
                            v += coef * state[i][c];
                        }
                        let eps: f64 = StandardNormal.sample(rng);
                        v + cfg.noise_sigma * eps
                    })
                    .collect()
            })
            .collect();
        state = next;
        if step >= cfg.burn_in {
            for (o, s) in out.iter_mut().zip(&state) {
                o.extend_from_slice(s);
            }
        }
    }
    out
}

fn prototypes(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "synth/prototypes"));
    (0..cfg.classes).map(|_| unit(cfg.feature_dim, &mut rng)).collect()
}

/// Community offsets: community `k` leans towards prototype `k mod C`, with
/// a random tilt so communities of one class stay distinguishable.
fn community_offsets(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let protos = prototypes(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "synth/offsets"));
    let shared: Vec<f64> = unit(cfg.feature_dim, &mut rng)
        .into_iter()
        .map(|x| x * cfg.baseline)
        .collect();
    (0..cfg.communities)
        .map(|k| {
            let tilt = unit(cfg.feature_dim, &mut rng);
            let mut v: Vec<f64> = protos[k % cfg.classes]
                .iter()
                .zip(&tilt)
                .map(|(p, t)| p + 0.5 * t)
                .collect();
            let n = norm2(&v).max(1e-12);
            v.iter_mut()
                .zip(&shared)
                .for_each(|(x, s)| *x = *x * cfg.community_scale / n + s);
            v
        })
        .collect()
}

/// Labels each community by the prototype nearest to its mean final-step
/// latent state, measured from the population mean when there is more than
/// one community.
fn community_labels(cfg: &SynthConfig, series: &[Vec<f64>]) -> Vec<usize> {
    let d = cfg.feature_dim;
    let last = (cfg.timesteps - 1) * d;
    let protos = prototypes(cfg);
    let means: Vec<Vec<f64>> = (0..cfg.communities)
        .map(|k| {
            let mut mean = vec![0.0; d];
            let mut count = 0.0;
            for j in (k..cfg.n_nodes).step_by(cfg.communities) {
                for (m, x) in mean.iter_mut().zip(&series[j][last..last + d]) {
                    *m += x;
                }
                count += 1.0;
            }
            mean.iter_mut().for_each(|m| *m /= count);
            mean
        })
        .collect();
    let mut centre = vec![0.0; d];
    if cfg.communities > 1 {
        for j in 0..cfg.n_nodes {
            for (c, x) in centre.iter_mut().zip(&series[j][last..last + d]) {
                *c += x / cfg.n_nodes as f64;
            }
        }
    }
    means
        .iter()
        .map(|mean| {
            let dir: Vec<f64> = mean.iter().zip(&centre).map(|(m, c)| m - c).collect();
            let mn = norm2(&dir).max(1e-300);
            let mut best = (0, f64::NEG_INFINITY);
            for (c, p) in protos.iter().enumerate() {
                let cos = dot(p, &dir) / mn;
                if cos > best.1 {
                    best = (c, cos);
                }
            }
            best.0
        })
        .collect()
}

fn draw_splits(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Splits {
    let mut order: Vec<usize> = (0..cfg.n_nodes).collect();
    order.shuffle(rng);
    let n = cfg.n_nodes as f64;
    let n_train = ((cfg.split.0 * n).round() as usize).max(1);
    let n_val = ((cfg.split.1 * n).round() as usize).min(cfg.n_nodes - n_train);
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

/// Generates a dataset and its planted ground truth. Same config, same
/// bytes.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth), SynthError> {
    cfg.validate()?;
    let mut structure = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "synth/structure"));
    let mut dynamics = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "synth/dynamics"));
    let mut labelling = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "synth/labels"));
    let mut splitting = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "synth/splits"));
    let mut activity = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "synth/activity"));

    let planted = draw_planted(cfg, &mut structure);
    let excluded: HashSet<usize> = if cfg.isolate_targets {
        planted.iter().map(|e| e.dst).collect()
    } else {
        HashSet::new()
    };
    let hyperedges = draw_hyperedges(cfg, &excluded, &mut structure)?;
    let series = simulate(cfg, &planted, &mut dynamics);

    let LabelRule::NearestPrototype = cfg.label_rule;
    let per_community = community_labels(cfg, &series);
    let labels: Vec<usize> = (0..cfg.n_nodes)
        .map(|j| {
            let clean = per_community[cfg.community_of(j)];
            if labelling.random::<f64>() < cfg.label_noise {
                let shift = labelling.random_range(1..cfg.classes);
                (clean + shift) % cfg.classes
            } else {
                clean
            }
        })
        .collect();

    let nodes = series
        .into_iter()
        .map(|mut data| {
            if cfg.activity_spread > 0.0 {
                let g: f64 = StandardNormal.sample(&mut activity);
                let level = (cfg.activity_spread * g).exp();
                data.iter_mut().for_each(|x| *x *= level);
            }
            data
        })
        .enumerate()
        .map(|(j, data)| {
            Ok(NodeFeatureSeries {
                id: node_id(j),
                features: Matrix::from_vec(cfg.timesteps, cfg.feature_dim, data)
                    .map_err(|e| SynthError::Config(e.to_string()))?,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;

    let ds = Dataset {
        dim: cfg.feature_dim,
        timesteps: cfg.timesteps,
        classes: cfg.classes,
        horizon: 1,
        nodes,
        hyperedges,
        labels,
        splits: draw_splits(cfg, &mut splitting),
    };
    ds.validate()?;
    let truth = SynthTruth {
        true_edges: planted
            .iter()
            .map(|e| TrueEdge { src: node_id(e.src), dst: node_id(e.dst), coef: e.coef })
            .collect(),
    };
    Ok((ds, truth))
}
