//! Pairwise Granger causality.
//!
//! For each ordered pair `(source, target)` two autoregressions of the target
//! are fitted by least squares: a restricted model on the target's own lags
//! and an unrestricted model that also sees the source's lags. The drop in
//! residual sum of squares is tested with an F statistic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::hypergraph::Dataset;
use crate::linalg::{self, dot, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrangerError {
    #[error("series of length {len} is shorter than the minimum {min}")]
    SeriesTooShort { len: usize, min: usize },
    #[error("regression design is rank deficient")]
    RankDeficient,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in series")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
}

impl From<LinalgError> for GrangerError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NonFinite => GrangerError::NonFinite,
            _ => GrangerError::RankDeficient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrangerConfig {
    pub lag: usize,
    pub alpha: f64,
    /// Divide `alpha` by the number of ordered pairs tested.
    #[serde(default)]
    pub bonferroni: bool,
}

impl Default for GrangerConfig {
    fn default() -> Self {
        Self {
            lag: 2,
            alpha: 0.01,
            bonferroni: false,
        }
    }
}

impl GrangerConfig {
    pub fn new(lag: usize, alpha: f64) -> Result<Self, GrangerError> {
        let cfg = Self {
            lag,
            alpha,
            bonferroni: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GrangerError> {
        if self.lag == 0 {
            return Err(GrangerError::InvalidConfig("lag must be ≥ 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(GrangerError::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn min_length(&self) -> usize {
        Self::min_length_for(self.lag)
    }

    fn min_length_for(lag: usize) -> usize {
        lag * 4 + 4
    }
}

/// Result of one autoregressive least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct VarFit {
    /// Intercept first, then target lags `1..=p`, then source lags if any.
    pub coefficients: Vec<f64>,
    pub rss: f64,
    pub dof: usize,
    /// Source lags that entered the fit (0 for the restricted model).
    pub source_lags: usize,
}

fn check_series(y: &[f64], lag: usize) -> Result<(), GrangerError> {
    if lag == 0 {
        return Err(GrangerError::InvalidConfig("lag must be ≥ 1".into()));
    }
    let min = GrangerConfig::min_length_for(lag);
    if y.len() < min {
        return Err(GrangerError::SeriesTooShort { len: y.len(), min });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(GrangerError::NonFinite);
    }
    Ok(())
}

fn fit(y: &[f64], x: Option<&[f64]>, lag: usize) -> Result<VarFit, GrangerError> {
    let t = y.len();
    let n_obs = t - lag;
    let n_cols = 1 + lag * if x.is_some() { 2 } else { 1 };
    let target = &y[lag..];

    // Exactly constant target: the intercept alone predicts it perfectly.
    if y.iter().all(|&v| v == y[0]) {
        let mut coefficients = vec![0.0; n_cols];
        coefficients[0] = y[0];
        return Ok(VarFit {
            coefficients,
            rss: 0.0,
            dof: t - lag - n_cols,
            source_lags: if x.is_some() { lag } else { 0 },
        });
    }

    let mut design = Matrix::zeros(n_obs, n_cols);
    for r in 0..n_obs {
        let row = design.row_mut(r);
        let now = r + lag;
        row[0] = 1.0;
        for k in 1..=lag {
            row[k] = y[now - k];
        }
        if let Some(x) = x {
            for k in 1..=lag {
                row[lag + k] = x[now - k];
            }
        }
    }

    let (design, kept) = match linalg::least_squares(&design, target) {
        Ok(_) => (design, (0..n_cols).collect::<Vec<_>>()),
        Err(LinalgError::RankDeficient { .. }) if x.is_some() => {
            // Source lags that duplicate information already in the design
            // (e.g. x_{t−2} = y_{t−1} for a pure copy) are dropped; the test
            // then has fewer restrictions. Without any usable source lag, or
            // with a degenerate restricted part, the fit is rank deficient.
            let kept = linalg::independent_columns(&design, linalg::RANK_TOL);
            if kept.len() <= lag + 1 || kept[..=lag] != (0..=lag).collect::<Vec<_>>()[..] {
                return Err(GrangerError::RankDeficient);
            }
            let mut reduced = Matrix::zeros(n_obs, kept.len());
            for r in 0..n_obs {
                for (j, &c) in kept.iter().enumerate() {
                    reduced.set(r, j, design.get(r, c));
                }
            }
            (reduced, kept)
        }
        Err(e) => return Err(e.into()),
    };
    let solved = linalg::least_squares(&design, target)?;
    let rss = (0..n_obs)
        .map(|r| {
            let e = target[r] - dot(design.row(r), &solved);
            e * e
        })
        .sum();
    let mut coefficients = vec![0.0; n_cols];
    for (&c, v) in kept.iter().zip(solved) {
        coefficients[c] = v;
    }
    Ok(VarFit {
        coefficients,
        rss,
        dof: t - lag - kept.len(),
        source_lags: kept.len() - 1 - lag,
    })
}

/// Regresses `y_t` on `(1, y_{t−1}, …, y_{t−p})`.
pub fn fit_var_restricted(y: &[f64], lag: usize) -> Result<VarFit, GrangerError> {
    check_series(y, lag)?;
    fit(y, None, lag)
}

/// Regresses `y_t` on `(1, y_{t−1..t−p}, x_{t−1..t−p})`.
pub fn fit_var_unrestricted(y: &[f64], x: &[f64], lag: usize) -> Result<VarFit, GrangerError> {
    check_series(y, lag)?;
    if x.len() != y.len() {
        return Err(GrangerError::LengthMismatch(y.len(), x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GrangerError::NonFinite);
    }
    fit(y, Some(x), lag)
}

/// Outcome of one directed test. Fitting failures become "no edge" with the
/// failure kept as a diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct GrangerOutcome {
    pub f_statistic: f64,
    pub p_value: f64,
    pub is_edge: bool,
    pub diagnostic: Option<GrangerError>,
}

impl GrangerOutcome {
    fn no_edge(diagnostic: GrangerError) -> Self {
        Self {
            f_statistic: 0.0,
            p_value: 1.0,
            is_edge: false,
            diagnostic: Some(diagnostic),
        }
    }
}

/// Survival function of the F(d1, d2) distribution.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if !f.is_finite() {
        return 0.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

fn compare(restricted: &VarFit, unrestricted: &VarFit, alpha: f64) -> GrangerOutcome {
    let (rss_r, rss_u) = (restricted.rss, unrestricted.rss);
    let dof = unrestricted.dof as f64;
    let lag = unrestricted.source_lags;
    let improved = rss_u < rss_r;
    let f = if !improved {
        0.0
    } else if rss_u <= 0.0 {
        f64::MAX
    } else {
        (((rss_r - rss_u) / lag as f64) / (rss_u / dof)).min(f64::MAX)
    };
    let p = f_survival(f, lag as f64, dof);
    GrangerOutcome {
        f_statistic: f,
        p_value: p,
        is_edge: improved && p <= alpha,
        diagnostic: None,
    }
}

/// Does `source` Granger-cause `target`?
pub fn granger_test(source: &[f64], target: &[f64], cfg: &GrangerConfig) -> GrangerOutcome {
    if let Err(e) = cfg.validate() {
        return GrangerOutcome::no_edge(e);
    }
    if source.len() != target.len() {
        return GrangerOutcome::no_edge(GrangerError::LengthMismatch(source.len(), target.len()));
    }
    let restricted = match fit_var_restricted(target, cfg.lag) {
        Ok(r) => r,
        Err(e) => return GrangerOutcome::no_edge(e),
    };
    test_against(&restricted, source, target, cfg.lag, cfg.alpha)
}

fn test_against(
    restricted: &VarFit,
    source: &[f64],
    target: &[f64],
    lag: usize,
    alpha: f64,
) -> GrangerOutcome {
    match fit_var_unrestricted(target, source, lag) {
        Ok(u) => compare(restricted, &u, alpha),
        Err(e) => GrangerOutcome::no_edge(e),
    }
}

/// One significant directed edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub src: String,
    pub dst: String,
    pub f: f64,
    pub p: f64,
}

/// Directed graph of significant Granger relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub alpha: f64,
    pub lag: usize,
    pub edges: Vec<CausalEdge>,
}

impl CausalGraph {
    pub fn empty(alpha: f64, lag: usize) -> Self {
        Self {
            alpha,
            lag,
            edges: Vec::new(),
        }
    }

    /// Checks the structural invariants: no self loops, no duplicate pairs,
    /// every p-value within `alpha`, and sorted order.
    pub fn validate(&self) -> Result<(), String> {
        for e in &self.edges {
            if e.src == e.dst {
                return Err(format!("self loop on {}", e.src));
            }
            if !(e.f >= 0.0) || !(0.0..=1.0).contains(&e.p) {
                return Err(format!("bad statistic on {}→{}", e.src, e.dst));
            }
            if e.p > self.alpha {
                return Err(format!("edge {}→{} has p {} > alpha", e.src, e.dst, e.p));
            }
        }
        for w in self.edges.windows(2) {
            if (&w[0].src, &w[0].dst) >= (&w[1].src, &w[1].dst) {
                return Err(format!("edges not strictly sorted at {}→{}", w[1].src, w[1].dst));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn sort(&mut self) {
        self.edges
            .sort_by(|a, b| (&a.src, &a.dst).cmp(&(&b.src, &b.dst)));
    }
}

/// How a node's feature matrix is collapsed to one scalar series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureReduction {
    /// Projection on the leading principal direction of the training nodes.
    #[default]
    Pca1,
    /// Mean over feature coordinates.
    Mean,
}

impl std::str::FromStr for FeatureReduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pca1" => Ok(Self::Pca1),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown reduction '{other}' (expected pca1 or mean)")),
        }
    }
}

/// Leading eigenvector of the pooled covariance of the training nodes'
/// feature rows, with its mean. Power iteration; sign fixed so the largest
/// loading is positive.
pub fn principal_direction(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let d = ds.dim;
    let rows: Vec<&[f64]> = ds
        .splits
        .train
        .iter()
        .flat_map(|&i| {
            let f = &ds.nodes[i].features;
            (0..f.rows()).map(move |t| f.row(t))
        })
        .collect();
    let mut mean = vec![0.0; d];
    for r in &rows {
        linalg::axpy(1.0 / rows.len().max(1) as f64, r, &mut mean);
    }
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in &rows {
        for (c, (v, m)) in centered.iter_mut().zip(r.iter().zip(&mean)) {
            *c = v - m;
        }
        linalg::outer_acc(&mut cov, 1.0, &centered, &centered);
    }

    let mut w: Vec<f64> = (0..d).map(|k| 1.0 + 0.01 * k as f64).collect();
    let n0 = linalg::norm2(&w);
    w.iter_mut().for_each(|v| *v /= n0);
    let mut next = vec![0.0; d];
    for _ in 0..1000 {
        linalg::matvec_into(&cov, &w, &mut next);
        let n = linalg::norm2(&next);
        if !(n > 0.0) {
            w = vec![0.0; d];
            w[0] = 1.0;
            break;
        }
        next.iter_mut().for_each(|v| *v /= n);
        let change: f64 = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut w, &mut next);
        if change < 1e-13 {
            break;
        }
    }
    let lead = w
        .iter()
        .copied()
        .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
    if lead < 0.0 {
        w.iter_mut().for_each(|v| *v = -*v);
    }
    (w, mean)
}

/// One scalar series per node.
pub fn reduce_features(ds: &Dataset, mode: FeatureReduction) -> Vec<Vec<f64>> {
    match mode {
        FeatureReduction::Mean => ds
            .nodes
            .iter()
            .map(|n| {
                (0..n.features.rows())
                    .map(|t| n.features.row(t).iter().sum::<f64>() / ds.dim as f64)
                    .collect()
            })
            .collect(),
        FeatureReduction::Pca1 => {
            let (w, mean) = principal_direction(ds);
            let offset = dot(&w, &mean);
            ds.nodes
                .iter()
                .map(|n| {
                    (0..n.features.rows())
                        .map(|t| dot(&w, n.features.row(t)) - offset)
                        .collect()
                })
                .collect()
        }
    }
}

/// Tests every ordered pair of series and keeps the significant edges.
///
/// Pairs are evaluated in parallel; the output order is `(src, dst)`
/// lexicographic on ids regardless of scheduling.
pub fn infer_causal_graph(
    ids: &[String],
    series: &[Vec<f64>],
    cfg: &GrangerConfig,
) -> Result<CausalGraph, GrangerError> {
    cfg.validate()?;
    let n = series.len();
    if n < 2 {
        return Err(GrangerError::TooFewNodes(n));
    }
    if ids.len() != n {
        return Err(GrangerError::LengthMismatch(ids.len(), n));
    }
    let alpha = if cfg.bonferroni {
        cfg.alpha / (n * (n - 1)) as f64
    } else {
        cfg.alpha
    };

    let per_target: Vec<Vec<CausalEdge>> = (0..n)
        .into_par_iter()
        .map(|dst| {
            let target = &series[dst];
            let Ok(restricted) = fit_var_restricted(target, cfg.lag) else {
                return Vec::new();
            };
            (0..n)
                .filter(|&src| src != dst)
                .filter_map(|src| {
                    let source = &series[src];
                    if source.len() != target.len() {
                        return None;
                    }
                    let out = test_against(&restricted, source, target, cfg.lag, alpha);
                    out.is_edge.then(|| CausalEdge {
                        src: ids[src].clone(),
                        dst: ids[dst].clone(),
                        f: out.f_statistic,
                        p: out.p_value,
                    })
                })
                .collect()
        })
        .collect();

    let mut graph = CausalGraph {
        alpha,
        lag: cfg.lag,
        edges: per_target.into_iter().flatten().collect(),
    };
    graph.sort();
    Ok(graph)
}

/// Reduces a dataset's node features and infers its causal graph.
pub fn infer_from_dataset(
    ds: &Dataset,
    cfg: &GrangerConfig,
    mode: FeatureReduction,
) -> Result<CausalGraph, GrangerError> {
    let series = reduce_features(ds, mode);
    let ids: Vec<String> = ds.nodes.iter().map(|n| n.id.clone()).collect();
    infer_causal_graph(&ids, &series, cfg)
}
