//! Classification, calibration and causal-recovery metrics.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ECE_BINS: usize = 10;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {0} outside 0..{1}")]
    LabelOutOfRange(usize, usize),
}

fn check(preds: usize, labels: &[usize], classes: usize) -> Result<(), MetricError> {
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    if preds != labels.len() {
        return Err(MetricError::LengthMismatch(preds, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(MetricError::LabelOutOfRange(bad, classes));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    check(preds.len(), labels, usize::MAX)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// F1 per class; a class absent from both predictions and labels scores 0.
pub fn per_class_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<f64>, MetricError> {
    check(preds.len(), labels, classes)?;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            if p < classes {
                fp[p] += 1;
            }
            fn_[y] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64, MetricError> {
    let f1 = per_class_f1(preds, labels, classes)?;
    Ok(f1.iter().sum::<f64>() / classes as f64)
}

/// 1-based ranks with ties replaced by their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Mann–Whitney estimate of ROC AUC; `None` without both classes.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC. Classes lacking positives or negatives are left
/// out of the average; `None` if no class qualifies.
pub fn auc_ovr(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Option<f64>, MetricError> {
    check(probs.len(), labels, classes)?;
    let per_class: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auc(&scores, &positive)
        })
        .collect();
    if per_class.is_empty() {
        return Ok(None);
    }
    Ok(Some(per_class.iter().sum::<f64>() / per_class.len() as f64))
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64, MetricError> {
    check(probs.len(), labels, usize::MAX)?;
    let bins = bins.max(1);
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let (pred, conf) = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (c, &v)| if v > b.1 { (c, v) } else { b });
        let b = ((conf * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        hit_sum[b] += f64::from(pred == y);
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hit_sum[b] / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Mean Shannon entropy (nats) of the predictive distributions.
pub fn mean_predictive_entropy(probs: &[Vec<f64>]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs
        .iter()
        .map(|p| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / probs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    pub src: String,
    pub dst: String,
    pub score: f64,
}

/// Sorts by descending score, ties by `(src, dst)`.
pub fn rank_edges(edges: &mut [ScoredEdge]) {
    edges.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (&a.src, &a.dst).cmp(&(&b.src, &b.dst)))
    });
}

/// Precision of the top-`k` scored edges against `truth`.
///
/// With fewer than `k` candidates the precision is taken over all of them
/// and the returned flag is set.
pub fn precision_at_k(
    scored: &[ScoredEdge],
    truth: &HashSet<(String, String)>,
    k: usize,
) -> (f64, bool) {
    let k = k.max(1);
    if scored.is_empty() {
        return (0.0, true);
    }
    let mut ranked = scored.to_vec();
    rank_edges(&mut ranked);
    let top = &ranked[..k.min(ranked.len())];
    let hits = top
        .iter()
        .filter(|e| truth.contains(&(e.src.clone(), e.dst.clone())))
        .count();
    (hits as f64 / top.len() as f64, ranked.len() < k)
}

/// Spearman rank correlation with midranks; `None` on zero variance.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<Option<f64>, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::Empty);
    }
    let (ra, rb) = (midranks(a), midranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (va * vb).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ece_bins: usize,
    pub k: usize,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auc: Option<f64>,
    pub ece: f64,
    /// Mean Shannon entropy of the class distributions.
    pub mean_entropy: f64,
    /// Mean vMF entropy of the node embeddings.
    pub mean_vmf_entropy: f64,
    pub p_at_k: BTreeMap<usize, f64>,
    /// Spearman correlation between causal attention scores and Granger F
    /// statistics over the scored edges.
    pub causal_rank_correlation: Option<f64>,
    pub per_class_f1: Vec<f64>,
    pub n_eval: usize,
    pub config: EvalConfig,
    pub dataset_digest: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn edge(s: &str, d: &str, score: f64) -> ScoredEdge {
        ScoredEdge { src: s.into(), dst: d.into(), score }
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        let labels = [0, 0, 1, 1];
        let v = macro_f1(&[0, 0, 0, 0], &labels, 2).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[], &[], 2), Err(MetricError::Empty));
        // A class missing from both sides contributes zero.
        assert!((macro_f1(&[0, 1], &[0, 1], 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let preds: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let perm = [2, 0, 3, 1];
        let p2: Vec<usize> = preds.iter().map(|&c| perm[c]).collect();
        let l2: Vec<usize> = labels.iter().map(|&c| perm[c]).collect();
        let a = macro_f1(&preds, &labels, 4).unwrap();
        let b = macro_f1(&p2, &l2, 4).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        let probs = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.1, 0.9]];
        assert_eq!(auc_ovr(&probs, &[0, 0, 1, 1], 2).unwrap(), Some(1.0));
        let tied = vec![vec![0.5, 0.5]; 4];
        assert_eq!(auc_ovr(&tied, &[0, 1, 0, 1], 2).unwrap(), Some(0.5));
        assert_eq!(auc_ovr(&tied, &[1, 1, 1, 1], 2).unwrap(), None);
    }

    #[test]
    fn auc_of_uninformative_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a: f64 = rng.random();
                vec![a, 1.0 - a]
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let auc = auc_ovr(&probs, &labels, 2).unwrap().unwrap();
        assert!((auc - 0.5).abs() < 0.02);
    }

    #[test]
    fn ece_examples() {
        let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(ece(&probs, &[0, 1], ECE_BINS).unwrap(), 0.0);
        let probs = vec![vec![0.9, 0.1]; 10];
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        assert!((ece(&probs, &labels, ECE_BINS).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ece_of_calibrated_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (probs, labels): (Vec<Vec<f64>>, Vec<usize>) = (0..10_000)
            .map(|_| {
                let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>().powi(3)).collect();
                let s: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let y = p.iter().position(|v| {
                    acc += v;
                    u < acc
                }).unwrap_or(2);
                (p, y)
            })
            .unzip();
        assert!(ece(&probs, &labels, ECE_BINS).unwrap() <= 0.02);
    }

    #[test]
    fn precision_examples() {
        let truth: HashSet<(String, String)> =
            [("a", "b"), ("c", "d")].iter().map(|(s, d)| (s.to_string(), d.to_string())).collect();
        let scored = vec![edge("a", "b", 3.0), edge("c", "d", 2.0), edge("x", "y", 1.0)];
        assert_eq!(precision_at_k(&scored, &truth, 2), (1.0, false));
        let scored = vec![edge("x", "y", 3.0), edge("y", "x", 2.0), edge("a", "b", 1.0)];
        assert_eq!(precision_at_k(&scored, &truth, 2), (0.0, false));
        let (p, short) = precision_at_k(&scored, &truth, 5);
        assert!((p - 1.0 / 3.0).abs() < 1e-15 && short);
        // Monotone transform leaves the ranking alone.
        let squashed: Vec<ScoredEdge> = scored.iter().map(|e| edge(&e.src, &e.dst, e.score.tanh())).collect();
        assert_eq!(precision_at_k(&scored, &truth, 2), precision_at_k(&squashed, &truth, 2));
        // Ties broken by (src, dst).
        let tied = vec![edge("z", "q", 1.0), edge("a", "b", 1.0)];
        assert_eq!(precision_at_k(&tied, &truth, 1), (1.0, false));
    }

    #[test]
    fn precision_of_random_scores_matches_hypergeometric_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let names: Vec<(String, String)> = (0..20).map(|i| (format!("s{i}"), format!("t{i}"))).collect();
        let truth: HashSet<(String, String)> = names[..5].iter().cloned().collect();
        let trials = 10_000;
        let mean = (0..trials)
            .map(|_| {
                let scored: Vec<ScoredEdge> = names
                    .iter()
                    .map(|(s, d)| edge(s, d, rng.random()))
                    .collect();
                precision_at_k(&scored, &truth, 5).0
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean - 0.25).abs() < 0.02, "{mean}");
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), Some(1.0));
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), Some(-1.0));
        let r = rank_correlation(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap().unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        assert_eq!(rank_correlation(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
        assert!(rank_correlation(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn midranks_handle_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
