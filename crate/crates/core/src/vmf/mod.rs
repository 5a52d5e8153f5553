//! von Mises–Fisher distribution on the unit sphere `S^{d−1}`.
//!
//! Density `p(h) = C_d(κ) exp(κ μᵀh)` with
//! `log C_d(κ) = (d/2 − 1) log κ − (d/2) log 2π − log I_{d/2−1}(κ)`.
//! Entropies are in nats.

mod bessel;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linalg::{dot, norm2};

/// Below this concentration the uniform limit is used directly.
pub const KAPPA_UNIFORM: f64 = 1e-8;

/// Above this concentration the mean resultant uses the continued fraction.
const KAPPA_RATIO_CF: f64 = 500.0;

const UNIT_TOL: f64 = 1e-9;
const DENSITY_UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VmfError {
    #[error("dimension must be at least 2, got {0}")]
    Dimension(usize),
    #[error("concentration must be finite and non-negative, got {0}")]
    Kappa(f64),
    #[error("vector is not unit norm (‖v‖ = {0})")]
    NotUnit(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid Bessel argument: order {nu}, x {x}")]
    BesselDomain { nu: f64, x: f64 },
}

/// Mean direction and concentration of a vMF distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self, VmfError> {
        if mu.len() < 2 {
            return Err(VmfError::Dimension(mu.len()));
        }
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(VmfError::Kappa(kappa));
        }
        let n = norm2(&mu);
        if !((n - 1.0).abs() <= UNIT_TOL) {
            return Err(VmfError::NotUnit(n));
        }
        Ok(Self { mu, kappa })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `log I_ν(x)`, the log of the modified Bessel function of the first kind.
pub fn log_bessel_i(nu: f64, x: f64) -> Result<f64, VmfError> {
    if !(nu.is_finite() && x.is_finite() && nu >= 0.0 && x >= 0.0) {
        return Err(VmfError::BesselDomain { nu, x });
    }
    Ok(bessel::log_bessel_i_unchecked(nu, x))
}

/// Log surface area of `S^{d−1}`: `log(2π^{d/2} / Γ(d/2))`.
pub fn log_sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() - ln_gamma(h)
}

fn check(d: usize, kappa: f64) -> Result<(), VmfError> {
    if d < 2 {
        return Err(VmfError::Dimension(d));
    }
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(VmfError::Kappa(kappa));
    }
    Ok(())
}

/// `log C_d(κ)`.
pub fn log_norm_const(d: usize, kappa: f64) -> Result<f64, VmfError> {
    check(d, kappa)?;
    Ok(log_norm_const_unchecked(d, kappa))
}

pub(crate) fn log_norm_const_unchecked(d: usize, kappa: f64) -> f64 {
    if kappa < KAPPA_UNIFORM {
        return -log_sphere_area(d);
    }
    let nu = d as f64 / 2.0 - 1.0;
    let h = d as f64 / 2.0;
    nu * kappa.ln() - h * (2.0 * std::f64::consts::PI).ln() - bessel::log_bessel_i_unchecked(nu, kappa)
}

/// Mean resultant length `A_d(κ) = I_{d/2}(κ) / I_{d/2−1}(κ)`.
pub fn mean_resultant(d: usize, kappa: f64) -> Result<f64, VmfError> {
    check(d, kappa)?;
    Ok(mean_resultant_unchecked(d, kappa))
}

pub(crate) fn mean_resultant_unchecked(d: usize, kappa: f64) -> f64 {
    if kappa == 0.0 {
        return 0.0;
    }
    let nu = d as f64 / 2.0 - 1.0;
    if kappa > KAPPA_RATIO_CF {
        return bessel::bessel_ratio_cf(nu, kappa);
    }
    if kappa < 1e-6 {
        // Leading term of the series ratio; avoids log I of a tiny argument.
        return kappa / d as f64;
    }
    (bessel::log_bessel_i_unchecked(nu + 1.0, kappa) - bessel::log_bessel_i_unchecked(nu, kappa))
        .exp()
}

/// Differential entropy in nats: `−log C_d(κ) − κ A_d(κ)`.
pub fn entropy(p: &VmfParams) -> f64 {
    entropy_of(p.dim(), p.kappa)
}

/// Entropy from dimension and concentration alone; the mean direction does
/// not enter.
pub fn entropy_of(d: usize, kappa: f64) -> f64 {
    -log_norm_const_unchecked(d, kappa) - kappa * mean_resultant_unchecked(d, kappa)
}

/// `dH/dκ = −κ A_d'(κ)` with `A_d' = 1 − A² − (d−1) A / κ`.
pub fn entropy_grad_kappa(d: usize, kappa: f64) -> f64 {
    if kappa < KAPPA_UNIFORM {
        return 0.0;
    }
    let a = mean_resultant_unchecked(d, kappa);
    let a_prime = 1.0 - a * a - (d as f64 - 1.0) * a / kappa;
    -kappa * a_prime
}

/// `log C_d(κ) + κ μᵀh`.
pub fn log_density(p: &VmfParams, h: &[f64]) -> Result<f64, VmfError> {
    if h.len() != p.dim() {
        return Err(VmfError::DimensionMismatch {
            expected: p.dim(),
            got: h.len(),
        });
    }
    let n = norm2(h);
    if !((n - 1.0).abs() <= DENSITY_UNIT_TOL) {
        return Err(VmfError::NotUnit(n));
    }
    Ok(log_norm_const_unchecked(p.dim(), p.kappa) + p.kappa * dot(&p.mu, h))
}

/// Draws `n` samples with Wood's rejection scheme.
///
/// The component along `μ` is drawn from its marginal by rejection from a
/// Beta envelope; the tangent component is uniform on the orthogonal sphere.
pub fn sample<R: Rng + ?Sized>(p: &VmfParams, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let d = p.dim();
    let dm1 = (d - 1) as f64;
    let kappa = p.kappa;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let envelope = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("shape parameters are positive");

    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = loop {
            let z: f64 = envelope.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        let tangent = loop {
            let mut g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let along = dot(&g, &p.mu);
            for (gi, mi) in g.iter_mut().zip(&p.mu) {
                *gi -= along * mi;
            }
            let gn = norm2(&g);
            if gn > 1e-12 {
                g.iter_mut().for_each(|v| *v /= gn);
                break g;
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        let mut v: Vec<f64> = p.mu.iter().zip(&tangent).map(|(m, t)| w * m + s * t).collect();
        let vn = norm2(&v);
        v.iter_mut().for_each(|x| *x /= vn);
        out.push(v);
    }
    out
}

/// Uniform sample on `S^{d−1}`.
pub fn uniform_sphere<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm2(&g);
        if n > 1e-12 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TAU: f64 = 2.0 * std::f64::consts::PI;

    fn e1(d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[0] = 1.0;
        v
    }

    fn closed_log_c3(k: f64) -> f64 {
        (k / (2.0 * TAU * k.sinh())).ln()
    }

    fn closed_a3(k: f64) -> f64 {
        1.0 / k.tanh() - 1.0 / k
    }

    #[test]
    fn bessel_examples() {
        assert_eq!(log_bessel_i(0.0, 0.0).unwrap(), 0.0);
        // I_{1/2}(x) = sqrt(2/(πx)) sinh x
        let want = ((2.0 / std::f64::consts::PI).sqrt() * 1f64.sinh()).ln();
        assert!((log_bessel_i(0.5, 1.0).unwrap() - want).abs() < 1e-8);
        assert!((want - (-0.06444)).abs() < 1e-4);
        assert!(log_bessel_i(f64::NAN, 1.0).is_err());
        assert!(log_bessel_i(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn bessel_i1_at_50_vs_60_term_series() {
        use statrs::function::gamma::ln_gamma;
        // Terms summed in log space from the largest down.
        let logs: Vec<f64> = (0..60)
            .map(|k| {
                let k = k as f64;
                (2.0 * k + 1.0) * 25f64.ln() - ln_gamma(k + 1.0) - ln_gamma(k + 2.0)
            })
            .collect();
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut terms: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = mx + terms.iter().sum::<f64>().ln();
        let got = log_bessel_i(1.0, 50.0).unwrap();
        // Relative error on I itself.
        assert!(((got - want).exp() - 1.0).abs() <= 1e-9, "{got} vs {want}");
    }

    #[test]
    fn norm_const_examples() {
        assert!((log_norm_const(3, 0.0).unwrap() + (2.0 * TAU).ln()).abs() < 1e-12);
        assert!((log_norm_const(3, 0.0).unwrap() + 2.53102).abs() < 1e-5);
        let v = log_norm_const(3, 5.0).unwrap();
        assert!((v - closed_log_c3(5.0)).abs() < 1e-10);
        assert!((v + 5.228394).abs() < 1e-6);
        assert!(matches!(log_norm_const(1, 1.0), Err(VmfError::Dimension(1))));
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(d, k) in &[(2usize, 1.5), (3, 2.0), (5, 2.0), (8, 3.0)] {
            let p = VmfParams::new(e1(d), k).unwrap();
            let n = 100_000;
            let area = log_sphere_area(d).exp();
            let mean: f64 = (0..n)
                .map(|_| log_density(&p, &uniform_sphere(d, &mut rng)).unwrap().exp())
                .sum::<f64>()
                / n as f64;
            assert!((mean * area - 1.0).abs() < 0.01, "d={d} k={k}: {}", mean * area);
        }
    }

    #[test]
    fn mean_resultant_examples() {
        for d in [2, 3, 8, 64] {
            assert_eq!(mean_resultant(d, 0.0).unwrap(), 0.0);
        }
        let a = mean_resultant(3, 5.0).unwrap();
        assert!((a - closed_a3(5.0)).abs() < 1e-8);
        assert!((a - 0.800091).abs() < 1e-6);
        for d in [2, 3, 8, 64] {
            let grid: Vec<f64> = (1..=1000).map(|i| i as f64 * 0.1).collect();
            let vals: Vec<f64> = grid.iter().map(|&k| mean_resultant(d, k).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[0] < w[1]), "d={d}");
            assert!(vals.iter().all(|&a| (0.0..1.0).contains(&a)));
        }
    }

    #[test]
    fn mean_resultant_continuous_across_cf_switch() {
        for d in [2, 3, 64] {
            let below = mean_resultant(d, 500.0).unwrap();
            let above = mean_resultant(d, 500.0 + 1e-9).unwrap();
            assert!((below - above).abs() < 1e-12, "d={d}");
        }
        let a = mean_resultant(3, 1000.0).unwrap();
        assert!((a - closed_a3(1000.0)).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let p = VmfParams::new(e1(3), 0.0).unwrap();
        assert!((entropy(&p) - (2.0 * TAU).ln()).abs() < 1e-12);
        let p = VmfParams::new(e1(3), 5.0).unwrap();
        let want = -closed_log_c3(5.0) - 5.0 * closed_a3(5.0);
        assert!((entropy(&p) - want).abs() < 1e-10);
        assert!((entropy(&p) - 1.227940).abs() < 1e-5);
    }

    #[test]
    fn entropy_decreasing_on_grid() {
        let grid = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];
        for d in [2, 3, 8, 64] {
            let h: Vec<f64> = grid.iter().map(|&k| entropy_of(d, k)).collect();
            assert!(h.windows(2).all(|w| w[1] < w[0]), "d={d}: {h:?}");
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_difference() {
        for d in [2, 3, 8, 64] {
            for k in [0.3, 2.0, 20.0, 150.0] {
                let step = 1e-5 * k;
                let fd = (entropy_of(d, k + step) - entropy_of(d, k - step)) / (2.0 * step);
                let g = entropy_grad_kappa(d, k);
                assert!((fd - g).abs() <= 1e-6 * g.abs().max(0.1), "d={d} k={k}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn log_density_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p0 = VmfParams::new(e1(3), 0.0).unwrap();
        for _ in 0..5 {
            let h = uniform_sphere(3, &mut rng);
            assert!((log_density(&p0, &h).unwrap() + (2.0 * TAU).ln()).abs() < 1e-12);
        }
        let p = VmfParams::new(e1(3), 5.0).unwrap();
        let at_mode = log_density(&p, &e1(3)).unwrap();
        assert!((at_mode - (-0.228394)).abs() < 1e-5);
        for _ in 0..1000 {
            let h = uniform_sphere(3, &mut rng);
            assert!(log_density(&p, &h).unwrap() <= at_mode);
        }
        assert!(matches!(log_density(&p, &[1.0, 1.0, 0.0]), Err(VmfError::NotUnit(_))));
    }

    #[test]
    fn sampler_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let uniform = VmfParams::new(e1(3), 0.0).unwrap();
        let xs = sample(&uniform, &mut rng, 10_000);
        let mut mean = vec![0.0; 3];
        for x in &xs {
            assert!((norm2(x) - 1.0).abs() < 1e-9);
            crate::linalg::axpy(1.0 / xs.len() as f64, x, &mut mean);
        }
        assert!(norm2(&mean) <= 0.02);

        let p = VmfParams::new(e1(3), 50.0).unwrap();
        let xs = sample(&p, &mut rng, 10_000);
        let r = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        assert!((r - closed_a3(50.0)).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(VmfParams::new(vec![1.0], 1.0).is_err());
        assert!(VmfParams::new(vec![1.0, 0.0], -1.0).is_err());
        assert!(VmfParams::new(vec![1.0, 1.0], 1.0).is_err());
    }
}
