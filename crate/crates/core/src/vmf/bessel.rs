//! Modified Bessel functions of the first kind, evaluated in log space.
//!
//! Three regimes:
//! * ascending power series for `x < max(20, 2ν)`;
//! * Debye-type uniform expansion in `1/ν` for larger arguments with `ν ≥ 2`;
//! * Hankel large-argument expansion for larger arguments with `ν < 2`,
//!   where the uniform expansion loses accuracy.
//!
//! Ratios `I_{ν+1}/I_ν` for large arguments come from the Gautschi continued
//! fraction rather than a difference of logs.

use std::sync::OnceLock;

use statrs::function::gamma::ln_gamma;

const UNIFORM_TERMS: usize = 14;
const SERIES_MAX_TERMS: usize = 100_000;

/// `log I_ν(x)` for `ν ≥ 0`, `x ≥ 0`. Callers validate finiteness.
pub(crate) fn log_bessel_i_unchecked(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x < 20f64.max(2.0 * nu) {
        log_series(nu, x)
    } else if nu >= 2.0 {
        log_uniform(nu, x)
    } else {
        log_hankel(nu, x)
    }
}

/// Ascending series `Σ (x²/4)^k / (k! Γ(ν+k+1))`, rescaled to stay in range.
pub(crate) fn log_series(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut log_scale = 0.0_f64;
    for k in 1..SERIES_MAX_TERMS {
        let kf = k as f64;
        term *= q / (kf * (nu + kf));
        sum += term;
        if sum > 1e250 {
            log_scale += sum.ln();
            term /= sum;
            sum = 1.0;
        }
        if term < sum * 1e-17 && kf > q.sqrt() {
            break;
        }
    }
    nu * (0.5 * x).ln() - ln_gamma(nu + 1.0) + sum.ln() + log_scale
}

/// Coefficients (ascending powers of t) of the Debye polynomials u_k(t),
/// generated from
/// u_{k+1}(t) = ½t²(1−t²)u_k'(t) + ⅛∫₀ᵗ (1−5s²)u_k(s) ds.
fn debye_polys() -> &'static [Vec<f64>] {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut polys = vec![vec![1.0]];
        for k in 0..UNIFORM_TERMS {
            let u = &polys[k];
            let mut next = vec![0.0; u.len() + 3];
            // ½ t² (1 − t²) u'(t)
            for (p, &c) in u.iter().enumerate().skip(1) {
                let d = c * p as f64;
                next[p + 1] += 0.5 * d;
                next[p + 3] -= 0.5 * d;
            }
            // ⅛ ∫ (1 − 5 s²) u(s) ds
            for (p, &c) in u.iter().enumerate() {
                next[p + 1] += c / (8.0 * (p as f64 + 1.0));
                next[p + 3] -= 5.0 * c / (8.0 * (p as f64 + 3.0));
            }
            polys.push(next);
        }
        polys
    })
}

fn eval_poly(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

fn log_uniform(nu: f64, x: f64) -> f64 {
    let z = x / nu;
    let root = (1.0 + z * z).sqrt();
    let t = 1.0 / root;
    let eta = root + (z / (1.0 + root)).ln();
    let mut corr = 0.0;
    let mut nu_pow = 1.0;
    for u in debye_polys().iter().skip(1) {
        nu_pow *= nu;
        let term = eval_poly(u, t) / nu_pow;
        corr += term;
        if term.abs() < 1e-17 {
            break;
        }
    }
    nu * eta - 0.5 * (2.0 * std::f64::consts::PI * nu).ln() - 0.25 * (1.0 + z * z).ln()
        + corr.ln_1p()
}

fn log_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = -term * (mu - odd * odd) / (kf * 8.0 * x);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

/// `I_{ν+1}(x) / I_ν(x)` by the Gautschi continued fraction
/// `1 / (2(ν+1)/x + 1 / (2(ν+2)/x + …))`, evaluated with modified Lentz.
pub(crate) fn bessel_ratio_cf(nu: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for k in 1..1_000_000 {
        let b = 2.0 * (nu + k as f64) / x;
        d = b + d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + 1.0 / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    f
}
