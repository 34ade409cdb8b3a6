//! Analytical quantities backing the filter: covariance stability bounds,
//! the scalar Riccati closed form, Lyapunov weights of the killed index
//! chain, and the contraction/excitation rate pair used as run diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::stream_rng;
use crate::error::{Error, Result};
use crate::locmat::LocalizationMatrix;

/// Long-run envelope of the sample covariance diagonal.
#[derive(Debug, Clone, Copy)]
pub struct StabilityBounds {
    /// Upper bound on the largest diagonal entry.
    pub lambda_max: f64,
    /// Lower bound on the smallest diagonal entry.
    pub lambda_min: f64,
    /// Time after which the upper bound holds.
    pub t_star_upper: f64,
    /// Time after which the lower bound holds.
    pub t_star_lower: f64,
}

/// Covariance envelope for a drift with row-sum constant `c_f`, noise
/// weights in `[omega_min, omega_max]`, localization row-sum bound
/// `c_phi`, and noise intensity `epsilon`. Both bounds scale as
/// `sqrt(epsilon)`.
pub fn stability_bounds(
    c_f: f64,
    omega_min: f64,
    omega_max: f64,
    c_phi: f64,
    epsilon: f64,
) -> Result<StabilityBounds> {
    for (name, v) in [
        ("c_f", c_f),
        ("omega_min", omega_min),
        ("omega_max", omega_max),
        ("c_phi", c_phi),
        ("epsilon", epsilon),
    ] {
        if !(v >= 0.0) || ((name != "c_f") && v == 0.0) {
            return Err(Error::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    let lambda_max = (2.0 * epsilon / omega_min) * (c_f * c_f + 3.0 * omega_min / epsilon).sqrt();
    let t_star_upper = omega_min * epsilon / lambda_max;
    let lambda_min = epsilon / (3.0 * lambda_max * omega_max * c_phi);
    let t_star_lower = t_star_upper + 3.0 * lambda_min;
    Ok(StabilityBounds {
        lambda_max,
        lambda_min,
        t_star_upper,
        t_star_lower,
    })
}

/// Solution at time `t` of the scalar Riccati equation
/// `dy/dt = -(c/eps) y^2 + b y + a` started from `y0`.
///
/// With roots `y_pm = b eps / 2c +- sqrt(b^2 eps^2 / 4c^2 + a eps / c)`
/// the trajectory satisfies
/// `(y - y_minus)/(y - y_plus) = exp((c/eps) t (y_plus - y_minus)) *
/// (y0 - y_minus)/(y0 - y_plus)`, which solved for `y` gives
/// `y = y_plus + (y_plus - y_minus)/(E - 1)`. The exponential factor can
/// overflow for large `t`; an infinite value collapses to the stable root.
pub fn riccati_closed_form(y0: f64, a: f64, b: f64, c: f64, epsilon: f64, t: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }
    if c == 0.0 {
        return Err(Error::Domain("c must be nonzero".into()));
    }
    if t < 0.0 {
        return Err(Error::Domain(format!("t must be >= 0, got {t}")));
    }
    let center = b * epsilon / (2.0 * c);
    let disc = center * center + a * epsilon / c;
    if disc <= 0.0 {
        return Err(Error::Domain(format!(
            "quadratic has no distinct real roots: discriminant {disc:.3e}"
        )));
    }
    let half_gap = disc.sqrt();
    let y_plus = center + half_gap;
    let y_minus = center - half_gap;
    if y0 == y_plus {
        return Err(Error::Domain(
            "y0 equals the stable root: trajectory is degenerate".into(),
        ));
    }
    let growth = (c / epsilon) * t * (y_plus - y_minus);
    let e = growth.exp() * (y0 - y_minus) / (y0 - y_plus);
    if e.is_infinite() {
        return Ok(y_plus);
    }
    Ok(y_plus + (y_plus - y_minus) / (e - 1.0))
}

/// Weights certifying a component-wise error bound for target index `i`.
#[derive(Debug, Clone)]
pub struct LyapunovWeights {
    pub i: usize,
    pub v: DVector<f64>,
    pub q: f64,
}

fn check_dominance(phi: &LocalizationMatrix, q: f64, i: usize) -> Result<Vec<f64>> {
    let n = phi.n();
    if i >= n {
        return Err(Error::IndexOutOfRange(format!(
            "target index {i} for dimension {n}"
        )));
    }
    if !(q < 1.0) {
        return Err(Error::Domain(format!("q must be < 1, got {q}")));
    }
    let row_sums: Vec<f64> = (0..n)
        .map(|j| {
            (0..n)
                .filter(|&l| l != j)
                .map(|l| phi.get(j, l))
                .sum::<f64>()
        })
        .collect();
    let max_row = row_sums.iter().cloned().fold(0.0f64, f64::max);
    if q < max_row {
        return Err(Error::Domain(format!(
            "q = {q} is below the off-diagonal row-sum maximum {max_row}"
        )));
    }
    Ok(row_sums)
}

/// Solve the first-step-analysis linear system
/// `(1 - q + S_j) v_j - sum_{l != j} phi_jl v_l = (1 - q) 1_{j=i}` with
/// `S_j` the off-diagonal row sum.
pub fn lyapunov_weights(phi: &LocalizationMatrix, q: f64, i: usize) -> Result<LyapunovWeights> {
    let row_sums = check_dominance(phi, q, i)?;
    let n = phi.n();
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        for l in 0..n {
            a[(j, l)] = if l == j {
                1.0 - q + row_sums[j]
            } else {
                -phi.get(j, l)
            };
        }
    }
    let mut rhs = DVector::zeros(n);
    rhs[i] = 1.0 - q;
    let v = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Domain("weight system is singular".into()))?;
    Ok(LyapunovWeights { i, v, q })
}

/// Monte-Carlo estimate of the weights through the killed chain: from each
/// start `j`, draw a geometric lifetime `T` with `P(T = n) = (1-q) q^(n-1)`,
/// walk the chain (move `j -> l` with probability `phi_jl / q`, stay
/// otherwise), and average the visit count `sum_{k=1}^T 1_{X_k = i}`.
/// Returns per-start means and standard errors. Multiplying the means by
/// `(1 - q)` reconciles them with the linear-system weights.
pub fn lyapunov_weights_mc(
    phi: &LocalizationMatrix,
    q: f64,
    i: usize,
    samples: u64,
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dominance(phi, q, i)?;
    if samples < 1 {
        return Err(Error::Validation("samples must be >= 1".into()));
    }
    let n = phi.n();
    let mut rng = stream_rng(seed, 0);
    let mut means = DVector::zeros(n);
    let mut ses = DVector::zeros(n);
    let ln_q = q.ln();
    for j in 0..n {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..samples {
            let u: f64 = rng.random();
            let lifetime = if q == 0.0 {
                1
            } else {
                (u.ln() / ln_q).floor() as u64 + 1
            };
            let mut s = j;
            let mut visits = u64::from(s == i);
            for _ in 1..lifetime {
                let mut draw: f64 = rng.random::<f64>() * q;
                for l in 0..n {
                    if l == s {
                        continue;
                    }
                    draw -= phi.get(s, l);
                    if draw < 0.0 {
                        s = l;
                        break;
                    }
                }
                visits += u64::from(s == i);
            }
            let x = visits as f64;
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / samples as f64;
        let var = (sum_sq / samples as f64 - mean * mean).max(0.0);
        means[j] = mean;
        ses[j] = (var / samples as f64).sqrt();
    }
    Ok((means, ses))
}

/// Contraction rate `alpha` and excitation rate `beta` of the per-component
/// error recursion.
#[derive(Debug, Clone, Copy)]
pub struct RateDiagnostics {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
}

/// `alpha = 2 rho p_min / eps - c_f - 1` and
/// `beta = c_f^2 p_max + 2 + c_phi^2 omega_max p_max^2 / eps`.
pub fn alpha_beta(
    p_min: f64,
    p_max: f64,
    rho: f64,
    c_f: f64,
    c_phi: f64,
    omega_max: f64,
    epsilon: f64,
) -> RateDiagnostics {
    let alpha = 2.0 * rho * p_min / epsilon - c_f - 1.0;
    let beta = c_f * c_f * p_max + 2.0 + c_phi * c_phi * omega_max * p_max * p_max / epsilon;
    RateDiagnostics { alpha, beta, rho }
}
