//! The localized ensemble Kalman-Bucy filter.
//!
//! Each assimilation step freezes the ensemble statistics, localizes the
//! sample covariance with the taper matrix, and moves every particle by
//!
//! ```text
//! dX_i = f(X_i) dt + Pdag (X_i - Xbar) dt
//!        - (1 / 2 eps) P_loc Omega (X_i dt + Xbar dt - 2 dY)
//! ```
//!
//! where `Pdag` is the diagonal-inverse inflation term and `P_loc` the
//! Schur-localized sample covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{stream_rng, ObservationRecord, STREAM_ENSEMBLE};
use crate::error::{Error, Result};
use crate::locmat::{
    default_diag_floor, diag_inverse, localization_stats, min_eigenvalue_sym, one_norm,
    schur_localize, CovMatrix, LocalizationMatrix,
};
use crate::model::{DriftModel, ObsNoiseSpec};
use crate::theory::{alpha_beta, RateDiagnostics};

/// An ensemble of at least two particles of equal dimension.
#[derive(Debug, Clone)]
pub struct Ensemble {
    particles: Vec<DVector<f64>>,
}

impl Ensemble {
    pub fn new(particles: Vec<DVector<f64>>) -> Result<Self> {
        if particles.len() < 2 {
            return Err(Error::Validation(format!(
                "ensemble needs at least 2 particles, got {}",
                particles.len()
            )));
        }
        let n = particles[0].len();
        if n == 0 {
            return Err(Error::Validation("particles must be non-empty".into()));
        }
        for (i, p) in particles.iter().enumerate() {
            if p.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "particle {i} has length {} but particle 0 has {n}",
                    p.len()
                )));
            }
        }
        Ok(Ensemble { particles })
    }

    pub fn m(&self) -> usize {
        self.particles.len()
    }

    pub fn n(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    /// Ensemble mean, accumulated in particle index order.
    pub fn mean(&self) -> DVector<f64> {
        let mut sum = DVector::zeros(self.n());
        for p in &self.particles {
            sum += p;
        }
        sum / self.m() as f64
    }
}

/// Mean and unbiased sample covariance, both in fixed particle order.
pub fn ensemble_stats(ens: &Ensemble) -> (DVector<f64>, CovMatrix) {
    let mean = ens.mean();
    let n = ens.n();
    let mut cov = DMatrix::zeros(n, n);
    for p in ens.particles() {
        let d = p - &mean;
        // the outer product is exactly symmetric, entry by entry
        cov.syger(1.0, &d, &d, 1.0);
    }
    cov /= (ens.m() - 1) as f64;
    cov.fill_upper_triangle_with_lower_triangle();
    (mean, CovMatrix::from_matrix(cov).expect("sample covariance is symmetric"))
}

/// Draw `m` particles from a unit Gaussian around `center`.
pub fn init_ensemble(center: &DVector<f64>, m: usize, seed: u64) -> Result<Ensemble> {
    if m < 2 {
        return Err(Error::Validation(format!(
            "ensemble needs at least 2 particles, got {m}"
        )));
    }
    let mut rng = stream_rng(seed, STREAM_ENSEMBLE);
    let n = center.len();
    let particles = (0..m)
        .map(|_| DVector::from_fn(n, |i, _| center[i] + rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Ensemble::new(particles)
}

/// Static configuration of one filter run.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub phi: LocalizationMatrix,
    pub obs: ObsNoiseSpec,
    pub dt: f64,
    /// Apply the `Pdag (X_i - Xbar)` inflation term.
    pub inflation_on: bool,
    /// Collapse threshold for covariance diagonals; defaults to
    /// `1e-12 * max(1, max diag)` when unset.
    pub diag_floor: Option<f64>,
    /// Reject steps whose gain or inflation rate is unresolved by `dt`.
    pub stiffness_guard: bool,
}

impl FilterConfig {
    pub fn new(phi: LocalizationMatrix, obs: ObsNoiseSpec, dt: f64) -> Result<Self> {
        if phi.n() != obs.n() {
            return Err(Error::DimensionMismatch(format!(
                "localization has dimension {} but noise spec has {}",
                phi.n(),
                obs.n()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Validation(format!("dt must be > 0, got {dt}")));
        }
        Ok(FilterConfig {
            phi,
            obs,
            dt,
            inflation_on: true,
            diag_floor: None,
            stiffness_guard: true,
        })
    }

    pub fn n(&self) -> usize {
        self.phi.n()
    }
}

/// Ensemble statistics frozen at the start of a step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub mean: DVector<f64>,
    pub cov: CovMatrix,
    pub p_min: f64,
    pub p_max: f64,
}

fn frozen_step_inputs(
    ens: &Ensemble,
    cfg: &FilterConfig,
) -> Result<(StepStats, DMatrix<f64>, Option<CovMatrix>)> {
    let (mean, cov) = ensemble_stats(ens);
    let floor = cfg.diag_floor.unwrap_or_else(|| default_diag_floor(&cov));
    let p_min = cov.min_diag();
    if p_min <= floor {
        let index = (0..cov.n())
            .min_by(|&a, &b| cov.get(a, a).total_cmp(&cov.get(b, b)))
            .unwrap();
        return Err(Error::SingularCovariance {
            index,
            value: p_min,
            floor,
        });
    }
    let p_loc = schur_localize(&cov, &cfg.phi)?;
    // G = P_loc * diag(Omega), shared by the gain on every particle
    let mut gain = p_loc.into_inner();
    for j in 0..gain.ncols() {
        let w = cfg.obs.omega()[j];
        gain.column_mut(j).scale_mut(w);
    }
    if cfg.stiffness_guard {
        let mut rate = one_norm(&gain) / cfg.obs.epsilon();
        if cfg.inflation_on {
            rate = rate.max(1.0 / p_min);
        }
        let product = cfg.dt * rate;
        if product > 0.5 {
            return Err(Error::Stiffness {
                dt: cfg.dt,
                rate,
                product,
            });
        }
    }
    let pdag = if cfg.inflation_on {
        Some(diag_inverse(&cov, floor)?)
    } else {
        None
    };
    let p_max = cov.max_diag();
    Ok((
        StepStats {
            mean,
            cov,
            p_min,
            p_max,
        },
        gain,
        pdag,
    ))
}

/// Advance every particle by one Euler step of the filter equation, using
/// statistics frozen at the step start. Returns those statistics.
pub fn filter_step(
    ens: &mut Ensemble,
    model: &DriftModel,
    rec: &ObservationRecord,
    cfg: &FilterConfig,
) -> Result<StepStats> {
    let n = ens.n();
    if rec.delta_y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "observation has length {} but state has {n}",
            rec.delta_y.len()
        )));
    }
    if cfg.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "filter is configured for dimension {} but state has {n}",
            cfg.n()
        )));
    }
    let (stats, gain, pdag) = frozen_step_inputs(ens, cfg)?;
    let dt = cfg.dt;
    let half_gain_scale = 1.0 / (2.0 * cfg.obs.epsilon());
    for p in ens.particles.iter_mut() {
        let f = model.eval(p)?;
        // innovation argument X_i dt + Xbar dt - 2 dY
        let innov = (&*p + &stats.mean) * dt - &rec.delta_y * 2.0;
        let mut next = &*p + f * dt;
        if let Some(pdag) = &pdag {
            for i in 0..n {
                next[i] += pdag.get(i, i) * (p[i] - stats.mean[i]) * dt;
            }
        }
        next.gemv(-half_gain_scale, &gain, &innov, 1.0);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                step: rec.step_index,
                context: "particle update".into(),
            });
        }
        *p = next;
    }
    Ok(stats)
}

/// Increment of the ensemble mean over one step:
/// `fbar dt - (1/eps) P_loc Omega (Xbar dt - dY)`.
pub fn mean_increment(
    ens: &Ensemble,
    model: &DriftModel,
    rec: &ObservationRecord,
    cfg: &FilterConfig,
) -> Result<DVector<f64>> {
    let (stats, gain, _) = frozen_step_inputs(ens, cfg)?;
    let mut fbar = DVector::zeros(ens.n());
    for p in ens.particles() {
        fbar += model.eval(p)?;
    }
    fbar /= ens.m() as f64;
    let innov = &stats.mean * cfg.dt - &rec.delta_y;
    let mut inc = fbar * cfg.dt;
    inc.gemv(-1.0 / cfg.obs.epsilon(), &gain, &innov, 1.0);
    Ok(inc)
}

/// Time derivative of the sample covariance under the deterministic filter
/// flow:
/// `(F + F') + (Pdag P + P Pdag) - (1 / 2 eps)(P_loc Omega P + P Omega P_loc)`.
pub fn cov_ode_rhs(ens: &Ensemble, model: &DriftModel, cfg: &FilterConfig) -> Result<DMatrix<f64>> {
    let (stats, gain, pdag) = frozen_step_inputs(ens, cfg)?;
    let n = ens.n();
    let mut fbar = DVector::zeros(n);
    let drifts: Vec<DVector<f64>> = ens
        .particles()
        .iter()
        .map(|p| model.eval(p))
        .collect::<Result<_>>()?;
    for f in &drifts {
        fbar += f;
    }
    fbar /= ens.m() as f64;
    // F = (1 / (M - 1)) sum (X_i - Xbar)(f(X_i) - fbar)'
    let mut cross = DMatrix::zeros(n, n);
    for (p, f) in ens.particles().iter().zip(&drifts) {
        let d = p - &stats.mean;
        let g = f - &fbar;
        cross.ger(1.0, &d, &g, 1.0);
    }
    cross /= (ens.m() - 1) as f64;
    let mut rhs = &cross + cross.transpose();
    if let Some(pdag) = &pdag {
        // Pdag is diagonal: Pdag P scales rows, P Pdag scales columns
        let p = stats.cov.entries();
        for i in 0..n {
            for j in 0..n {
                rhs[(i, j)] += (pdag.get(i, i) + pdag.get(j, j)) * p[(i, j)];
            }
        }
    }
    let gp = &gain * stats.cov.entries();
    let scale = 1.0 / (2.0 * cfg.obs.epsilon());
    rhs -= (&gp + gp.transpose()) * scale;
    Ok(rhs)
}

/// Sampling cadence for run diagnostics.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub diag_stride: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { diag_stride: 100 }
    }
}

/// One diagnostic sample along a run.
#[derive(Debug, Clone)]
pub struct DiagSample {
    pub step: u64,
    pub p_min: f64,
    pub p_max: f64,
    pub rates: RateDiagnostics,
}

/// Aggregate outcome of a filter run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub diagnostics: Vec<DiagSample>,
    /// Diagnostic samples where the contraction rate was not positive.
    pub alpha_nonpositive: u64,
    pub final_mean: DVector<f64>,
}

/// Assimilate a stream of observation increments. The callback receives
/// `(step, posterior mean, frozen step statistics)` after every step.
pub fn run_filter<I, F>(
    ens: &mut Ensemble,
    model: &DriftModel,
    obs: I,
    cfg: &FilterConfig,
    opts: &RunOptions,
    mut on_step: F,
) -> Result<RunSummary>
where
    I: Iterator<Item = Result<ObservationRecord>>,
    F: FnMut(u64, &DVector<f64>, &StepStats),
{
    if opts.diag_stride < 1 {
        return Err(Error::Validation("diag_stride must be >= 1".into()));
    }
    let loc_stats = localization_stats(&cfg.phi);
    let rho = if loc_stats.diag_dominant {
        1.0 - loc_stats.q
    } else {
        min_eigenvalue_sym(cfg.phi.entries())
    };
    let mut diagnostics = Vec::new();
    let mut alpha_nonpositive = 0;
    let mut steps = 0;
    for rec in obs {
        let rec = rec?;
        let stats = filter_step(ens, model, &rec, cfg).map_err(|e| match e {
            Error::AtStep { .. } => e,
            other => other.at_step(rec.step_index),
        })?;
        steps += 1;
        if rec.step_index % opts.diag_stride == 0 {
            let rates = alpha_beta(
                stats.p_min,
                stats.p_max,
                rho,
                model.c_f(),
                loc_stats.c_phi,
                cfg.obs.omega_max(),
                cfg.obs.epsilon(),
            );
            if rates.alpha <= 0.0 {
                alpha_nonpositive += 1;
            }
            diagnostics.push(DiagSample {
                step: rec.step_index,
                p_min: stats.p_min,
                p_max: stats.p_max,
                rates,
            });
        }
        let post_mean = ens.mean();
        on_step(rec.step_index, &post_mean, &stats);
    }
    if steps == 0 {
        return Err(Error::Validation("observation stream was empty".into()));
    }
    Ok(RunSummary {
        steps,
        diagnostics,
        alpha_nonpositive,
        final_mean: ens.mean(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::STREAM_OBS;
    use crate::locmat::build_localization_circular;

    fn obs_rec(step: u64, values: &[f64]) -> ObservationRecord {
        ObservationRecord {
            step_index: step,
            delta_y: DVector::from_row_slice(values),
        }
    }

    fn scalar_config(epsilon: f64, dt: f64) -> FilterConfig {
        let mut cfg = FilterConfig::new(
            LocalizationMatrix::identity(1),
            ObsNoiseSpec::isotropic(1, epsilon).unwrap(),
            dt,
        )
        .unwrap();
        cfg.stiffness_guard = false;
        cfg
    }

    #[test]
    fn ensemble_stats_hand_values() {
        let ens = Ensemble::new(vec![
            DVector::from_row_slice(&[1.0, 0.0]),
            DVector::from_row_slice(&[3.0, 2.0]),
        ])
        .unwrap();
        let (mean, cov) = ensemble_stats(&ens);
        assert_eq!(mean, DVector::from_row_slice(&[2.0, 1.0]));
        // deviations are (-1, -1) and (1, 1), so P = [[2, 2], [2, 2]]
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(cov.get(i, j), 2.0);
            }
        }
    }

    #[test]
    fn scalar_step_hand_derived() {
        // particles {1, 3}: mean 2, P = 2, Pdag = 1/2; eps = 0.5, dt = 0.1,
        // dY = 0.4, zero drift.
        let mut ens = Ensemble::new(vec![
            DVector::from_row_slice(&[1.0]),
            DVector::from_row_slice(&[3.0]),
        ])
        .unwrap();
        let model = DriftModel::zero(1);
        let cfg = scalar_config(0.5, 0.1);
        let rec = obs_rec(1, &[0.4]);
        let stats = filter_step(&mut ens, &model, &rec, &cfg).unwrap();
        assert_eq!(stats.mean[0], 2.0);
        assert_eq!(stats.cov.get(0, 0), 2.0);
        // particle 1: 1 + 0.5*(-1)*0.1 - 2*(0.1 + 0.2 - 0.8) = 1.95
        // particle 2: 3 + 0.5*( 1)*0.1 - 2*(0.3 + 0.2 - 0.8) = 3.65
        assert!((ens.particles()[0][0] - 1.95).abs() < 1e-14);
        assert!((ens.particles()[1][0] - 3.65).abs() < 1e-14);
    }

    #[test]
    fn inflation_off_drops_pdag_term() {
        let mut ens = Ensemble::new(vec![
            DVector::from_row_slice(&[1.0]),
            DVector::from_row_slice(&[3.0]),
        ])
        .unwrap();
        let model = DriftModel::zero(1);
        let mut cfg = scalar_config(0.5, 0.1);
        cfg.inflation_on = false;
        let rec = obs_rec(1, &[0.4]);
        filter_step(&mut ens, &model, &rec, &cfg).unwrap();
        assert!((ens.particles()[0][0] - 2.0).abs() < 1e-14);
        assert!((ens.particles()[1][0] - 3.6).abs() < 1e-14);
    }

    #[test]
    fn mean_update_matches_mean_increment() {
        let n = 6;
        let phi = build_localization_circular(n, 1.4).unwrap();
        let mut cfg = FilterConfig::new(phi, ObsNoiseSpec::isotropic(n, 0.1).unwrap(), 1e-3).unwrap();
        cfg.stiffness_guard = false;
        let model = DriftModel::lorenz96(n, 8.0).unwrap();
        let center = DVector::from_element(n, 8.0);
        let mut ens = init_ensemble(&center, 7, 31).unwrap();
        let rec = obs_rec(1, &[8.1e-3, 7.9e-3, 8.0e-3, 8.2e-3, 7.8e-3, 8.0e-3]);
        let inc = mean_increment(&ens, &model, &rec, &cfg).unwrap();
        let before = ens.mean();
        filter_step(&mut ens, &model, &rec, &cfg).unwrap();
        let after = ens.mean();
        let err = (&after - &before - inc).amax();
        assert!(err < 1e-12, "mean inconsistency {err}");
    }

    #[test]
    fn collapsed_ensemble_is_rejected() {
        let p = DVector::from_row_slice(&[1.0, 2.0]);
        let mut ens = Ensemble::new(vec![p.clone(), p.clone(), p]).unwrap();
        let model = DriftModel::zero(2);
        let cfg = FilterConfig::new(
            LocalizationMatrix::all_ones(2),
            ObsNoiseSpec::isotropic(2, 0.1).unwrap(),
            1e-3,
        )
        .unwrap();
        let rec = obs_rec(1, &[0.0, 0.0]);
        let err = filter_step(&mut ens, &model, &rec, &cfg).unwrap_err();
        assert!(matches!(err, Error::SingularCovariance { .. }), "{err}");
    }

    #[test]
    fn stiffness_guard_rejects_large_dt() {
        let mut ens = Ensemble::new(vec![
            DVector::from_row_slice(&[1.0]),
            DVector::from_row_slice(&[3.0]),
        ])
        .unwrap();
        let model = DriftModel::zero(1);
        // P = 2, Omega = 1, eps = 0.01: gain rate 200, dt = 0.01 gives 2.0
        let mut cfg = scalar_config(0.01, 0.01);
        cfg.stiffness_guard = true;
        let rec = obs_rec(1, &[0.0]);
        let err = filter_step(&mut ens, &model, &rec, &cfg).unwrap_err();
        assert!(matches!(err, Error::Stiffness { .. }), "{err}");
    }

    #[test]
    fn localization_is_noop_for_diagonal_covariance() {
        // four particles whose sample covariance is exactly diagonal
        let pts = vec![
            DVector::from_row_slice(&[1.0, 1.0]),
            DVector::from_row_slice(&[1.0, -1.0]),
            DVector::from_row_slice(&[-1.0, 1.0]),
            DVector::from_row_slice(&[-1.0, -1.0]),
        ];
        let model = DriftModel::zero(2);
        let obs = ObsNoiseSpec::isotropic(2, 0.2).unwrap();
        let rec = obs_rec(1, &[0.3, -0.1]);
        let mut with_identity = Ensemble::new(pts.clone()).unwrap();
        let mut cfg = FilterConfig::new(LocalizationMatrix::identity(2), obs.clone(), 1e-2).unwrap();
        cfg.stiffness_guard = false;
        filter_step(&mut with_identity, &model, &rec, &cfg).unwrap();
        let mut without = Ensemble::new(pts).unwrap();
        cfg.phi = LocalizationMatrix::all_ones(2);
        filter_step(&mut without, &model, &rec, &cfg).unwrap();
        for (a, b) in with_identity.particles().iter().zip(without.particles()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn step_commutes_with_cyclic_shift() {
        let n = 6;
        let shift = |v: &DVector<f64>| DVector::from_fn(n, |i, _| v[(i + n - 1) % n]);
        let phi = build_localization_circular(n, 1.4).unwrap();
        let obs = ObsNoiseSpec::isotropic(n, 0.1).unwrap();
        let mut cfg = FilterConfig::new(phi, obs, 1e-3).unwrap();
        cfg.stiffness_guard = false;
        let model = DriftModel::lorenz96(n, 8.0).unwrap();
        let center = DVector::from_element(n, 8.0);
        let base = init_ensemble(&center, 8, 77).unwrap();
        let rec = obs_rec(1, &[8.2e-3, 7.7e-3, 8.0e-3, 8.4e-3, 7.9e-3, 8.1e-3]);

        let mut plain = base.clone();
        filter_step(&mut plain, &model, &rec, &cfg).unwrap();

        let shifted_particles = base.particles().iter().map(|p| shift(p)).collect();
        let mut shifted = Ensemble::new(shifted_particles).unwrap();
        let shifted_rec = ObservationRecord {
            step_index: 1,
            delta_y: shift(&rec.delta_y),
        };
        filter_step(&mut shifted, &model, &shifted_rec, &cfg).unwrap();

        for (a, b) in plain.particles().iter().zip(shifted.particles()) {
            let err = (&shift(a) - b).amax();
            assert!(err < 1e-12, "equivariance broken by {err}");
        }
    }

    #[test]
    fn cov_ode_rhs_matches_finite_difference() {
        let n = 6;
        let m = 9;
        let phi = build_localization_circular(n, 1.4).unwrap();
        let obs = ObsNoiseSpec::isotropic(n, 0.5).unwrap();
        let mut cfg = FilterConfig::new(phi, obs, 1e-3).unwrap();
        cfg.stiffness_guard = false;
        let model = DriftModel::lorenz96(n, 8.0).unwrap();
        let center = DVector::from_element(n, 8.0);
        let base = init_ensemble(&center, m, 123).unwrap();
        let rhs = cov_ode_rhs(&base, &model, &cfg).unwrap();

        // Deterministic particle flow whose covariance derivative is `rhs`:
        // the filter equation with dY replaced by Xbar dt.
        let flow = |ens: &Ensemble| -> Vec<DVector<f64>> {
            let (mean, cov) = ensemble_stats(ens);
            let pdag = diag_inverse(&cov, default_diag_floor(&cov)).unwrap();
            let ploc = schur_localize(&cov, &cfg.phi).unwrap();
            ens.particles()
                .iter()
                .map(|p| {
                    let d = p - &mean;
                    let mut v = model.eval(p).unwrap();
                    for i in 0..n {
                        v[i] += pdag.get(i, i) * d[i];
                    }
                    v.gemv(
                        -1.0 / (2.0 * cfg.obs.epsilon()),
                        ploc.entries(),
                        &d,
                        1.0,
                    );
                    v
                })
                .collect()
        };
        let fd = |h: f64| -> f64 {
            // one RK4 step of the particle flow, then a forward difference
            let k1 = flow(&base);
            let stage = |k: &[DVector<f64>], c: f64| {
                Ensemble::new(
                    base.particles()
                        .iter()
                        .zip(k)
                        .map(|(p, v)| p + v * (c * h))
                        .collect(),
                )
                .unwrap()
            };
            let k2 = flow(&stage(&k1, 0.5));
            let k3 = flow(&stage(&k2, 0.5));
            let k4 = flow(&stage(&k3, 1.0));
            let moved = Ensemble::new(
                base.particles()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        p + (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (h / 6.0)
                    })
                    .collect(),
            )
            .unwrap();
            let (_, cov_h) = ensemble_stats(&moved);
            ((cov_h.entries() - base_cov(&base)) / h - &rhs).amax()
        };
        let e1 = fd(1e-4);
        let e2 = fd(5e-5);
        assert!(e1 < 0.1, "finite difference error too large: {e1}");
        assert!(
            e2 < 0.65 * e1,
            "error did not halve with the step: {e1} -> {e2}"
        );
    }

    fn base_cov(ens: &Ensemble) -> DMatrix<f64> {
        ensemble_stats(ens).1.into_inner()
    }

    #[test]
    fn run_filter_tracks_a_still_truth() {
        // truth fixed at zero with drift f = -x: the filter mean should
        // approach zero from a displaced start.
        let n = 4;
        let model = DriftModel::neg_identity(n);
        let obs = ObsNoiseSpec::isotropic(n, 0.05).unwrap();
        let phi = LocalizationMatrix::all_ones(n);
        let cfg = FilterConfig::new(phi, obs, 1e-3).unwrap();
        let steps = 4000;
        let mut rng = stream_rng(9, STREAM_OBS);
        let stream = (1..=steps).map(|k| {
            let eta = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            Ok(ObservationRecord {
                step_index: k,
                delta_y: eta * (cfg.obs.epsilon() * cfg.dt).sqrt(),
            })
        });
        let center = DVector::from_element(n, 5.0);
        let mut ens = init_ensemble(&center, 10, 5).unwrap();
        let model_ref = &model;
        let summary = run_filter(
            &mut ens,
            model_ref,
            stream,
            &cfg,
            &RunOptions { diag_stride: 500 },
            |_, _, _| {},
        )
        .unwrap();
        assert_eq!(summary.steps, steps);
        assert!(!summary.diagnostics.is_empty());
        // the stationary per-component error std is about (2 eps)^(1/4),
        // so the mean should sit well inside 1.5 after starting at 5
        assert!(
            summary.final_mean.amax() < 1.5,
            "mean failed to contract: {:?}",
            summary.final_mean
        );
    }

    #[test]
    fn run_filter_reports_failing_step() {
        let n = 2;
        let model = DriftModel::zero(n);
        let obs = ObsNoiseSpec::isotropic(n, 0.1).unwrap();
        let cfg = FilterConfig::new(LocalizationMatrix::all_ones(n), obs, 1e-3).unwrap();
        let stream = (1..=3u64).map(|k| {
            Ok(ObservationRecord {
                step_index: k,
                // wrong length from step 2 onward
                delta_y: if k < 2 {
                    DVector::zeros(n)
                } else {
                    DVector::zeros(n + 1)
                },
            })
        });
        let mut ens = init_ensemble(&DVector::zeros(n), 5, 3).unwrap();
        let err = run_filter(
            &mut ens,
            &model,
            stream,
            &cfg,
            &RunOptions::default(),
            |_, _, _| {},
        )
        .unwrap_err();
        match err {
            Error::AtStep { step, .. } => assert_eq!(step, 2),
            other => panic!("expected step-tagged error, got {other}"),
        }
    }
}
