//! Randomized self-check suites: matrix-norm inequalities, Schur-product
//! facts, taper continuity, Lyapunov-weight claims, the Riccati closed
//! form, stability-bound scalings, and filter consistency. Each suite
//! returns a report listing counterexamples, so the CLI can surface
//! failures with concrete inputs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::dynamics::{stream_rng, ObservationRecord};
use crate::error::{Error, Result};
use crate::filter::{ensemble_stats, filter_step, init_ensemble, mean_increment, FilterConfig};
use crate::locmat::{
    diag_inverse, gaspari_cohn, min_eigenvalue_sym, norms, schur_localize, CovMatrix,
    LocalizationMatrix,
};
use crate::model::{DriftModel, ObsNoiseSpec};
use crate::theory::{
    lyapunov_weights, lyapunov_weights_mc, riccati_closed_form, stability_bounds,
};

const TOL: f64 = 1e-10;
const MAX_RECORDED: usize = 5;

/// Outcome of one suite.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: u64,
    pub failure_count: u64,
    /// Up to a handful of counterexample descriptions.
    pub failures: Vec<String>,
}

impl CheckReport {
    fn new(name: &'static str) -> Self {
        CheckReport {
            name,
            instances: 0,
            failure_count: 0,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.instances += 1;
        if !ok {
            self.failure_count += 1;
            if self.failures.len() < MAX_RECORDED {
                self.failures.push(describe());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failure_count == 0
    }
}

pub const SUITE_NAMES: [&str; 7] = [
    "lemma_a1",
    "lemma_a2",
    "gc_continuity",
    "lemma_c1",
    "riccati",
    "stability",
    "filter_consistency",
];

/// Run one suite by name with a reproducible seed.
pub fn run_suite(name: &str, seed: u64) -> Result<CheckReport> {
    match name {
        "lemma_a1" => Ok(suite_lemma_a1(seed)),
        "lemma_a2" => Ok(suite_lemma_a2(seed)),
        "gc_continuity" => Ok(suite_gc_continuity(seed)),
        "lemma_c1" => suite_lemma_c1(seed),
        "riccati" => suite_riccati(seed),
        "stability" => suite_stability(seed),
        "filter_consistency" => suite_filter_consistency(seed),
        other => Err(Error::Validation(format!(
            "unknown suite '{other}'; expected one of {SUITE_NAMES:?}"
        ))),
    }
}

/// Run every suite.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    SUITE_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| run_suite(name, seed.wrapping_add(k as u64)))
        .collect()
}

fn random_matrix(rng: &mut ChaCha12Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.random_range(-3.0..3.0))
}

fn random_psd(rng: &mut ChaCha12Rng, n: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, n);
    let mut p = &a * a.transpose();
    // exact symmetry despite the float products
    for i in 0..n {
        for j in 0..i {
            let v = p[(i, j)];
            p[(j, i)] = v;
        }
    }
    p
}

/// Random symmetric, unit-diagonal, nonnegative taper with off-diagonal
/// row sums at most `budget` (diagonally dominant, hence positive
/// semidefinite). Entries are sparsified at random.
fn random_dominant_taper(rng: &mut ChaCha12Rng, n: usize, budget: f64) -> LocalizationMatrix {
    let mut entries = DMatrix::identity(n, n);
    if n > 1 {
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < 0.5 {
                    continue;
                }
                let v = rng.random_range(0.0..budget / (n - 1) as f64);
                entries[(i, j)] = v;
                entries[(j, i)] = v;
            }
        }
    }
    LocalizationMatrix::from_entries(entries, 1.0).expect("constructed taper is valid")
}

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn suite_lemma_a1(seed: u64) -> CheckReport {
    let mut report = CheckReport::new("lemma_a1");
    let mut rng = stream_rng(seed, 10);
    for k in 0..500 {
        let n = rng.random_range(1..=12);
        let a = random_matrix(&mut rng, n);
        let b = norms(&a).expect("finite random matrix");
        let bt = crate::locmat::one_norm(&a.transpose());
        let ok_entry = b.max_abs <= b.op_norm + TOL;
        let ok_split = b.op_norm <= (b.one_norm * bt).sqrt() + TOL;
        report.check(ok_entry && ok_split, || {
            format!(
                "instance {k} (n={n}): max_abs={:.6e} op={:.6e} one={:.6e} one_t={bt:.6e}",
                b.max_abs, b.op_norm, b.one_norm
            )
        });
    }
    report
}

fn suite_lemma_a2(seed: u64) -> CheckReport {
    let mut report = CheckReport::new("lemma_a2");
    let mut rng = stream_rng(seed, 11);
    for k in 0..500 {
        let n = rng.random_range(2..=12);
        let p_raw = random_psd(&mut rng, n);
        let q_raw = &p_raw + random_psd(&mut rng, n);
        let phi = random_dominant_taper(&mut rng, n, 0.9);
        let p = CovMatrix::from_matrix(p_raw.clone()).unwrap();
        let q = CovMatrix::from_matrix(q_raw.clone()).unwrap();
        let p_loc = schur_localize(&p, &phi).unwrap();
        let q_loc = schur_localize(&q, &phi).unwrap();
        let scale = max_abs(&q_raw).max(1.0);

        // claim 1: diagonals of (P o phi)Q and P(Q o phi) agree
        let left = p_loc.entries() * q.entries();
        let right = p.entries() * q_loc.entries();
        let claim1 = (0..n).all(|i| (left[(i, i)] - right[(i, i)]).abs() <= TOL * scale);

        // claim 2 and the Schur product theorem: localization preserves
        // the semidefinite order
        let diff = q_loc.entries() - p_loc.entries();
        let claim2 = min_eigenvalue_sym(&diff) >= -TOL * scale;
        let schur_psd = min_eigenvalue_sym(p_loc.entries()) >= -TOL * scale;

        // claim 3: the largest entry sits on the diagonal and survives
        // localization
        let claim3 = (max_abs(p_loc.entries()) - p.max_diag()).abs() <= TOL * scale
            && (max_abs(p.entries()) - p.max_diag()).abs() <= TOL * scale;

        // claim 4: ||P o phi|| <= ||P o phi||_1 <= C_phi ||P||_max
        let nb = norms(p_loc.entries()).unwrap();
        let c_phi = crate::locmat::localization_stats(&phi).c_phi;
        let claim4 =
            nb.op_norm <= nb.one_norm + TOL * scale && nb.one_norm <= c_phi * p.max_diag() + TOL * scale;

        report.check(claim1 && claim2 && schur_psd && claim3 && claim4, || {
            format!(
                "instance {k} (n={n}): claims [{claim1},{claim2},{schur_psd},{claim3},{claim4}]"
            )
        });
    }
    report
}

fn suite_gc_continuity(seed: u64) -> CheckReport {
    let mut report = CheckReport::new("gc_continuity");
    let mut rng = stream_rng(seed, 12);
    // the taper slope is bounded; 3 is a safe Lipschitz constant
    let lip = 3.0;
    for k in 0..500 {
        let x = rng.random_range(0.0..2.5);
        let h = rng.random_range(1e-9..1e-4);
        let y0 = gaspari_cohn(x).unwrap();
        let y1 = gaspari_cohn(x + h).unwrap();
        let in_range = (0.0..=1.0).contains(&y0);
        let smooth = (y1 - y0).abs() <= lip * h + TOL;
        let decreasing = y1 <= y0 + TOL;
        report.check(in_range && smooth && decreasing, || {
            format!("instance {k}: x={x:.8} h={h:.3e} values {y0:.12} {y1:.12}")
        });
    }
    // the two piece boundaries and both endpoints
    for (x, expected) in [(0.0f64, Some(1.0)), (1.0, Some(5.0 / 24.0)), (2.0, Some(0.0))] {
        let lo = gaspari_cohn((x - 1e-9).max(0.0)).unwrap();
        let hi = gaspari_cohn(x + 1e-9).unwrap();
        let mid = gaspari_cohn(x).unwrap();
        let mut ok = (lo - hi).abs() < 1e-8;
        if let Some(e) = expected {
            ok &= (mid - e).abs() < 1e-8;
        }
        report.check(ok, || format!("breakpoint {x}: {lo:.12} / {mid:.12} / {hi:.12}"));
    }
    report
}

fn suite_lemma_c1(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("lemma_c1");
    let mut rng = stream_rng(seed, 13);
    for k in 0..200 {
        let n = rng.random_range(1..=12);
        let phi = random_dominant_taper(&mut rng, n, 0.8);
        let max_row = (0..n)
            .map(|j| {
                (0..n)
                    .filter(|&l| l != j)
                    .map(|l| phi.get(j, l))
                    .sum::<f64>()
            })
            .fold(0.0f64, f64::max);
        let q = rng.random_range(max_row.max(0.05)..0.95f64.max(max_row + 0.01));
        let i = rng.random_range(0..n);
        let w = lyapunov_weights(&phi, q, i)?;
        // claim 1: nonnegative weights, at least 1 - q on the target
        let claim1 = w.v.iter().all(|&v| v >= -TOL) && w.v[i] >= 1.0 - q - TOL;
        // claim 2: the taper row sums are dominated by the weight itself
        let claim2 = (0..n).all(|j| {
            let s: f64 = (0..n)
                .filter(|&l| l != j)
                .map(|l| phi.get(j, l) * w.v[l])
                .sum();
            s <= w.v[j] + TOL
        });
        // claim 3: total mass at most one
        let claim3 = w.v.sum() <= 1.0 + TOL;
        report.check(claim1 && claim2 && claim3, || {
            format!("instance {k} (n={n}, q={q:.4}, i={i}): claims [{claim1},{claim2},{claim3}]")
        });
    }
    // exact two-node solution
    let entries = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
    let phi2 = LocalizationMatrix::from_entries(entries, 1.0)?;
    let w2 = lyapunov_weights(&phi2, 0.2, 0)?;
    report.check(
        (w2.v[0] - 5.0 / 6.0).abs() < 1e-14 && (w2.v[1] - 1.0 / 6.0).abs() < 1e-14,
        || format!("two-node solve gave ({}, {})", w2.v[0], w2.v[1]),
    );
    // Monte-Carlo reconciliation: (1 - q) times the chain average matches
    // the linear solve
    let q = 0.2;
    let (means, ses) = lyapunov_weights_mc(&phi2, q, 0, 100_000, seed)?;
    for j in 0..2 {
        let scaled = (1.0 - q) * means[j];
        let tol = 3.0 * (1.0 - q) * ses[j].max(1e-6);
        report.check((scaled - w2.v[j]).abs() <= tol, || {
            format!(
                "MC reconciliation start {j}: {scaled:.6} vs {:.6} (tol {tol:.2e})",
                w2.v[j]
            )
        });
    }
    Ok(report)
}

fn suite_riccati(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("riccati");
    let mut rng = stream_rng(seed, 14);
    for k in 0..20 {
        let a = rng.random_range(0.5..4.0);
        let b = rng.random_range(-2.0..2.0);
        let c = rng.random_range(0.5..2.0);
        let eps = rng.random_range(0.05..1.0);
        let y0 = rng.random_range(0.01..2.0);
        for &t in &[0.1, 1.0] {
            let closed = riccati_closed_form(y0, a, b, c, eps, t)?;
            let g = |y: f64| -(c / eps) * y * y + b * y + a;
            let steps = 50_000;
            let h = t / steps as f64;
            let mut y = y0;
            for _ in 0..steps {
                let k1 = g(y);
                let k2 = g(y + 0.5 * h * k1);
                let k3 = g(y + 0.5 * h * k2);
                let k4 = g(y + h * k3);
                y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            report.check((closed - y).abs() < 1e-8, || {
                format!(
                    "instance {k}: a={a:.4} b={b:.4} c={c:.4} eps={eps:.4} y0={y0:.4} t={t}: \
                     closed {closed:.12} vs rk4 {y:.12}"
                )
            });
        }
    }
    for &eps in &[0.01, 0.1, 1.0] {
        let limit = riccati_closed_form(1.0, 2.0, 0.0, 1.0, eps, 1e6)?;
        report.check((limit - (2.0 * eps).sqrt()).abs() < TOL, || {
            format!("limit at eps={eps}: {limit:.12} vs {:.12}", (2.0 * eps).sqrt())
        });
    }
    Ok(report)
}

fn suite_stability(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("stability");
    let mut rng = stream_rng(seed, 15);
    // Theta(sqrt(eps)) brackets over a fixed grid
    for &eps in &[1e-4, 1e-3, 1e-2, 1e-1] {
        let b = stability_bounds(241.0, 1.0, 1.0, 1.98, eps)?;
        let values = [
            b.lambda_max / eps.sqrt(),
            b.lambda_min / eps.sqrt(),
            b.t_star_upper / eps.sqrt(),
            b.t_star_lower / eps.sqrt(),
        ];
        report.check(values.iter().all(|v| *v > 1e-6 && *v < 1e3), || {
            format!("eps={eps}: sqrt-eps ratios {values:?}")
        });
        report.check(eps > 1e-2 || b.lambda_min <= b.lambda_max, || {
            format!("eps={eps}: lambda_min {} > lambda_max {}", b.lambda_min, b.lambda_max)
        });
    }
    // rho consistency: 1 - q never exceeds the smallest taper eigenvalue
    for k in 0..100 {
        let n = rng.random_range(2..=12);
        let phi = random_dominant_taper(&mut rng, n, 0.9);
        let stats = crate::locmat::localization_stats(&phi);
        let min_eig = min_eigenvalue_sym(phi.entries());
        report.check(1.0 - stats.q <= min_eig + TOL, || {
            format!("instance {k} (n={n}): 1-q={} min eig={min_eig}", 1.0 - stats.q)
        });
    }
    Ok(report)
}

fn suite_filter_consistency(seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::new("filter_consistency");
    let mut rng = stream_rng(seed, 16);
    // mean-consistency on random ensembles
    for k in 0..100u64 {
        let n = rng.random_range(2..=10);
        let m = rng.random_range(3..=12);
        let model = DriftModel::lorenz96(n.max(4), 8.0)?;
        let n = n.max(4);
        let phi = random_dominant_taper(&mut rng, n, 0.9);
        let mut cfg = FilterConfig::new(phi, ObsNoiseSpec::isotropic(n, 0.1)?, 1e-4)?;
        cfg.stiffness_guard = false;
        let center = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let mut ens = init_ensemble(&center, m, seed.wrapping_add(k))?;
        let rec = ObservationRecord {
            step_index: 1,
            delta_y: DVector::from_fn(n, |_, _| rng.random_range(-1e-3..1e-3)),
        };
        let inc = mean_increment(&ens, &model, &rec, &cfg)?;
        let before = ens.mean();
        filter_step(&mut ens, &model, &rec, &cfg)?;
        let err = (ens.mean() - before - inc).amax();
        report.check(err < TOL, || format!("instance {k} (n={n}, m={m}): mean gap {err:.3e}"));
    }
    // diagonal-inverse identity along a 1e3-step run
    let n = 6;
    let model = DriftModel::neg_identity(n);
    let mut cfg = FilterConfig::new(
        LocalizationMatrix::all_ones(n),
        ObsNoiseSpec::isotropic(n, 0.05)?,
        1e-3,
    )?;
    cfg.stiffness_guard = false;
    let mut ens = init_ensemble(&DVector::zeros(n), 8, seed)?;
    let mut obs_rng = stream_rng(seed, 17);
    let mut worst = 0.0f64;
    for step in 1..=1000u64 {
        let (_, cov) = ensemble_stats(&ens);
        let pdag = diag_inverse(&cov, crate::locmat::default_diag_floor(&cov))?;
        for i in 0..n {
            worst = worst.max((pdag.get(i, i) * cov.get(i, i) - 1.0).abs());
        }
        let rec = ObservationRecord {
            step_index: step,
            delta_y: DVector::from_fn(n, |_, _| {
                let z: f64 = obs_rng.random_range(-1.0..1.0);
                z * (cfg.obs.epsilon() * cfg.dt).sqrt()
            }),
        };
        filter_step(&mut ens, &model, &rec, &cfg)?;
    }
    report.check(worst < TOL, || format!("diagonal-inverse identity drifted by {worst:.3e}"));
    Ok(report)
}
