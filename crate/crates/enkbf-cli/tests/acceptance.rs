//! End-to-end acceptance checks: the three scaling experiments at desk
//! scale, covariance stability on a reference run, the analytical
//! property suites, and output determinism. Each test prints one
//! PASS/FAIL line for its criterion.

use std::process::Command;

use nalgebra::{DMatrix, DVector};

use enkbf::dynamics::{spinup_init, SimConfig, TwinSim};
use enkbf::filter::{
    cov_ode_rhs, ensemble_stats, init_ensemble, run_filter, Ensemble, FilterConfig, RunOptions,
};
use enkbf::locmat::{build_localization_circular, default_diag_floor, diag_inverse, schur_localize};
use enkbf::model::{DriftModel, ObsNoiseSpec, L96_FORCING};
use enkbf::theory::stability_bounds;
use enkbf::verify;
use enkbf_cli::config::parse_config_str;
use enkbf_cli::sweep::{dim_sweep, eps_sweep, time_sweep};

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {criterion} ({name}): {status} [{detail}]");
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_epsilon_scaling() {
    let spec = parse_config_str(
        "scenario = eps-sweep\nepsilon = 0.0125, 0.025, 0.05, 0.1, 0.2\n\
         n_x = 40\nm = 10\ndt = 1e-4\nsteps = 200000\nrepeats = 3\n",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = eps_sweep(&spec, dir.path()).unwrap();
    let slope = r.slope.expect("five-point grid has a slope");
    report(
        1,
        "epsilon scaling",
        (0.35..=0.65).contains(&slope),
        &format!("log-log slope {slope:.4}, target [0.35, 0.65]"),
    );
}

#[test]
fn criterion_2_dimension_scaling() {
    let spec = parse_config_str(
        "scenario = dim-sweep\nepsilon = 0.0125\nn_x = 40, 80, 160, 320\n\
         m = 10\ndt = 1e-4\nsteps = 200000\nrepeats = 1\n",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = dim_sweep(&spec, dir.path()).unwrap();
    let fit = r.fit.expect("four-point grid has a fit");
    let ratio = r.component_ratio.expect("component ratio defined");
    report(
        2,
        "dimension scaling",
        fit.r_squared >= 0.9 && ratio <= 1.5,
        &format!(
            "linear fit R^2 {:.4} (target >= 0.9), component max/min ratio {ratio:.4} (target <= 1.5)",
            fit.r_squared
        ),
    );
}

#[test]
fn criterion_3_pathwise_log_growth() {
    let spec = parse_config_str(
        "scenario = time-sweep\nepsilon = 0.01\nn_x = 40\nm = 10\n\
         t_final = 5, 10, 20, 40\ndt = 1e-4\nrepeats = 10\n",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = time_sweep(&spec, dir.path()).unwrap();
    let ratio = r.sup_ratio.expect("ratio defined");
    let fit = r.fit.expect("fit defined");
    let mean_sup = r.sup_by_t.iter().map(|(_, v)| v).sum::<f64>() / r.sup_by_t.len() as f64;
    let rel_rms = fit.residual_rms / mean_sup;
    report(
        3,
        "path-wise log growth",
        ratio <= 2.0 && rel_rms <= 0.15,
        &format!(
            "sup ratio T=40/T=5 is {ratio:.4} (target <= 2.0), \
             residual rms {:.2}% of mean (target <= 15%), b = {:.4}",
            100.0 * rel_rms,
            fit.b
        ),
    );
}

#[test]
fn criterion_4_covariance_stability() {
    let n = 40;
    let epsilon = 0.01;
    let dt = 1e-4;
    let steps = 100_000;
    let seed = 4242;
    let model = DriftModel::lorenz96(n, L96_FORCING).unwrap();
    let phi = build_localization_circular(n, 1.4).unwrap();
    let c_phi = enkbf::locmat::localization_stats(&phi).c_phi;
    let bounds = stability_bounds(model.c_f(), 1.0, 1.0, c_phi, epsilon).unwrap();
    let settle = 10.0 * bounds.t_star_lower;

    let obs = ObsNoiseSpec::isotropic(n, epsilon).unwrap();
    let sim_config = SimConfig {
        n,
        dt,
        steps,
        seed,
        spinup_time: 10.0,
        stride: 10,
        obs: obs.clone(),
    };
    let init = spinup_init(n, L96_FORCING, 10.0, seed).unwrap();
    let mut ens = init_ensemble(&init.x, 10, seed).unwrap();
    let cfg = FilterConfig::new(phi, obs, dt).unwrap();
    let sim = TwinSim::new(&sim_config, &model, init).unwrap();

    let mut p0_max = None;
    let mut settled_p_max = f64::NEG_INFINITY;
    let mut settled_p_min = f64::INFINITY;
    let outcome = run_filter(
        &mut ens,
        &model,
        sim,
        &cfg,
        &RunOptions { diag_stride: 10 },
        |step, _mean, stats| {
            if p0_max.is_none() {
                p0_max = Some(stats.p_max);
            }
            if step as f64 * dt > settle {
                settled_p_max = settled_p_max.max(stats.p_max);
                settled_p_min = settled_p_min.min(stats.p_min);
            }
        },
    );
    let no_singular = outcome.is_ok();
    let envelope = 1.2 * p0_max.unwrap_or(0.0).max(bounds.lambda_max);
    report(
        4,
        "covariance stability",
        no_singular && settled_p_max <= envelope && settled_p_min >= 0.0,
        &format!(
            "run ok: {no_singular}; settled p_max {settled_p_max:.4} vs envelope {envelope:.4}; \
             settled p_min {settled_p_min:.4}"
        ),
    );
}

#[test]
fn criterion_5_matrix_bound_suites() {
    let mut detail = String::new();
    let mut pass = true;
    for name in ["lemma_a1", "lemma_a2", "gc_continuity"] {
        let r = verify::run_suite(name, 91).unwrap();
        pass &= r.passed() && r.instances >= 500;
        detail.push_str(&format!(
            "{name}: {}/{} ok; ",
            r.instances - r.failure_count,
            r.instances
        ));
    }
    report(5, "matrix bound suites", pass, detail.trim_end_matches("; "));
}

#[test]
fn criterion_6_lyapunov_weight_suite() {
    let r = verify::run_suite("lemma_c1", 92).unwrap();
    report(
        6,
        "Lyapunov weight suite",
        r.passed() && r.instances >= 200,
        &format!("{}/{} checks ok", r.instances - r.failure_count, r.instances),
    );
}

#[test]
fn criterion_7_riccati_oracle() {
    let r = verify::run_suite("riccati", 93).unwrap();
    report(
        7,
        "Riccati oracle",
        r.passed() && r.instances >= 40,
        &format!("{}/{} checks ok", r.instances - r.failure_count, r.instances),
    );
}

#[test]
fn criterion_8_filter_micro_oracles() {
    let suite = verify::run_suite("filter_consistency", 94).unwrap();

    // finite-difference check of the covariance derivative: the error of
    // (P(h) - P(0))/h against the closed-form rate is first order in h
    let n = 6;
    let model = DriftModel::lorenz96(n, L96_FORCING).unwrap();
    let phi = build_localization_circular(n, 1.4).unwrap();
    let mut cfg = FilterConfig::new(phi, ObsNoiseSpec::isotropic(n, 0.5).unwrap(), 1e-3).unwrap();
    cfg.stiffness_guard = false;
    let center = DVector::from_element(n, 8.0);
    let base = init_ensemble(&center, 9, 987).unwrap();
    let rhs = cov_ode_rhs(&base, &model, &cfg).unwrap();
    let fd = |h: f64| -> f64 {
        let (mean, cov) = ensemble_stats(&base);
        let pdag = diag_inverse(&cov, default_diag_floor(&cov)).unwrap();
        let ploc = schur_localize(&cov, &cfg.phi).unwrap();
        let moved: Vec<DVector<f64>> = base
            .particles()
            .iter()
            .map(|p| {
                let d = p - &mean;
                let mut v = model.eval(p).unwrap();
                for i in 0..n {
                    v[i] += pdag.get(i, i) * d[i];
                }
                v.gemv(-1.0 / (2.0 * cfg.obs.epsilon()), ploc.entries(), &d, 1.0);
                p + v * h
            })
            .collect();
        let (_, cov_h) = ensemble_stats(&Ensemble::new(moved).unwrap());
        let diff: DMatrix<f64> = (cov_h.entries() - cov.entries()) / h - &rhs;
        diff.amax()
    };
    let e1 = fd(1e-4);
    let e2 = fd(5e-5);
    let fd_ok = e1 < 0.1 && e2 < 0.65 * e1;
    report(
        8,
        "filter micro-oracles",
        suite.passed() && fd_ok,
        &format!(
            "consistency suite {}/{} ok; fd errors {e1:.3e} -> {e2:.3e} (ratio {:.3})",
            suite.instances - suite.failure_count,
            suite.instances,
            e2 / e1
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.conf");
    std::fs::write(
        &config_path,
        "scenario = eps-sweep\nepsilon = 0.05, 0.1\nn_x = 8\nm = 6\n\
         dt = 1e-4\nsteps = 2000\nrepeats = 2\nspinup_time = 1\nbase_seed = 77\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_enkbf"))
            .args(["experiment", "eps"])
            .arg(&config_path)
            .arg("--out")
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "experiment run {run} failed");
        outputs.push(std::fs::read(out.join("eps_sweep.csv")).unwrap());
    }
    report(
        9,
        "determinism",
        outputs[0] == outputs[1],
        &format!("two CLI reruns produced {} identical CSV bytes", outputs[0].len()),
    );
}
