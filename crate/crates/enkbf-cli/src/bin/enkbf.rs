//! Command-line driver: twin-experiment simulation, filtering against a
//! recorded observation stream, the scaling experiments, and the
//! verification suites. Log verbosity comes from the `ENKBF_LOG`
//! environment variable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use enkbf::dynamics::{
    read_truth_trajectory, simulate, spinup_init, write_truth_trajectory, ObsStreamReader,
    SimConfig,
};
use enkbf::filter::{init_ensemble, run_filter, FilterConfig, RunOptions};
use enkbf::locmat::build_localization_circular;
use enkbf::model::{DriftModel, ObsNoiseSpec, L96_FORCING};
use enkbf::verify;
use enkbf_cli::config::{parse_config, ExperimentSpec};
use enkbf_cli::metrics::MetricsAccumulator;
use enkbf_cli::sweep::{dim_sweep, eps_sweep, time_sweep};

#[derive(Parser)]
#[command(name = "enkbf", about = "Localized ensemble Kalman-Bucy filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    Eps,
    Dim,
    Time,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a truth trajectory and its observation stream to disk.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stride: Option<u64>,
    },
    /// Assimilate a recorded observation stream.
    Filter {
        config: PathBuf,
        /// Observation stream produced by `simulate`.
        #[arg(long)]
        obs: PathBuf,
        /// Truth trajectory for error metrics; defaults to `truth.bin`
        /// next to the observation file.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one of the scaling experiments.
    Experiment {
        kind: ExperimentKind,
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the property suites (all of them when no suite is named).
    Verify {
        suite: Option<String>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn load_spec(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentSpec> {
    let mut spec = parse_config(path)?;
    if let Some(s) = seed {
        spec.base_seed = s;
    }
    if let Some(o) = out {
        spec.output_dir = o;
    }
    Ok(spec)
}

fn cmd_simulate(spec: &ExperimentSpec) -> Result<()> {
    let n = spec.n_x[0];
    let epsilon = spec.epsilon[0];
    let model = DriftModel::lorenz96(n, L96_FORCING)?;
    let sim_config = SimConfig {
        n,
        dt: spec.dt,
        steps: spec.steps,
        seed: spec.base_seed,
        spinup_time: spec.spinup_time,
        stride: spec.stride,
        obs: ObsNoiseSpec::isotropic(n, epsilon)?,
    };
    fs::create_dir_all(&spec.output_dir)?;
    let truth_path = spec.output_dir.join("truth.bin");
    let obs_path = spec.output_dir.join("obs.bin");
    let summary = simulate(&sim_config, &model, &truth_path, &obs_path)?;
    info!(
        "simulated {} steps at dt {}: max |x| = {:.3}",
        spec.steps, spec.dt, summary.max_abs_state
    );
    println!("truth: {}", truth_path.display());
    println!("observations: {}", obs_path.display());
    if summary.exceeded_cap {
        println!(
            "warning: trajectory reached |x| = {:.2}, beyond the usual envelope",
            summary.max_abs_state
        );
    }
    Ok(())
}

fn cmd_filter(spec: &ExperimentSpec, obs_path: &Path, truth_path: Option<PathBuf>) -> Result<()> {
    let reader = ObsStreamReader::open(obs_path)?;
    let header = reader.header().clone();
    let n = header.n;
    if (header.dt - spec.dt).abs() > 1e-15 {
        bail!(
            "observation stream was recorded at dt = {} but config says {}",
            header.dt,
            spec.dt
        );
    }
    let model = DriftModel::lorenz96(n, L96_FORCING)?;
    let phi = build_localization_circular(n, spec.l)?;
    let obs_spec = ObsNoiseSpec::isotropic(n, header.epsilon)?;
    let mut cfg = FilterConfig::new(phi, obs_spec, header.dt)?;
    cfg.inflation_on = spec.inflation;

    // the ensemble starts where the truth started: the spin-up is
    // reproducible from the seed
    let init = spinup_init(n, L96_FORCING, spec.spinup_time, spec.base_seed)?;
    let mut ens = init_ensemble(&init.x, spec.m, spec.base_seed)?;

    let truth_path = truth_path.unwrap_or_else(|| {
        obs_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("truth.bin")
    });
    let truth = if truth_path.exists() {
        let (_, stride, samples) = read_truth_trajectory(&truth_path)?;
        if stride != spec.stride {
            bail!(
                "truth file was sampled every {stride} steps but config says {}",
                spec.stride
            );
        }
        Some(samples)
    } else {
        info!("no truth trajectory at {}; metrics skipped", truth_path.display());
        None
    };

    let burn_in = spec.burn_in(header.epsilon, n)?;
    let mut acc = MetricsAccumulator::new(n, header.dt, burn_in)?;
    let mut truth_iter = truth.as_deref().map(|s| s.iter());
    let mut mean_samples: Vec<(u64, nalgebra::DVector<f64>)> = Vec::new();
    let mut align_error: Option<anyhow::Error> = None;
    let stride = spec.stride;
    let summary = run_filter(
        &mut ens,
        &model,
        reader,
        &cfg,
        &RunOptions { diag_stride: stride },
        |step, mean, _stats| {
            if step % stride != 0 || align_error.is_some() {
                return;
            }
            mean_samples.push((step, mean.clone()));
            if let Some(iter) = truth_iter.as_mut() {
                match iter.next() {
                    Some((ts, x)) if *ts == step => {
                        if let Err(e) = acc.push(step, &(x - mean)) {
                            align_error = Some(e);
                        }
                    }
                    other => {
                        align_error = Some(anyhow::anyhow!(
                            "truth sample {:?} does not match filter step {step}",
                            other.map(|(s, _)| *s)
                        ));
                    }
                }
            }
        },
    )?;
    if let Some(e) = align_error {
        return Err(e);
    }

    fs::create_dir_all(&spec.output_dir)?;
    let mean_path = spec.output_dir.join("filter_mean.bin");
    write_truth_trajectory(&mean_path, n, header.dt, stride, &mean_samples)?;
    println!("filter mean: {}", mean_path.display());
    println!(
        "steps: {}, diagnostic samples: {}, alpha non-positive: {}",
        summary.steps,
        summary.diagnostics.len(),
        summary.alpha_nonpositive
    );
    if truth.is_some() {
        let record = acc.finish("filter")?;
        println!("mse_time_avg_per_dim: {:.6e}", record.mse_time_avg_per_dim);
        println!("pathwise_sup: {:.6e}", record.pathwise_sup);
        println!("pathwise_component_sup: {:.6e}", record.pathwise_component_sup);
    }
    Ok(())
}

fn cmd_experiment(kind: ExperimentKind, spec: &ExperimentSpec) -> Result<()> {
    let out = spec.output_dir.clone();
    match kind {
        ExperimentKind::Eps => {
            let r = eps_sweep(spec, &out)?;
            for (eps, mse) in &r.mse_by_epsilon {
                println!("epsilon {eps}: mse/dim {mse:.6e}");
            }
            match r.slope {
                Some(s) => println!("log-log slope: {s:.4}"),
                None => println!("log-log slope: undefined (single-point grid)"),
            }
            println!("csv: {}", r.output.csv_path.display());
        }
        ExperimentKind::Dim => {
            let r = dim_sweep(spec, &out)?;
            for (n, mse) in &r.total_mse_by_n {
                println!("n {n}: total mse {mse:.6e}");
            }
            if let Some(f) = r.fit {
                println!("linear fit: slope {:.6e}, R^2 {:.4}", f.slope, f.r_squared);
            } else {
                println!("linear fit: undefined (single-point grid)");
            }
            if let Some(ratio) = r.component_ratio {
                println!("tracked component max/min ratio: {ratio:.4}");
            }
            println!("csv: {}", r.output.csv_path.display());
        }
        ExperimentKind::Time => {
            let r = time_sweep(spec, &out)?;
            for (t, sup) in &r.sup_by_t {
                println!("T {t}: mean sup error^2 {sup:.6e}");
            }
            if let Some(f) = r.fit {
                println!(
                    "log fit: a {:.4}, b {:.4}, residual rms {:.4e}",
                    f.a, f.b, f.residual_rms
                );
            } else {
                println!("log fit: undefined (single-point grid)");
            }
            if let Some(ratio) = r.sup_ratio {
                println!("sup ratio largest/smallest T: {ratio:.4}");
            }
            println!("csv: {}", r.output.csv_path.display());
        }
    }
    Ok(())
}

fn cmd_verify(suite: Option<String>, seed: u64) -> Result<bool> {
    let reports = match suite {
        Some(name) => vec![verify::run_suite(&name, seed)?],
        None => verify::run_all(seed)?,
    };
    let mut all_ok = true;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {} ({} checks)", r.name, r.instances);
        for f in &r.failures {
            println!("  counterexample: {f}");
        }
        all_ok &= r.passed();
    }
    Ok(all_ok)
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, seed, out, stride } => {
            let mut spec = load_spec(&config, seed, out)?;
            if let Some(s) = stride {
                spec.stride = s;
                spec.validate().context("after applying --stride")?;
            }
            cmd_simulate(&spec)?;
            Ok(true)
        }
        Command::Filter { config, obs, truth, seed, out } => {
            let spec = load_spec(&config, seed, out)?;
            cmd_filter(&spec, &obs, truth)?;
            Ok(true)
        }
        Command::Experiment { kind, config, seed, out, threads } => {
            if let Some(t) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build_global()
                    .context("cannot size the thread pool")?;
            }
            let spec = load_spec(&config, seed, out)?;
            cmd_experiment(kind, &spec)?;
            Ok(true)
        }
        Command::Verify { suite, seed } => cmd_verify(suite, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ENKBF_LOG")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
