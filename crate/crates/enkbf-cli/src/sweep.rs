//! The three scaling sweeps: one filter run per grid cell and repeat,
//! executed in parallel, aggregated into CSV tables plus fitted scalings.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use anyhow::{bail, ensure, Context, Result};
use log::info;
use nalgebra::DVector;
use rayon::prelude::*;

use enkbf::dynamics::{spinup_init, SimConfig, TwinSim};
use enkbf::filter::{init_ensemble, run_filter, FilterConfig, RunOptions};
use enkbf::locmat::build_localization_circular;
use enkbf::model::{DriftModel, ObsNoiseSpec, L96_FORCING};

use crate::config::{ExperimentSpec, Scenario};
use crate::metrics::{
    linear_fit, log_fit, log_log_slope, LinearFit, LogFit, MetricsAccumulator, MetricsRecord,
};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Seed of one (cell, repeat) run; stable across reruns and thread counts.
pub fn run_seed(base_seed: u64, cell: u64, repeat: u64) -> u64 {
    base_seed ^ splitmix64(splitmix64(cell.wrapping_add(1)) ^ repeat)
}

/// One row of a sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub cell_index: u64,
    pub repeat: u64,
    pub seed: u64,
    pub epsilon: f64,
    pub n_x: usize,
    pub t_final: f64,
    pub outcome: std::result::Result<MetricsRecord, String>,
}

/// Table plus the files it was written to.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
    pub meta_path: PathBuf,
}

/// Run one twin experiment: simulate the truth, stream its observation
/// increments into the filter, and accumulate error metrics on the fly.
pub fn run_cell(
    spec: &ExperimentSpec,
    epsilon: f64,
    n: usize,
    steps: u64,
    seed: u64,
    run_id: &str,
) -> Result<MetricsRecord> {
    let model = DriftModel::lorenz96(n, L96_FORCING)?;
    let phi = build_localization_circular(n, spec.l)?;
    let obs = ObsNoiseSpec::isotropic(n, epsilon)?;
    let sim_config = SimConfig {
        n,
        dt: spec.dt,
        steps,
        seed,
        spinup_time: spec.spinup_time,
        stride: spec.stride,
        obs: obs.clone(),
    };
    let init = spinup_init(n, L96_FORCING, spec.spinup_time, seed)?;
    let mut ens = init_ensemble(&init.x, spec.m, seed)?;
    let mut cfg = FilterConfig::new(phi, obs, spec.dt)?;
    cfg.inflation_on = spec.inflation;

    let burn_in = spec.burn_in(epsilon, n)?;
    let acc = RefCell::new(MetricsAccumulator::new(n, spec.dt, burn_in)?);
    let truth_slot: Rc<RefCell<Option<(u64, DVector<f64>)>>> = Rc::new(RefCell::new(None));
    let sink_slot = Rc::clone(&truth_slot);
    let sim = TwinSim::new(&sim_config, &model, init)?.with_truth_sink(move |step, _t, x| {
        *sink_slot.borrow_mut() = Some((step, x.clone()));
    });

    let mut p_max_extreme = f64::NEG_INFINITY;
    let mut p_min_extreme = f64::INFINITY;
    let mut push_error: Option<anyhow::Error> = None;
    let stride = spec.stride;
    let summary = run_filter(
        &mut ens,
        &model,
        sim,
        &cfg,
        &RunOptions { diag_stride: stride },
        |step, mean, stats| {
            p_max_extreme = p_max_extreme.max(stats.p_max);
            p_min_extreme = p_min_extreme.min(stats.p_min);
            if step % stride != 0 || push_error.is_some() {
                return;
            }
            let slot = truth_slot.borrow();
            let Some((truth_step, truth)) = slot.as_ref() else {
                push_error = Some(anyhow::anyhow!("no truth sample at step {step}"));
                return;
            };
            if *truth_step != step {
                push_error =
                    Some(anyhow::anyhow!("truth at step {truth_step} but filter at {step}"));
                return;
            }
            let e = truth - mean;
            if let Err(err) = acc.borrow_mut().push(step, &e) {
                push_error = Some(err);
            }
        },
    )?;
    if let Some(err) = push_error {
        return Err(err);
    }
    let mut record = acc.into_inner().finish(run_id)?;
    record.p_max_extreme = p_max_extreme;
    record.p_min_extreme = p_min_extreme;
    record.bound_violations = summary.alpha_nonpositive;
    Ok(record)
}

struct Job {
    cell_index: u64,
    repeat: u64,
    epsilon: f64,
    n_x: usize,
    t_final: f64,
    steps: u64,
}

fn run_jobs(spec: &ExperimentSpec, jobs: Vec<Job>) -> Vec<SweepRow> {
    jobs.into_par_iter()
        .map(|job| {
            let seed = run_seed(spec.base_seed, job.cell_index, job.repeat);
            let run_id = format!("cell{}-rep{}", job.cell_index, job.repeat);
            info!(
                "run {run_id}: epsilon={} n={} steps={} seed={seed}",
                job.epsilon, job.n_x, job.steps
            );
            let outcome = run_cell(spec, job.epsilon, job.n_x, job.steps, seed, &run_id)
                .map_err(|e| format!("{e:#}"));
            SweepRow {
                cell_index: job.cell_index,
                repeat: job.repeat,
                seed,
                epsilon: job.epsilon,
                n_x: job.n_x,
                t_final: job.t_final,
                outcome,
            }
        })
        .collect()
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Component index reported in the CSV: the 11th when available.
fn tracked_component(record: &MetricsRecord) -> f64 {
    record
        .component(11)
        .unwrap_or_else(|| *record.component_mse.last().expect("non-empty components"))
}

const CSV_HEADER: &str = "cell_index,repeat,seed,epsilon,n_x,t_final,status,\
mse_time_avg_per_dim,total_mse,component11_mse,pathwise_sup,pathwise_component_sup,\
p_max,p_min,bound_violations";

fn write_outputs(
    spec: &ExperimentSpec,
    out_dir: &Path,
    name: &str,
    rows: &[SweepRow],
) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let mut csv = String::new();
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for row in rows {
        let (status, m) = match &row.outcome {
            Ok(m) => ("ok".to_string(), Some(m)),
            Err(e) => (e.replace([',', '\n'], ";"), None),
        };
        let blank = "".to_string();
        let field = |v: Option<f64>| v.map(fmt_float).unwrap_or_else(|| blank.clone());
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.cell_index,
            row.repeat,
            row.seed,
            fmt_float(row.epsilon),
            row.n_x,
            fmt_float(row.t_final),
            status,
            field(m.map(|m| m.mse_time_avg_per_dim)),
            field(m.map(|m| m.total_mse())),
            field(m.map(tracked_component)),
            field(m.map(|m| m.pathwise_sup)),
            field(m.map(|m| m.pathwise_component_sup)),
            field(m.map(|m| m.p_max_extreme)),
            field(m.map(|m| m.p_min_extreme)),
            m.map(|m| m.bound_violations.to_string()).unwrap_or(blank),
        )?;
    }
    let csv_path = out_dir.join(format!("{name}.csv"));
    fs::write(&csv_path, csv)?;

    let mut meta = String::new();
    writeln!(meta, "experiment = {name}")?;
    writeln!(meta, "scenario = {}", spec.scenario)?;
    writeln!(
        meta,
        "epsilon = {}",
        spec.epsilon.iter().map(|v| fmt_float(*v)).collect::<Vec<_>>().join(", ")
    )?;
    writeln!(
        meta,
        "n_x = {}",
        spec.n_x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
    )?;
    writeln!(
        meta,
        "t_final = {}",
        spec.t_final.iter().map(|v| fmt_float(*v)).collect::<Vec<_>>().join(", ")
    )?;
    writeln!(meta, "m = {}", spec.m)?;
    writeln!(meta, "dt = {}", fmt_float(spec.dt))?;
    writeln!(meta, "steps = {}", spec.steps)?;
    writeln!(meta, "repeats = {}", spec.repeats)?;
    writeln!(meta, "base_seed = {}", spec.base_seed)?;
    writeln!(meta, "l = {}", fmt_float(spec.l))?;
    writeln!(meta, "stride = {}", spec.stride)?;
    writeln!(meta, "spinup_time = {}", fmt_float(spec.spinup_time))?;
    writeln!(meta, "inflation = {}", spec.inflation)?;
    writeln!(meta, "burn_in_multiple = {}", fmt_float(spec.burn_in_multiple))?;
    writeln!(meta, "run_seeds:")?;
    for row in rows {
        writeln!(meta, "  cell {} repeat {} -> {}", row.cell_index, row.repeat, row.seed)?;
    }
    let meta_path = out_dir.join(format!("{name}_meta.txt"));
    fs::write(&meta_path, meta)?;
    Ok((csv_path, meta_path))
}

/// Parse a sweep CSV back into (header, rows of string fields).
pub fn read_sweep_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .context("empty CSV file")?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn successful<'a>(rows: &'a [SweepRow]) -> Vec<(&'a SweepRow, &'a MetricsRecord)> {
    rows.iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|m| (r, m)))
        .collect()
}

fn group_means<K, V>(pairs: Vec<(K, V)>) -> Vec<(K, f64)>
where
    K: PartialEq + Copy,
    V: Into<f64>,
{
    let mut keys: Vec<K> = Vec::new();
    let mut sums: Vec<(f64, u64)> = Vec::new();
    for (k, v) in pairs {
        match keys.iter().position(|x| *x == k) {
            Some(i) => {
                sums[i].0 += v.into();
                sums[i].1 += 1;
            }
            None => {
                keys.push(k);
                sums.push((v.into(), 1));
            }
        }
    }
    keys.into_iter()
        .zip(sums)
        .map(|(k, (s, c))| (k, s / c as f64))
        .collect()
}

/// Epsilon sweep: per-dimension time-averaged MSE against the noise level.
#[derive(Debug)]
pub struct EpsSweepReport {
    pub output: SweepOutput,
    /// Per-epsilon means over repeats.
    pub mse_by_epsilon: Vec<(f64, f64)>,
    /// Log-log slope, absent (flagged) for single-point grids.
    pub slope: Option<f64>,
}

pub fn eps_sweep(spec: &ExperimentSpec, out_dir: &Path) -> Result<EpsSweepReport> {
    ensure!(
        spec.scenario == Scenario::EpsSweep,
        "config declares scenario '{}', expected 'eps-sweep'",
        spec.scenario
    );
    let n = spec.n_x[0];
    let mut jobs = Vec::new();
    for (cell, &epsilon) in spec.epsilon.iter().enumerate() {
        for repeat in 0..spec.repeats {
            jobs.push(Job {
                cell_index: cell as u64,
                repeat,
                epsilon,
                n_x: n,
                t_final: spec.steps as f64 * spec.dt,
                steps: spec.steps,
            });
        }
    }
    let rows = run_jobs(spec, jobs);
    let (csv_path, meta_path) = write_outputs(spec, out_dir, "eps_sweep", &rows)?;
    let mse_by_epsilon = group_means(
        successful(&rows)
            .into_iter()
            .map(|(r, m)| (r.epsilon, m.mse_time_avg_per_dim))
            .collect(),
    );
    let slope = if mse_by_epsilon.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = mse_by_epsilon.iter().cloned().unzip();
        Some(log_log_slope(&xs, &ys)?)
    } else {
        None
    };
    Ok(EpsSweepReport {
        output: SweepOutput { rows, csv_path, meta_path },
        mse_by_epsilon,
        slope,
    })
}

/// Dimension sweep: total MSE growth and the tracked-component flatness.
#[derive(Debug)]
pub struct DimSweepReport {
    pub output: SweepOutput,
    /// Per-dimension means over repeats of the total MSE.
    pub total_mse_by_n: Vec<(f64, f64)>,
    /// Per-dimension means of the tracked component MSE.
    pub component_by_n: Vec<(f64, f64)>,
    pub fit: Option<LinearFit>,
    /// Max/min ratio of the tracked component across the grid.
    pub component_ratio: Option<f64>,
}

pub fn dim_sweep(spec: &ExperimentSpec, out_dir: &Path) -> Result<DimSweepReport> {
    ensure!(
        spec.scenario == Scenario::DimSweep,
        "config declares scenario '{}', expected 'dim-sweep'",
        spec.scenario
    );
    let epsilon = spec.epsilon[0];
    let mut jobs = Vec::new();
    for (cell, &n) in spec.n_x.iter().enumerate() {
        for repeat in 0..spec.repeats {
            jobs.push(Job {
                cell_index: cell as u64,
                repeat,
                epsilon,
                n_x: n,
                t_final: spec.steps as f64 * spec.dt,
                steps: spec.steps,
            });
        }
    }
    let rows = run_jobs(spec, jobs);
    let (csv_path, meta_path) = write_outputs(spec, out_dir, "dim_sweep", &rows)?;
    let ok = successful(&rows);
    let total_mse_by_n = group_means(
        ok.iter().map(|(r, m)| (r.n_x as f64, m.total_mse())).collect(),
    );
    let component_by_n = group_means(
        ok.iter().map(|(r, m)| (r.n_x as f64, tracked_component(m))).collect(),
    );
    let fit = if total_mse_by_n.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = total_mse_by_n.iter().cloned().unzip();
        Some(linear_fit(&xs, &ys)?)
    } else {
        None
    };
    let component_ratio = if component_by_n.is_empty() {
        None
    } else {
        let max = component_by_n.iter().map(|(_, v)| *v).fold(f64::MIN, f64::max);
        let min = component_by_n.iter().map(|(_, v)| *v).fold(f64::MAX, f64::min);
        if min > 0.0 {
            Some(max / min)
        } else {
            None
        }
    };
    Ok(DimSweepReport {
        output: SweepOutput { rows, csv_path, meta_path },
        total_mse_by_n,
        component_by_n,
        fit,
        component_ratio,
    })
}

/// Time-horizon sweep: averaged path-wise sup error against the horizon.
#[derive(Debug)]
pub struct TimeSweepReport {
    pub output: SweepOutput,
    /// Per-horizon means over repeats of the sup squared error.
    pub sup_by_t: Vec<(f64, f64)>,
    pub fit: Option<LogFit>,
    /// Mean sup at the largest horizon over the smallest.
    pub sup_ratio: Option<f64>,
}

pub fn time_sweep(spec: &ExperimentSpec, out_dir: &Path) -> Result<TimeSweepReport> {
    ensure!(
        spec.scenario == Scenario::TimeSweep,
        "config declares scenario '{}', expected 'time-sweep'",
        spec.scenario
    );
    ensure!(spec.repeats >= 2, "time sweep needs repeats >= 2, got {}", spec.repeats);
    let epsilon = spec.epsilon[0];
    let n = spec.n_x[0];
    let mut jobs = Vec::new();
    for (cell, &t) in spec.t_final.iter().enumerate() {
        let steps = (t / spec.dt).round() as u64;
        ensure!(steps >= 1, "t_final {t} is below one step at dt {}", spec.dt);
        for repeat in 0..spec.repeats {
            jobs.push(Job {
                cell_index: cell as u64,
                repeat,
                epsilon,
                n_x: n,
                t_final: t,
                steps,
            });
        }
    }
    let rows = run_jobs(spec, jobs);
    let (csv_path, meta_path) = write_outputs(spec, out_dir, "time_sweep", &rows)?;
    let sup_by_t = group_means(
        successful(&rows)
            .into_iter()
            .map(|(r, m)| (r.t_final, m.pathwise_sup))
            .collect(),
    );
    let fit = if sup_by_t.len() >= 2 {
        let (ts, ys): (Vec<f64>, Vec<f64>) = sup_by_t.iter().cloned().unzip();
        Some(log_fit(&ts, &ys)?)
    } else {
        None
    };
    let sup_ratio = if sup_by_t.len() >= 2 {
        let first = sup_by_t
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty");
        let last = sup_by_t
            .iter()
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty");
        Some(last.1 / first.1)
    } else {
        None
    };
    Ok(TimeSweepReport {
        output: SweepOutput { rows, csv_path, meta_path },
        sup_by_t,
        fit,
        sup_ratio,
    })
}

/// Dispatch by declared scenario; returns the CSV path.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<PathBuf> {
    match spec.scenario {
        Scenario::EpsSweep => {
            let r = eps_sweep(spec, out_dir)?;
            match r.slope {
                Some(s) => info!("eps sweep slope = {s:.4}"),
                None => info!("eps sweep slope undefined: single-point grid"),
            }
            Ok(r.output.csv_path)
        }
        Scenario::DimSweep => {
            let r = dim_sweep(spec, out_dir)?;
            if let Some(f) = r.fit {
                info!("dim sweep fit: slope {:.4}, R^2 {:.4}", f.slope, f.r_squared);
            }
            Ok(r.output.csv_path)
        }
        Scenario::TimeSweep => {
            let r = time_sweep(spec, out_dir)?;
            if let Some(f) = r.fit {
                info!("time sweep fit: a {:.4}, b {:.4}, residual rms {:.4}", f.a, f.b, f.residual_rms);
            }
            Ok(r.output.csv_path)
        }
        Scenario::Single => bail!("scenario 'single' is run via the simulate/filter subcommands"),
    }
}
