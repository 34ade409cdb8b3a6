//! Plain-text experiment configuration: `key = value` lines, `#`
//! comments, comma-separated lists. Unknown keys are rejected and every
//! validation error names the offending field.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use enkbf::locmat::{build_localization_circular, localization_stats};
use enkbf::model::DriftModel;
use enkbf::theory::stability_bounds;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Single,
    EpsSweep,
    DimSweep,
    TimeSweep,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::Single => "single",
            Scenario::EpsSweep => "eps-sweep",
            Scenario::DimSweep => "dim-sweep",
            Scenario::TimeSweep => "time-sweep",
        };
        f.write_str(s)
    }
}

/// A fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    /// Observation noise grid.
    pub epsilon: Vec<f64>,
    /// State dimension grid.
    pub n_x: Vec<usize>,
    /// Final-time grid for the time sweep.
    pub t_final: Vec<f64>,
    pub m: usize,
    pub dt: f64,
    pub steps: u64,
    pub repeats: u64,
    pub base_seed: u64,
    /// Localization radius of the Gaspari-Cohn taper.
    pub l: f64,
    pub output_dir: PathBuf,
    /// Error sampling stride in steps.
    pub stride: u64,
    /// Deterministic spin-up time before the truth run.
    pub spinup_time: f64,
    pub inflation: bool,
    /// Burn-in expressed as a multiple of the stability time t_*.
    pub burn_in_multiple: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            scenario: Scenario::Single,
            epsilon: vec![0.01],
            n_x: vec![40],
            t_final: vec![5.0, 10.0, 20.0, 40.0],
            m: 10,
            dt: 1e-4,
            steps: 200_000,
            repeats: 3,
            base_seed: 1,
            l: 1.4,
            output_dir: PathBuf::from("out"),
            stride: 10,
            spinup_time: 10.0,
            inflation: true,
            burn_in_multiple: 10.0,
        }
    }
}

impl ExperimentSpec {
    /// Burn-in window in time units for a run at the given epsilon and
    /// dimension.
    pub fn burn_in(&self, epsilon: f64, n: usize) -> Result<f64> {
        let c_f = DriftModel::lorenz96(n, enkbf::model::L96_FORCING)?.c_f();
        let phi = build_localization_circular(n, self.l)?;
        let c_phi = localization_stats(&phi).c_phi;
        let bounds = stability_bounds(c_f, 1.0, 1.0, c_phi, epsilon)?;
        Ok(self.burn_in_multiple * bounds.t_star_lower)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.m >= 2, "m: ensemble size must be at least 2, got {}", self.m);
        ensure!(self.dt > 0.0, "dt: must be positive, got {}", self.dt);
        ensure!(self.steps >= 1, "steps: must be at least 1");
        ensure!(self.repeats >= 1, "repeats: must be at least 1");
        ensure!(!self.epsilon.is_empty(), "epsilon: grid must be non-empty");
        for &e in &self.epsilon {
            ensure!(e > 0.0, "epsilon: values must be positive, got {e}");
        }
        ensure!(!self.n_x.is_empty(), "n_x: grid must be non-empty");
        for &n in &self.n_x {
            ensure!(n >= 4, "n_x: values must be at least 4, got {n}");
        }
        ensure!(!self.t_final.is_empty(), "t_final: grid must be non-empty");
        for &t in &self.t_final {
            ensure!(t > 0.0, "t_final: values must be positive, got {t}");
            ensure!(
                t / self.dt <= 1e9,
                "t_final: {t} needs more than 1e9 steps at dt = {}",
                self.dt
            );
        }
        ensure!(self.l > 0.0, "l: localization radius must be positive, got {}", self.l);
        ensure!(self.stride >= 1, "stride: must be at least 1");
        ensure!(self.spinup_time >= 0.0, "spinup_time: must be nonnegative");
        ensure!(
            self.burn_in_multiple >= 0.0,
            "burn_in_multiple: must be nonnegative"
        );

        // Up-front stiffness estimate at the smallest epsilon and the
        // largest dimension, using the analytical covariance envelope.
        let eps_min = self.epsilon.iter().cloned().fold(f64::INFINITY, f64::min);
        let n_max = *self.n_x.iter().max().unwrap();
        let c_f = DriftModel::lorenz96(n_max, enkbf::model::L96_FORCING)?.c_f();
        let phi = build_localization_circular(n_max, self.l)?;
        let c_phi = localization_stats(&phi).c_phi;
        let bounds = stability_bounds(c_f, 1.0, 1.0, c_phi, eps_min)?;
        let rate = (c_phi * bounds.lambda_max / eps_min).max(1.0 / bounds.lambda_min);
        ensure!(
            self.dt * rate <= 0.5,
            "dt: {} does not resolve the filter rates at epsilon = {eps_min} \
             (dt * rate = {:.3} > 0.5); reduce dt below {:.2e}",
            self.dt,
            self.dt * rate,
            0.5 / rate
        );
        Ok(())
    }
}

fn parse_list<T, F>(value: &str, line: usize, key: &str, parse: F) -> Result<Vec<T>>
where
    F: Fn(&str) -> Result<T>,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).with_context(|| format!("line {line}: {key}: bad value '{s}'")))
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    value
        .trim()
        .parse()
        .with_context(|| format!("line {line}: {key}: bad value '{}'", value.trim()))
}

/// Parse configuration text into a validated spec; unset keys keep their
/// documented defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::default();
    let mut seen: Vec<String> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            bail!("line {line}: expected 'key = value', got '{content}'");
        };
        let key = key.trim();
        let value = value.trim();
        ensure!(
            !seen.iter().any(|k| k == key),
            "line {line}: duplicate key '{key}'"
        );
        seen.push(key.to_string());
        match key {
            "scenario" => {
                spec.scenario = match value {
                    "single" => Scenario::Single,
                    "eps-sweep" => Scenario::EpsSweep,
                    "dim-sweep" => Scenario::DimSweep,
                    "time-sweep" => Scenario::TimeSweep,
                    other => bail!(
                        "line {line}: scenario: '{other}' is not one of \
                         single, eps-sweep, dim-sweep, time-sweep"
                    ),
                }
            }
            "epsilon" => {
                spec.epsilon = parse_list(value, line, key, |s| Ok(s.parse::<f64>()?))?
            }
            "n_x" => spec.n_x = parse_list(value, line, key, |s| Ok(s.parse::<usize>()?))?,
            "t_final" => {
                spec.t_final = parse_list(value, line, key, |s| Ok(s.parse::<f64>()?))?
            }
            "m" => spec.m = parse_scalar(value, line, key)?,
            "dt" => spec.dt = parse_scalar(value, line, key)?,
            "steps" => spec.steps = parse_scalar(value, line, key)?,
            "repeats" => spec.repeats = parse_scalar(value, line, key)?,
            "base_seed" => spec.base_seed = parse_scalar(value, line, key)?,
            "l" => spec.l = parse_scalar(value, line, key)?,
            "output_dir" => spec.output_dir = PathBuf::from(value),
            "stride" => spec.stride = parse_scalar(value, line, key)?,
            "spinup_time" => spec.spinup_time = parse_scalar(value, line, key)?,
            "inflation" => spec.inflation = parse_scalar(value, line, key)?,
            "burn_in_multiple" => spec.burn_in_multiple = parse_scalar(value, line, key)?,
            other => bail!("line {line}: unknown key '{other}'"),
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Read and parse a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in config file {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_yields_defaults() {
        let spec = parse_config_str("# nothing but a comment\n\n").unwrap();
        assert_eq!(spec.scenario, Scenario::Single);
        assert_eq!(spec.epsilon, vec![0.01]);
        assert_eq!(spec.n_x, vec![40]);
        assert_eq!(spec.m, 10);
        assert_eq!(spec.dt, 1e-4);
        assert_eq!(spec.steps, 200_000);
        assert!(spec.inflation);
    }

    #[test]
    fn comma_lists_parse() {
        let spec = parse_config_str("epsilon = 0.003125, 0.00625\n").unwrap();
        assert_eq!(spec.epsilon, vec![0.003125, 0.00625]);
    }

    #[test]
    fn negative_dt_names_the_field() {
        let err = parse_config_str("dt = -1\n").unwrap_err();
        assert!(format!("{err:#}").contains("dt"), "{err:#}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_config_str("steps = 10\nwat = 3\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("line 2") && msg.contains("wat"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line() {
        let err = parse_config_str("steps: 10\n").unwrap_err();
        assert!(format!("{err:#}").contains("line 1"), "{err:#}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = parse_config_str("m = 5\nm = 6\n").unwrap_err();
        assert!(format!("{err:#}").contains("duplicate"), "{err:#}");
    }

    #[test]
    fn stiffness_guard_rejects_coarse_dt() {
        let err = parse_config_str("dt = 0.001\nepsilon = 0.0125\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("dt") && msg.contains("reduce"), "{msg}");
    }

    #[test]
    fn acceptance_scale_settings_pass_the_guard() {
        for eps in ["0.0125, 0.025, 0.05, 0.1, 0.2", "0.01"] {
            let text = format!("scenario = eps-sweep\nepsilon = {eps}\ndt = 1e-4\n");
            parse_config_str(&text).unwrap();
        }
        parse_config_str("scenario = dim-sweep\nn_x = 40, 80, 160, 320\nepsilon = 0.0125\n")
            .unwrap();
    }

    #[test]
    fn burn_in_scales_with_t_star() {
        let spec = ExperimentSpec::default();
        let b1 = spec.burn_in(0.01, 40).unwrap();
        let b2 = spec.burn_in(0.04, 40).unwrap();
        assert!(b1 > 0.0);
        // t_* grows with epsilon like sqrt(eps)
        assert!(b2 > b1);
    }

    #[test]
    fn scenario_values_round_trip_display() {
        for (name, s) in [
            ("single", Scenario::Single),
            ("eps-sweep", Scenario::EpsSweep),
            ("dim-sweep", Scenario::DimSweep),
            ("time-sweep", Scenario::TimeSweep),
        ] {
            let spec = parse_config_str(&format!("scenario = {name}\n")).unwrap();
            assert_eq!(spec.scenario, s);
            assert_eq!(spec.scenario.to_string(), name);
        }
    }
}
