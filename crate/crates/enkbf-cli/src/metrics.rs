//! Error metrics of a twin experiment and the least-squares fits used by
//! the scaling sweeps.

use anyhow::{bail, ensure, Result};
use nalgebra::DVector;

/// Summary statistics of one filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    /// Time average of `||e_t||^2 / n` after burn-in.
    pub mse_time_avg_per_dim: f64,
    /// Per-component time averages of `[e_t]_i^2`.
    pub component_mse: Vec<f64>,
    /// Largest `||e_t||^2` after burn-in.
    pub pathwise_sup: f64,
    /// Largest single-component squared error after burn-in.
    pub pathwise_component_sup: f64,
    /// Extremes of the covariance diagonal over the run.
    pub p_max_extreme: f64,
    pub p_min_extreme: f64,
    /// Diagnostic samples where the contraction rate was not positive.
    pub bound_violations: u64,
}

impl MetricsRecord {
    pub fn total_mse(&self) -> f64 {
        self.mse_time_avg_per_dim * self.component_mse.len() as f64
    }

    /// Time-averaged MSE of one component by 1-based index.
    pub fn component(&self, index_one_based: usize) -> Option<f64> {
        self.component_mse.get(index_one_based.checked_sub(1)?).copied()
    }
}

/// Pair up truth and filter-mean samples by step index.
pub fn error_series(
    truth: &[(u64, DVector<f64>)],
    mean: &[(u64, DVector<f64>)],
) -> Result<Vec<(u64, DVector<f64>)>> {
    ensure!(
        truth.len() == mean.len(),
        "trajectories have {} and {} samples",
        truth.len(),
        mean.len()
    );
    let mut out = Vec::with_capacity(truth.len());
    for ((st, xt), (sm, xm)) in truth.iter().zip(mean) {
        ensure!(st == sm, "misaligned steps {st} and {sm}");
        ensure!(
            xt.len() == xm.len(),
            "dimension mismatch at step {st}: {} vs {}",
            xt.len(),
            xm.len()
        );
        out.push((*st, xt - xm));
    }
    Ok(out)
}

/// Streaming accumulator for [`MetricsRecord`]; feed post-assimilation
/// errors in step order. Samples at or before `burn_in` are discarded.
pub struct MetricsAccumulator {
    n: usize,
    dt: f64,
    burn_in: f64,
    count: u64,
    sum_sq_per_dim: f64,
    component_sum_sq: Vec<f64>,
    sup: f64,
    component_sup: f64,
}

impl MetricsAccumulator {
    pub fn new(n: usize, dt: f64, burn_in: f64) -> Result<Self> {
        ensure!(n > 0, "dimension must be positive");
        ensure!(dt > 0.0, "dt must be positive, got {dt}");
        ensure!(burn_in >= 0.0, "burn_in must be nonnegative, got {burn_in}");
        Ok(MetricsAccumulator {
            n,
            dt,
            burn_in,
            count: 0,
            sum_sq_per_dim: 0.0,
            component_sum_sq: vec![0.0; n],
            sup: 0.0,
            component_sup: 0.0,
        })
    }

    pub fn push(&mut self, step: u64, e: &DVector<f64>) -> Result<()> {
        ensure!(
            e.len() == self.n,
            "error vector has length {}, expected {}",
            e.len(),
            self.n
        );
        if step as f64 * self.dt <= self.burn_in {
            return Ok(());
        }
        self.count += 1;
        let mut sq = 0.0;
        for i in 0..self.n {
            let c = e[i] * e[i];
            self.component_sum_sq[i] += c;
            self.component_sup = self.component_sup.max(c);
            sq += c;
        }
        self.sum_sq_per_dim += sq / self.n as f64;
        self.sup = self.sup.max(sq);
        Ok(())
    }

    pub fn samples(&self) -> u64 {
        self.count
    }

    pub fn finish(self, run_id: impl Into<String>) -> Result<MetricsRecord> {
        ensure!(
            self.count > 0,
            "no samples survive the burn-in window of {} time units",
            self.burn_in
        );
        let c = self.count as f64;
        let record = MetricsRecord {
            run_id: run_id.into(),
            mse_time_avg_per_dim: self.sum_sq_per_dim / c,
            component_mse: self.component_sum_sq.iter().map(|s| s / c).collect(),
            pathwise_sup: self.sup,
            pathwise_component_sup: self.component_sup,
            p_max_extreme: 0.0,
            p_min_extreme: 0.0,
            bound_violations: 0,
        };
        ensure!(
            record.mse_time_avg_per_dim.is_finite() && record.pathwise_sup.is_finite(),
            "metrics are not finite"
        );
        Ok(record)
    }
}

/// Metrics of a recorded error series sampled every `dt`-sized step.
pub fn metrics(
    errors: &[(u64, DVector<f64>)],
    dt: f64,
    burn_in: f64,
    run_id: &str,
) -> Result<MetricsRecord> {
    ensure!(!errors.is_empty(), "empty error series");
    let mut acc = MetricsAccumulator::new(errors[0].1.len(), dt, burn_in)?;
    for (step, e) in errors {
        acc.push(*step, e)?;
    }
    acc.finish(run_id)
}

/// Least-squares slope of `log(y)` against `log(x)`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    ensure!(xs.len() == ys.len(), "mismatched series lengths");
    ensure!(xs.len() >= 2, "slope undefined for fewer than two points");
    for (&x, &y) in xs.iter().zip(ys) {
        ensure!(x > 0.0 && y > 0.0, "log-log fit needs positive data, got ({x}, {y})");
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    Ok(linear_fit(&lx, &ly)?.slope)
}

/// Ordinary least squares `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    ensure!(xs.len() == ys.len(), "mismatched series lengths");
    let m = xs.len();
    ensure!(m >= 2, "fit undefined for fewer than two points");
    let mf = m as f64;
    let mx = xs.iter().sum::<f64>() / mf;
    let my = ys.iter().sum::<f64>() / mf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        bail!("fit undefined: all abscissae equal");
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Fit `y = a + b log(t)` and report the residual root mean square.
#[derive(Debug, Clone, Copy)]
pub struct LogFit {
    pub a: f64,
    pub b: f64,
    pub residual_rms: f64,
}

pub fn log_fit(ts: &[f64], ys: &[f64]) -> Result<LogFit> {
    ensure!(ts.len() == ys.len(), "mismatched series lengths");
    ensure!(ts.len() >= 2, "fit undefined for fewer than two points");
    for &t in ts {
        ensure!(t > 0.0, "log fit needs positive times, got {t}");
    }
    let lt: Vec<f64> = ts.iter().map(|v| v.ln()).collect();
    let fit = linear_fit(&lt, ys)?;
    let rss: f64 = lt
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - fit.intercept - fit.slope * x;
            r * r
        })
        .sum();
    Ok(LogFit {
        a: fit.intercept,
        b: fit.slope,
        residual_rms: (rss / ts.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_row_slice(&[a, b])
    }

    #[test]
    fn error_series_hand_cases() {
        let truth = vec![(1, vec2(1.0, 2.0))];
        let mean = vec![(1, vec2(0.5, 1.0))];
        let e = error_series(&truth, &mean).unwrap();
        assert_eq!(e[0].1, vec2(0.5, 1.0));

        let zero_mean = vec![(1, vec2(0.0, 0.0))];
        let e = error_series(&truth, &zero_mean).unwrap();
        assert_eq!(e[0].1, vec2(1.0, 2.0));

        let e = error_series(&truth, &truth.clone()).unwrap();
        assert_eq!(e[0].1, vec2(0.0, 0.0));
    }

    #[test]
    fn error_series_rejects_misalignment() {
        let truth = vec![(1, vec2(1.0, 2.0))];
        let mean = vec![(2, vec2(1.0, 2.0))];
        assert!(error_series(&truth, &mean).is_err());
        assert!(error_series(&truth, &[]).is_err());
    }

    #[test]
    fn metrics_constant_error() {
        let errors: Vec<_> = (1..=50).map(|k| (k, vec2(0.3, 0.3))).collect();
        let r = metrics(&errors, 0.1, 0.0, "t").unwrap();
        assert!((r.mse_time_avg_per_dim - 0.09).abs() < 1e-14);
        assert!((r.pathwise_sup - 0.18).abs() < 1e-14);
        assert!((r.pathwise_component_sup - 0.09).abs() < 1e-14);
        assert!((r.total_mse() - 0.18).abs() < 1e-14);
    }

    #[test]
    fn metrics_single_spike() {
        let mut errors: Vec<_> = (1..=10_000).map(|k| (k, vec2(0.0, 0.0))).collect();
        errors[500].1 = vec2(4.0, 0.0);
        let r = metrics(&errors, 1e-3, 0.0, "t").unwrap();
        assert!((r.pathwise_sup - 16.0).abs() < 1e-14);
        assert!((r.pathwise_component_sup - 16.0).abs() < 1e-14);
        assert!(r.mse_time_avg_per_dim < 1e-2);
    }

    #[test]
    fn metrics_two_step_hand_computation() {
        let errors = vec![(1, vec2(1.0, 2.0)), (2, vec2(3.0, 0.0))];
        let r = metrics(&errors, 1.0, 0.0, "t").unwrap();
        // step norms squared: 5 and 9; per-dim averages (5/2 + 9/2)/2 = 3.5
        assert!((r.mse_time_avg_per_dim - 3.5).abs() < 1e-14);
        assert_eq!(r.component_mse, vec![5.0, 2.0]);
        assert!((r.pathwise_sup - 9.0).abs() < 1e-14);
        assert!((r.pathwise_component_sup - 9.0).abs() < 1e-14);
    }

    #[test]
    fn metrics_burn_in_discards_prefix() {
        let errors = vec![(1, vec2(100.0, 100.0)), (2, vec2(1.0, 1.0))];
        let r = metrics(&errors, 1.0, 1.5, "t").unwrap();
        assert!((r.mse_time_avg_per_dim - 1.0).abs() < 1e-14);
        assert!(metrics(&errors, 1.0, 10.0, "t").is_err());
    }

    #[test]
    fn slope_recovers_exact_power_law() {
        let xs = [0.0125f64, 0.025, 0.05, 0.1, 0.2];
        let ys: Vec<f64> = xs.iter().map(|x| 3.7 * x.sqrt()).collect();
        let slope = log_log_slope(&xs, &ys).unwrap();
        assert!((slope - 0.5).abs() < 1e-6, "slope {slope}");
    }

    #[test]
    fn slope_needs_two_points() {
        assert!(log_log_slope(&[0.1], &[1.0]).is_err());
        assert!(log_log_slope(&[0.1, -0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [40.0, 80.0, 160.0, 320.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.02 * x + 1.3).collect();
        let fit = linear_fit(&xs, &ys).unwrap();
        assert!((fit.slope - 0.02).abs() < 1e-9);
        assert!((fit.intercept - 1.3).abs() < 1e-7);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_fit_recovers_exact_coefficients() {
        let ts = [5.0f64, 10.0, 20.0, 40.0];
        let ys: Vec<f64> = ts.iter().map(|t| 0.8 + 0.25 * t.ln()).collect();
        let fit = log_fit(&ts, &ys).unwrap();
        assert!((fit.a - 0.8).abs() < 1e-6);
        assert!((fit.b - 0.25).abs() < 1e-6);
        assert!(fit.residual_rms < 1e-10);
    }
}
