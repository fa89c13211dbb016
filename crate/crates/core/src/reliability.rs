//! Margins, first time to failure, failure-probability curves with calibrated
//! bounds, and the evaluation metrics (NMSE, interval coverage).

use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrated_band, CalibratedInterval, ConformalSchedule};
use crate::error::{Error, Result};
use crate::io;
use crate::operator::{predict_band, PredictConfig, VariationalModel};
use crate::par::{self, Exec};

/// Which side of the threshold counts as failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Failure when `u ≥ u_crit`; margin `u_crit − u`.
    #[default]
    Upper,
    /// Failure when `u ≤ u_crit`; margin `u − u_crit`.
    Lower,
    /// Failure when `|u| ≥ u_crit`; margin `u_crit − |u|`.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSpec {
    pub u_crit: f64,
    pub direction: Direction,
    /// Optional per-time thresholds overriding `u_crit`.
    #[serde(default)]
    pub schedule: Option<Vec<f64>>,
}

impl PerformanceSpec {
    pub fn new(u_crit: f64, direction: Direction) -> Self {
        Self { u_crit, direction, schedule: None }
    }

    pub fn validate(&self, n_times: usize) -> Result<()> {
        if !self.u_crit.is_finite() {
            return Err(Error::InvalidInput(format!("threshold {} is not finite", self.u_crit)));
        }
        if let Some(s) = &self.schedule {
            if s.len() != n_times {
                return Err(Error::Shape(format!("threshold schedule has {} entries for {n_times} times", s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("threshold schedule has non-finite entries".into()));
            }
        }
        Ok(())
    }

    pub fn threshold(&self, k: usize) -> f64 {
        self.schedule.as_ref().map_or(self.u_crit, |s| s[k])
    }
}

pub fn performance_margin(u: f64, u_crit: f64, direction: Direction) -> f64 {
    match direction {
        Direction::Upper => u_crit - u,
        Direction::Lower => u - u_crit,
        Direction::Absolute => u_crit - u.abs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FttfResult {
    pub tau: f64,
    pub failed: bool,
}

/// Earliest grid time with margin `≤ 0`, without sub-grid interpolation;
/// the horizon with `failed = false` when the margin stays positive.
pub fn first_time_to_failure(values: &[f64], times: &[f64], spec: &PerformanceSpec) -> Result<FttfResult> {
    if values.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    if values.len() != times.len() {
        return Err(Error::Shape(format!("{} values on {} grid times", values.len(), times.len())));
    }
    for (k, (&u, &t)) in values.iter().zip(times).enumerate() {
        if performance_margin(u, spec.threshold(k), spec.direction) <= 0.0 {
            return Ok(FttfResult { tau: t, failed: true });
        }
    }
    Ok(FttfResult { tau: *times.last().unwrap(), failed: false })
}

/// `P̂_f(t_k) = (1/N) Σ 1{failed_i ∧ τ_i ≤ t_k}`.
pub fn pof_curve(fttf: &[FttfResult], times: &[f64]) -> Result<Vec<f64>> {
    if fttf.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let mut taus: Vec<f64> = fttf.iter().filter(|r| r.failed).map(|r| r.tau).collect();
    taus.sort_by(f64::total_cmp);
    let n = fttf.len() as f64;
    let mut j = 0;
    Ok(times
        .iter()
        .map(|&t| {
            while j < taus.len() && taus[j] <= t {
                j += 1;
            }
            j as f64 / n
        })
        .collect())
}

/// FTTF of every row of an `N × N_t` trajectory matrix.
pub fn fttf_rows(traj: ArrayView2<'_, f64>, times: &[f64], spec: &PerformanceSpec, exec: Exec) -> Result<Vec<FttfResult>> {
    spec.validate(times.len())?;
    par::try_map_indexed(exec, traj.nrows(), |i| {
        let row = traj.row(i).to_vec();
        first_time_to_failure(&row, times, spec)
    })
}

pub fn pof_from_trajectories(traj: ArrayView2<'_, f64>, times: &[f64], spec: &PerformanceSpec, exec: Exec) -> Result<Vec<f64>> {
    pof_curve(&fttf_rows(traj, times, spec, exec)?, times)
}

/// Per-sample extreme in the failure sense: the minimum for `Lower`, the
/// maximum for `Upper`, the maximum magnitude for `Absolute`.
pub fn sample_extremes(traj: ArrayView2<'_, f64>, direction: Direction) -> Vec<f64> {
    traj.rows()
        .into_iter()
        .map(|r| match direction {
            Direction::Upper => r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Direction::Lower => r.iter().copied().fold(f64::INFINITY, f64::min),
            Direction::Absolute => r.iter().map(|v| v.abs()).fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

/// Lower empirical `level` quantile of the per-sample extremes.
pub fn threshold_from_extremes(traj: ArrayView2<'_, f64>, direction: Direction, level: f64) -> Result<f64> {
    if traj.nrows() == 0 || !(level > 0.0 && level <= 1.0) {
        return Err(Error::InvalidInput(format!("need samples and level in (0, 1], got {level}")));
    }
    let mut e = sample_extremes(traj, direction);
    e.sort_by(f64::total_cmp);
    let idx = ((level * e.len() as f64).ceil() as usize).clamp(1, e.len()) - 1;
    Ok(e[idx])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub times: Vec<f64>,
    pub pf_mean: Vec<f64>,
    pub pf_lower: Vec<f64>,
    pub pf_upper: Vec<f64>,
    pub n_samples: usize,
    /// False from the first time with an unbounded conformal interval onward.
    pub bounds_usable: Vec<bool>,
}

impl ReliabilityCurve {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ["t", "pf_mean", "pf_lower", "pf_upper", "bounds_usable"].map(String::from);
        let rows: Vec<Vec<String>> = (0..self.times.len())
            .map(|k| {
                vec![
                    io::fmt_f64(self.times[k]),
                    io::fmt_f64(self.pf_mean[k]),
                    io::fmt_f64(self.pf_lower[k]),
                    io::fmt_f64(self.pf_upper[k]),
                    self.bounds_usable[k].to_string(),
                ]
            })
            .collect();
        io::write_table(path, &header, &rows)
    }
}

/// Curves from precomputed mean and interval-bound trajectories. The bound
/// curves are the pointwise min and max of the curves of the lower-bound and
/// upper-bound trajectories.
pub fn reliability_from_bounds(
    mean: ArrayView2<'_, f64>,
    ci: &CalibratedInterval,
    times: &[f64],
    spec: &PerformanceSpec,
    exec: Exec,
) -> Result<ReliabilityCurve> {
    if ci.lower.dim() != mean.dim() || ci.upper.dim() != mean.dim() {
        return Err(Error::Shape(format!("mean {:?}, bounds {:?}", mean.dim(), ci.lower.dim())));
    }
    let pf_mean = pof_from_trajectories(mean, times, spec, exec)?;
    let a = pof_from_trajectories(ci.lower.view(), times, spec, exec)?;
    let b = pof_from_trajectories(ci.upper.view(), times, spec, exec)?;
    let pf_lower = a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect();
    let pf_upper = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
    let mut ok = true;
    let bounds_usable = ci
        .flagged
        .iter()
        .map(|&f| {
            ok &= !f;
            ok
        })
        .collect();
    Ok(ReliabilityCurve { times: times.to_vec(), pf_mean, pf_lower, pf_upper, n_samples: mean.nrows(), bounds_usable })
}

pub fn surrogate_reliability(
    model: &VariationalModel,
    schedule: &ConformalSchedule,
    inputs: ArrayView2<'_, f64>,
    times: &[f64],
    spec: &PerformanceSpec,
    cfg: &PredictConfig,
) -> Result<ReliabilityCurve> {
    if schedule.times.len() != times.len() || schedule.times.iter().zip(times).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(Error::Shape("schedule grid differs from the evaluation grid".into()));
    }
    let band = predict_band(model, inputs, times, cfg)?;
    let ci = calibrated_band(&band, schedule)?;
    reliability_from_bounds(band.mu_hat.view(), &ci, times, spec, cfg.exec)
}

fn check_same(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!("predictions {:?}, truths {:?}", pred.dim(), truth.dim())));
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("no trajectories".into()));
    }
    Ok(())
}

/// Mean squared error over all entries divided by the variance of all truth
/// entries about their grand mean.
pub fn nmse(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    check_same(pred, truth)?;
    let n = truth.len() as f64;
    let mean = truth.sum() / n;
    let var = truth.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::InvalidInput("truth ensemble has zero variance".into()));
    }
    let mse = pred.iter().zip(truth).map(|(p, u)| (p - u).powi(2)).sum::<f64>() / n;
    Ok(mse / var)
}

fn column_moments(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Vec<(f64, f64)> {
    (0..truth.ncols())
        .map(|k| {
            let (p, u) = (pred.column(k), truth.column(k));
            let n = u.len() as f64;
            let mean = u.sum() / n;
            let mut var = u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            // A shared value (e.g. a deterministic initial condition) leaves
            // only rounding residue.
            if var <= (4.0 * f64::EPSILON * mean).powi(2) {
                var = 0.0;
            }
            let mse = p.iter().zip(u).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
            (mse, var)
        })
        .collect()
}

/// NMSE per time column, each normalized by the variance of that column;
/// zero-variance columns give 0 for exact predictions and `+∞` otherwise.
pub fn nmse_per_time(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    check_same(pred, truth)?;
    Ok(column_moments(pred, truth)
        .into_iter()
        .map(|(mse, var)| if var > 0.0 { mse / var } else if mse == 0.0 { 0.0 } else { f64::INFINITY })
        .collect())
}

/// `Σ_k MSE_k / Σ_k Var_k`: the error relative to the per-time spread of
/// the truths rather than their spread about the grand mean.
pub fn nmse_time_centered(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    check_same(pred, truth)?;
    let (mse, var) = column_moments(pred, truth).into_iter().fold((0.0, 0.0), |a, (m, v)| (a.0 + m, a.1 + v));
    if !(var > 0.0) {
        return Err(Error::InvalidInput("truth ensemble has zero variance at every time".into()));
    }
    Ok(mse / var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub times: Vec<f64>,
    /// Percent of truths inside the interval at each time.
    pub coverage: Vec<f64>,
    pub average: f64,
    pub min: f64,
    pub max: f64,
    pub nominal: f64,
    pub below_nominal: usize,
    pub at_or_above_nominal: usize,
}

impl CoverageReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ["t", "coverage_pct"].map(String::from);
        let rows: Vec<Vec<String>> =
            self.times.iter().zip(&self.coverage).map(|(t, c)| vec![io::fmt_f64(*t), io::fmt_f64(*c)]).collect();
        io::write_table(path, &header, &rows)
    }
}

pub fn coverage_report(ci: &CalibratedInterval, truths: ArrayView2<'_, f64>, times: &[f64], nominal: f64) -> Result<CoverageReport> {
    if ci.lower.dim() != truths.dim() || times.len() != truths.ncols() {
        return Err(Error::Shape(format!("intervals {:?}, truths {:?}", ci.lower.dim(), truths.dim())));
    }
    if truths.nrows() == 0 {
        return Err(Error::InvalidInput("no test trajectories".into()));
    }
    let n = truths.nrows() as f64;
    let coverage: Vec<f64> = (0..truths.ncols())
        .map(|k| {
            let inside = (0..truths.nrows())
                .filter(|&i| {
                    let u = truths[(i, k)];
                    ci.lower[(i, k)] <= u && u <= ci.upper[(i, k)]
                })
                .count();
            100.0 * inside as f64 / n
        })
        .collect();
    let below = coverage.iter().filter(|&&c| c < nominal).count();
    Ok(CoverageReport {
        times: times.to_vec(),
        average: coverage.iter().sum::<f64>() / coverage.len() as f64,
        min: coverage.iter().copied().fold(f64::INFINITY, f64::min),
        max: coverage.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        nominal,
        below_nominal: below,
        at_or_above_nominal: coverage.len() - below,
        coverage,
    })
}
