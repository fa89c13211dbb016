//! Per-timestep split conformal calibration of predictive bands.
//!
//! Scores are `|u − μ̂| / σ̂`. The conformal parameter at each time is the
//! order statistic of rank `⌈(n + 1)(1 − α)⌉`, and the calibrated interval is
//! `μ̂ ± z q σ̂` (the factor `z` can be switched off).

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::io;
use crate::operator::{predict_band, PredictConfig, PredictiveBand, VariationalModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalSchedule {
    pub alpha: f64,
    /// Two-sided normal quantile `Φ⁻¹(1 − α/2)`.
    pub z: f64,
    /// Whether intervals are scaled by `z` in addition to `q`.
    pub use_z: bool,
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub n_cal: Vec<usize>,
    pub n1: usize,
    pub n2: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleHeader {
    alpha: f64,
    z: f64,
    use_z: bool,
    n1: usize,
    n2: usize,
    seed: u64,
    n_times: usize,
}

impl ConformalSchedule {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn multiplier(&self) -> f64 {
        if self.use_z { self.z } else { 1.0 }
    }

    pub fn flagged(&self, k: usize) -> bool {
        self.q[k].is_infinite()
    }

    fn paths(dir: &Path, stem: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.json")))
    }

    /// CSV rows `(t, q, n_cal, flagged_infinite)` plus a JSON header.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (csv, json) = Self::paths(dir, stem);
        let header = ["t", "q", "n_cal", "flagged_infinite"].map(String::from);
        let rows: Vec<Vec<String>> = (0..self.len())
            .map(|k| {
                vec![io::fmt_f64(self.times[k]), io::fmt_f64(self.q[k]), self.n_cal[k].to_string(), self.flagged(k).to_string()]
            })
            .collect();
        io::write_table(csv, &header, &rows)?;
        let h = ScheduleHeader {
            alpha: self.alpha,
            z: self.z,
            use_z: self.use_z,
            n1: self.n1,
            n2: self.n2,
            seed: self.seed,
            n_times: self.len(),
        };
        io::write_json(json, &h)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (csv, json) = Self::paths(dir, stem);
        let h: ScheduleHeader = io::read_json(&json)?;
        let (_, rows) = io::read_table(&csv)?;
        let bad = |reason: String| Error::Artifact { path: csv.clone(), reason };
        if rows.len() != h.n_times {
            return Err(bad(format!("{} rows, header says {}", rows.len(), h.n_times)));
        }
        let mut s = Self {
            alpha: h.alpha,
            z: h.z,
            use_z: h.use_z,
            times: Vec::new(),
            q: Vec::new(),
            n_cal: Vec::new(),
            n1: h.n1,
            n2: h.n2,
            seed: h.seed,
        };
        for (i, r) in rows.iter().enumerate() {
            let f = |j: usize| r.get(j).and_then(|c| io::parse_f64(c)).ok_or_else(|| bad(format!("row {i} column {j}")));
            s.times.push(f(0)?);
            s.q.push(f(1)?);
            s.n_cal.push(r.get(2).and_then(|c| c.parse().ok()).ok_or_else(|| bad(format!("row {i} n_cal")))?);
        }
        Ok(s)
    }
}

/// Calibrated bounds per (input, time); `flagged[k]` marks an unbounded time.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedInterval {
    pub lower: Array2<f64>,
    pub upper: Array2<f64>,
    pub flagged: Vec<bool>,
}

/// `Φ⁻¹(1 − α/2)`.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - alpha / 2.0))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

pub fn nonconformity_scores(truths: ArrayView1<'_, f64>, mu: ArrayView1<'_, f64>, sigma: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
    if truths.len() != mu.len() || mu.len() != sigma.len() {
        return Err(Error::Shape(format!("{} truths, {} means, {} stds", truths.len(), mu.len(), sigma.len())));
    }
    truths
        .iter()
        .zip(mu)
        .zip(sigma)
        .enumerate()
        .map(|(i, ((&u, &m), &s))| {
            if !(s > 0.0) {
                return Err(Error::ZeroStd { index: i });
            }
            Ok((u - m).abs() / s)
        })
        .collect()
}

/// One-based rank `⌈(n + 1)(1 − α)⌉`. A relative guard absorbs the rounding
/// of `1 − α` so exact integers are not pushed up by one.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    (x - 1e-9 * x.max(1.0)).ceil().max(1.0) as usize
}

/// Order statistic of rank [`conformal_rank`]; `+∞` when the rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("nonconformity score".into()));
    }
    let rank = conformal_rank(scores.len(), alpha);
    if rank > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

/// Schedule from a band already evaluated on the calibration inputs.
pub fn calibrate_from_band(
    band: &PredictiveBand,
    truths: ArrayView2<'_, f64>,
    times: &[f64],
    alpha: f64,
    use_z: bool,
    seed: u64,
) -> Result<ConformalSchedule> {
    check_alpha(alpha)?;
    if truths.dim() != band.mu_hat.dim() || times.len() != band.n_times() {
        return Err(Error::Shape(format!(
            "truths {:?}, band {:?}, {} times",
            truths.dim(),
            band.mu_hat.dim(),
            times.len()
        )));
    }
    let mut q = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        if band.n_inputs() == 0 {
            return Err(Error::EmptyCalibration { time: t });
        }
        let (mu, sigma) = band.column(k);
        let scores = nonconformity_scores(truths.column(k), mu, sigma)?;
        q.push(conformal_quantile(&scores, alpha)?);
    }
    Ok(ConformalSchedule {
        alpha,
        z: normal_quantile(alpha)?,
        use_z,
        times: times.to_vec(),
        q,
        n_cal: vec![band.n_inputs(); times.len()],
        n1: band.n1,
        n2: band.n2,
        seed,
    })
}

/// Predicts on the calibration inputs and calibrates every timestep.
pub fn calibrate_schedule(
    model: &VariationalModel,
    inputs: ArrayView2<'_, f64>,
    times: &[f64],
    truths: ArrayView2<'_, f64>,
    alpha: f64,
    use_z: bool,
    cfg: &PredictConfig,
) -> Result<ConformalSchedule> {
    check_alpha(alpha)?;
    if inputs.nrows() == 0 {
        return Err(Error::EmptyCalibration { time: times.first().copied().unwrap_or(0.0) });
    }
    let band = predict_band(model, inputs, times, cfg)?;
    calibrate_from_band(&band, truths, times, alpha, use_z, cfg.seed)
}

/// `[μ̂ − z q σ̂, μ̂ + z q σ̂]`; an infinite `q` gives the whole line.
pub fn calibrated_interval(mu: f64, sigma: f64, q: f64, z: f64) -> (f64, f64) {
    if q.is_infinite() {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let h = z * q * sigma;
    (mu - h, mu + h)
}

pub fn calibrated_band(band: &PredictiveBand, schedule: &ConformalSchedule) -> Result<CalibratedInterval> {
    if band.n_times() != schedule.len() {
        return Err(Error::Shape(format!("band has {} times, schedule {}", band.n_times(), schedule.len())));
    }
    let z = schedule.multiplier();
    let mut lower = Array2::zeros(band.mu_hat.dim());
    let mut upper = Array2::zeros(band.mu_hat.dim());
    for ((i, k), &m) in band.mu_hat.indexed_iter() {
        let (lo, hi) = calibrated_interval(m, band.sigma_hat[(i, k)], schedule.q[k], z);
        lower[(i, k)] = lo;
        upper[(i, k)] = hi;
    }
    let flagged = (0..schedule.len()).map(|k| schedule.flagged(k)).collect();
    Ok(CalibratedInterval { lower, upper, flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn score_examples() {
        let s = nonconformity_scores(array![1.0, 3.0].view(), array![1.0, 1.0].view(), array![0.5, 1.0].view()).unwrap();
        assert_eq!(s, vec![0.0, 2.0]);
        let e = nonconformity_scores(array![1.0].view(), array![0.0].view(), array![0.0].view());
        assert!(matches!(e, Err(Error::ZeroStd { index: 0 })));
    }

    #[test]
    fn scores_match_direct_formula() {
        let mut r = rng::stream(1, 0);
        let n = 50;
        let u = Array1::from_shape_fn(n, |_| r.sample::<f64, _>(StandardNormal));
        let m = Array1::from_shape_fn(n, |_| r.sample::<f64, _>(StandardNormal));
        let s = Array1::from_shape_fn(n, |_| 0.1 + r.random::<f64>());
        let e = nonconformity_scores(u.view(), m.view(), s.view()).unwrap();
        for i in 0..n {
            assert_eq!(e[i], (u[i] - m[i]).abs() / s[i]);
        }
    }

    #[test]
    fn rank_arithmetic() {
        assert_eq!(conformal_rank(100, 0.05), 96);
        assert_eq!(conformal_rank(1, 0.05), 2);
        assert_eq!(conformal_rank(19, 0.05), 19);
        assert_eq!(conformal_rank(9, 0.1), 9);
    }

    #[test]
    fn quantile_examples() {
        let scores: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        assert_eq!(conformal_quantile(&scores, 0.05).unwrap(), 96.0);
        assert_eq!(conformal_quantile(&[0.3], 0.05).unwrap(), f64::INFINITY);
        assert_eq!(conformal_quantile(&[0.7; 20], 0.2).unwrap(), 0.7);
        assert!(conformal_quantile(&[], 0.05).is_err());
    }

    #[test]
    fn z_for_nominal_levels() {
        assert_abs_diff_eq!(normal_quantile(0.05).unwrap(), 1.959964, epsilon = 1e-6);
        assert_abs_diff_eq!(normal_quantile(0.3173).unwrap(), 1.0, epsilon = 1e-4);
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn interval_examples() {
        assert_eq!(calibrated_interval(0.5, 0.2, 1.0, 1.0), (0.3, 0.7));
        let (lo, hi) = calibrated_interval(0.0, 1.0, 2.0, 1.96);
        assert_abs_diff_eq!(lo, -3.92, epsilon = 1e-12);
        assert_abs_diff_eq!(hi, 3.92, epsilon = 1e-12);
        assert_eq!(calibrated_interval(0.0, 1.0, f64::INFINITY, 1.96), (f64::NEG_INFINITY, f64::INFINITY));
    }

    fn synthetic_band(n: usize, times: usize, seed: u64, sigma_scale: f64) -> (PredictiveBand, Array2<f64>) {
        let mut r = rng::stream(seed, 0);
        let mu = Array2::from_shape_fn((n, times), |(i, k)| (i as f64 * 0.1 + k as f64).sin());
        let sd = Array2::from_shape_fn((n, times), |(i, k)| 0.2 + 0.1 * ((i + k) % 7) as f64);
        let u = Array2::from_shape_fn((n, times), |ix| mu[ix] + sd[ix] * r.sample::<f64, _>(StandardNormal));
        let band = PredictiveBand { mu_hat: mu, sigma_hat: sd * sigma_scale, n1: 1, n2: 1 };
        (band, u)
    }

    #[test]
    fn calibrated_model_gives_unit_q_at_one_sigma() {
        let times: Vec<f64> = (0..5).map(f64::from).collect();
        let (band, u) = synthetic_band(4000, 5, 3, 1.0);
        let s = calibrate_from_band(&band, u.view(), &times, 0.3173, true, 0).unwrap();
        for &q in &s.q {
            assert!((q - 1.0).abs() < 0.06, "{q}");
        }
    }

    #[test]
    fn halving_sigma_doubles_q() {
        let times: Vec<f64> = (0..4).map(f64::from).collect();
        let (band, u) = synthetic_band(100, 4, 4, 1.0);
        let (half, _) = synthetic_band(100, 4, 4, 0.5);
        let a = calibrate_from_band(&band, u.view(), &times, 0.05, true, 0).unwrap();
        let b = calibrate_from_band(&half, u.view(), &times, 0.05, true, 0).unwrap();
        for (x, y) in a.q.iter().zip(&b.q) {
            assert_abs_diff_eq!(2.0 * x, *y, epsilon = 1e-12);
        }
        assert!(a.n_cal.iter().all(|&n| n == 100));
    }

    #[test]
    fn single_calibration_sample_is_flagged() {
        let (band, u) = synthetic_band(1, 3, 5, 1.0);
        let s = calibrate_from_band(&band, u.view(), &[0.0, 1.0, 2.0], 0.05, true, 0).unwrap();
        assert!((0..3).all(|k| s.flagged(k)));
        let ci = calibrated_band(&band, &s).unwrap();
        assert!(ci.flagged.iter().all(|&f| f));
        assert!(ci.lower.iter().all(|v| *v == f64::NEG_INFINITY));
    }

    #[test]
    fn empty_calibration_names_time() {
        let band = PredictiveBand { mu_hat: Array2::zeros((0, 2)), sigma_hat: Array2::zeros((0, 2)), n1: 1, n2: 1 };
        let e = calibrate_from_band(&band, Array2::zeros((0, 2)).view(), &[0.5, 1.0], 0.05, true, 0);
        assert!(matches!(e, Err(Error::EmptyCalibration { time }) if time == 0.5));
    }

    /// Per-trial test coverage for exchangeable heteroscedastic data, with the
    /// interval half-width `mult · q · σ̂`.
    fn coverage_trials(mult: f64, trials: u64) -> Vec<f64> {
        let (n_cal, n_test) = (100, 5000);
        (0..trials)
            .map(|trial| {
                let mut r = rng::stream(77, trial);
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n)
                        .map(|_| {
                            let x: f64 = r.random_range(-2.0..2.0);
                            let sd = 0.1 + x.abs();
                            let u = x.sin() + 1.3 * sd * r.sample::<f64, _>(StandardNormal);
                            (u - x.sin()).abs() / sd
                        })
                        .collect()
                };
                let q = conformal_quantile(&draw(n_cal), 0.05).unwrap();
                draw(n_test).iter().filter(|&&e| e <= mult * q).count() as f64 / n_test as f64
            })
            .collect()
    }

    #[test]
    fn marginal_coverage_guarantee() {
        let floor = 0.95 - 3.0 * (0.05f64 * 0.95 / 5000.0).sqrt();
        let cov = coverage_trials(normal_quantile(0.05).unwrap(), 200);
        let good = cov.iter().filter(|&&c| c >= floor).count();
        assert!(good >= 190, "{good}/200");
    }

    #[test]
    fn bare_quantile_coverage_follows_beta_law() {
        use statrs::distribution::Beta;
        let floor = 0.95 - 3.0 * (0.05f64 * 0.95 / 5000.0).sqrt();
        let trials = 400;
        let cov = coverage_trials(1.0, trials);
        let mean = cov.iter().sum::<f64>() / trials as f64;
        assert!((mean - 96.0 / 101.0).abs() < 4.0 * 0.0215 / (trials as f64).sqrt(), "{mean}");
        let p = 1.0 - Beta::new(96.0, 5.0).unwrap().cdf(floor);
        let frac = cov.iter().filter(|&&c| c >= floor).count() as f64 / trials as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt() + (0.25 / 5000.0f64).sqrt();
        assert!((frac - p).abs() < 4.0 * se, "{frac} vs {p}");
    }

    #[test]
    fn schedule_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = ConformalSchedule {
            alpha: 0.05,
            z: normal_quantile(0.05).unwrap(),
            use_z: true,
            times: vec![0.0, 0.02, 0.04],
            q: vec![1.25, f64::INFINITY, 0.1 + 0.2],
            n_cal: vec![100; 3],
            n1: 100,
            n2: 100,
            seed: 9,
        };
        s.save(dir.path(), "sched").unwrap();
        assert_eq!(ConformalSchedule::load(dir.path(), "sched").unwrap(), s);
    }

    proptest! {
        #[test]
        fn quantile_monotone_and_nested(
            scores in proptest::collection::vec(0.0f64..10.0, 1..200),
            a in 0.01f64..0.99,
            b in 0.01f64..0.99,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let q_lo = conformal_quantile(&scores, lo).unwrap();
            let q_hi = conformal_quantile(&scores, hi).unwrap();
            prop_assert!(q_lo >= q_hi);
            let (l1, u1) = calibrated_interval(0.3, 0.7, q_lo, normal_quantile(lo).unwrap());
            let (l2, u2) = calibrated_interval(0.3, 0.7, q_hi, normal_quantile(hi).unwrap());
            prop_assert!(l1 <= l2 && u1 >= u2);
        }
    }
}
