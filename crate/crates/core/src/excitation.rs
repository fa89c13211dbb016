//! Stochastic input-function ensembles: squared-exponential Gaussian random
//! fields and random Fourier-series forces, sampled on a fixed sensor grid.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::par::{self, Exec};
use crate::rng;

/// Uniformly spaced, strictly increasing sample times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorGrid {
    times: Vec<f64>,
}

impl SensorGrid {
    /// `count` points spanning `[0, horizon]` inclusive.
    pub fn uniform(horizon: f64, count: usize) -> Result<Self> {
        if count == 0 || !horizon.is_finite() || (count > 1 && horizon <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "uniform grid needs count >= 1 and horizon > 0 (got {count}, {horizon})"
            )));
        }
        let step = if count > 1 { horizon / (count - 1) as f64 } else { 0.0 };
        Self::from_times((0..count).map(|i| i as f64 * step).collect())
    }

    /// Grid recorded at `rate_hz` over `[0, horizon]`, e.g. 50 Hz over 2 s
    /// gives 101 points.
    pub fn from_rate(horizon: f64, rate_hz: f64) -> Result<Self> {
        let n = (horizon * rate_hz).round() as usize + 1;
        Self::uniform(horizon, n)
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidInput("empty sensor grid".into()));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite grid time {t}")));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("grid times must be strictly increasing".into()));
        }
        if times.len() > 2 {
            let h = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
            // 1e-12 relative, plus a few ulps of rounding in the stored times
            let tol = 1e-12 * h + 4.0 * f64::EPSILON * times[times.len() - 1].abs().max(times[0].abs());
            for (i, w) in times.windows(2).enumerate() {
                if ((w[1] - w[0]) - h).abs() > tol {
                    return Err(Error::InvalidInput(format!(
                        "non-uniform spacing at index {i}: {} vs {h}",
                        w[1] - w[0]
                    )));
                }
            }
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Uniform spacing; zero for a single-point grid.
    pub fn spacing(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            (self.end() - self.start()) / (self.times.len() - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    pub sigma: f64,
    pub length_scale: f64,
    /// Initial diagonal regularizer. Escalated ×10 on factorization failure.
    pub jitter: f64,
    pub seed: u64,
}

impl GrfSpec {
    pub fn new(sigma: f64, length_scale: f64, seed: u64) -> Self {
        Self { sigma, length_scale, jitter: 1e-8 * sigma * sigma, seed }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.length_scale > 0.0 && self.jitter >= 0.0)
            || !self.sigma.is_finite()
            || !self.length_scale.is_finite()
            || !self.jitter.is_finite()
        {
            return Err(Error::InvalidInput(format!(
                "GRF needs sigma > 0, length_scale > 0, jitter >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// One `(amplitude, frequency)` pair of a Fourier forcing term.
pub type Term = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierForceSpec {
    pub n_sin: usize,
    pub n_cos: usize,
    pub amp_range: [f64; 2],
    /// Angular frequencies in rad/s.
    pub freq_range: [f64; 2],
    pub seed: u64,
}

impl FourierForceSpec {
    pub fn new(n_sin: usize, n_cos: usize, seed: u64) -> Self {
        Self { n_sin, n_cos, amp_range: [0.0, 1.0], freq_range: [0.0, 20.0], seed }
    }

    fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ok(self.amp_range) || !ok(self.freq_range) {
            return Err(Error::InvalidInput(format!("invalid Fourier ranges {self:?}")));
        }
        Ok(())
    }

    /// Draws the coefficients of sample `index`: `(amp, freq)` pairs for the
    /// sine terms followed by the cosine terms.
    pub fn coefficients(&self, index: usize) -> (Vec<Term>, Vec<Term>) {
        let mut rng = rng::stream(self.seed, index as u64);
        let draw = |r: [f64; 2], rng: &mut rand_chacha::ChaCha8Rng| {
            if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) }
        };
        let mut terms = |n: usize| -> Vec<(f64, f64)> {
            (0..n)
                .map(|_| {
                    let a = draw(self.amp_range, &mut rng);
                    let f = draw(self.freq_range, &mut rng);
                    (a, f)
                })
                .collect()
        };
        let s = terms(self.n_sin);
        let c = terms(self.n_cos);
        (s, c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Grf(GrfSpec),
    Fourier(FourierForceSpec),
    External { note: String },
}

/// `N_s × N_t` realizations of an input function on a sensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSampleSet {
    pub grid: SensorGrid,
    pub values: Array2<f64>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct SampleSetSidecar {
    provenance: Provenance,
    n_samples: usize,
    grid: SensorGrid,
}

impl FunctionSampleSet {
    pub fn new(grid: SensorGrid, values: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if values.ncols() != grid.len() {
            return Err(Error::Shape(format!(
                "sample set has {} columns but grid has {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input function values".into()));
        }
        Ok(Self { grid, values, provenance })
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Writes `<stem>.csv` (header = grid times) and `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let header: Vec<String> = self.grid.times().iter().map(|&t| io::fmt_f64(t)).collect();
        io::write_matrix(dir.join(format!("{stem}.csv")), &header, &self.values)?;
        io::write_json(
            dir.join(format!("{stem}.json")),
            &SampleSetSidecar {
                provenance: self.provenance.clone(),
                n_samples: self.n_samples(),
                grid: self.grid.clone(),
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let (_, values) = io::read_matrix(&csv_path)?;
        let side: SampleSetSidecar = io::read_json(dir.join(format!("{stem}.json")))?;
        if side.n_samples != values.nrows() {
            return Err(Error::Artifact {
                path: csv_path,
                reason: format!("sidecar says {} samples, csv has {}", side.n_samples, values.nrows()),
            });
        }
        Self::new(side.grid, values, side.provenance)
    }
}

/// `K[i][j] = σ² exp(−(t_i − t_j)² / (2 l²))`.
pub fn se_kernel_matrix(grid: &SensorGrid, sigma: f64, length_scale: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && length_scale > 0.0) {
        return Err(Error::InvalidInput(format!(
            "kernel needs sigma > 0 and length_scale > 0 (got {sigma}, {length_scale})"
        )));
    }
    let t = grid.times();
    let n = t.len();
    let s2 = sigma * sigma;
    let denom = 2.0 * length_scale * length_scale;
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = s2;
        for j in 0..i {
            let d = t[i] - t[j];
            let v = s2 * (-(d * d) / denom).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(k)
}

/// Lower Cholesky factor of `K + jitter·I`, escalating the jitter ×10 from
/// `start` until it succeeds or exceeds `max`.
pub fn jittered_cholesky(k: &Array2<f64>, start: f64, max: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = k.nrows();
    let base = DMatrix::from_fn(n, n, |i, j| k[[i, j]]);
    let mut jitter = start;
    loop {
        let mut m = base.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Ok((ch.unpack(), jitter));
        }
        let next = if jitter == 0.0 { max * 1e-6 } else { jitter * 10.0 };
        if next > max * (1.0 + 1e-12) {
            return Err(Error::Factorization { jitter });
        }
        jitter = next;
    }
}

/// Draws `n_samples` rows from `N(0, K + jitter·I)`. Row `i` depends only on
/// `(spec.seed, i)`.
pub fn sample_grf(spec: &GrfSpec, grid: &SensorGrid, n_samples: usize, exec: Exec) -> Result<FunctionSampleSet> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    let k = se_kernel_matrix(grid, spec.sigma, spec.length_scale)?;
    let s2 = spec.sigma * spec.sigma;
    let (l, _) = jittered_cholesky(&k, spec.jitter, (1e-2 * s2).max(spec.jitter))?;
    let n = grid.len();
    let rows = par::map_indexed(exec, n_samples, |i| {
        let mut r = rng::stream(spec.seed, i as u64);
        let xi: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        (0..n)
            .map(|a| (0..=a).map(|b| l[(a, b)] * xi[b]).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    let values = Array2::from_shape_vec((n_samples, n), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    FunctionSampleSet::new(grid.clone(), values, Provenance::Grf(*spec))
}

/// Evaluates `Σ a_s sin(ω_s t) + Σ a_c cos(ω_c t)` on the grid.
pub fn fourier_row(sin_terms: &[(f64, f64)], cos_terms: &[(f64, f64)], grid: &SensorGrid) -> Vec<f64> {
    grid.times()
        .iter()
        .map(|&t| {
            sin_terms.iter().map(|&(a, w)| a * (w * t).sin()).sum::<f64>()
                + cos_terms.iter().map(|&(a, w)| a * (w * t).cos()).sum::<f64>()
        })
        .collect()
}

pub fn sample_fourier_force(
    spec: &FourierForceSpec,
    grid: &SensorGrid,
    n_samples: usize,
    exec: Exec,
) -> Result<FunctionSampleSet> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    let rows = par::map_indexed(exec, n_samples, |i| {
        let (s, c) = spec.coefficients(i);
        fourier_row(&s, &c, grid)
    });
    let values = Array2::from_shape_vec((n_samples, grid.len()), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    FunctionSampleSet::new(grid.clone(), values, Provenance::Fourier(*spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn grid_from_rate_has_101_points() {
        let g = SensorGrid::from_rate(2.0, 50.0).unwrap();
        assert_eq!(g.len(), 101);
        assert_relative_eq!(g.spacing(), 0.02, epsilon = 1e-15);
        assert_eq!(g.end(), 2.0);
    }

    #[test]
    fn grid_rejects_bad_times() {
        assert!(SensorGrid::from_times(vec![0.0, 0.0]).is_err());
        assert!(SensorGrid::from_times(vec![0.0, f64::NAN]).is_err());
        assert!(SensorGrid::from_times(vec![0.0, 0.1, 0.3]).is_err());
        assert!(SensorGrid::from_times(vec![]).is_err());
    }

    #[test]
    fn kernel_single_point_is_sigma_squared() {
        let g = SensorGrid::from_times(vec![0.0]).unwrap();
        let k = se_kernel_matrix(&g, 50.0, 0.10).unwrap();
        assert_eq!(k[[0, 0]], 2500.0);
    }

    #[test]
    fn kernel_off_diagonal_closed_form() {
        let g = SensorGrid::from_times(vec![0.0, 0.1]).unwrap();
        let k = se_kernel_matrix(&g, 50.0, 0.10).unwrap();
        assert_relative_eq!(k[[0, 1]], 2500.0 * (-0.5f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(k[[0, 1]], 1516.33, epsilon = 0.01);
        assert_eq!(k[[0, 1]], k[[1, 0]]);
    }

    #[test]
    fn kernel_rejects_nonpositive_params() {
        let g = SensorGrid::uniform(1.0, 5).unwrap();
        assert!(se_kernel_matrix(&g, 0.0, 0.1).is_err());
        assert!(se_kernel_matrix(&g, 1.0, -0.1).is_err());
    }

    #[test]
    fn kernel_is_symmetric_psd_after_jitter() {
        // Fine grid: numerically rank-deficient without jitter.
        let g = SensorGrid::uniform(2.0, 101).unwrap();
        let k = se_kernel_matrix(&g, 50.0, 0.10).unwrap();
        for i in 0..101 {
            for j in 0..101 {
                assert_eq!(k[[i, j]], k[[j, i]]);
            }
        }
        let (_, jitter) = jittered_cholesky(&k, 1e-8 * 2500.0, 1e-2 * 2500.0).unwrap();
        let mut m = DMatrix::from_fn(101, 101, |i, j| k[[i, j]]);
        for i in 0..101 {
            m[(i, i)] += jitter;
        }
        let eig = m.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > -1e-9 * 2500.0), "min eig {}", eig.min());
    }

    #[test]
    fn grf_is_deterministic() {
        let g = SensorGrid::uniform(2.0, 40).unwrap();
        let spec = GrfSpec::new(50.0, 0.1, 11);
        let a = sample_grf(&spec, &g, 8, Exec::Sequential).unwrap();
        let b = sample_grf(&spec, &g, 8, Exec::Parallel).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn grf_degenerate_amplitude_is_near_zero() {
        let g = SensorGrid::uniform(2.0, 30).unwrap();
        let s = sample_grf(&GrfSpec::new(1e-12, 0.1, 2), &g, 20, Exec::Sequential).unwrap();
        assert!(s.values.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn grf_column_moments_match_kernel() {
        let g = SensorGrid::uniform(2.0, 100).unwrap();
        let n = 10_000;
        let s = sample_grf(&GrfSpec::new(50.0, 0.10, 5), &g, n, Exec::Parallel).unwrap();
        // Var of the sample variance of a Gaussian is 2σ⁴/(n−1).
        let se_var = (2.0 * 2500.0f64.powi(2) / (n as f64 - 1.0)).sqrt();
        let se_mean = 50.0 / (n as f64).sqrt();
        for col in s.values.columns() {
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            // 2500 plus the ~2.5e-5 jitter
            assert!((var - 2500.0).abs() < 3.0 * se_var + 1.0, "var {var}");
            assert!(mean.abs() < 4.0 * se_mean, "mean {mean}");
        }
    }

    #[test]
    fn grf_rejects_zero_samples() {
        let g = SensorGrid::uniform(1.0, 3).unwrap();
        assert!(sample_grf(&GrfSpec::new(1.0, 0.1, 0), &g, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn fourier_empty_sum_is_zero() {
        let g = SensorGrid::uniform(2.0, 11).unwrap();
        let s = sample_fourier_force(&FourierForceSpec::new(0, 0, 1), &g, 3, Exec::Sequential).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fourier_single_fixed_term() {
        let g = SensorGrid::from_times(vec![0.0, 0.5]).unwrap();
        let spec = FourierForceSpec { n_sin: 1, n_cos: 0, amp_range: [1.0, 1.0], freq_range: [PI, PI], seed: 0 };
        let s = sample_fourier_force(&spec, &g, 1, Exec::Sequential).unwrap();
        assert_eq!(s.values[[0, 0]], 0.0);
        assert_relative_eq!(s.values[[0, 1]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn fourier_value_at_zero_is_cosine_amplitude_sum() {
        let g = SensorGrid::from_rate(2.0, 50.0).unwrap();
        let spec = FourierForceSpec::new(10, 10, 99);
        let s = sample_fourier_force(&spec, &g, 5, Exec::Parallel).unwrap();
        for i in 0..5 {
            let (_, cos_terms) = spec.coefficients(i);
            let expect: f64 = cos_terms.iter().map(|t| t.0).sum();
            assert_relative_eq!(s.values[[i, 0]].abs(), expect.abs(), max_relative = 1e-13);
            // every draw lies inside the configured ranges
            let (sin_terms, _) = spec.coefficients(i);
            for (a, w) in sin_terms.iter().chain(cos_terms.iter()) {
                assert!((0.0..=1.0).contains(a) && (0.0..=20.0).contains(w));
            }
        }
    }

    #[test]
    fn fourier_rows_depend_only_on_seed_and_index() {
        let g = SensorGrid::uniform(2.0, 21).unwrap();
        let spec = FourierForceSpec::new(3, 4, 8);
        let big = sample_fourier_force(&spec, &g, 10, Exec::Parallel).unwrap();
        let (s, c) = spec.coefficients(7);
        let row7 = fourier_row(&s, &c, &g);
        assert_eq!(big.row(7).to_vec(), row7);
    }

    #[test]
    fn fourier_rejects_inverted_ranges() {
        let g = SensorGrid::uniform(1.0, 3).unwrap();
        let mut spec = FourierForceSpec::new(1, 1, 0);
        spec.amp_range = [2.0, 1.0];
        assert!(sample_fourier_force(&spec, &g, 1, Exec::Sequential).is_err());
    }

    #[test]
    fn sample_set_persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = SensorGrid::from_rate(2.0, 50.0).unwrap();
        let s = sample_grf(&GrfSpec::new(50.0, 0.1, 3), &g, 4, Exec::Sequential).unwrap();
        s.save(dir.path(), "train_inputs").unwrap();
        let back = FunctionSampleSet::load(dir.path(), "train_inputs").unwrap();
        assert_eq!(back, s);
    }
}
