//! Ground-truth simulators for the benchmark oscillators and the generator
//! that turns an input ensemble into `(f, t, u)` training triplets.

use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::{FunctionSampleSet, Provenance, SensorGrid};
use crate::io;
use crate::par::{self, Exec};

pub const GRAVITY: f64 = 9.81;

/// How the scalar input `f` enters the equations of motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingConvention {
    /// `+f` is an applied force (N) on the loaded DOF.
    Force,
    /// `−m_i f` on every DOF, `f` a base acceleration (m/s²).
    BaseAcceleration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoucWenSdofParams {
    pub m: f64,
    pub c: f64,
    pub k: f64,
    pub q_y: f64,
    pub k_r: f64,
    pub alpha: f64,
    pub beta_bw: f64,
    pub gamma: f64,
    pub eta: f64,
    pub d_y: f64,
    pub x0: f64,
    pub v0: f64,
    pub z0: f64,
    pub forcing: ForcingConvention,
}

impl Default for BoucWenSdofParams {
    /// Single-DOF base isolator benchmark.
    fn default() -> Self {
        let m = 6800.0;
        Self {
            m,
            c: 3750.0,
            k: 2.32e5,
            q_y: 0.05 * m * GRAVITY,
            k_r: 1.0 / 6.0,
            alpha: 1.0,
            beta_bw: 0.5,
            gamma: 0.5,
            eta: 2.0,
            d_y: 0.0013,
            x0: 0.005,
            v0: 0.001,
            z0: 0.001,
            forcing: ForcingConvention::Force,
        }
    }
}

impl BoucWenSdofParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.c > 0.0 && self.k > 0.0 && self.d_y > 0.0 && self.eta >= 1.0) {
            return Err(Error::InvalidInput(format!("Bouc-Wen parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// `|z|^p` with the removable singularity at `z = 0` (for `p <= 0`) set to 0.
fn abs_pow(z: f64, p: f64) -> f64 {
    if z == 0.0 {
        if p == 0.0 { 1.0 } else { 0.0 }
    } else {
        z.abs().powf(p)
    }
}

/// Hysteretic evolution law
/// `ż = (α ẋ − γ z |ẋ| |z|^{η−1} − β ẋ |z|^η) / D_y`.
pub fn bouc_wen_zdot(v: f64, z: f64, alpha: f64, beta: f64, gamma: f64, eta: f64, d_y: f64) -> f64 {
    // |z|^{η−1} is defined as 0 at z = 0 so the term vanishes for every η.
    let zm1 = if z == 0.0 { 0.0 } else { abs_pow(z, eta - 1.0) };
    (alpha * v - gamma * z * v.abs() * zm1 - beta * v * abs_pow(z, eta)) / d_y
}

/// Derivative of `(x, v, z)` for the single-DOF Bouc-Wen isolator.
pub fn boucwen_sdof_rhs(state: &[f64], _t: f64, f: f64, p: &BoucWenSdofParams, out: &mut [f64]) {
    let (x, v, z) = (state[0], state[1], state[2]);
    let load = match p.forcing {
        ForcingConvention::Force => f,
        ForcingConvention::BaseAcceleration => -p.m * f,
    };
    out[0] = v;
    out[1] = (load - p.c * v - p.k * x - (1.0 - p.k_r) * p.q_y * z) / p.m;
    out[2] = bouc_wen_zdot(v, z, p.alpha, p.beta_bw, p.gamma, p.eta, p.d_y);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duffing5DofParams {
    pub m: [f64; 5],
    pub k: [f64; 5],
    pub c: [f64; 5],
    pub alpha_do: f64,
    pub x0: f64,
    pub v0: f64,
    pub forcing: ForcingConvention,
}

impl Default for Duffing5DofParams {
    fn default() -> Self {
        Self {
            m: [10.0, 10.0, 9.0, 9.0, 7.5],
            k: [10000.0, 10000.0, 9000.0, 9000.0, 7500.0],
            c: [100.0, 100.0, 90.0, 90.0, 75.0],
            alpha_do: 100.0,
            x0: 0.01,
            v0: 0.05,
            forcing: ForcingConvention::BaseAcceleration,
        }
    }
}

impl Duffing5DofParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |a: &[f64; 5]| a.iter().all(|&v| v > 0.0 && v.is_finite());
        if !(pos(&self.m) && pos(&self.k) && pos(&self.c)) {
            return Err(Error::InvalidInput("Duffing masses, stiffnesses and dampings must be > 0".into()));
        }
        Ok(())
    }
}

/// Inter-story spring/damper chain force on DOF `i`: story `i` connects
/// DOF `i−1` (ground for `i = 0`) to DOF `i`.
fn chain_restoring(i: usize, x: &[f64], v: &[f64], k: &[f64], c: &[f64]) -> f64 {
    let n = x.len();
    let below_x = if i == 0 { 0.0 } else { x[i - 1] };
    let below_v = if i == 0 { 0.0 } else { v[i - 1] };
    let mut r = k[i] * (x[i] - below_x) + c[i] * (v[i] - below_v);
    if i + 1 < n {
        r += k[i + 1] * (x[i] - x[i + 1]) + c[i + 1] * (v[i] - v[i + 1]);
    }
    r
}

fn load_on(i: usize, m: &[f64], f: f64, conv: ForcingConvention) -> f64 {
    match conv {
        ForcingConvention::BaseAcceleration => -m[i] * f,
        ForcingConvention::Force => {
            if i == 0 { f } else { 0.0 }
        }
    }
}

/// Derivative of `(x[5], v[5])` for the Duffing chain.
pub fn duffing_5dof_rhs(state: &[f64], _t: f64, f: f64, p: &Duffing5DofParams, out: &mut [f64]) {
    let (x, v) = state.split_at(5);
    for i in 0..5 {
        out[i] = v[i];
        let mut r = chain_restoring(i, x, v, &p.k, &p.c);
        if i == 0 {
            r += p.alpha_do * x[0] * x[0] * x[0];
        }
        out[5 + i] = (load_on(i, &p.m, f, p.forcing) - r) / p.m[i];
    }
}

/// Hysteretic element attached to the first story of a shear chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoucWenBlock {
    pub q_y: f64,
    pub k_r: f64,
    pub alpha: f64,
    pub beta_bw: f64,
    pub gamma: f64,
    pub eta: f64,
    pub d_y: f64,
    pub z0: f64,
}

impl BoucWenBlock {
    pub fn from_sdof(p: &BoucWenSdofParams) -> Self {
        Self {
            q_y: p.q_y,
            k_r: p.k_r,
            alpha: p.alpha,
            beta_bw: p.beta_bw,
            gamma: p.gamma,
            eta: p.eta,
            d_y: p.d_y,
            z0: p.z0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShearChainParams {
    pub n_dof: usize,
    pub m: Vec<f64>,
    pub k: Vec<f64>,
    pub c: Vec<f64>,
    pub bouc_wen: BoucWenBlock,
    pub x0: f64,
    pub v0: f64,
    pub forcing: ForcingConvention,
}

impl ShearChainParams {
    /// Uniform chain: every story has the same mass, stiffness and damping.
    pub fn uniform(n_dof: usize, m: f64, k: f64, c: f64, bouc_wen: BoucWenBlock) -> Self {
        Self {
            n_dof,
            m: vec![m; n_dof],
            k: vec![k; n_dof],
            c: vec![c; n_dof],
            bouc_wen,
            x0: 0.0,
            v0: 0.0,
            forcing: ForcingConvention::BaseAcceleration,
        }
    }

    /// 76-story uniform stand-in for the high-rise benchmark, with the
    /// single-DOF isolator law at the first story.
    pub fn tall_building() -> Self {
        let sdof = BoucWenSdofParams::default();
        let m = 1.0e5;
        let mut block = BoucWenBlock::from_sdof(&sdof);
        block.q_y = 0.05 * m * GRAVITY;
        block.z0 = 0.0;
        Self::uniform(76, m, 2.35e8, 9.4e6, block)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_dof;
        let pos = |a: &[f64]| a.iter().all(|&v| v > 0.0 && v.is_finite());
        if n == 0 || self.m.len() != n || self.k.len() != n || self.c.len() != n {
            return Err(Error::InvalidInput(format!("shear chain needs n_dof >= 1 and {n} entries per vector")));
        }
        if !(pos(&self.m) && pos(&self.k) && pos(&self.c) && self.bouc_wen.d_y > 0.0) {
            return Err(Error::InvalidInput("shear chain constants must be > 0".into()));
        }
        Ok(())
    }
}

/// Derivative of `(x[n], v[n], z)` for the shear chain with Bouc-Wen at DOF 1.
pub fn shear_chain_boucwen_rhs(state: &[f64], _t: f64, f: f64, p: &ShearChainParams, out: &mut [f64]) {
    let n = p.n_dof;
    let x = &state[..n];
    let v = &state[n..2 * n];
    let z = state[2 * n];
    let bw = &p.bouc_wen;
    for i in 0..n {
        out[i] = v[i];
        let mut r = chain_restoring(i, x, v, &p.k, &p.c);
        if i == 0 {
            r += (1.0 - bw.k_r) * bw.q_y * z;
        }
        out[n + i] = (load_on(i, &p.m, f, p.forcing) - r) / p.m[i];
    }
    out[2 * n] = bouc_wen_zdot(v[0], z, bw.alpha, bw.beta_bw, bw.gamma, bw.eta, bw.d_y);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    BoucWenSdof(BoucWenSdofParams),
    Duffing5Dof(Duffing5DofParams),
    ShearChain(ShearChainParams),
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SystemSpec::BoucWenSdof(p) => p.validate(),
            SystemSpec::Duffing5Dof(p) => p.validate(),
            SystemSpec::ShearChain(p) => p.validate(),
        }
    }

    pub fn n_dof(&self) -> usize {
        match self {
            SystemSpec::BoucWenSdof(_) => 1,
            SystemSpec::Duffing5Dof(_) => 5,
            SystemSpec::ShearChain(p) => p.n_dof,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            SystemSpec::BoucWenSdof(_) => 3,
            SystemSpec::Duffing5Dof(_) => 10,
            SystemSpec::ShearChain(p) => 2 * p.n_dof + 1,
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        match self {
            SystemSpec::BoucWenSdof(p) => vec![p.x0, p.v0, p.z0],
            SystemSpec::Duffing5Dof(p) => {
                let mut s = vec![p.x0; 5];
                s.extend(std::iter::repeat_n(p.v0, 5));
                s
            }
            SystemSpec::ShearChain(p) => {
                let mut s = vec![p.x0; p.n_dof];
                s.extend(std::iter::repeat_n(p.v0, p.n_dof));
                s.push(p.bouc_wen.z0);
                s
            }
        }
    }

    pub fn rhs(&self, state: &[f64], t: f64, f: f64, out: &mut [f64]) {
        match self {
            SystemSpec::BoucWenSdof(p) => boucwen_sdof_rhs(state, t, f, p, out),
            SystemSpec::Duffing5Dof(p) => duffing_5dof_rhs(state, t, f, p, out),
            SystemSpec::ShearChain(p) => shear_chain_boucwen_rhs(state, t, f, p, out),
        }
    }
}

/// Recorded states; the first `n_dof` columns are displacements (m).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: SensorGrid,
    pub states: Array2<f64>,
    pub n_dof: usize,
}

impl Trajectory {
    pub fn dof_displacements(&self) -> ArrayView2<'_, f64> {
        self.states.slice(s![.., ..self.n_dof])
    }

    pub fn displacement(&self, dof: usize) -> ArrayView1<'_, f64> {
        self.states.column(dof)
    }
}

/// Piecewise-linear interpolation of sensor-point samples.
#[derive(Debug, Clone, Copy)]
pub struct LinearForcing<'a> {
    t0: f64,
    h: f64,
    values: &'a [f64],
}

impl<'a> LinearForcing<'a> {
    pub fn new(grid: &SensorGrid, values: &'a [f64]) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!("forcing has {} values for {} sensors", values.len(), grid.len())));
        }
        Ok(Self { t0: grid.start(), h: grid.spacing(), values })
    }

    pub fn at(&self, t: f64) -> f64 {
        let n = self.values.len();
        if n == 1 || self.h == 0.0 {
            return self.values[0];
        }
        let u = ((t - self.t0) / self.h).max(0.0);
        let i = (u.floor() as usize).min(n - 2);
        let w = (u - i as f64).min(1.0);
        self.values[i] + w * (self.values[i + 1] - self.values[i])
    }
}

/// Fixed-step classical RK4. States are recorded exactly at the record-grid
/// times, which must be integer multiples of `dt` from the first record time.
pub fn rk4_integrate<F>(
    mut rhs: F,
    initial_state: &[f64],
    forcing: &LinearForcing<'_>,
    dt: f64,
    record_grid: &SensorGrid,
    n_dof: usize,
) -> Result<Trajectory>
where
    F: FnMut(&[f64], f64, f64, &mut [f64]),
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("dt must be > 0 (got {dt})")));
    }
    let d = initial_state.len();
    let h = record_grid.spacing();
    let substeps = if record_grid.len() > 1 {
        let ratio = h / dt;
        let r = ratio.round();
        if r < 1.0 || (ratio - r).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidInput(format!(
                "dt = {dt} does not divide the record spacing {h}"
            )));
        }
        r as usize
    } else {
        0
    };
    let step = if substeps > 0 { h / substeps as f64 } else { dt };

    let mut states = Array2::zeros((record_grid.len(), d));
    let mut y = initial_state.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    let t0 = record_grid.start();
    states.row_mut(0).assign(&ArrayView1::from(&y[..]));

    for rec in 1..record_grid.len() {
        for sub in 0..substeps {
            let t = t0 + ((rec - 1) * substeps + sub) as f64 * step;
            let tm = t + 0.5 * step;
            let te = t + step;
            let (f0, fm, fe) = (forcing.at(t), forcing.at(tm), forcing.at(te));
            rhs(&y, t, f0, &mut k1);
            for i in 0..d {
                tmp[i] = y[i] + 0.5 * step * k1[i];
            }
            rhs(&tmp, tm, fm, &mut k2);
            for i in 0..d {
                tmp[i] = y[i] + 0.5 * step * k2[i];
            }
            rhs(&tmp, tm, fm, &mut k3);
            for i in 0..d {
                tmp[i] = y[i] + step * k3[i];
            }
            rhs(&tmp, te, fe, &mut k4);
            for i in 0..d {
                y[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { time: te });
            }
        }
        states.row_mut(rec).assign(&ArrayView1::from(&y[..]));
    }
    Ok(Trajectory { grid: record_grid.clone(), states, n_dof })
}

/// Integrates one system for a single forcing row sampled on `grid`.
pub fn simulate(system: &SystemSpec, forcing_row: &[f64], grid: &SensorGrid, dt: f64) -> Result<Trajectory> {
    let forcing = LinearForcing::new(grid, forcing_row)?;
    rk4_integrate(
        |y, t, f, out| system.rhs(y, t, f, out),
        &system.initial_state(),
        &forcing,
        dt,
        grid,
        system.n_dof(),
    )
}

/// Integrates every row of `excitation`; results are in sample order.
pub fn simulate_ensemble(
    system: &SystemSpec,
    excitation: &FunctionSampleSet,
    dt: f64,
    exec: Exec,
) -> Result<Vec<Trajectory>> {
    system.validate()?;
    par::try_map_indexed(exec, excitation.n_samples(), |i| {
        let row = excitation.row(i).to_vec();
        simulate(system, &row, &excitation.grid, dt)
            .map_err(|e| Error::Sample { index: i, source: Box::new(e) })
    })
}

/// Which split of the pipeline a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Train,
    Calibration,
    Test,
    Reliability,
}

/// Triplets `(f_n, t_n, u_n)` stored compactly: row `i` of `inputs` is shared
/// by the `N_t` triplets of sample `i`, flattened in row-major (sample, time)
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDataset {
    pub grid: SensorGrid,
    pub inputs: Array2<f64>,
    pub responses: Array2<f64>,
    pub response_dof: usize,
    pub role: DatasetRole,
    pub system: SystemSpec,
    pub excitation: Provenance,
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub role: DatasetRole,
    pub system: SystemSpec,
    pub excitation: Provenance,
    pub grid: SensorGrid,
    pub response_dof: usize,
    pub dt: f64,
    pub n_samples: usize,
    pub inputs_file: String,
    pub responses_file: String,
}

impl OperatorDataset {
    pub fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.grid.len()
    }

    /// Number of flattened triplets, `N_s · N_t`.
    pub fn len(&self) -> usize {
        self.n_samples() * self.n_times()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Triplet `n` in row-major (sample, time) order.
    pub fn triplet(&self, n: usize) -> (ArrayView1<'_, f64>, f64, f64) {
        let (i, k) = (n / self.n_times(), n % self.n_times());
        (self.inputs.row(i), self.grid.times()[k], self.responses[[i, k]])
    }

    pub fn from_trajectories(
        excitation: &FunctionSampleSet,
        trajectories: &[Trajectory],
        system: &SystemSpec,
        response_dof: usize,
        dt: f64,
        role: DatasetRole,
    ) -> Result<Self> {
        if response_dof >= system.n_dof() {
            return Err(Error::InvalidInput(format!(
                "response dof {response_dof} out of range for {} DOFs",
                system.n_dof()
            )));
        }
        if trajectories.len() != excitation.n_samples() {
            return Err(Error::Shape("one trajectory per excitation sample required".into()));
        }
        let nt = excitation.grid.len();
        let mut responses = Array2::zeros((trajectories.len(), nt));
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.grid != excitation.grid {
                return Err(Error::Shape(format!("trajectory {i} is on a different grid")));
            }
            responses.row_mut(i).assign(&tr.displacement(response_dof));
        }
        Ok(Self {
            grid: excitation.grid.clone(),
            inputs: excitation.values.clone(),
            responses,
            response_dof,
            role,
            system: system.clone(),
            excitation: excitation.provenance.clone(),
            dt,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let header: Vec<String> = self.grid.times().iter().map(|&t| io::fmt_f64(t)).collect();
        let inputs_file = format!("{stem}_inputs.csv");
        let responses_file = format!("{stem}_responses.csv");
        io::write_matrix(dir.join(&inputs_file), &header, &self.inputs)?;
        io::write_matrix(dir.join(&responses_file), &header, &self.responses)?;
        io::write_json(
            dir.join(format!("{stem}.json")),
            &DatasetManifest {
                role: self.role,
                system: self.system.clone(),
                excitation: self.excitation.clone(),
                grid: self.grid.clone(),
                response_dof: self.response_dof,
                dt: self.dt,
                n_samples: self.n_samples(),
                inputs_file,
                responses_file,
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let man: DatasetManifest = io::read_json(dir.join(format!("{stem}.json")))?;
        let (_, inputs) = io::read_matrix(dir.join(&man.inputs_file))?;
        let (_, responses) = io::read_matrix(dir.join(&man.responses_file))?;
        if inputs.nrows() != man.n_samples
            || responses.dim() != inputs.dim()
            || inputs.ncols() != man.grid.len()
        {
            return Err(Error::Artifact {
                path: dir.join(format!("{stem}.json")),
                reason: "manifest and csv shapes disagree".into(),
            });
        }
        Ok(Self {
            grid: man.grid,
            inputs,
            responses,
            response_dof: man.response_dof,
            role: man.role,
            system: man.system,
            excitation: man.excitation,
            dt: man.dt,
        })
    }
}

/// Simulates every excitation row and collects the displacement at
/// `response_dof` as an operator dataset.
pub fn generate_dataset(
    system: &SystemSpec,
    excitation: &FunctionSampleSet,
    response_dof: usize,
    dt: f64,
    role: DatasetRole,
    exec: Exec,
) -> Result<OperatorDataset> {
    let trajectories = simulate_ensemble(system, excitation, dt, exec)?;
    OperatorDataset::from_trajectories(excitation, &trajectories, system, response_dof, dt, role)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excitation::{sample_grf, GrfSpec};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use std::f64::consts::PI;

    fn zeros_forcing(grid: &SensorGrid) -> Vec<f64> {
        vec![0.0; grid.len()]
    }

    #[test]
    fn rk4_harmonic_oscillator_matches_cosine() {
        let grid = SensorGrid::uniform(2.0 * PI, 11).unwrap();
        let f = zeros_forcing(&grid);
        let forcing = LinearForcing::new(&grid, &f).unwrap();
        // dt must divide 2π/10; use the nearest divisor to 1e-3.
        let dt = grid.spacing() / (grid.spacing() / 1e-3).round();
        let tr = rk4_integrate(
            |y, _, _, o| {
                o[0] = y[1];
                o[1] = -y[0];
            },
            &[1.0, 0.0],
            &forcing,
            dt,
            &grid,
            1,
        )
        .unwrap();
        assert!((tr.states[[10, 0]] - 1.0).abs() < 1e-6);
        for (k, &t) in grid.times().iter().enumerate() {
            assert!((tr.states[[k, 0]] - t.cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn rk4_rejects_non_dividing_step() {
        let grid = SensorGrid::uniform(1.0, 11).unwrap();
        let f = zeros_forcing(&grid);
        let forcing = LinearForcing::new(&grid, &f).unwrap();
        let r = rk4_integrate(|_, _, _, o| o[0] = 0.0, &[0.0], &forcing, 0.03, &grid, 1);
        assert!(r.is_err());
    }

    #[test]
    fn rk4_fourth_order_on_manufactured_solution() {
        // y' = cos t + sin t − y with y(0) = 0 has y = sin t.
        let grid = SensorGrid::uniform(1.0, 2).unwrap();
        let f = zeros_forcing(&grid);
        let forcing = LinearForcing::new(&grid, &f).unwrap();
        let err = |n: usize| {
            let tr = rk4_integrate(|y, t, _, o| o[0] = t.cos() + t.sin() - y[0], &[0.0], &forcing, 1.0 / n as f64, &grid, 1).unwrap();
            (tr.states[(1, 0)] - 1f64.sin()).abs()
        };
        let e: Vec<f64> = [8, 16, 32].iter().map(|&n| err(n)).collect();
        for w in e.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((3.7..=4.3).contains(&order), "{order}");
        }
    }

    #[test]
    fn rk4_reports_blow_up_time() {
        let grid = SensorGrid::uniform(1.0, 11).unwrap();
        let f = zeros_forcing(&grid);
        let forcing = LinearForcing::new(&grid, &f).unwrap();
        let r = rk4_integrate(|y, _, _, o| o[0] = y[0] * y[0], &[10.0], &forcing, 1e-2, &grid, 1);
        match r {
            Err(Error::Divergence { time }) => assert!(time > 0.0 && time <= 1.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_forcing_zero_state_stays_at_rest() {
        let grid = SensorGrid::from_rate(2.0, 50.0).unwrap();
        let mut bw = BoucWenSdofParams::default();
        (bw.x0, bw.v0, bw.z0) = (0.0, 0.0, 0.0);
        let mut du = Duffing5DofParams::default();
        (du.x0, du.v0) = (0.0, 0.0);
        let ch = ShearChainParams::uniform(4, 1.0, 100.0, 1.0, BoucWenBlock::from_sdof(&bw));
        for sys in [SystemSpec::BoucWenSdof(bw), SystemSpec::Duffing5Dof(du), SystemSpec::ShearChain(ch)] {
            let tr = simulate(&sys, &zeros_forcing(&grid), &grid, 1e-3).unwrap();
            assert!(tr.states.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_forcing_interpolates_and_clamps() {
        let grid = SensorGrid::uniform(1.0, 3).unwrap();
        let v = [0.0, 2.0, 4.0];
        let f = LinearForcing::new(&grid, &v).unwrap();
        assert_relative_eq!(f.at(0.25), 1.0);
        assert_relative_eq!(f.at(0.75), 3.0);
        assert_eq!(f.at(1.0), 4.0);
        assert_eq!(f.at(2.0), 4.0);
    }

    #[test]
    fn boucwen_rest_state_has_zero_derivative() {
        let mut out = [1.0; 3];
        boucwen_sdof_rhs(&[0.0, 0.0, 0.0], 0.0, 0.0, &BoucWenSdofParams::default(), &mut out);
        assert_eq!(out, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn boucwen_plugin_arithmetic() {
        let p = BoucWenSdofParams::default();
        let mut out = [0.0; 3];
        boucwen_sdof_rhs(&[0.005, 0.001, 0.001], 0.0, 0.0, &p, &mut out);
        let q_y = 0.05 * 6800.0 * 9.81;
        let expect = (-3750.0 * 0.001 - 2.32e5 * 0.005 - (5.0 / 6.0) * q_y * 0.001) / 6800.0;
        assert_relative_eq!(out[0], 0.001);
        assert_relative_eq!(out[1], expect, max_relative = 1e-14);
        // ≈ −0.171548 m/s²
        assert_relative_eq!(out[1], -0.171548, epsilon = 1e-6);
    }

    #[test]
    fn boucwen_z_law_simplifies_for_eta_two() {
        for &(v, z) in &[(0.3, 0.4), (1.2, 0.9), (0.01, 0.2)] {
            let zd = bouc_wen_zdot(v, z, 1.0, 0.5, 0.5, 2.0, 0.0013);
            assert_relative_eq!(zd, v * (1.0 - z * z) / 0.0013, max_relative = 1e-12);
        }
    }

    #[test]
    fn boucwen_z_law_is_finite_at_zero_for_small_eta() {
        let zd = bouc_wen_zdot(0.5, 0.0, 1.0, 0.5, 0.5, 1.0, 1.0);
        assert_eq!(zd, 0.5);
    }

    #[test]
    fn duffing_inertial_loading_only() {
        let p = Duffing5DofParams::default();
        let mut out = [0.0; 10];
        duffing_5dof_rhs(&[0.0; 10], 0.0, 1.0, &p, &mut out);
        for i in 0..5 {
            assert_eq!(out[i], 0.0);
            assert_relative_eq!(out[5 + i], -1.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn duffing_cubic_term_isolated() {
        let mut state = [0.0; 10];
        state[0] = 0.3;
        let lin = Duffing5DofParams { alpha_do: 0.0, ..Duffing5DofParams::default() };
        let cub = Duffing5DofParams::default();
        let (mut a, mut b) = ([0.0; 10], [0.0; 10]);
        duffing_5dof_rhs(&state, 0.0, 0.0, &lin, &mut a);
        duffing_5dof_rhs(&state, 0.0, 0.0, &cub, &mut b);
        assert_relative_eq!(a[5] - b[5], 100.0 * 0.3_f64.powi(3) / 10.0, max_relative = 1e-12);
        for i in 6..10 {
            assert_eq!(a[i], b[i]);
        }
    }

    /// Tridiagonal shear-chain matrix assembled from story coefficients.
    fn chain_matrix(coef: &[f64]) -> DMatrix<f64> {
        let n = coef.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] += coef[i];
            if i + 1 < n {
                m[(i, i)] += coef[i + 1];
                m[(i, i + 1)] -= coef[i + 1];
                m[(i + 1, i)] -= coef[i + 1];
            }
        }
        m
    }

    #[test]
    fn duffing_matches_dense_matrix_form() {
        let p = Duffing5DofParams::default();
        let mass = DMatrix::from_diagonal(&DVector::from_row_slice(&p.m));
        let kk = chain_matrix(&p.k);
        let cc = chain_matrix(&p.c);
        let states = [
            [0.01, -0.02, 0.03, 0.005, -0.01, 0.1, -0.05, 0.2, 0.0, 0.3],
            [0.2, 0.1, -0.1, 0.05, 0.3, -0.4, 0.2, 0.1, -0.3, 0.05],
        ];
        for state in states {
            for f in [0.0, 1.7, -3.2] {
                let x: DVector<f64> = DVector::from_row_slice(&state[..5]);
                let v = DVector::from_row_slice(&state[5..]);
                let mut g = DVector::zeros(5);
                g[0] = p.alpha_do * x[0] * x[0] * x[0];
                let mf = &mass * DVector::from_element(5, f);
                let acc = mass.clone().try_inverse().unwrap() * (-&cc * &v - &kk * &x - g - mf);
                let mut out = [0.0; 10];
                duffing_5dof_rhs(&state, 0.0, f, &p, &mut out);
                for i in 0..5 {
                    assert_relative_eq!(out[5 + i], acc[i], max_relative = 1e-12, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_story_chain_reduces_to_sdof() {
        let sd = BoucWenSdofParams { forcing: ForcingConvention::BaseAcceleration, ..BoucWenSdofParams::default() };
        let mut ch = ShearChainParams::uniform(1, sd.m, sd.k, sd.c, BoucWenBlock::from_sdof(&sd));
        ch.forcing = ForcingConvention::BaseAcceleration;
        let state = [0.004, -0.02, 0.3];
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        boucwen_sdof_rhs(&state, 0.0, 0.7, &sd, &mut a);
        shear_chain_boucwen_rhs(&state, 0.0, 0.7, &ch, &mut b);
        for i in 0..3 {
            assert_relative_eq!(a[i], b[i], max_relative = 1e-14);
        }
    }

    fn linear_chain() -> ShearChainParams {
        let mut block = BoucWenBlock::from_sdof(&BoucWenSdofParams::default());
        block.q_y = 0.0;
        block.z0 = 0.0;
        let mut p = ShearChainParams::uniform(5, 2.0, 400.0, 1.5, block);
        p.m = vec![2.0, 1.8, 1.6, 1.5, 1.2];
        p.x0 = 0.01;
        p.v0 = -0.02;
        p
    }

    #[test]
    fn linear_chain_matches_matrix_exponential() {
        let p = linear_chain();
        let grid = SensorGrid::from_rate(2.0, 50.0).unwrap();
        let tr = simulate(&SystemSpec::ShearChain(p.clone()), &zeros_forcing(&grid), &grid, 1e-3).unwrap();
        let n = 5;
        let minv = DMatrix::from_diagonal(&DVector::from_iterator(n, p.m.iter().map(|m| 1.0 / m)));
        let kk = chain_matrix(&p.k);
        let cc = chain_matrix(&p.c);
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        a.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
        a.view_mut((n, 0), (n, n)).copy_from(&(-&minv * kk));
        a.view_mut((n, n), (n, n)).copy_from(&(-&minv * cc));
        let y0 = DVector::from_iterator(2 * n, (0..2 * n).map(|i| if i < n { p.x0 } else { p.v0 }));
        for &k in &[10usize, 50, 100] {
            let t = grid.times()[k];
            let exact = (&a * t).exp() * &y0;
            for i in 0..n {
                assert!((tr.states[[k, i]] - exact[i]).abs() < 1e-9, "k={k} i={i}");
            }
        }
    }

    #[test]
    fn damped_linear_chain_energy_non_increasing() {
        let p = linear_chain();
        let grid = SensorGrid::from_rate(2.0, 50.0).unwrap();
        let tr = simulate(&SystemSpec::ShearChain(p.clone()), &zeros_forcing(&grid), &grid, 1e-3).unwrap();
        let energy = |row: ArrayView1<f64>| {
            let x = &row.as_slice().unwrap()[..5];
            let v = &row.as_slice().unwrap()[5..10];
            let kin: f64 = (0..5).map(|i| 0.5 * p.m[i] * v[i] * v[i]).sum();
            let pot: f64 = (0..5)
                .map(|i| {
                    let d = x[i] - if i == 0 { 0.0 } else { x[i - 1] };
                    0.5 * p.k[i] * d * d
                })
                .sum();
            kin + pot
        };
        let e: Vec<f64> = tr.states.rows().into_iter().map(energy).collect();
        for w in e.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{} -> {}", w[0], w[1]);
        }
        assert!(e[100] < e[0]);
    }

    #[test]
    fn dataset_counts_and_order() {
        let grid = SensorGrid::uniform(0.04, 3).unwrap();
        let exc = sample_grf(&GrfSpec::new(50.0, 0.1, 1), &grid, 2, Exec::Sequential).unwrap();
        let sys = SystemSpec::BoucWenSdof(BoucWenSdofParams::default());
        let ds = generate_dataset(&sys, &exc, 0, 1e-3, DatasetRole::Train, Exec::Sequential).unwrap();
        assert_eq!(ds.len(), 6);
        let (f, t, u) = ds.triplet(4);
        assert_eq!(f, exc.row(1));
        assert_eq!(t, grid.times()[1]);
        assert_eq!(u, ds.responses[[1, 1]]);
    }

    #[test]
    fn dataset_zero_excitation_zero_ics_is_zero() {
        let grid = SensorGrid::from_rate(2.0, 50.0).unwrap();
        let exc = FunctionSampleSet::new(
            grid.clone(),
            Array2::zeros((3, grid.len())),
            Provenance::External { note: "zeros".into() },
        )
        .unwrap();
        let mut p = BoucWenSdofParams::default();
        (p.x0, p.v0, p.z0) = (0.0, 0.0, 0.0);
        let ds = generate_dataset(&SystemSpec::BoucWenSdof(p), &exc, 0, 1e-3, DatasetRole::Test, Exec::Parallel).unwrap();
        assert!(ds.responses.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn dataset_rejects_out_of_range_dof() {
        let grid = SensorGrid::uniform(0.04, 3).unwrap();
        let exc = sample_grf(&GrfSpec::new(1.0, 0.1, 1), &grid, 1, Exec::Sequential).unwrap();
        let sys = SystemSpec::BoucWenSdof(BoucWenSdofParams::default());
        assert!(generate_dataset(&sys, &exc, 1, 1e-3, DatasetRole::Train, Exec::Sequential).is_err());
    }

    #[test]
    fn dataset_divergence_names_sample() {
        let grid = SensorGrid::uniform(1.0, 11).unwrap();
        let mut vals = Array2::zeros((2, 11));
        vals[[1, 3]] = 1e300;
        let exc = FunctionSampleSet::new(grid, vals, Provenance::External { note: "bad".into() }).unwrap();
        let sys = SystemSpec::Duffing5Dof(Duffing5DofParams::default());
        match generate_dataset(&sys, &exc, 0, 1e-3, DatasetRole::Train, Exec::Sequential) {
            Err(Error::Sample { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected sample error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_persistence_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let grid = SensorGrid::from_rate(2.0, 50.0).unwrap();
        let exc = sample_grf(&GrfSpec::new(50.0, 0.1, 4), &grid, 3, Exec::Sequential).unwrap();
        let sys = SystemSpec::BoucWenSdof(BoucWenSdofParams::default());
        let ds = generate_dataset(&sys, &exc, 0, 1e-3, DatasetRole::Calibration, Exec::Sequential).unwrap();
        ds.save(dir.path(), "cal").unwrap();
        let back = OperatorDataset::load(dir.path(), "cal").unwrap();
        assert_eq!(back, ds);
    }
}
