//! Bayesian spiking operator network: branch/trunk stacks with Gaussian
//! variational weights, dual mean/std heads, ELBO training and predictive
//! Monte Carlo.
//!
//! Every dataset here is grid structured (`N_s` input functions observed at
//! the same `N_t` times), so the branch runs once per input function and the
//! trunk once per time; the `N_s × N_t` head outputs are two matrix products.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::OperatorDataset;
use crate::error::{Error, Result};
use crate::io;
use crate::neuralcore::{
    dense_backward_batch, dense_forward_batch, sigmoid, softplus, vsn_repeat_backward, vsn_repeat_forward, AdamState,
    VariationalTensor, VsnConfig, VsnForwardRecord, VsnLayerParams,
};
use crate::par::{self, Exec};
use crate::rng;

pub const SIGMA_FLOOR: f64 = 1e-6;

/// Rows per branch evaluation block during prediction. Fixed so that the
/// floating-point work per row does not depend on the execution mode.
const PREDICT_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Vsn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsnSettings {
    pub t_s: usize,
    pub threshold_init: f64,
    pub beta_init: f64,
    /// Whether thresholds and leaks are updated during training.
    pub learnable: bool,
    pub neuron: VsnConfig,
}

impl Default for VsnSettings {
    fn default() -> Self {
        Self { t_s: 2, threshold_init: 0.1, beta_init: 0.9, learnable: true, neuron: VsnConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorArchitecture {
    pub n_sensors: usize,
    pub branch_widths: Vec<usize>,
    pub trunk_widths: Vec<usize>,
    pub p: usize,
    /// Zero-based layer indices followed by a nonlinearity, in both stacks.
    pub activated_layers: Vec<usize>,
    pub branch_activation: Activation,
    pub trunk_activation: Activation,
    pub vsn: VsnSettings,
    pub init_scheme: InitScheme,
    /// Standard deviation of the weight means, or the gain under LeCun scaling.
    pub init_mu_std: f64,
    pub init_sigma: f64,
    /// Separate mean std for the σ-half rows of both final layers.
    pub head_sigma_init_std: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Every mean drawn from `N(0, init_mu_std²)`.
    #[default]
    Constant,
    /// Weight and bias means drawn with std `init_mu_std / √fan_in`.
    LeCun,
}

impl OperatorArchitecture {
    /// `depth` layers of `width` in each stack, the last one of width `2p`,
    /// nonlinearities after the first two layers.
    pub fn standard(n_sensors: usize, width: usize, depth: usize, p: usize, branch_activation: Activation) -> Self {
        let mut widths = vec![width; depth.saturating_sub(1)];
        widths.push(2 * p);
        Self {
            n_sensors,
            branch_widths: widths.clone(),
            trunk_widths: widths,
            p,
            activated_layers: vec![0, 1],
            branch_activation,
            trunk_activation: Activation::Relu,
            vsn: VsnSettings::default(),
            init_scheme: InitScheme::Constant,
            init_mu_std: 0.05,
            init_sigma: 0.05,
            head_sigma_init_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sensors == 0 || self.p == 0 {
            return Err(Error::InvalidInput("sensor count and latent width must be >= 1".into()));
        }
        for (name, w) in [("branch", &self.branch_widths), ("trunk", &self.trunk_widths)] {
            if w.is_empty() || w.contains(&0) {
                return Err(Error::InvalidInput(format!("{name} widths must be non-empty and positive: {w:?}")));
            }
            if *w.last().unwrap() != 2 * self.p {
                return Err(Error::InvalidInput(format!(
                    "{name} final width {} must equal 2p = {}",
                    w.last().unwrap(),
                    2 * self.p
                )));
            }
            if let Some(&i) = self.activated_layers.iter().find(|&&i| i >= w.len()) {
                return Err(Error::InvalidInput(format!("activated layer {i} outside the {name} stack")));
            }
        }
        if self.vsn.t_s == 0 {
            return Err(Error::InvalidInput("spike time steps must be >= 1".into()));
        }
        if !(self.init_mu_std >= 0.0) || self.head_sigma_init_std.is_some_and(|v| !(v >= 0.0)) {
            return Err(Error::InvalidInput("initial mean std values must be >= 0".into()));
        }
        if !(self.init_sigma > 0.0) {
            return Err(Error::InvalidInput("initial std values must be positive".into()));
        }
        Ok(())
    }

    fn layer_shapes(&self, input: usize, widths: &[usize]) -> Vec<(usize, usize)> {
        let mut prev = input;
        widths
            .iter()
            .map(|&w| {
                let shape = (w, prev);
                prev = w;
                shape
            })
            .collect()
    }

    pub fn branch_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_shapes(self.n_sensors, &self.branch_widths)
    }

    pub fn trunk_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_shapes(1, &self.trunk_widths)
    }

    fn vsn_widths(&self, widths: &[usize], act: Activation) -> Vec<usize> {
        match act {
            Activation::Relu => Vec::new(),
            Activation::Vsn => self.activated_layers.iter().map(|&i| widths[i]).collect(),
        }
    }
}

/// How training targets are centered before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputCentering {
    /// Subtract the global target mean.
    Global,
    /// Subtract the training mean trajectory, linearly interpolated in time.
    #[default]
    PerTime,
}

/// ZCA map `V diag(1/√(λ + floor·λ_max)) Vᵀ` of the sample covariance of
/// `x`. Directions carrying much less variance than the floor stay damped.
fn whitening_map(x: ArrayView2<'_, f64>, floor: f64) -> Vec<f64> {
    let (n, m) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("non-empty inputs");
    let c = &x - &mean;
    let cov = c.t().dot(&c) / n as f64;
    let eig = nalgebra::DMatrix::from_fn(m, m, |i, j| cov[[i, j]]).symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let eps = floor * lmax;
    let mut out = vec![0.0; m * m];
    for k in 0..m {
        let sc = 1.0 / (eig.eigenvalues[k].max(0.0) + eps).sqrt();
        for i in 0..m {
            let vi = eig.eigenvectors[(i, k)] * sc;
            for j in 0..m {
                out[i * m + j] += vi * eig.eigenvectors[(j, k)];
            }
        }
    }
    out
}

/// Affine maps between physical units and the units the network sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub f_shift: f64,
    pub f_scale: f64,
    pub u_shift: f64,
    pub u_scale: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Knots of the mean trajectory; when non-empty it replaces `u_shift`.
    #[serde(default)]
    pub profile_times: Vec<f64>,
    #[serde(default)]
    pub profile_mean: Vec<f64>,
    /// Symmetric `m × m` whitening map applied after standardization,
    /// row-major; empty means none.
    #[serde(default)]
    pub whitening: Vec<f64>,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            f_shift: 0.0,
            f_scale: 1.0,
            u_shift: 0.0,
            u_scale: 1.0,
            t_start: 0.0,
            t_end: 1.0,
            profile_times: Vec::new(),
            profile_mean: Vec::new(),
            whitening: Vec::new(),
        }
    }
}

fn mean_std(a: ArrayView2<'_, f64>) -> (f64, f64) {
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Normalization {
    /// Input mean/std, target centering and scale, trunk time mapped to [0, 1].
    pub fn fit(
        inputs: ArrayView2<'_, f64>,
        times: &[f64],
        targets: ArrayView2<'_, f64>,
        centering: OutputCentering,
        whiten_floor: Option<f64>,
    ) -> Self {
        let (f_shift, f_std) = mean_std(inputs);
        let (u_shift, u_std) = mean_std(targets);
        let t_start = times[0];
        let t_end = *times.last().unwrap();
        let mut out = Self {
            f_shift,
            f_scale: if f_std > 0.0 { f_std } else { 1.0 },
            u_shift,
            u_scale: if u_std > 0.0 { u_std } else { 1.0 },
            t_start,
            t_end: if t_end > t_start { t_end } else { t_start + 1.0 },
            profile_times: Vec::new(),
            profile_mean: Vec::new(),
            whitening: Vec::new(),
        };
        if let Some(floor) = whiten_floor {
            out.whitening = whitening_map(out.branch_input(inputs).view(), floor);
        }
        if centering == OutputCentering::PerTime {
            let mean = targets.mean_axis(Axis(0)).expect("targets are non-empty");
            let resid = &targets - &mean;
            let (_, s) = mean_std(resid.view());
            out.u_scale = if s > 0.0 { s } else { 1.0 };
            out.profile_times = times.to_vec();
            out.profile_mean = mean.to_vec();
        }
        out
    }

    /// Target shift at time `t`.
    pub fn shift_at(&self, t: f64) -> f64 {
        let (ts, ms) = (&self.profile_times, &self.profile_mean);
        if ts.is_empty() {
            return self.u_shift;
        }
        if t <= ts[0] {
            return ms[0];
        }
        let k = ts.partition_point(|&x| x <= t);
        if k >= ts.len() {
            return ms[ts.len() - 1];
        }
        let w = (t - ts[k - 1]) / (ts[k] - ts[k - 1]);
        ms[k - 1] + w * (ms[k] - ms[k - 1])
    }

    fn shifts(&self, times: &[f64]) -> Array1<f64> {
        times.iter().map(|&t| self.shift_at(t)).collect()
    }

    fn to_physical(&self, mu: &Array2<f64>, times: &[f64]) -> Array2<f64> {
        let sh = self.shifts(times);
        let mut out = mu * self.u_scale;
        out += &sh;
        out
    }

    fn to_network(&self, u: ArrayView2<'_, f64>, times: &[f64]) -> Array2<f64> {
        let sh = self.shifts(times);
        (&u - &sh) / self.u_scale
    }

    fn branch_input(&self, f: ArrayView2<'_, f64>) -> Array2<f64> {
        let x = f.mapv(|v| (v - self.f_shift) / self.f_scale);
        if self.whitening.is_empty() {
            return x;
        }
        let m = x.ncols();
        let w = ArrayView2::from_shape((m, m), &self.whitening[..]).expect("whitening map is m x m");
        x.dot(&w)
    }

    fn trunk_input(&self, times: &[f64]) -> Array2<f64> {
        let span = self.t_end - self.t_start;
        Array2::from_shape_fn((times.len(), 1), |(i, _)| (times[i] - self.t_start) / span)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer {
    pub w: VariationalTensor,
    pub b: VariationalTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// One realized weight draw of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedParams {
    pub branch: Vec<DenseLayer>,
    pub trunk: Vec<DenseLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalModel {
    pub arch: OperatorArchitecture,
    pub branch: Vec<VariationalLayer>,
    pub trunk: Vec<VariationalLayer>,
    pub branch_vsn: Vec<VsnLayerParams>,
    pub trunk_vsn: Vec<VsnLayerParams>,
    pub norm: Normalization,
}

fn build_layers(
    shapes: &[(usize, usize)],
    mut make: impl FnMut(Vec<usize>) -> VariationalTensor,
) -> Vec<VariationalLayer> {
    shapes
        .iter()
        .map(|&(o, i)| VariationalLayer { w: make(vec![o, i]), b: make(vec![o]) })
        .collect()
}

impl VariationalModel {
    pub fn init(arch: OperatorArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(rng::derive_seed(seed, "init"), 0);
        let (ms, s0) = (arch.init_mu_std, arch.init_sigma);
        let scheme = arch.init_scheme;
        let head = arch.head_sigma_init_std;
        let p = arch.p;
        let mut make = |shapes: Vec<(usize, usize)>| -> Vec<VariationalLayer> {
            let last = shapes.len() - 1;
            shapes
                .iter()
                .enumerate()
                .map(|(l, &(o, i))| {
                    let wstd = match scheme {
                        InitScheme::Constant => ms,
                        InitScheme::LeCun => ms / (i as f64).sqrt(),
                    };
                    let mut w = VariationalTensor::init(vec![o, i], wstd, s0, &mut r);
                    let mut b = VariationalTensor::init(vec![o], wstd, s0, &mut r);
                    if let (Some(hs), true) = (head, l == last) {
                        for v in &mut w.mu[p * i..] {
                            *v = hs * r.sample::<f64, _>(StandardNormal);
                        }
                        for v in &mut b.mu[p..] {
                            *v = hs * r.sample::<f64, _>(StandardNormal);
                        }
                    }
                    VariationalLayer { w, b }
                })
                .collect()
        };
        let branch = make(arch.branch_shapes());
        let trunk = make(arch.trunk_shapes());
        let m = Self::assemble(arch, branch, trunk)?;
        Ok(m)
    }

    /// All means zero and all `δ` zero; the layout used when loading.
    pub fn zeros(arch: OperatorArchitecture) -> Result<Self> {
        arch.validate()?;
        let zero = |sh: Vec<usize>| {
            let n = sh.iter().product();
            VariationalTensor { mu: vec![0.0; n], delta: vec![0.0; n], shape: sh }
        };
        let branch = build_layers(&arch.branch_shapes(), zero);
        let trunk = build_layers(&arch.trunk_shapes(), zero);
        Self::assemble(arch, branch, trunk)
    }

    fn assemble(arch: OperatorArchitecture, branch: Vec<VariationalLayer>, trunk: Vec<VariationalLayer>) -> Result<Self> {
        let v = &arch.vsn;
        let mk = |widths: Vec<usize>| -> Result<Vec<VsnLayerParams>> {
            widths.into_iter().map(|w| VsnLayerParams::new(w, v.threshold_init, v.beta_init, v.t_s)).collect()
        };
        let branch_vsn = mk(arch.vsn_widths(&arch.branch_widths, arch.branch_activation))?;
        let trunk_vsn = mk(arch.vsn_widths(&arch.trunk_widths, arch.trunk_activation))?;
        Ok(Self { arch, branch, trunk, branch_vsn, trunk_vsn, norm: Normalization::default() })
    }

    fn tensors(&self) -> impl Iterator<Item = &VariationalTensor> {
        self.branch.iter().chain(&self.trunk).flat_map(|l| [&l.w, &l.b])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut VariationalTensor> {
        self.branch.iter_mut().chain(self.trunk.iter_mut()).flat_map(|l| [&mut l.w, &mut l.b])
    }

    /// Number of variational scalars (weights and biases).
    pub fn n_variational(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    fn n_spiking(&self) -> usize {
        self.branch_vsn.iter().chain(&self.trunk_vsn).map(|p| 2 * p.width()).sum()
    }

    /// Length of [`Self::flatten`].
    pub fn n_params(&self) -> usize {
        2 * self.n_variational() + self.n_spiking()
    }

    /// Canonical parameter vector: all means, then all `δ`, then per spiking
    /// layer its thresholds and leak parameters.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for t in self.tensors() {
            out.extend_from_slice(&t.mu);
        }
        for t in self.tensors() {
            out.extend_from_slice(&t.delta);
        }
        for p in self.branch_vsn.iter().chain(&self.trunk_vsn) {
            out.extend_from_slice(&p.thresholds);
            out.extend_from_slice(&p.leak_raw);
        }
        out
    }

    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::Shape(format!("{} values for a model with {} parameters", values.len(), self.n_params())));
        }
        let mut it = values.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().unwrap());
        for t in self.tensors_mut() {
            fill(&mut t.mu);
        }
        for t in self.tensors_mut() {
            fill(&mut t.delta);
        }
        for p in self.branch_vsn.iter_mut().chain(self.trunk_vsn.iter_mut()) {
            fill(&mut p.thresholds);
            fill(&mut p.leak_raw);
        }
        Ok(())
    }

    pub fn draw_noise<R: Rng>(&self, r: &mut R) -> Vec<f64> {
        (0..self.n_variational()).map(|_| r.sample(StandardNormal)).collect()
    }

    pub fn realize(&self, noise: &[f64]) -> Result<RealizedParams> {
        if noise.len() != self.n_variational() {
            return Err(Error::Shape(format!("noise of length {} for {} weights", noise.len(), self.n_variational())));
        }
        let mut off = 0;
        let mut take = |t: &VariationalTensor| -> Result<Vec<f64>> {
            let v = t.sample_weights(&noise[off..off + t.len()])?;
            off += t.len();
            Ok(v)
        };
        let mut realize_stack = |layers: &[VariationalLayer]| -> Result<Vec<DenseLayer>> {
            layers
                .iter()
                .map(|l| {
                    let w = Array2::from_shape_vec((l.w.shape[0], l.w.shape[1]), take(&l.w)?)
                        .map_err(|e| Error::Shape(e.to_string()))?;
                    let b = Array1::from(take(&l.b)?);
                    Ok(DenseLayer { w, b })
                })
                .collect()
        };
        let branch = realize_stack(&self.branch)?;
        let trunk = realize_stack(&self.trunk)?;
        Ok(RealizedParams { branch, trunk })
    }

    /// The posterior-mean network (`κ = 0`).
    pub fn mean_params(&self) -> RealizedParams {
        self.realize(&vec![0.0; self.n_variational()]).expect("noise length matches by construction")
    }

    pub fn kl(&self) -> f64 {
        self.tensors().map(|t| t.kl_to_standard_normal()).sum()
    }
}

struct Subnet<'a> {
    layers: &'a [DenseLayer],
    vsn: &'a [VsnLayerParams],
    act: Activation,
    activated: &'a [usize],
    neuron: VsnConfig,
}

struct SubnetCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    records: Vec<Option<VsnForwardRecord>>,
}

/// `(∂T_h, ∂leak_raw)` of one spiking layer.
type SpikeGrad = (Vec<f64>, Vec<f64>);

struct LayerGrad {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl<'a> Subnet<'a> {
    fn branch(model: &'a VariationalModel, params: &'a RealizedParams) -> Self {
        Subnet {
            layers: &params.branch,
            vsn: &model.branch_vsn,
            act: model.arch.branch_activation,
            activated: &model.arch.activated_layers,
            neuron: model.arch.vsn.neuron,
        }
    }

    fn trunk(model: &'a VariationalModel, params: &'a RealizedParams) -> Self {
        Subnet {
            layers: &params.trunk,
            vsn: &model.trunk_vsn,
            act: model.arch.trunk_activation,
            activated: &model.arch.activated_layers,
            neuron: model.arch.vsn.neuron,
        }
    }

    fn slot(&self, layer: usize) -> Option<usize> {
        self.activated.iter().position(|&a| a == layer)
    }

    fn forward(&self, x: Array2<f64>) -> Result<(Array2<f64>, SubnetCache)> {
        let mut cache = SubnetCache { inputs: Vec::new(), pre: Vec::new(), records: Vec::new() };
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let z = dense_forward_batch(l.w.view(), l.b.view(), h.view())?;
            let (out, rec) = match self.slot(i) {
                None => (z.clone(), None),
                Some(k) => match self.act {
                    Activation::Relu => (z.mapv(|v| v.max(0.0)), None),
                    Activation::Vsn => {
                        let (o, r) = vsn_repeat_forward(&z, &self.vsn[k], &self.neuron)?;
                        (o, Some(r))
                    }
                },
            };
            cache.inputs.push(h);
            cache.pre.push(z);
            cache.records.push(rec);
            h = out;
        }
        Ok((h, cache))
    }

    /// Returns per-layer weight gradients and, per spiking layer,
    /// `(∂T_h, ∂leak_raw)`.
    fn backward(&self, cache: &SubnetCache, g_out: Array2<f64>) -> (Vec<LayerGrad>, Vec<SpikeGrad>) {
        let n = self.layers.len();
        let mut grads: Vec<Option<LayerGrad>> = (0..n).map(|_| None).collect();
        let mut vsn_grads = vec![(Vec::new(), Vec::new()); self.vsn.len()];
        let mut g = g_out;
        for i in (0..n).rev() {
            let gz = match self.slot(i) {
                None => g,
                Some(k) => match self.act {
                    Activation::Relu => Zip::from(&g).and(&cache.pre[i]).map_collect(|&gv, &z| if z > 0.0 { gv } else { 0.0 }),
                    Activation::Vsn => {
                        let rec = cache.records[i].as_ref().expect("spiking layer keeps its record");
                        let (dz, dthr, dleak) = vsn_repeat_backward(rec, &g, &self.vsn[k], &self.neuron);
                        vsn_grads[k] = (dthr, dleak);
                        dz
                    }
                },
            };
            let (gw, gb, gx) = dense_backward_batch(self.layers[i].w.view(), cache.inputs[i].view(), gz.view());
            grads[i] = Some(LayerGrad { w: gw, b: gb });
            g = gx;
        }
        (grads.into_iter().map(|g| g.unwrap()).collect(), vsn_grads)
    }
}

/// Head outputs in normalized units, `N_s × N_t`.
struct Heads {
    mu: Array2<f64>,
    pre_sigma: Array2<f64>,
    sigma: Array2<f64>,
}

fn combine_heads(b: &Array2<f64>, tr: &Array2<f64>, p: usize) -> Heads {
    let mu = b.slice(s![.., ..p]).dot(&tr.slice(s![.., ..p]).t());
    let pre_sigma = b.slice(s![.., p..]).dot(&tr.slice(s![.., p..]).t());
    let sigma = pre_sigma.mapv(|a| softplus(a) + SIGMA_FLOOR);
    Heads { mu, pre_sigma, sigma }
}

fn check_inputs(model: &VariationalModel, inputs: ArrayView2<'_, f64>, times: &[f64]) -> Result<()> {
    if inputs.ncols() != model.arch.n_sensors {
        return Err(Error::Shape(format!(
            "branch input has {} sensors, architecture expects {}",
            inputs.ncols(),
            model.arch.n_sensors
        )));
    }
    if times.iter().any(|t| !t.is_finite()) || inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("operator inputs".into()));
    }
    Ok(())
}

/// Branch features `N_s × 2p` for raw physical inputs.
pub fn branch_features(model: &VariationalModel, params: &RealizedParams, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(Subnet::branch(model, params).forward(model.norm.branch_input(inputs))?.0)
}

/// Trunk features `N_t × 2p` for raw times.
pub fn trunk_features(model: &VariationalModel, params: &RealizedParams, times: &[f64]) -> Result<Array2<f64>> {
    Ok(Subnet::trunk(model, params).forward(model.norm.trunk_input(times))?.0)
}

/// Spiking records of every branch VSN layer on `inputs`.
pub fn branch_records(model: &VariationalModel, params: &RealizedParams, inputs: ArrayView2<'_, f64>) -> Result<Vec<VsnForwardRecord>> {
    check_inputs(model, inputs, &[])?;
    let (_, cache) = Subnet::branch(model, params).forward(model.norm.branch_input(inputs))?;
    Ok(cache.records.into_iter().flatten().collect())
}

/// Mean and std in physical units on the full `inputs × times` grid.
pub fn forward_grid(
    model: &VariationalModel,
    params: &RealizedParams,
    inputs: ArrayView2<'_, f64>,
    times: &[f64],
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_inputs(model, inputs, times)?;
    let b = branch_features(model, params, inputs)?;
    let tr = trunk_features(model, params, times)?;
    let h = combine_heads(&b, &tr, model.arch.p);
    let n = &model.norm;
    Ok((n.to_physical(&h.mu, times), h.sigma.mapv(|s| n.u_scale * s)))
}

/// `(μ_u, σ_u)` for one input function at one time.
pub fn forward(model: &VariationalModel, params: &RealizedParams, f_vec: &[f64], t: f64) -> Result<(f64, f64)> {
    let x = ArrayView2::from_shape((1, f_vec.len()), f_vec).map_err(|e| Error::Shape(e.to_string()))?;
    let (mu, sigma) = forward_grid(model, params, x, &[t])?;
    Ok((mu[[0, 0]], sigma[[0, 0]]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// Gaussian negative log-likelihood (constants dropped), summed over
    /// triplets and averaged over weight draws, in normalized units.
    pub data: f64,
    pub kl: f64,
    pub total: f64,
}

fn check_targets(inputs: ArrayView2<'_, f64>, times: &[f64], targets: ArrayView2<'_, f64>) -> Result<()> {
    if targets.dim() != (inputs.nrows(), times.len()) {
        return Err(Error::Shape(format!(
            "targets {:?} for {} inputs x {} times",
            targets.dim(),
            inputs.nrows(),
            times.len()
        )));
    }
    Ok(())
}

/// ELBO pieces with gradient with respect to [`VariationalModel::flatten`].
/// An empty batch contributes a zero data term.
pub fn elbo_with_grad(
    model: &VariationalModel,
    inputs: ArrayView2<'_, f64>,
    times: &[f64],
    targets: ArrayView2<'_, f64>,
    noises: &[Vec<f64>],
    kl_weight: f64,
) -> Result<(ElboTerms, Vec<f64>)> {
    elbo_grad_impl(model, inputs, times, targets, noises, kl_weight, false)
}

/// With `unit_sigma` the likelihood scale is held at one, so the data term is
/// half the summed squared error plus nothing from the σ head.
fn elbo_grad_impl(
    model: &VariationalModel,
    inputs: ArrayView2<'_, f64>,
    times: &[f64],
    targets: ArrayView2<'_, f64>,
    noises: &[Vec<f64>],
    kl_weight: f64,
    unit_sigma: bool,
) -> Result<(ElboTerms, Vec<f64>)> {
    check_inputs(model, inputs, times)?;
    check_targets(inputs, times, targets)?;
    if noises.is_empty() {
        return Err(Error::InvalidInput("at least one weight draw is required".into()));
    }
    let n_var = model.n_variational();
    let mut g_mu = vec![0.0; n_var];
    let mut g_delta = vec![0.0; n_var];
    let mut g_spk = vec![0.0; model.n_spiking()];
    let n_triplets = targets.len();
    let mut data = 0.0;
    let p = model.arch.p;
    let nrm = &model.norm;
    let u = nrm.to_network(targets, times);
    let xb = nrm.branch_input(inputs);
    let xt = nrm.trunk_input(times);
    let draw_w = 1.0 / noises.len() as f64;
    let tensors: Vec<&VariationalTensor> = model.tensors().collect();

    for noise in noises {
        let params = model.realize(noise)?;
        if n_triplets == 0 {
            continue;
        }
        let bnet = Subnet::branch(model, &params);
        let tnet = Subnet::trunk(model, &params);
        let (bf, bcache) = bnet.forward(xb.clone())?;
        let (tf, tcache) = tnet.forward(xt.clone())?;
        let mut h = combine_heads(&bf, &tf, p);
        if unit_sigma {
            h.sigma.fill(1.0);
        }
        let scale = draw_w;
        let mut term = 0.0;
        let mut g_m = Array2::zeros(h.mu.dim());
        let mut g_a = Array2::zeros(h.mu.dim());
        for ((idx, &m), &sg) in h.mu.indexed_iter().zip(h.sigma.iter()) {
            let r = u[idx] - m;
            let v = sg.ln() + r * r / (2.0 * sg * sg);
            if !v.is_finite() {
                let n = idx.0 * times.len() + idx.1;
                return Err(Error::NonFinite(format!("loss at triplet {n}")));
            }
            term += v;
            g_m[idx] = -r / (sg * sg) * scale;
            let g_s = (1.0 / sg - r * r / (sg * sg * sg)) * scale;
            if !unit_sigma {
                g_a[idx] = g_s * sigmoid(h.pre_sigma[idx]);
            }
        }
        data += term * scale;
        let bm = bf.slice(s![.., ..p]);
        let bs = bf.slice(s![.., p..]);
        let tm = tf.slice(s![.., ..p]);
        let ts = tf.slice(s![.., p..]);
        let gb = concatenate![Axis(1), g_m.dot(&tm), g_a.dot(&ts)];
        let gt = concatenate![Axis(1), g_m.t().dot(&bm), g_a.t().dot(&bs)];
        let (bgrads, bvsn) = bnet.backward(&bcache, gb);
        let (tgrads, tvsn) = tnet.backward(&tcache, gt);

        let mut off = 0;
        let mut k = 0;
        for lg in bgrads.iter().chain(&tgrads) {
            for g in [lg.w.iter().copied().collect::<Vec<f64>>(), lg.b.to_vec()] {
                let delta = &tensors[k].delta;
                for j in 0..g.len() {
                    g_mu[off + j] += g[j];
                    g_delta[off + j] += g[j] * noise[off + j] * sigmoid(delta[j]);
                }
                off += g.len();
                k += 1;
            }
        }
        if model.arch.vsn.learnable {
            let mut o = 0;
            for (dthr, dleak) in bvsn.iter().chain(&tvsn) {
                for v in dthr.iter().chain(dleak) {
                    g_spk[o] += v;
                    o += 1;
                }
            }
        }
    }

    let kl = model.kl();
    let mut off = 0;
    for t in model.tensors() {
        let (km, kd) = t.kl_grads();
        for j in 0..t.len() {
            g_mu[off + j] += kl_weight * km[j];
            g_delta[off + j] += kl_weight * kd[j];
        }
        off += t.len();
    }
    let total = data + kl_weight * kl;
    if !total.is_finite() {
        return Err(Error::NonFinite("ELBO total".into()));
    }
    let mut grad = g_mu;
    grad.extend(g_delta);
    grad.extend(g_spk);
    Ok((ElboTerms { data, kl, total }, grad))
}

/// Loss pieces without gradients. An empty batch contributes a zero data term.
pub fn elbo_terms(
    model: &VariationalModel,
    inputs: ArrayView2<'_, f64>,
    times: &[f64],
    targets: ArrayView2<'_, f64>,
    noises: &[Vec<f64>],
    kl_weight: f64,
) -> Result<ElboTerms> {
    check_inputs(model, inputs, times)?;
    check_targets(inputs, times, targets)?;
    if noises.is_empty() {
        return Err(Error::InvalidInput("at least one weight draw is required".into()));
    }
    let nrm = &model.norm;
    let u = nrm.to_network(targets, times);
    let mut data = 0.0;
    let n = targets.len();
    for noise in noises {
        let params = model.realize(noise)?;
        if n == 0 {
            continue;
        }
        let b = Subnet::branch(model, &params).forward(nrm.branch_input(inputs))?.0;
        let tr = Subnet::trunk(model, &params).forward(nrm.trunk_input(times))?.0;
        let h = combine_heads(&b, &tr, model.arch.p);
        let mut term = 0.0;
        for ((idx, &m), &sg) in h.mu.indexed_iter().zip(h.sigma.iter()) {
            let r = u[idx] - m;
            let v = sg.ln() + r * r / (2.0 * sg * sg);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss at triplet {}", idx.0 * times.len() + idx.1)));
            }
            term += v;
        }
        data += term;
    }
    data /= noises.len() as f64;
    let kl = model.kl();
    Ok(ElboTerms { data, kl, total: data + kl_weight * kl })
}

/// Summed Gaussian negative log-likelihood, averaged over the given weight
/// draws, plus `kl_weight · KL`.
pub fn elbo_loss(
    model: &VariationalModel,
    inputs: ArrayView2<'_, f64>,
    times: &[f64],
    targets: ArrayView2<'_, f64>,
    noises: &[Vec<f64>],
    kl_weight: f64,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("ELBO batch is empty".into()));
    }
    Ok(elbo_terms(model, inputs, times, targets, noises, kl_weight)?.total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// `None` means `1 / N` with `N` the number of triplets.
    pub kl_weight: Option<f64>,
    pub n_elbo_samples: usize,
    pub seed: u64,
    pub retain_best: bool,
    /// Fit input/output normalization from the training data.
    pub normalize: bool,
    pub centering: OutputCentering,
    /// Relative eigenvalue floor of branch-input whitening; `None` disables it.
    pub whiten_floor: Option<f64>,
    /// Leading iterations trained with the likelihood scale fixed at one.
    /// The best-snapshot search restarts when the full likelihood takes over.
    pub sigma_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            iterations: 5000,
            kl_weight: None,
            n_elbo_samples: 1,
            seed: 0,
            retain_best: true,
            normalize: true,
            centering: OutputCentering::default(),
            whiten_floor: Some(1e-3),
            sigma_warmup: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.n_elbo_samples == 0 {
            return Err(Error::InvalidInput("iterations and ELBO samples must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        if let Some(w) = self.kl_weight {
            if !(w >= 0.0) {
                return Err(Error::InvalidInput("kl_weight must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub best: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VariationalModel,
    pub log: Vec<TrainLogEntry>,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub kl_weight: f64,
    /// Iteration at which the loss or gradient stopped being finite.
    pub diverged_at: Option<usize>,
}

pub fn train(dataset: &OperatorDataset, arch: OperatorArchitecture, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_on(dataset.inputs.view(), dataset.grid.times(), dataset.responses.view(), arch, cfg)
}

/// Full-batch Adam on the negative ELBO.
pub fn train_on(
    inputs: ArrayView2<'_, f64>,
    times: &[f64],
    targets: ArrayView2<'_, f64>,
    arch: OperatorArchitecture,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = VariationalModel::init(arch, cfg.seed)?;
    check_inputs(&model, inputs, times)?;
    check_targets(inputs, times, targets)?;
    if targets.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if cfg.normalize {
        model.norm = Normalization::fit(inputs, times, targets, cfg.centering, cfg.whiten_floor);
    }
    let kl_weight = cfg.kl_weight.unwrap_or(1.0 / targets.len() as f64);
    let noise_seed = rng::derive_seed(cfg.seed, "elbo");
    let mut params = model.flatten();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut diverged_at = None;

    for it in 0..cfg.iterations {
        let warm = it < cfg.sigma_warmup;
        if it == cfg.sigma_warmup {
            best = (f64::INFINITY, it, params.clone());
        }
        let noises: Vec<Vec<f64>> = (0..cfg.n_elbo_samples)
            .map(|j| {
                let mut r = rng::stream(noise_seed, (it * cfg.n_elbo_samples + j) as u64);
                model.draw_noise(&mut r)
            })
            .collect();
        let (terms, grad) = match elbo_grad_impl(&model, inputs, times, targets, &noises, kl_weight, warm) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                diverged_at = Some(it);
                break;
            }
            Err(e) => return Err(e),
        };
        if terms.total < best.0 {
            best = (terms.total, it, params.clone());
        }
        log.push(TrainLogEntry { iteration: it, loss: terms.total, best: best.0 });
        if adam.step(&mut params, &grad).is_err() {
            diverged_at = Some(it);
            break;
        }
        model.unflatten(&params)?;
    }
    if !best.0.is_finite() {
        return Err(Error::TrainingDiverged { iteration: diverged_at.unwrap_or(0) });
    }
    if cfg.retain_best || diverged_at.is_some() {
        model.unflatten(&best.2)?;
    }
    Ok(TrainOutcome { model, log, best_loss: best.0, best_iteration: best.1, kl_weight, diverged_at })
}

pub fn write_training_log(path: impl AsRef<Path>, log: &[TrainLogEntry]) -> Result<()> {
    let header = ["iteration", "loss", "best_so_far"].map(String::from);
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| vec![e.iteration.to_string(), io::fmt_f64(e.loss), io::fmt_f64(e.best)])
        .collect();
    io::write_table(path, &header, &rows)
}

/// Predictive mean and std per `(input, time)` in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBand {
    pub mu_hat: Array2<f64>,
    pub sigma_hat: Array2<f64>,
    pub n1: usize,
    pub n2: usize,
}

impl PredictiveBand {
    pub fn n_inputs(&self) -> usize {
        self.mu_hat.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.mu_hat.ncols()
    }

    pub fn column(&self, k: usize) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        (self.mu_hat.column(k), self.sigma_hat.column(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub n1: usize,
    pub n2: usize,
    pub seed: u64,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { n1: 100, n2: 100, seed: 0, exec: Exec::default() }
    }
}

/// Predictive Monte Carlo: `n1` weight draws, each followed by `n2` output
/// draws `μ + σ ε`. Draw `s` uses the same `θ^(s)` and `ε^(s, ·)` for every
/// input and time, so bands computed on different subsets of inputs or times
/// agree entrywise.
pub fn predict_band(
    model: &VariationalModel,
    inputs: ArrayView2<'_, f64>,
    times: &[f64],
    cfg: &PredictConfig,
) -> Result<PredictiveBand> {
    if cfg.n1 == 0 || cfg.n2 == 0 {
        return Err(Error::InvalidInput("n1 and n2 must be >= 1".into()));
    }
    check_inputs(model, inputs, times)?;
    let wseed = rng::derive_seed(cfg.seed, "predict-weights");
    let oseed = rng::derive_seed(cfg.seed, "predict-outputs");
    let draws: Vec<RealizedParams> = par::try_map_indexed(cfg.exec, cfg.n1, |s| {
        let mut r = rng::stream(wseed, s as u64);
        model.realize(&model.draw_noise(&mut r))
    })?;
    let sums: Vec<(f64, f64)> = (0..cfg.n1)
        .map(|s| {
            let mut r = rng::stream(oseed, s as u64);
            (0..cfg.n2).fold((0.0, 0.0), |(a, b), _| {
                let e: f64 = r.sample(StandardNormal);
                (a + e, b + e * e)
            })
        })
        .collect();
    let trunks: Vec<Array2<f64>> = par::try_map_indexed(cfg.exec, cfg.n1, |s| trunk_features(model, &draws[s], times))?;
    let n_rows = inputs.nrows();
    let n_chunks = n_rows.div_ceil(PREDICT_CHUNK);
    let n2 = cfg.n2 as f64;
    let p = model.arch.p;
    let blocks: Vec<(Array2<f64>, Array2<f64>)> = par::try_map_indexed(cfg.exec, n_chunks, |c| {
        let lo = c * PREDICT_CHUNK;
        let hi = (lo + PREDICT_CHUNK).min(n_rows);
        let x = inputs.slice(s![lo..hi, ..]);
        let mut mean = Array2::<f64>::zeros((hi - lo, times.len()));
        let mut m2 = Array2::<f64>::zeros((hi - lo, times.len()));
        for (s, params) in draws.iter().enumerate() {
            let b = branch_features(model, params, x)?;
            let h = combine_heads(&b, &trunks[s], p);
            let (s1, s2) = sums[s];
            let na = s as f64 * n2;
            let n = na + n2;
            Zip::from(&mut mean).and(&mut m2).and(&h.mu).and(&h.sigma).for_each(|mean, m2, &mu, &sg| {
                // Chan et al. pooled update with the group of n2 outputs
                let gmean = mu + sg * s1 / n2;
                let gm2 = (sg * sg * (s2 - s1 * s1 / n2)).max(0.0);
                let d = gmean - *mean;
                *mean += d * n2 / n;
                *m2 += gm2 + d * d * na * n2 / n;
            });
        }
        Ok::<_, Error>((mean, m2))
    })?;
    let total = cfg.n1 as f64 * n2;
    let nrm = &model.norm;
    let mut mu_hat = Array2::zeros((n_rows, times.len()));
    let mut sigma_hat = Array2::zeros((n_rows, times.len()));
    for (c, (mean, m2)) in blocks.into_iter().enumerate() {
        let lo = c * PREDICT_CHUNK;
        let hi = lo + mean.nrows();
        mu_hat.slice_mut(s![lo..hi, ..]).assign(&nrm.to_physical(&mean, times));
        sigma_hat.slice_mut(s![lo..hi, ..]).assign(&m2.mapv(|v| nrm.u_scale * (v / total).sqrt()));
    }
    Ok(PredictiveBand { mu_hat, sigma_hat, n1: cfg.n1, n2: cfg.n2 })
}

/// Band over the whole grid for one input function.
pub fn predict_trajectory(model: &VariationalModel, f_vec: &[f64], times: &[f64], n1: usize, n2: usize, seed: u64) -> Result<PredictiveBand> {
    let x = ArrayView2::from_shape((1, f_vec.len()), f_vec).map_err(|e| Error::Shape(e.to_string()))?;
    predict_band(model, x, times, &PredictConfig { n1, n2, seed, exec: Exec::Sequential })
}

/// `(μ̂, σ̂)` for a single `(f, t)` point.
pub fn predict(model: &VariationalModel, f_vec: &[f64], t: f64, n1: usize, n2: usize, seed: u64) -> Result<(f64, f64)> {
    let band = predict_trajectory(model, f_vec, &[t], n1, n2, seed)?;
    Ok((band.mu_hat[[0, 0]], band.sigma_hat[[0, 0]]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub architecture: OperatorArchitecture,
    pub normalization: Normalization,
    pub sigma_floor: f64,
    /// Little-endian f64 values in [`VariationalModel::flatten`] order.
    pub values_file: String,
    pub n_values: usize,
    pub layout: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

const CHECKPOINT_FORMAT: &str = "vsnop-checkpoint";

fn layout(model: &VariationalModel) -> Vec<TensorEntry> {
    let mut names = Vec::new();
    for (stack, layers) in [("branch", &model.branch), ("trunk", &model.trunk)] {
        for (i, l) in layers.iter().enumerate() {
            names.push((format!("{stack}.{i}.weight"), l.w.shape.clone()));
            names.push((format!("{stack}.{i}.bias"), l.b.shape.clone()));
        }
    }
    let mut out = Vec::new();
    let mut off = 0;
    for part in ["mu", "delta"] {
        for (name, shape) in &names {
            let len = shape.iter().product();
            out.push(TensorEntry { name: format!("{name}.{part}"), shape: shape.clone(), offset: off, len });
            off += len;
        }
    }
    for (stack, layers) in [("branch", &model.branch_vsn), ("trunk", &model.trunk_vsn)] {
        for (i, p) in layers.iter().enumerate() {
            for part in ["threshold", "leak_raw"] {
                let len = p.width();
                out.push(TensorEntry { name: format!("{stack}.vsn{i}.{part}"), shape: vec![len], offset: off, len });
                off += len;
            }
        }
    }
    out
}

fn checkpoint_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, String) {
    let bin = format!("{stem}.bin");
    (dir.join(format!("{stem}.json")), dir.join(&bin), bin)
}

pub fn save_checkpoint(model: &VariationalModel, dir: &Path, stem: &str, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let values = model.flatten();
    let (json, bin, bin_name) = checkpoint_paths(dir, stem);
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&bin, bytes)?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        architecture: model.arch.clone(),
        normalization: model.norm.clone(),
        sigma_floor: SIGMA_FLOOR,
        values_file: bin_name,
        n_values: values.len(),
        layout: layout(model),
        extra,
    };
    io::write_json(json, &manifest)
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(VariationalModel, CheckpointManifest)> {
    let (json, _, _) = checkpoint_paths(dir, stem);
    let manifest: CheckpointManifest = io::read_json(&json)?;
    let bad = |reason: String| Error::Artifact { path: json.clone(), reason };
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
        return Err(bad(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    let mut model = VariationalModel::zeros(manifest.architecture.clone())?;
    model.norm = manifest.normalization.clone();
    let bytes = std::fs::read(dir.join(&manifest.values_file))?;
    if bytes.len() != 8 * model.n_params() || manifest.n_values != model.n_params() {
        return Err(bad(format!("{} bytes for {} parameters", bytes.len(), model.n_params())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    model.unflatten(&values)?;
    Ok((model, manifest))
}
