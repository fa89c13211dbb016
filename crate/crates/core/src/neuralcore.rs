//! Differentiable building blocks: dense layers, Variable Spiking Neuron
//! layers with surrogate gradients, Gaussian variational tensors and Adam.
//!
//! Batched tensors are `batch × features` row-major `Array2<f64>`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `log(1 + e^x)`, overflow-safe.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`]: the pre-activation giving standard deviation `s`.
pub fn softplus_inv(s: f64) -> f64 {
    if s > 30.0 { s + (-(-s).exp()).ln_1p() } else { s.exp_m1().ln() }
}

/// Mean-field Gaussian `q(θ) = N(μ_v, softplus(δ)²)` over one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalTensor {
    pub mu: Vec<f64>,
    pub delta: Vec<f64>,
    pub shape: Vec<usize>,
}

impl VariationalTensor {
    pub fn new(mu: Vec<f64>, delta: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if mu.len() != n || delta.len() != n {
            return Err(Error::Shape(format!(
                "variational tensor {shape:?} needs {n} entries (mu {}, delta {})",
                mu.len(),
                delta.len()
            )));
        }
        Ok(Self { mu, delta, shape })
    }

    /// `μ ~ N(0, mu_std²)`, `δ` set so that `σ_v = sigma0`.
    pub fn init<R: Rng>(shape: Vec<usize>, mu_std: f64, sigma0: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mu = (0..n).map(|_| mu_std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { mu, delta: vec![softplus_inv(sigma0); n], shape }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.delta.iter().map(|&d| softplus(d)).collect()
    }

    /// Reparameterized draw `θ = μ_v + softplus(δ) κ`.
    pub fn sample_weights(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.len() {
            return Err(Error::Shape(format!("noise has {} entries, tensor {}", noise.len(), self.len())));
        }
        Ok(self
            .mu
            .iter()
            .zip(&self.delta)
            .zip(noise)
            .map(|((&m, &d), &k)| m + softplus(d) * k)
            .collect())
    }

    /// Pulls `∂L/∂θ` back to `(∂L/∂μ_v, ∂L/∂δ)` through the draw made with `noise`.
    pub fn reparam_grads(&self, noise: &[f64], grad_theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let gmu = grad_theta.to_vec();
        let gdelta = grad_theta
            .iter()
            .zip(noise)
            .zip(&self.delta)
            .map(|((&g, &k), &d)| g * k * sigmoid(d))
            .collect();
        (gmu, gdelta)
    }

    /// `KL(q ‖ N(0, I)) = Σ [−log σ + (σ² + μ² − 1) / 2]`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.delta)
            .map(|(&m, &d)| {
                let s = softplus(d);
                -s.ln() + 0.5 * (s * s + m * m - 1.0)
            })
            .sum()
    }

    /// Analytic gradient of [`Self::kl_to_standard_normal`].
    pub fn kl_grads(&self) -> (Vec<f64>, Vec<f64>) {
        let gmu = self.mu.clone();
        let gdelta = self
            .delta
            .iter()
            .map(|&d| {
                let s = softplus(d);
                (s - 1.0 / s) * sigmoid(d)
            })
            .collect();
        (gmu, gdelta)
    }
}

/// `z = W x + b` for one input vector; `W` is `out × in`.
pub fn dense_forward(w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if w.ncols() != x.len() || w.nrows() != b.len() {
        return Err(Error::Shape(format!(
            "dense layer {}x{} with bias {} applied to input {}",
            w.nrows(),
            w.ncols(),
            b.len(),
            x.len()
        )));
    }
    Ok(w.dot(&x) + b)
}

/// Batched `Z = X Wᵀ + b` with `X` of shape `batch × in`.
pub fn dense_forward_batch(w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if w.ncols() != x.ncols() || w.nrows() != b.len() {
        return Err(Error::Shape(format!(
            "dense layer {}x{} with bias {} applied to batch of width {}",
            w.nrows(),
            w.ncols(),
            b.len(),
            x.ncols()
        )));
    }
    Ok(x.dot(&w.t()) + b)
}

/// Gradients of a batched dense layer given `∂L/∂Z`: returns `(∂W, ∂b, ∂X)`.
pub fn dense_backward_batch(
    w: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    gz: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let gw = gz.t().dot(&x);
    let gb = gz.sum_axis(Axis(0));
    let gx = gz.dot(&w);
    (gw, gb, gx)
}

/// Graded output nonlinearity `φ` applied where a neuron fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    #[default]
    Relu,
    Identity,
}

impl Phi {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Phi::Relu => z.max(0.0),
            Phi::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Phi::Relu => {
                if z > 0.0 { 1.0 } else { 0.0 }
            }
            Phi::Identity => 1.0,
        }
    }
}

/// Spike gate used in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Heaviside `M ≥ T_h`.
    #[default]
    Hard,
    /// The smooth primitive of the surrogate derivative. Used to audit
    /// gradients against finite differences.
    Smooth,
}

/// Fast-sigmoid surrogate: `S'(x) = k / (2 (1 + k|x|)²)`.
pub fn surrogate_grad(x: f64, slope: f64) -> f64 {
    let d = 1.0 + slope * x.abs();
    slope / (2.0 * d * d)
}

/// Primitive of [`surrogate_grad`]: `S(x) = ½ + ½ kx / (1 + k|x|)`.
pub fn surrogate_gate(x: f64, slope: f64) -> f64 {
    0.5 + 0.5 * slope * x / (1.0 + slope * x.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VsnConfig {
    pub phi: Phi,
    pub slope: f64,
    pub gate: GateMode,
}

impl Default for VsnConfig {
    fn default() -> Self {
        Self { phi: Phi::Relu, slope: 25.0, gate: GateMode::Hard }
    }
}

/// Per-neuron learnable threshold and leak of one spiking layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsnLayerParams {
    pub thresholds: Vec<f64>,
    /// `β = sigmoid(leak_raw)`, keeping the leak inside (0, 1).
    pub leak_raw: Vec<f64>,
    pub t_s: usize,
}

impl VsnLayerParams {
    pub fn new(width: usize, threshold: f64, beta: f64, t_s: usize) -> Result<Self> {
        if t_s == 0 {
            return Err(Error::InvalidInput("spike time steps must be >= 1".into()));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidInput(format!("leak must lie in (0, 1), got {beta}")));
        }
        let raw = (beta / (1.0 - beta)).ln();
        Ok(Self { thresholds: vec![threshold; width], leak_raw: vec![raw; width], t_s })
    }

    pub fn width(&self) -> usize {
        self.thresholds.len()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.leak_raw.iter().map(|&r| sigmoid(r)).collect()
    }
}

/// Everything the backward pass needs from one spiking forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct VsnForwardRecord {
    pub inputs: Vec<Array2<f64>>,
    pub outputs: Vec<Array2<f64>>,
    /// Hard spike indicator `M ≥ T_h` per step, regardless of gate mode.
    pub mask: Vec<Array2<bool>>,
    /// Gate value used in the forward pass (0/1 when hard).
    pub gate: Vec<Array2<f64>>,
    pub membrane: Vec<Array2<f64>>,
    pub spike_count: usize,
}

impl VsnForwardRecord {
    pub fn steps(&self) -> usize {
        self.outputs.len()
    }

    /// Number of (sample, neuron, step) slots.
    pub fn slots(&self) -> usize {
        self.outputs.iter().map(|o| o.len()).sum()
    }
}

/// Leaky integrate-and-fire with graded output:
/// `M_t = β M_{t−1} + z_t`, `y_t = φ(z_t)` where `M_t ≥ T_h`, else 0.
/// The membrane starts at zero and is never reset.
pub fn vsn_forward(z_seq: &[Array2<f64>], p: &VsnLayerParams, cfg: &VsnConfig) -> Result<VsnForwardRecord> {
    if z_seq.len() != p.t_s {
        return Err(Error::Shape(format!("{} input steps for T_s = {}", z_seq.len(), p.t_s)));
    }
    let (batch, width) = z_seq[0].dim();
    if width != p.width() || z_seq.iter().any(|z| z.dim() != (batch, width)) {
        return Err(Error::Shape(format!("spiking layer of width {} fed {width} features", p.width())));
    }
    let beta = Array1::from(p.beta());
    let thr = ArrayView1::from(&p.thresholds[..]);
    let mut m = Array2::<f64>::zeros((batch, width));
    let mut rec = VsnForwardRecord {
        inputs: z_seq.to_vec(),
        outputs: Vec::with_capacity(p.t_s),
        mask: Vec::with_capacity(p.t_s),
        gate: Vec::with_capacity(p.t_s),
        membrane: Vec::with_capacity(p.t_s),
        spike_count: 0,
    };
    for z in z_seq {
        m = &m * &beta + z;
        let mask = Zip::from(&m).and_broadcast(&thr).map_collect(|&mv, &th| mv >= th);
        let gate = match cfg.gate {
            GateMode::Hard => mask.mapv(|s| if s { 1.0 } else { 0.0 }),
            GateMode::Smooth => {
                Zip::from(&m).and_broadcast(&thr).map_collect(|&mv, &th| surrogate_gate(mv - th, cfg.slope))
            }
        };
        let out = Zip::from(&gate).and(z).map_collect(|&g, &zv| if g == 0.0 { 0.0 } else { g * cfg.phi.apply(zv) });
        rec.spike_count += mask.iter().filter(|&&s| s).count();
        rec.outputs.push(out);
        rec.mask.push(mask);
        rec.gate.push(gate);
        rec.membrane.push(m.clone());
    }
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VsnGrads {
    pub dz: Vec<Array2<f64>>,
    pub dthreshold: Vec<f64>,
    pub dleak_raw: Vec<f64>,
}

/// Backpropagation through time for [`vsn_forward`]. The spike gate is
/// differentiated with the fast-sigmoid surrogate; the membrane recurrence
/// and `φ` use the exact chain rule.
pub fn vsn_backward(rec: &VsnForwardRecord, upstream: &[Array2<f64>], p: &VsnLayerParams, cfg: &VsnConfig) -> VsnGrads {
    let steps = rec.steps();
    let (batch, width) = rec.outputs[0].dim();
    let beta = Array1::from(p.beta());
    let thr = ArrayView1::from(&p.thresholds[..]);
    let mut dz = vec![Array2::zeros((batch, width)); steps];
    let mut dthr = Array1::<f64>::zeros(width);
    let mut dbeta = Array1::<f64>::zeros(width);
    // ∂L/∂M_{t+1} carried backwards, multiplied by β at each step.
    let mut g_next = Array2::<f64>::zeros((batch, width));
    for t in (0..steps).rev() {
        let gy = &upstream[t];
        let z = &rec.inputs[t];
        let m = &rec.membrane[t];
        // gate path: ∂y/∂M = S'(M − T_h) φ(z)
        let a = Zip::from(gy)
            .and(z)
            .and(m)
            .and_broadcast(&thr)
            .map_collect(|&g, &zv, &mv, &th| g * cfg.phi.apply(zv) * surrogate_grad(mv - th, cfg.slope));
        let gm = &a + &(&g_next * &beta);
        dthr -= &a.sum_axis(Axis(0));
        if t > 0 {
            dbeta += &(&gm * &rec.membrane[t - 1]).sum_axis(Axis(0));
        }
        let phi_path = Zip::from(gy)
            .and(&rec.gate[t])
            .and(z)
            .map_collect(|&g, &gt, &zv| g * gt * cfg.phi.derivative(zv));
        dz[t] = &gm + &phi_path;
        g_next = gm;
    }
    let dleak_raw = dbeta
        .iter()
        .zip(&p.leak_raw)
        .map(|(&db, &r)| {
            let b = sigmoid(r);
            db * b * (1.0 - b)
        })
        .collect();
    VsnGrads { dz, dthreshold: dthr.to_vec(), dleak_raw }
}

/// Repeat encoding: the same drive `z` is presented at every spike step and
/// the layer output is the mean of the per-step outputs.
pub fn vsn_repeat_forward(z: &Array2<f64>, p: &VsnLayerParams, cfg: &VsnConfig) -> Result<(Array2<f64>, VsnForwardRecord)> {
    let seq = vec![z.clone(); p.t_s];
    let rec = vsn_forward(&seq, p, cfg)?;
    let mut out = Array2::zeros(z.dim());
    for o in &rec.outputs {
        out += o;
    }
    out /= p.t_s as f64;
    Ok((out, rec))
}

/// Backward pass of [`vsn_repeat_forward`]; returns `(∂z, ∂T_h, ∂leak_raw)`.
pub fn vsn_repeat_backward(
    rec: &VsnForwardRecord,
    grad_out: &Array2<f64>,
    p: &VsnLayerParams,
    cfg: &VsnConfig,
) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let g = grad_out / p.t_s as f64;
    let upstream = vec![g; p.t_s];
    let grads = vsn_backward(rec, &upstream, p, cfg);
    let mut dz = Array2::zeros(grad_out.dim());
    for d in &grads.dz {
        dz += d;
    }
    (dz, grads.dthreshold, grads.dleak_raw)
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Applies one update in place. Non-finite gradients leave both the
    /// parameters and the moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam state for {} parameters given {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}
