//! Analytical energy model of a dense layer executed conventionally or with
//! variable spiking neurons: operation and memory-access counts, their
//! energies, the dense-to-spiking ratio over input activity, and the measured
//! spiking activity of a trained layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::neuralcore::VsnForwardRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_in: usize,
    pub n_out: usize,
    pub t_s: usize,
    /// Average input spiking activity per time step.
    pub alpha_in: f64,
    /// Output spike count; `None` means every output spikes at every step.
    pub theta_out: Option<f64>,
}

impl LayerShape {
    pub fn new(n_in: usize, n_out: usize, t_s: usize, alpha_in: f64) -> Self {
        Self { n_in, n_out, t_s, alpha_in, theta_out: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 || self.t_s == 0 {
            return Err(Error::InvalidInput("layer counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_in) {
            return Err(Error::InvalidInput(format!("input activity {} outside [0, 1]", self.alpha_in)));
        }
        if self.theta_out.is_some_and(|t| !(t >= 0.0)) {
            return Err(Error::InvalidInput("output spike count must be >= 0".into()));
        }
        Ok(())
    }

    /// Input spike count `N_in · T_s · α_in`.
    pub fn theta_in(&self) -> f64 {
        self.n_in as f64 * self.t_s as f64 * self.alpha_in
    }

    pub fn theta_out(&self) -> f64 {
        self.theta_out.unwrap_or((self.n_out * self.t_s) as f64)
    }
}

/// Counts are real-valued because spike counts are expectations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OpCounts {
    pub mac: f64,
    pub acc: f64,
    pub rd: f64,
    pub wr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub e_mac: f64,
    pub e_acc: f64,
    pub e_rd: f64,
    pub e_wr: f64,
}

impl Default for EnergyParams {
    /// Arithmetic energies for a 45 nm process and a flat 5 pJ per memory access.
    fn default() -> Self {
        Self { e_mac: 3.1, e_acc: 0.1, e_rd: 5.0, e_wr: 5.0 }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        if [self.e_mac, self.e_acc, self.e_rd, self.e_wr].iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidInput("energy parameters must be positive".into()));
        }
        Ok(())
    }

    /// Memory energies from a capacity-to-energy table, linearly interpolated
    /// and clamped at the ends. Table rows are `(capacity, pJ)`.
    pub fn with_sram_table(self, table: &[(f64, f64)], capacity: f64) -> Result<Self> {
        if table.is_empty() || table.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidInput("SRAM table must be non-empty with increasing capacities".into()));
        }
        let e = if capacity <= table[0].0 {
            table[0].1
        } else if capacity >= table[table.len() - 1].0 {
            table[table.len() - 1].1
        } else {
            let j = table.partition_point(|r| r.0 <= capacity);
            let ((c0, e0), (c1, e1)) = (table[j - 1], table[j]);
            e0 + (e1 - e0) * (capacity - c0) / (c1 - c0)
        };
        Ok(Self { e_rd: e, e_wr: e, ..self })
    }
}

pub fn ann_layer_counts(shape: &LayerShape) -> Result<OpCounts> {
    shape.validate()?;
    let (i, o) = (shape.n_in as f64, shape.n_out as f64);
    Ok(OpCounts { mac: i * o, acc: o + (i + o), rd: i + (i + 1.0) * o, wr: o })
}

pub fn vsn_layer_counts(shape: &LayerShape) -> Result<OpCounts> {
    shape.validate()?;
    let o = shape.n_out as f64;
    let ts = shape.t_s as f64;
    let th = shape.theta_in();
    Ok(OpCounts {
        mac: th * o + ts * o,
        acc: 2.0 * ts * o + th * o,
        rd: th + (th + 1.0) * o + ts * o + 2.0 * o,
        wr: shape.theta_out() + ts * o,
    })
}

/// Energy in pJ: `E_MAC·MAC + E_ACC·ACC + E_Rd·Rd + E_Wr·Wr`.
pub fn layer_energy(c: &OpCounts, p: &EnergyParams) -> f64 {
    p.e_mac * c.mac + p.e_acc * c.acc + p.e_rd * c.rd + p.e_wr * c.wr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub alpha: f64,
    pub e_ann_pj: f64,
    pub e_vsn_pj: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioCurve {
    pub points: Vec<RatioPoint>,
    /// Activity where the ratio crosses one, interpolated between grid points.
    pub crossover: Option<f64>,
}

impl RatioCurve {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ["alpha", "e_ann_pj", "e_vsn_pj", "ratio"].map(String::from);
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| [p.alpha, p.e_ann_pj, p.e_vsn_pj, p.ratio].iter().map(|v| io::fmt_f64(*v)).collect())
            .collect();
        io::write_table(path, &header, &rows)
    }
}

/// `i / (n − 1)` for `i = 0..n`.
pub fn activity_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn energy_ratio_curve(n_in: usize, n_out: usize, t_s: usize, params: &EnergyParams, alphas: &[f64]) -> Result<RatioCurve> {
    params.validate()?;
    let e_ann = layer_energy(&ann_layer_counts(&LayerShape::new(n_in, n_out, t_s, 0.0))?, params);
    let points = alphas
        .iter()
        .map(|&a| {
            let e_vsn = layer_energy(&vsn_layer_counts(&LayerShape::new(n_in, n_out, t_s, a))?, params);
            Ok(RatioPoint { alpha: a, e_ann_pj: e_ann, e_vsn_pj: e_vsn, ratio: e_ann / e_vsn })
        })
        .collect::<Result<Vec<_>>>()?;
    let crossover = points.windows(2).find_map(|w| {
        let (a, b) = (w[0], w[1]);
        if a.ratio == 1.0 {
            Some(a.alpha)
        } else if (a.ratio - 1.0) * (b.ratio - 1.0) < 0.0 || b.ratio == 1.0 {
            Some(a.alpha + (b.alpha - a.alpha) * (a.ratio - 1.0) / (a.ratio - b.ratio))
        } else {
            None
        }
    });
    Ok(RatioCurve { points, crossover })
}

/// Percent of `(neuron × step)` slots that spiked, pooled over records.
pub fn spiking_activity(records: &[VsnForwardRecord]) -> Result<f64> {
    let (mut spikes, mut slots) = (0usize, 0usize);
    for r in records {
        spikes += r.spike_count;
        slots += r.slots();
    }
    if slots == 0 {
        return Err(Error::InvalidInput("no spiking slots recorded".into()));
    }
    Ok(100.0 * spikes as f64 / slots as f64)
}
