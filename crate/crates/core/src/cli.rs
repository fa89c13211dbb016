//! Pipeline driver: experiment configuration, per-stage commands and the
//! command-line front end.
//!
//! Layout of an output directory:
//!
//! ```text
//! config.json                       resolved configuration
//! manifests/<stage>.json            run manifest per stage
//! data/excitation_<split>.{csv,json}
//! data/dof<d>_<split>{.json,_inputs.csv,_responses.csv}
//! models/dof<d>.{json,bin}, models/dof<d>_training_log.csv
//! calibration/dof<d>_schedule.{csv,json}
//! evaluation/dof<d>_coverage.csv, dof<d>_nmse_per_time.csv, summary.json
//! reliability/dof<d>_curve.csv, dof<d>_mcs.csv, summary.json
//! energy/ratio_ts<T>.csv, layers.csv, summary.json
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{calibrate_schedule, calibrated_band, CalibratedInterval, ConformalSchedule};
use crate::dynamics::{simulate_ensemble, BoucWenSdofParams, DatasetRole, OperatorDataset, SystemSpec, Trajectory};
use crate::energy::{activity_grid, energy_ratio_curve, layer_energy, spiking_activity, vsn_layer_counts, ann_layer_counts, EnergyParams, LayerShape};
use crate::error::{Error, Result};
use crate::excitation::{sample_fourier_force, sample_grf, FourierForceSpec, FunctionSampleSet, GrfSpec, SensorGrid};
use crate::io;
use crate::operator::{
    branch_records, load_checkpoint, predict_band, save_checkpoint, train, write_training_log, Activation, InitScheme,
    OperatorArchitecture, PredictConfig, TrainConfig, VariationalModel,
};
use crate::par::{self, Exec};
use crate::reliability::{
    coverage_report, nmse, nmse_per_time, nmse_time_centered, pof_from_trajectories, reliability_from_bounds, threshold_from_extremes, Direction,
    PerformanceSpec,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExcitationConfig {
    Grf { sigma: f64, length_scale: f64 },
    Fourier { n_sin: usize, n_cos: usize, amp_range: [f64; 2], freq_range: [f64; 2] },
}

impl ExcitationConfig {
    pub fn sample(&self, grid: &SensorGrid, n: usize, seed: u64, exec: Exec) -> Result<FunctionSampleSet> {
        match *self {
            ExcitationConfig::Grf { sigma, length_scale } => sample_grf(&GrfSpec::new(sigma, length_scale, seed), grid, n, exec),
            ExcitationConfig::Fourier { n_sin, n_cos, amp_range, freq_range } => {
                let spec = FourierForceSpec { n_sin, n_cos, amp_range, freq_range, seed };
                sample_fourier_force(&spec, grid, n, exec)
            }
        }
    }
}

/// How the failure threshold of each response DOF is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdConfig {
    Fixed { u_crit: f64 },
    /// Empirical quantile of the per-sample extremes of the training responses.
    TrainingQuantile { level: f64 },
    /// CSV with columns `t, u_crit`, one row per grid time.
    Schedule { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub params: EnergyParams,
    pub n_in: usize,
    pub n_out: usize,
    pub t_s: Vec<usize>,
    pub grid_points: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { params: EnergyParams::default(), n_in: 100, n_out: 100, t_s: vec![1, 2], grid_points: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub excitation: ExcitationConfig,
    pub horizon: f64,
    pub rate_hz: f64,
    pub dt: f64,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub n_reliability: usize,
    pub response_dofs: Vec<usize>,
    pub architecture: OperatorArchitecture,
    /// `seed` is replaced by a value derived from the global seed and DOF.
    pub train: TrainConfig,
    pub alpha: f64,
    pub use_z: bool,
    pub n1: usize,
    pub n2: usize,
    pub direction: Direction,
    pub threshold: ThresholdConfig,
    pub energy: EnergyConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Bouc-Wen oscillator, desk-scale sample counts and training budget.
    Desk,
    /// Bouc-Wen oscillator with the full-scale sample counts.
    Full,
}

impl ExperimentConfig {
    /// Desk-scale Bouc-Wen setting: 200/100/1000 samples, 2 s at 50 Hz,
    /// four layers of width 50, 5000 iterations.
    pub fn desk() -> Self {
        let mut architecture = OperatorArchitecture::standard(101, 50, 4, 25, Activation::Vsn);
        architecture.init_scheme = InitScheme::LeCun;
        architecture.init_mu_std = 1.0;
        architecture.init_sigma = 1e-3;
        architecture.head_sigma_init_std = Some(0.05);
        let train = TrainConfig { whiten_floor: None, sigma_warmup: 4000, ..TrainConfig::default() };
        Self {
            system: SystemSpec::BoucWenSdof(BoucWenSdofParams::default()),
            excitation: ExcitationConfig::Grf { sigma: 50.0, length_scale: 0.1 },
            horizon: 2.0,
            rate_hz: 50.0,
            dt: 1e-3,
            n_train: 200,
            n_cal: 100,
            n_test: 1000,
            n_reliability: 2000,
            response_dofs: vec![0],
            architecture,
            train,
            alpha: 0.05,
            use_z: true,
            n1: 100,
            n2: 100,
            direction: Direction::Lower,
            threshold: ThresholdConfig::TrainingQuantile { level: 0.5 },
            energy: EnergyConfig::default(),
            out_dir: PathBuf::from("runs/desk"),
            seed: 0,
        }
    }

    pub fn full() -> Self {
        let mut c = Self::desk();
        c.n_train = 750;
        c.n_test = 5000;
        c.n_reliability = 5000;
        c.train.iterations = 20000;
        c.train.sigma_warmup = 16000;
        c.out_dir = PathBuf::from("runs/full");
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Full => Self::full(),
        }
    }

    pub fn grid(&self) -> Result<SensorGrid> {
        SensorGrid::from_rate(self.horizon, self.rate_hz)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        for (name, n) in [("train", self.n_train), ("calibration", self.n_cal), ("test", self.n_test), ("reliability", self.n_reliability)] {
            if n == 0 {
                return Err(Error::InvalidInput(format!("{name} sample count must be >= 1")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.response_dofs.is_empty() {
            return Err(Error::InvalidInput("at least one response DOF is required".into()));
        }
        if let Some(&d) = self.response_dofs.iter().find(|&&d| d >= self.system.n_dof()) {
            return Err(Error::InvalidInput(format!("response dof {d} out of range for {} DOFs", self.system.n_dof())));
        }
        let grid = self.grid()?;
        if self.architecture.n_sensors != grid.len() {
            return Err(Error::Shape(format!(
                "architecture expects {} sensors, grid has {} points",
                self.architecture.n_sensors,
                grid.len()
            )));
        }
        self.architecture.validate()?;
        self.train.validate()
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn split_seed(&self, role: DatasetRole) -> u64 {
        rng::derive_seed(self.seed, &format!("excitation-{}", role_name(role)))
    }

    pub fn train_seed(&self, dof: usize) -> u64 {
        rng::derive_seed(self.seed, &format!("train-dof{dof}"))
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig { n1: self.n1, n2: self.n2, seed: rng::derive_seed(self.seed, "predict"), exec: Exec::Parallel }
    }
}

pub fn role_name(role: DatasetRole) -> &'static str {
    match role {
        DatasetRole::Train => "train",
        DatasetRole::Calibration => "calibration",
        DatasetRole::Test => "test",
        DatasetRole::Reliability => "reliability",
    }
}

const ROLES: [DatasetRole; 4] = [DatasetRole::Train, DatasetRole::Calibration, DatasetRole::Test, DatasetRole::Reliability];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub artifacts: Vec<PathBuf>,
    pub wall_seconds: f64,
    pub config: ExperimentConfig,
}

/// Collects artifact paths relative to the output directory.
struct Stage<'a> {
    name: &'static str,
    out: &'a Path,
    started: Instant,
    artifacts: Vec<PathBuf>,
}

impl<'a> Stage<'a> {
    fn begin(name: &'static str, out: &'a Path, force: bool) -> Result<Self> {
        let marker = manifest_path(out, name);
        if marker.exists() && !force {
            return Err(Error::InvalidInput(format!("{} exists; pass --force to overwrite", marker.display())));
        }
        Ok(Self { name, out, started: Instant::now(), artifacts: Vec::new() })
    }

    fn path(&mut self, rel: impl Into<PathBuf>) -> PathBuf {
        let rel = rel.into();
        let full = self.out.join(&rel);
        self.artifacts.push(rel);
        full
    }

    fn finish(self, cfg: &ExperimentConfig) -> Result<()> {
        for a in &self.artifacts {
            if !self.out.join(a).exists() {
                return Err(Error::Artifact { path: self.out.join(a), reason: "declared artifact was not written".into() });
            }
        }
        io::write_json(self.out.join("config.json"), cfg)?;
        let m = RunManifest {
            command: self.name.into(),
            config_hash: cfg.hash(),
            version: env!("CARGO_PKG_VERSION").into(),
            artifacts: self.artifacts,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            config: cfg.clone(),
        };
        io::write_json(manifest_path(self.out, self.name), &m)
    }
}

fn manifest_path(out: &Path, name: &str) -> PathBuf {
    out.join("manifests").join(format!("{name}.json"))
}

fn dataset_stem(dof: usize, role: DatasetRole) -> String {
    format!("dof{dof}_{}", role_name(role))
}

pub fn load_dataset(out: &Path, dof: usize, role: DatasetRole) -> Result<OperatorDataset> {
    let stem = dataset_stem(dof, role);
    let json = out.join("data").join(format!("{stem}.json"));
    if !json.exists() {
        return Err(Error::Artifact { path: json, reason: "missing; run `simulate` first".into() });
    }
    OperatorDataset::load(&out.join("data"), &stem)
}

pub fn load_model(out: &Path, dof: usize) -> Result<VariationalModel> {
    let dir = out.join("models");
    if !dir.join(format!("dof{dof}.json")).exists() {
        return Err(Error::Artifact { path: dir.join(format!("dof{dof}.json")), reason: "missing; run `train` first".into() });
    }
    Ok(load_checkpoint(&dir, &format!("dof{dof}"))?.0)
}

pub fn load_schedule(out: &Path, dof: usize) -> Result<ConformalSchedule> {
    let dir = out.join("calibration");
    let stem = format!("dof{dof}_schedule");
    if !dir.join(format!("{stem}.json")).exists() {
        return Err(Error::Artifact { path: dir.join(format!("{stem}.json")), reason: "missing; run `calibrate` first".into() });
    }
    ConformalSchedule::load(&dir, &stem)
}

fn check_compatible(model: &VariationalModel, data: &OperatorDataset, model_path: &Path, data_path: &Path) -> Result<()> {
    if model.arch.n_sensors != data.grid.len() {
        return Err(Error::Shape(format!(
            "model {} expects {} sensors, dataset {} has a {}-point grid",
            model_path.display(),
            model.arch.n_sensors,
            data_path.display(),
            data.grid.len()
        )));
    }
    Ok(())
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let mut st = Stage::begin("simulate", out, force)?;
    let grid = cfg.grid()?;
    let data = out.join("data");
    std::fs::create_dir_all(&data)?;
    for (role, n) in ROLES.into_iter().zip([cfg.n_train, cfg.n_cal, cfg.n_test, cfg.n_reliability]) {
        let exc = cfg.excitation.sample(&grid, n, cfg.split_seed(role), Exec::Parallel)?;
        let stem = format!("excitation_{}", role_name(role));
        exc.save(&data, &stem)?;
        st.path(format!("data/{stem}.csv"));
        let trajectories: Vec<Trajectory> = simulate_ensemble(&cfg.system, &exc, cfg.dt, Exec::Parallel)?;
        for &dof in &cfg.response_dofs {
            let ds = OperatorDataset::from_trajectories(&exc, &trajectories, &cfg.system, dof, cfg.dt, role)?;
            let stem = dataset_stem(dof, role);
            ds.save(&data, &stem)?;
            st.path(format!("data/{stem}.json"));
            st.path(format!("data/{stem}_responses.csv"));
        }
    }
    st.finish(cfg)
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let mut st = Stage::begin("train", out, force)?;
    let dir = out.join("models");
    std::fs::create_dir_all(&dir)?;
    for &dof in &cfg.response_dofs {
        let ds = load_dataset(out, dof, DatasetRole::Train)?;
        if ds.role != DatasetRole::Train {
            return Err(Error::InvalidInput(format!("dof {dof} training file is marked {:?}", ds.role)));
        }
        let tc = TrainConfig { seed: cfg.train_seed(dof), ..cfg.train.clone() };
        let outcome = train(&ds, cfg.architecture.clone(), &tc)?;
        let extra = serde_json::json!({
            "dof": dof,
            "best_loss": outcome.best_loss,
            "best_iteration": outcome.best_iteration,
            "kl_weight": outcome.kl_weight,
            "diverged_at": outcome.diverged_at,
            "train_seed": tc.seed,
        });
        save_checkpoint(&outcome.model, &dir, &format!("dof{dof}"), extra)?;
        st.path(format!("models/dof{dof}.json"));
        st.path(format!("models/dof{dof}.bin"));
        write_training_log(st.path(format!("models/dof{dof}_training_log.csv")), &outcome.log)?;
    }
    st.finish(cfg)
}

/// Calibrates every DOF on its calibration split, or on `cal_data`
/// (a dataset manifest path) when given. Training data is refused.
pub fn cmd_calibrate(cfg: &ExperimentConfig, out: &Path, force: bool, cal_data: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let mut st = Stage::begin("calibrate", out, force)?;
    let dir = out.join("calibration");
    std::fs::create_dir_all(&dir)?;
    let pc = cfg.predict_config();
    for &dof in &cfg.response_dofs {
        let (ds, ds_path) = match cal_data {
            Some(p) => {
                let stem = p.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::InvalidInput(format!("bad dataset path {}", p.display())))?;
                let parent = p.parent().unwrap_or(Path::new("."));
                (OperatorDataset::load(parent, stem)?, p.to_path_buf())
            }
            None => (
                load_dataset(out, dof, DatasetRole::Calibration)?,
                out.join("data").join(format!("{}.json", dataset_stem(dof, DatasetRole::Calibration))),
            ),
        };
        if ds.role == DatasetRole::Train {
            return Err(Error::InvalidInput(format!(
                "{} is training data; split-conformal calibration needs held-out samples",
                ds_path.display()
            )));
        }
        let model = load_model(out, dof)?;
        check_compatible(&model, &ds, &out.join(format!("models/dof{dof}.json")), &ds_path)?;
        let s = calibrate_schedule(&model, ds.inputs.view(), ds.grid.times(), ds.responses.view(), cfg.alpha, cfg.use_z, &pc)?;
        s.save(&dir, &format!("dof{dof}_schedule"))?;
        st.path(format!("calibration/dof{dof}_schedule.csv"));
        st.path(format!("calibration/dof{dof}_schedule.json"));
    }
    st.finish(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofEvaluation {
    pub dof: usize,
    pub nmse: f64,
    /// Error relative to the per-time spread of the truths.
    pub nmse_time_centered: f64,
    pub coverage_average: f64,
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub below_nominal: usize,
    pub at_or_above_nominal: usize,
    /// Branch spiking activity (%) per VSN layer on the test inputs.
    pub branch_activity: Vec<f64>,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub alpha: f64,
    pub identity: bool,
    pub dofs: Vec<DofEvaluation>,
}

/// NMSE, coverage and spiking activity on the test split. With `identity`,
/// the truths stand in for the predictions and the intervals collapse onto
/// them, which checks the harness itself.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, force: bool, identity: bool) -> Result<EvaluationSummary> {
    cfg.validate()?;
    let mut st = Stage::begin("evaluate", out, force)?;
    std::fs::create_dir_all(out.join("evaluation"))?;
    let pc = cfg.predict_config();
    let mut dofs = Vec::new();
    for &dof in &cfg.response_dofs {
        let ds = load_dataset(out, dof, DatasetRole::Test)?;
        let times = ds.grid.times();
        let (mu, ci, activity) = if identity {
            let u = ds.responses.clone();
            let ci = CalibratedInterval { lower: u.clone(), upper: u.clone(), flagged: vec![false; times.len()] };
            (u, ci, Vec::new())
        } else {
            let model = load_model(out, dof)?;
            check_compatible(&model, &ds, &out.join(format!("models/dof{dof}.json")), &out.join("data"))?;
            let sched = load_schedule(out, dof)?;
            let band = predict_band(&model, ds.inputs.view(), times, &pc)?;
            let ci = calibrated_band(&band, &sched)?;
            let recs = branch_records(&model, &model.mean_params(), ds.inputs.view())?;
            let act = recs.iter().map(|r| spiking_activity(std::slice::from_ref(r))).collect::<Result<Vec<_>>>()?;
            (band.mu_hat, ci, act)
        };
        let e = nmse(mu.view(), ds.responses.view())?;
        let per = nmse_per_time(mu.view(), ds.responses.view())?;
        let cov = coverage_report(&ci, ds.responses.view(), times, 100.0 * (1.0 - cfg.alpha))?;
        cov.write_csv(st.path(format!("evaluation/dof{dof}_coverage.csv")))?;
        let rows: Vec<Vec<String>> = times.iter().zip(&per).map(|(t, v)| vec![io::fmt_f64(*t), io::fmt_f64(*v)]).collect();
        io::write_table(st.path(format!("evaluation/dof{dof}_nmse_per_time.csv")), &["t".into(), "nmse".into()], &rows)?;
        dofs.push(DofEvaluation {
            dof,
            nmse: e,
            nmse_time_centered: nmse_time_centered(mu.view(), ds.responses.view())?,
            coverage_average: cov.average,
            coverage_min: cov.min,
            coverage_max: cov.max,
            below_nominal: cov.below_nominal,
            at_or_above_nominal: cov.at_or_above_nominal,
            branch_activity: activity,
            n_test: ds.n_samples(),
        });
    }
    let summary = EvaluationSummary { alpha: cfg.alpha, identity, dofs };
    io::write_json(st.path("evaluation/summary.json"), &summary)?;
    st.finish(cfg)?;
    Ok(summary)
}

fn performance_spec(cfg: &ExperimentConfig, out: &Path, dof: usize, grid: &SensorGrid) -> Result<PerformanceSpec> {
    let spec = match &cfg.threshold {
        ThresholdConfig::Fixed { u_crit } => PerformanceSpec::new(*u_crit, cfg.direction),
        ThresholdConfig::TrainingQuantile { level } => {
            let tr = load_dataset(out, dof, DatasetRole::Train)?;
            PerformanceSpec::new(threshold_from_extremes(tr.responses.view(), cfg.direction, *level)?, cfg.direction)
        }
        ThresholdConfig::Schedule { path } => {
            let (_, m) = io::read_matrix(path)?;
            if m.ncols() < 2 || m.nrows() != grid.len() {
                return Err(Error::Artifact { path: path.clone(), reason: format!("need {} rows of (t, u_crit)", grid.len()) });
            }
            let s: Vec<f64> = m.column(1).to_vec();
            PerformanceSpec { u_crit: s[0], direction: cfg.direction, schedule: Some(s) }
        }
    };
    spec.validate(grid.len())?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofReliability {
    pub dof: usize,
    pub u_crit: f64,
    pub scheduled: bool,
    pub pf_true_final: f64,
    pub pf_mean_final: f64,
    pub pf_lower_final: f64,
    pub pf_upper_final: f64,
    /// `max_t |P̂_f^surrogate(t) − P̂_f^MCS(t)|` over the grid.
    pub sup_norm_vs_mcs: f64,
    pub bounds_usable: bool,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySummary {
    pub alpha: f64,
    pub direction: Direction,
    pub dofs: Vec<DofReliability>,
}

/// Surrogate failure-probability curves with calibrated bounds on the
/// reliability split, compared with direct Monte Carlo on its simulated truths.
pub fn cmd_reliability(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<ReliabilitySummary> {
    cfg.validate()?;
    let mut st = Stage::begin("reliability", out, force)?;
    std::fs::create_dir_all(out.join("reliability"))?;
    let pc = cfg.predict_config();
    let mut dofs = Vec::new();
    for &dof in &cfg.response_dofs {
        let ds = load_dataset(out, dof, DatasetRole::Reliability)?;
        let times = ds.grid.times();
        let model = load_model(out, dof)?;
        check_compatible(&model, &ds, &out.join(format!("models/dof{dof}.json")), &out.join("data"))?;
        let sched = load_schedule(out, dof)?;
        let spec = performance_spec(cfg, out, dof, &ds.grid)?;
        let band = predict_band(&model, ds.inputs.view(), times, &pc)?;
        let ci = calibrated_band(&band, &sched)?;
        let curve = reliability_from_bounds(band.mu_hat.view(), &ci, times, &spec, Exec::Parallel)?;
        let mcs = pof_from_trajectories(ds.responses.view(), times, &spec, Exec::Parallel)?;
        curve.write_csv(st.path(format!("reliability/dof{dof}_curve.csv")))?;
        let rows: Vec<Vec<String>> = times.iter().zip(&mcs).map(|(t, p)| vec![io::fmt_f64(*t), io::fmt_f64(*p)]).collect();
        io::write_table(st.path(format!("reliability/dof{dof}_mcs.csv")), &["t".into(), "pf".into()], &rows)?;
        let last = times.len() - 1;
        dofs.push(DofReliability {
            dof,
            u_crit: spec.u_crit,
            scheduled: spec.schedule.is_some(),
            pf_true_final: mcs[last],
            pf_mean_final: curve.pf_mean[last],
            pf_lower_final: curve.pf_lower[last],
            pf_upper_final: curve.pf_upper[last],
            sup_norm_vs_mcs: curve.pf_mean.iter().zip(&mcs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            bounds_usable: curve.bounds_usable.iter().all(|&b| b),
            n_samples: curve.n_samples,
        });
    }
    let summary = ReliabilitySummary { alpha: cfg.alpha, direction: cfg.direction, dofs };
    io::write_json(st.path("reliability/summary.json"), &summary)?;
    st.finish(cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub params: EnergyParams,
    pub n_in: usize,
    pub n_out: usize,
    /// `(T_s, α*)` pairs; `None` when the ratio never reaches one.
    pub crossovers: Vec<(usize, Option<f64>)>,
    pub measured_layers: usize,
}

/// Ratio curves for the configured layer, plus per-layer energies of every
/// trained branch when an evaluation summary with measured activity exists.
pub fn cmd_energy_report(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<EnergySummary> {
    let e = &cfg.energy;
    let mut st = Stage::begin("energy-report", out, force)?;
    std::fs::create_dir_all(out.join("energy"))?;
    let mut crossovers = Vec::new();
    for &ts in &e.t_s {
        let curve = energy_ratio_curve(e.n_in, e.n_out, ts, &e.params, &activity_grid(e.grid_points))?;
        curve.write_csv(st.path(format!("energy/ratio_ts{ts}.csv")))?;
        crossovers.push((ts, curve.crossover));
    }
    let mut measured_layers = 0;
    let eval_path = out.join("evaluation/summary.json");
    if eval_path.exists() {
        let eval: EvaluationSummary = io::read_json(&eval_path)?;
        let arch = &cfg.architecture;
        let vsn_layers: Vec<(usize, usize)> = if arch.branch_activation == Activation::Vsn {
            arch.branch_shapes().iter().enumerate().filter(|(l, _)| arch.activated_layers.contains(l)).map(|(_, &s)| s).collect()
        } else {
            Vec::new()
        };
        let mut rows = Vec::new();
        for d in eval.dofs.iter().filter(|d| d.branch_activity.len() == vsn_layers.len()) {
            let mut alpha_in = 1.0;
            for (l, (&(n_out, n_in), &act)) in vsn_layers.iter().zip(&d.branch_activity).enumerate() {
                let ts = arch.vsn.t_s;
                let shape = LayerShape { n_in, n_out, t_s: ts, alpha_in, theta_out: Some(act / 100.0 * (n_out * ts) as f64) };
                let ea = layer_energy(&ann_layer_counts(&shape)?, &e.params);
                let ev = layer_energy(&vsn_layer_counts(&shape)?, &e.params);
                rows.push(
                    [d.dof as f64, l as f64, n_in as f64, n_out as f64, ts as f64, alpha_in, act, ea, ev, ea / ev]
                        .iter()
                        .map(|v| io::fmt_f64(*v))
                        .collect(),
                );
                measured_layers += 1;
                alpha_in = act / 100.0;
            }
        }
        let header = ["dof", "layer", "n_in", "n_out", "t_s", "alpha_in", "activity_pct", "e_ann_pj", "e_vsn_pj", "ratio"].map(String::from);
        io::write_table(st.path("energy/layers.csv"), &header, &rows)?;
    }
    let summary = EnergySummary { params: e.params, n_in: e.n_in, n_out: e.n_out, crossovers, measured_layers };
    io::write_json(st.path("energy/summary.json"), &summary)?;
    st.finish(cfg)?;
    Ok(summary)
}

#[derive(Debug, Parser)]
#[command(name = "vsnop", version, about = "Conformalized spiking operator surrogates for time-dependent reliability")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON). Defaults to the desk-scale preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite artifacts of a stage that already ran.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a preset configuration to stdout.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Sample excitations and simulate every split.
    Simulate,
    /// Train one surrogate per response DOF.
    Train,
    /// Per-timestep conformal calibration.
    Calibrate {
        /// Dataset manifest to calibrate on instead of the calibration split.
        #[arg(long)]
        cal_data: Option<PathBuf>,
    },
    /// NMSE, coverage and spiking activity on the test split.
    Evaluate {
        /// Feed the truths as predictions to check the harness.
        #[arg(long)]
        identity: bool,
    },
    /// Failure-probability curves with bounds and the Monte Carlo reference.
    Reliability,
    /// Energy ratio curves and per-layer energies.
    EnergyReport,
    /// Every stage in order.
    Run,
}

pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => io::read_json(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::InvalidInput("--threads must be >= 1".into()));
        }
        par::set_thread_cap(t);
    }
    if let Command::InitConfig { preset } = cli.command {
        println!("{}", serde_json::to_string_pretty(&ExperimentConfig::preset(preset))?);
        return Ok(());
    }
    let cfg = resolve_config(&cli)?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let f = cli.force;
    match &cli.command {
        Command::InitConfig { .. } => unreachable!(),
        Command::Simulate => cmd_simulate(&cfg, &out, f)?,
        Command::Train => cmd_train(&cfg, &out, f)?,
        Command::Calibrate { cal_data } => cmd_calibrate(&cfg, &out, f, cal_data.as_deref())?,
        Command::Evaluate { identity } => report_evaluation(&cmd_evaluate(&cfg, &out, f, *identity)?),
        Command::Reliability => report_reliability(&cmd_reliability(&cfg, &out, f)?),
        Command::EnergyReport => report_energy(&cmd_energy_report(&cfg, &out, f)?),
        Command::Run => {
            cmd_simulate(&cfg, &out, f)?;
            cmd_train(&cfg, &out, f)?;
            cmd_calibrate(&cfg, &out, f, None)?;
            report_evaluation(&cmd_evaluate(&cfg, &out, f, false)?);
            report_reliability(&cmd_reliability(&cfg, &out, f)?);
            report_energy(&cmd_energy_report(&cfg, &out, f)?);
        }
    }
    Ok(())
}

fn report_evaluation(s: &EvaluationSummary) {
    for d in &s.dofs {
        println!(
            "dof {}: nmse {:.4e} (time-centered {:.4e}), coverage avg {:.2}% min {:.2}% ({} of {} times below nominal), activity {:?}",
            d.dof,
            d.nmse,
            d.nmse_time_centered,
            d.coverage_average,
            d.coverage_min,
            d.below_nominal,
            d.below_nominal + d.at_or_above_nominal,
            d.branch_activity
        );
    }
}

fn report_reliability(s: &ReliabilitySummary) {
    for d in &s.dofs {
        println!(
            "dof {}: u_crit {:.6e}, P_f(T) true {:.3} mean {:.3} bounds [{:.3}, {:.3}], sup-norm {:.4}",
            d.dof, d.u_crit, d.pf_true_final, d.pf_mean_final, d.pf_lower_final, d.pf_upper_final, d.sup_norm_vs_mcs
        );
    }
}

fn report_energy(s: &EnergySummary) {
    for (ts, a) in &s.crossovers {
        match a {
            Some(a) => println!("T_s = {ts}: parity at activity {:.4}", a),
            None => println!("T_s = {ts}: no parity in [0, 1]"),
        }
    }
}
