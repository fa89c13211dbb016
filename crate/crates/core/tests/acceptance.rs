//! Acceptance suite. Every criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use vsnop::cli::{self, ExperimentConfig};
use vsnop::conformal::{calibrate_from_band, calibrated_band};
use vsnop::dynamics::{
    rk4_integrate, simulate, BoucWenBlock, BoucWenSdofParams, DatasetRole, LinearForcing, ShearChainParams, SystemSpec,
};
use vsnop::energy::{activity_grid, ann_layer_counts, energy_ratio_curve, layer_energy, vsn_layer_counts, EnergyParams, LayerShape};
use vsnop::excitation::SensorGrid;
use vsnop::io;
use vsnop::neuralcore::{dense_forward_batch, vsn_repeat_forward, GateMode, VsnConfig, VsnLayerParams};
use vsnop::operator::{elbo_terms, elbo_with_grad, Activation, OperatorArchitecture, PredictiveBand, VariationalModel};
use vsnop::par::Exec;
use vsnop::reliability::{coverage_report, pof_from_trajectories, threshold_from_extremes, PerformanceSpec};
use vsnop::rng;

fn record(id: usize, pass: bool, detail: String) -> bool {
    println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

struct DeskRun {
    train_seconds: f64,
    nmse: f64,
    nmse_time_centered: f64,
    coverage: Vec<f64>,
    coverage_avg: f64,
    n_test: usize,
    activity: Vec<f64>,
    sup_norm: f64,
    pf_true_final: f64,
    pf_mean_final: f64,
    pf_bounds_final: (f64, f64),
    brute_force_equal: bool,
}

fn desk_run(out: &Path) -> DeskRun {
    let cfg = ExperimentConfig::desk();
    cli::cmd_simulate(&cfg, out, false).unwrap();
    let t0 = Instant::now();
    cli::cmd_train(&cfg, out, false).unwrap();
    let train_seconds = t0.elapsed().as_secs_f64();
    cli::cmd_calibrate(&cfg, out, false, None).unwrap();
    let ev = cli::cmd_evaluate(&cfg, out, false, false).unwrap();
    let rel = cli::cmd_reliability(&cfg, out, false).unwrap();
    let e = &ev.dofs[0];
    let r = &rel.dofs[0];
    let (_, cov) = io::read_matrix(out.join("evaluation/dof0_coverage.csv")).unwrap();

    let truth = cli::load_dataset(out, 0, DatasetRole::Reliability).unwrap();
    let train = cli::load_dataset(out, 0, DatasetRole::Train).unwrap();
    let spec = PerformanceSpec::new(threshold_from_extremes(train.responses.view(), cfg.direction, 0.5).unwrap(), cfg.direction);
    let sub = truth.responses.slice(ndarray::s![..200, ..]);
    let times = truth.grid.times();
    let pf = pof_from_trajectories(sub, times, &spec, Exec::Sequential).unwrap();
    let mut brute_force_equal = true;
    for (k, &tk) in times.iter().enumerate() {
        let mut count = 0usize;
        for i in 0..sub.nrows() {
            let mut failed = false;
            for j in 0..times.len() {
                if times[j] <= tk && sub[(i, j)] <= spec.u_crit {
                    failed = true;
                }
            }
            count += failed as usize;
        }
        brute_force_equal &= pf[k] == count as f64 / sub.nrows() as f64;
    }

    DeskRun {
        train_seconds,
        nmse: e.nmse,
        nmse_time_centered: e.nmse_time_centered,
        coverage: cov.column(1).to_vec(),
        coverage_avg: e.coverage_average,
        n_test: e.n_test,
        activity: e.branch_activity.clone(),
        sup_norm: r.sup_norm_vs_mcs,
        pf_true_final: r.pf_true_final,
        pf_mean_final: r.pf_mean_final,
        pf_bounds_final: (r.pf_lower_final, r.pf_upper_final),
        brute_force_equal,
    }
}

fn synthetic_coverage_trials() -> (usize, usize) {
    let (n_cal, n_test, trials) = (100, 5000, 200u64);
    let floor = 0.95 - 3.0 * (0.05f64 * 0.95 / n_test as f64).sqrt();
    let mut good = 0;
    for trial in 0..trials {
        let mut r = rng::stream(2024, trial);
        let mut draw = |n: usize| {
            let x: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
            let mu = Array2::from_shape_fn((n, 1), |(i, _)| x[i].sin());
            let sd = Array2::from_shape_fn((n, 1), |(i, _)| 0.1 + x[i].abs());
            let u = Array2::from_shape_fn((n, 1), |(i, _)| mu[(i, 0)] + 1.3 * sd[(i, 0)] * r.sample::<f64, _>(StandardNormal));
            (PredictiveBand { mu_hat: mu, sigma_hat: sd, n1: 1, n2: 1 }, u)
        };
        let (cal, ucal) = draw(n_cal);
        let sched = calibrate_from_band(&cal, ucal.view(), &[0.0], 0.05, true, 0).unwrap();
        let (test, utest) = draw(n_test);
        let ci = calibrated_band(&test, &sched).unwrap();
        let rep = coverage_report(&ci, utest.view(), &[0.0], 95.0).unwrap();
        if rep.coverage[0] / 100.0 >= floor {
            good += 1;
        }
    }
    (good, trials as usize)
}

fn dense_limit_bitwise() -> bool {
    let mut r = rng::stream(5, 0);
    let w = Array2::from_shape_fn((16, 8), |_| r.sample::<f64, _>(StandardNormal));
    let b = Array1::from_shape_fn(16, |_| r.sample::<f64, _>(StandardNormal));
    let x = Array2::from_shape_fn((1000, 8), |_| r.sample::<f64, _>(StandardNormal));
    let z = dense_forward_batch(w.view(), b.view(), x.view()).unwrap();
    let relu = z.mapv(|v| v.max(0.0));
    let p = VsnLayerParams::new(16, -1e6, 0.9, 1).unwrap();
    let (out, _) = vsn_repeat_forward(&z, &p, &VsnConfig::default()).unwrap();
    out.iter().zip(relu.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
}

fn gradient_audit() -> (usize, f64) {
    let mut arch = OperatorArchitecture::standard(2, 2, 2, 1, Activation::Vsn);
    arch.activated_layers = vec![0];
    arch.init_mu_std = 0.7;
    arch.init_sigma = 0.2;
    arch.vsn.neuron = VsnConfig { gate: GateMode::Smooth, slope: 5.0, ..VsnConfig::default() };
    let m = VariationalModel::init(arch, 3).unwrap();
    let x = ndarray::array![[0.4, -0.9], [1.1, 0.3], [-0.5, 0.8]];
    let times = [0.0, 0.5, 1.0];
    let y = ndarray::array![[0.2, 0.1, -0.3], [0.0, 0.4, 0.6], [-0.1, -0.2, 0.3]];
    let mut r = rng::stream(9, 0);
    let noises = vec![m.draw_noise(&mut r), m.draw_noise(&mut r)];
    let (_, g) = elbo_with_grad(&m, x.view(), &times, y.view(), &noises, 0.1).unwrap();
    let base = m.flatten();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut mp = m.clone();
        let mut v = base.clone();
        v[i] += h;
        mp.unflatten(&v).unwrap();
        let lp = elbo_terms(&mp, x.view(), &times, y.view(), &noises, 0.1).unwrap().total;
        v[i] -= 2.0 * h;
        mp.unflatten(&v).unwrap();
        let lm = elbo_terms(&mp, x.view(), &times, y.view(), &noises, 0.1).unwrap().total;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8));
    }
    (base.len(), worst)
}

fn energy_checks() -> (bool, f64, Option<f64>, bool) {
    let p = EnergyParams { e_mac: 3.1, e_acc: 0.1, ..EnergyParams::default() };
    let c = energy_ratio_curve(100, 100, 1, &p, &activity_grid(101)).unwrap();
    let decreasing = c.points.windows(2).all(|w| w[1].ratio < w[0].ratio);
    let r15 = c.points.iter().find(|q| (q.alpha - 0.15).abs() < 1e-12).unwrap().ratio;
    let counts = |c: vsnop::energy::OpCounts| [c.mac, c.acc, c.rd, c.wr];
    let ann = ann_layer_counts(&LayerShape::new(100, 100, 1, 0.0)).unwrap();
    let v0 = vsn_layer_counts(&LayerShape::new(100, 100, 1, 0.0)).unwrap();
    let v1 = vsn_layer_counts(&LayerShape::new(100, 100, 1, 1.0)).unwrap();
    let hand = counts(ann) == [10000.0, 300.0, 10200.0, 100.0]
        && counts(v0) == [100.0, 200.0, 400.0, 200.0]
        && counts(v1) == [10100.0, 10200.0, 10500.0, 200.0]
        && (layer_energy(&ann, &p) - 82530.0).abs() < 1e-9;
    (decreasing, r15, c.crossover, hand)
}

fn rk4_order() -> (f64, f64) {
    let grid = SensorGrid::uniform(1.0, 2).unwrap();
    let zeros = vec![0.0; grid.len()];
    let forcing = LinearForcing::new(&grid, &zeros).unwrap();
    let err = |n: usize| {
        let tr = rk4_integrate(|y, t, _, o| o[0] = t.cos() + t.sin() - y[0], &[0.0], &forcing, 1.0 / n as f64, &grid, 1).unwrap();
        (tr.states[(1, 0)] - 1f64.sin()).abs()
    };
    let (e1, e2, e3) = (err(8), err(16), err(32));
    ((e1 / e2).log2(), (e2 / e3).log2())
}

fn chain_energy_non_increasing() -> bool {
    let mut block = BoucWenBlock::from_sdof(&BoucWenSdofParams::default());
    block.q_y = 0.0;
    block.z0 = 0.0;
    let mut p = ShearChainParams::uniform(4, 1.5, 300.0, 1.2, block);
    p.x0 = 0.02;
    p.v0 = 0.01;
    let grid = SensorGrid::from_rate(3.0, 50.0).unwrap();
    let tr = simulate(&SystemSpec::ShearChain(p.clone()), &vec![0.0; grid.len()], &grid, 1e-3).unwrap();
    let n = p.n_dof;
    let energy = |row: ArrayView1<f64>| {
        let kin: f64 = (0..n).map(|i| 0.5 * p.m[i] * row[n + i] * row[n + i]).sum();
        let pot: f64 = (0..n)
            .map(|i| {
                let d = row[i] - if i == 0 { 0.0 } else { row[i - 1] };
                0.5 * p.k[i] * d * d
            })
            .sum();
        kin + pot
    };
    let e: Vec<f64> = tr.states.rows().into_iter().map(energy).collect();
    e.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)) && e[e.len() - 1] < e[0]
}

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            v.extend(csv_files(&p));
        } else if p.extension().is_some_and(|e| e == "csv" || e == "bin") {
            v.push(p);
        }
    }
    v.sort();
    v
}

fn determinism() -> (usize, Vec<String>) {
    let mut cfg = ExperimentConfig::desk();
    (cfg.n_train, cfg.n_cal, cfg.n_test, cfg.n_reliability) = (12, 8, 10, 15);
    (cfg.n1, cfg.n2) = (8, 4);
    cfg.train.iterations = 40;
    cfg.train.sigma_warmup = 20;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = d.path();
        cli::cmd_simulate(&cfg, out, false).unwrap();
        cli::cmd_train(&cfg, out, false).unwrap();
        cli::cmd_calibrate(&cfg, out, false, None).unwrap();
        cli::cmd_evaluate(&cfg, out, false, false).unwrap();
        cli::cmd_reliability(&cfg, out, false).unwrap();
        cli::cmd_energy_report(&cfg, out, false).unwrap();
    }
    let a = csv_files(dirs[0].path());
    let mut differing = Vec::new();
    for f in &a {
        let rel = f.strip_prefix(dirs[0].path()).unwrap();
        let other = dirs[1].path().join(rel);
        if std::fs::read(f).unwrap() != std::fs::read(&other).unwrap_or_default() {
            differing.push(rel.display().to_string());
        }
    }
    (a.len(), differing)
}

fn desk() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        desk_run(tmp.path())
    })
}

fn criterion_01_desk_scale_accuracy() -> bool {
    let run = desk();
    record(
        1,
        run.nmse <= 5e-2 && run.train_seconds <= 1800.0,
        format!(
            "desk-scale NMSE {:.4e} (<= 5e-2), training {:.1} s (<= 1800 s); time-centered NMSE {:.4e}",
            run.nmse, run.train_seconds, run.nmse_time_centered
        ),
    )
}

fn criterion_02_conformal_coverage() -> bool {
    let run = desk();
    let se = 100.0 * (0.05f64 * 0.95 / run.n_test as f64).sqrt();
    let ok_steps = run.coverage.iter().filter(|&&c| c >= 95.0 - 3.0 * se).count();
    record(
        2,
        run.coverage_avg >= 95.0 && ok_steps >= 98,
        format!(
            "average coverage {:.2}% (>= 95%), {ok_steps}/{} timesteps >= {:.2}% (need 98)",
            run.coverage_avg,
            run.coverage.len(),
            95.0 - 3.0 * se
        ),
    )
}

fn criterion_03_conformal_guarantee() -> bool {
    let (good, trials) = synthetic_coverage_trials();
    record(3, good as f64 >= 0.95 * trials as f64, format!("{good}/{trials} trials with coverage >= 0.9408 (need 95%)"))
}

fn criterion_04_sparsity() -> bool {
    let run = desk();
    record(
        4,
        !run.activity.is_empty() && run.activity.iter().all(|&a| a < 60.0) && run.nmse <= 5e-2,
        format!("branch spiking activity {:?}% (< 60%) with criterion 1 NMSE {:.4e}", run.activity, run.nmse),
    )
}

fn criterion_05_dense_limit() -> bool {
    let bitwise = dense_limit_bitwise();
    record(5, bitwise, format!("VSN dense limit equals ReLU bitwise on 1000 inputs: {bitwise}"))
}

fn criterion_06_gradient_audit() -> bool {
    let (n_params, worst) = gradient_audit();
    record(6, n_params <= 50 && worst < 1e-3, format!("{n_params} parameters, max relative gradient error {worst:.3e} (< 1e-3)"))
}

fn criterion_07_reliability_oracle() -> bool {
    let run = desk();
    record(
        7,
        run.sup_norm <= 0.05 && run.brute_force_equal,
        format!(
            "sup |pf_mean - pf_mcs| = {:.4} (<= 0.05) on 2000 inputs; P_f(T) true {:.3}, mean {:.3}, bounds [{:.3}, {:.3}]; brute-force equality {}",
            run.sup_norm, run.pf_true_final, run.pf_mean_final, run.pf_bounds_final.0, run.pf_bounds_final.1, run.brute_force_equal
        ),
    )
}

fn criterion_08_energy_model() -> bool {
    let (decreasing, r15, cross, hand) = energy_checks();
    record(
        8,
        decreasing && r15 >= 4.0 && cross.is_some_and(|a| a > 0.85 && a < 1.0) && hand,
        format!("ratio strictly decreasing {decreasing}, ratio(0.15) {r15:.3} (>= 4), parity {cross:?} in (0.85, 1.0), hand counts {hand}"),
    )
}

fn criterion_09_integrator() -> bool {
    let (o1, o2) = rk4_order();
    let chain = chain_energy_non_increasing();
    record(
        9,
        (3.7..=4.3).contains(&o1) && (3.7..=4.3).contains(&o2) && chain,
        format!("RK4 observed orders {o1:.3}, {o2:.3} (in [3.7, 4.3]); damped chain energy non-increasing {chain}"),
    )
}

fn criterion_10_determinism() -> bool {
    let (n_files, differing) = determinism();
    record(10, differing.is_empty() && n_files > 0, format!("{n_files} CSV/binary artifacts compared across reruns, {} differ {differing:?}", differing.len()))
}

fn main() {
    let criteria: [fn() -> bool; 10] = [
        criterion_01_desk_scale_accuracy,
        criterion_02_conformal_coverage,
        criterion_03_conformal_guarantee,
        criterion_04_sparsity,
        criterion_05_dense_limit,
        criterion_06_gradient_audit,
        criterion_07_reliability_oracle,
        criterion_08_energy_model,
        criterion_09_integrator,
        criterion_10_determinism,
    ];
    let failed: Vec<usize> = criteria.iter().enumerate().filter(|(_, c)| !c()).map(|(i, _)| i + 1).collect();
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
