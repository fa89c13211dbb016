use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

use vsnop::dynamics::{simulate_ensemble, BoucWenSdofParams, SystemSpec};
use vsnop::excitation::{sample_grf, GrfSpec, SensorGrid};
use vsnop::operator::{predict_band, Activation, OperatorArchitecture, PredictConfig, VariationalModel};
use vsnop::par::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn ensemble(c: &mut Criterion) {
    let grid = SensorGrid::from_rate(2.0, 50.0).unwrap();
    let forcing = sample_grf(&GrfSpec::new(50.0, 0.1, 1), &grid, 64, Exec::Sequential).unwrap();
    let system = SystemSpec::BoucWenSdof(BoucWenSdofParams::default());
    let mut g = c.benchmark_group("simulate_ensemble");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate_ensemble(&system, &forcing, 1e-3, exec).unwrap())
        });
    }
    g.finish();
}

fn band(c: &mut Criterion) {
    let arch = OperatorArchitecture::standard(101, 50, 4, 25, Activation::Vsn);
    let model = VariationalModel::init(arch, 7).unwrap();
    let inputs = Array2::from_shape_fn((256, 101), |(i, j)| ((i * 31 + j * 7) % 17) as f64 / 17.0 - 0.5);
    let times: Vec<f64> = (0..101).map(|k| k as f64 * 0.02).collect();
    let mut g = c.benchmark_group("predict_band");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = PredictConfig { n1: 8, n2: 8, seed: 3, exec };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_band(&model, inputs.view(), &times, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, ensemble, band);
criterion_main!(benches);
