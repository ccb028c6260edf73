//! Sequential against rayon execution for the three parallel workloads:
//! simulation replications, λ cross-validation cells and backtest nodes.
//!
//! `cargo bench -p ppfm-core --bench parallel`

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use ppfm_core::backtest::{self, BacktestConfig, CtauMode};
use ppfm_core::panel;
use ppfm_core::par::Execution;
use ppfm_core::simulation::{self, DGPConfig, LambdaChoice, MarketConfig, ScenarioConfig, StudyOptions, Strategy};
use ppfm_core::tuning::{self, LambdaCvOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn study(c: &mut Criterion) {
    let mut config = DGPConfig::calibrated(4, 20, 1);
    config.replications = 8;
    let scenarios = [ScenarioConfig { replacements: 3 }];
    let mut group = c.benchmark_group("simulation_study");
    group.sample_size(10);
    for (name, execution) in MODES {
        let options = StudyOptions {
            lambda: LambdaChoice::Fixed(1e-4),
            execution,
            ..StudyOptions::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulation::run_study(&config, &scenarios, &Strategy::ALL, &options).unwrap())
        });
    }
    group.finish();
}

fn lambda_cv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let panels: Vec<DMatrix<f64>> = (0..4)
        .map(|_| {
            let f = DMatrix::from_fn(100, 2, |_, _| rng.gen_range(-1.0..1.0));
            let b = DMatrix::from_fn(30, 2, |_, _| rng.gen_range(-1.0..1.0));
            b * f.transpose() + DMatrix::from_fn(30, 100, |_, _| rng.gen_range(-0.5..0.5))
        })
        .collect();
    let grid = tuning::default_lambda_grid(&panels);
    let mut group = c.benchmark_group("lambda_cv");
    group.sample_size(10);
    for (name, execution) in MODES {
        let options = LambdaCvOptions {
            execution,
            ..LambdaCvOptions::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| tuning::select_lambda(&panels, &[2; 4], &grid, &options).unwrap())
        });
    }
    group.finish();
}

fn rolling(c: &mut Criterion) {
    let market = simulation::synthetic_market(&MarketConfig::default()).unwrap();
    let excess = panel::to_excess(&market.returns, &market.risk_free).unwrap();
    let panels = panel::group_by_sector(&excess, &market.sectors, 3).panels;
    let mut group = c.benchmark_group("backtest");
    group.sample_size(10);
    for (name, execution) in MODES {
        let config = BacktestConfig {
            num_factors: Some(2),
            ctau_mode: CtauMode::Fixed { c_tau: 0.5 },
            execution,
            ..BacktestConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| backtest::rolling_backtest(&panels, &config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, study, lambda_cv, rolling);
criterion_main!(benches);
