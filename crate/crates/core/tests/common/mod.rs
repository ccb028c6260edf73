#![allow(dead_code)]

use nalgebra::DMatrix;
use ppfm_core::backtest::{BacktestConfig, CtauMode, LambdaMode};
use ppfm_core::panel::{self, ReturnPanel};
use ppfm_core::simulation::{self, MarketConfig, MarketSector, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Excess-return sector panels of the default synthetic market.
pub fn fixture_panels(config: &MarketConfig) -> Vec<ReturnPanel> {
    let m = simulation::synthetic_market(config).unwrap();
    let ex = panel::to_excess(&m.returns, &m.risk_free).unwrap();
    panel::group_by_sector(&ex, &m.sectors, 1).panels
}

pub fn three_sector_panels() -> Vec<ReturnPanel> {
    fixture_panels(&MarketConfig::default())
}

pub fn single_sector_panels(seed: u64, assets: usize, periods: usize) -> Vec<ReturnPanel> {
    fixture_panels(&MarketConfig {
        sectors: vec![MarketSector {
            code: "10".into(),
            assets,
            group: 0,
        }],
        periods,
        seed,
        ..MarketConfig::default()
    })
}

pub fn quick_config() -> BacktestConfig {
    BacktestConfig {
        strategies: vec![Strategy::Individual, Strategy::Joint, Strategy::Pooled],
        lambda_mode: LambdaMode::CvAllSectors,
        ctau_mode: CtauMode::FirstNode,
        ctau_repeats: 5,
        ..BacktestConfig::default()
    }
}

/// Random instance helpers.
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, p, p + 3);
    &a * a.transpose() / (p + 3) as f64 + DMatrix::identity(p, p) * 0.05
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Factor-model panel `R = B Fᵀ + noise` with `k` strong factors.
pub fn factor_panel(rng: &mut ChaCha8Rng, p: usize, t: usize, k: usize, noise: f64) -> DMatrix<f64> {
    let f = random_matrix(rng, t, k);
    let b = random_matrix(rng, p, k);
    &b * f.transpose() + random_matrix(rng, p, t) * noise
}
