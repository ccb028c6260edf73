mod common;

use common::*;
use nalgebra::DVector;
use ppfm_core::backtest::{self, BacktestConfig, CtauMode, LambdaMode, PerformanceRow};
use ppfm_core::covariance::{self, ThresholdRule};
use ppfm_core::panel::{self, ReturnPanel};
use ppfm_core::portfolio;
use ppfm_core::ppfm;
use ppfm_core::simulation::{MarketConfig, MarketSector, Strategy};

fn perturb_after(panels: &[ReturnPanel], from: usize) -> Vec<ReturnPanel> {
    panels
        .iter()
        .map(|p| {
            let mut v = p.values().clone();
            for j in from..v.ncols() {
                for i in 0..v.nrows() {
                    if !v[(i, j)].is_nan() {
                        v[(i, j)] = v[(i, j)] * 5.0 + 0.01 * ((i + 3 * j) % 7) as f64;
                    }
                }
            }
            ReturnPanel::new(p.assets().to_vec(), p.times().to_vec(), v, p.sector_label().map(str::to_string)).unwrap()
        })
        .collect()
}

#[test]
fn future_returns_do_not_move_weights() {
    let panels = three_sector_panels();
    let config = quick_config();
    let base = backtest::rolling_backtest(&panels, &config).unwrap();
    let nodes: Vec<usize> = base.strategies[0].rebalances.iter().map(|r| r.index).collect();
    let cut = nodes[1];
    let changed = backtest::rolling_backtest(&perturb_after(&panels, cut), &config).unwrap();
    for (a, b) in base.strategies.iter().zip(&changed.strategies) {
        for (ra, rb) in a.rebalances.iter().zip(&b.rebalances) {
            if ra.index <= cut {
                assert_eq!(ra, rb, "{:?} node {}", a.strategy, ra.index);
            }
        }
        // returns before the cut are untouched too
        let n = cut - nodes[0];
        assert_eq!(a.aggregate.returns[..n], b.aggregate.returns[..n]);
    }
    // and the perturbation does reach later weights
    let later = base.strategies[0].rebalances.iter().zip(&changed.strategies[0].rebalances).any(|(a, b)| a.index > cut && a != b);
    assert!(later);
}

#[test]
fn weights_are_held_between_rebalances() {
    let panels = three_sector_panels();
    let config = BacktestConfig {
        strategies: vec![Strategy::Individual],
        ctau_mode: CtauMode::Fixed { c_tau: 0.5 },
        ..quick_config()
    };
    let report = backtest::rolling_backtest(&panels, &config).unwrap();
    let s = &report.strategies[0];
    let first = report.dates.len();
    let start = s.rebalances[0].index;
    for (m, sector) in s.sectors.iter().enumerate() {
        for (k, rec) in s.rebalances.iter().enumerate() {
            let w = &rec.sectors[m];
            let end = s.rebalances.get(k + 1).map_or(start + first, |r| r.index);
            let rows: Vec<usize> = w.assets.iter().map(|a| panels[m].assets().iter().position(|x| x == a).unwrap()).collect();
            for t in rec.index..end {
                let want: f64 = rows
                    .iter()
                    .zip(&w.weights)
                    .map(|(&i, &wi)| {
                        let x = panels[m].values()[(i, t)];
                        if x.is_nan() { 0.0 } else { wi * x }
                    })
                    .sum();
                assert_eq!(sector.returns[t - start], want);
            }
        }
    }
}

/// Direct per-window covariance and portfolio pipeline.
fn plain_mvp_backtest(panel: &ReturnPanel, window: usize, period: usize, k: usize, c: f64) -> Vec<f64> {
    let n = panel.num_periods();
    let mut out = Vec::new();
    let mut node = window;
    while node < n {
        let w = panel::complete_case_window(panel, node - window, window).unwrap();
        let fit = ppfm::pca_single(w.values(), k).unwrap();
        let (sigma, _) = covariance::factor_return_cov(&fit, c, ThresholdRule::Soft).unwrap();
        let weights = portfolio::mvp_weights(&sigma).unwrap();
        let rows: Vec<usize> = w.assets().iter().map(|a| panel.assets().iter().position(|x| x == a).unwrap()).collect();
        for t in node..(node + period).min(n) {
            let r: f64 = rows
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let x = panel.values()[(i, t)];
                    if x.is_nan() { 0.0 } else { weights[j] * x }
                })
                .sum();
            out.push(r);
        }
        node += period;
    }
    out
}

#[test]
fn single_sector_individual_matches_plain_pipeline() {
    let panels = single_sector_panels(7, 15, 190);
    let config = BacktestConfig {
        strategies: vec![Strategy::Individual],
        num_factors: Some(2),
        ctau_mode: CtauMode::Fixed { c_tau: 0.5 },
        ..quick_config()
    };
    let report = backtest::rolling_backtest(&panels, &config).unwrap();
    let want = plain_mvp_backtest(&panels[0], 100, 21, 2, 0.5);
    let got = &report.strategies[0].sectors[0].returns;
    assert_eq!(got.len(), want.len());
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let agg = &report.strategies[0].aggregate;
    assert_eq!(agg.returns, *got);
}

#[test]
fn stored_cr_is_recomputable() {
    let panels = three_sector_panels();
    let report = backtest::rolling_backtest(&panels, &quick_config()).unwrap();
    for s in &report.strategies {
        for row in s.sectors.iter().chain(std::iter::once(&s.aggregate)) {
            let cr = row.returns.iter().fold(1.0, |a, r| a * (1.0 + r)) - 1.0;
            assert!((row.performance.cr - cr).abs() < 1e-14);
        }
    }
}

#[test]
fn constant_returns_are_degenerate() {
    let dates = panels_dates(150);
    let values = nalgebra::DMatrix::from_element(6, 150, 0.001);
    let panel = ReturnPanel::new((0..6).map(|i| format!("a{i}")).collect(), dates, values, Some("01".into())).unwrap();
    let config = BacktestConfig {
        strategies: vec![Strategy::Individual],
        num_factors: Some(2),
        ctau_mode: CtauMode::Fixed { c_tau: 0.5 },
        ..quick_config()
    };
    let report = backtest::rolling_backtest(&[panel], &config).unwrap();
    let perf = &report.strategies[0].sectors[0].performance;
    assert!(perf.degenerate);
    assert_eq!(perf.sr, None);
    assert_eq!(perf.risk, 0.0);
}

fn panels_dates(n: usize) -> Vec<chrono::NaiveDate> {
    let start = chrono::NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
    (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
}

#[test]
fn short_history_rejected() {
    let panels = single_sector_panels(1, 10, 110);
    assert!(backtest::rolling_backtest(&panels, &quick_config()).is_err());
}

#[test]
fn related_sector_selection() {
    let panels = three_sector_panels();
    // strict threshold keeps only the target
    let only = backtest::select_related_sectors("28", &panels, 1.0, 0, 100).unwrap();
    assert_eq!(only, vec!["28".to_string()]);
    // direct correlation oracle
    let got = backtest::select_related_sectors("28", &panels, 0.85, 0, 100).unwrap();
    let windows: Vec<ReturnPanel> = panels.iter().map(|p| panel::complete_case_window(p, 0, 100).unwrap()).collect();
    let mut want = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        let rho = panel::equal_weight_correlation(&windows[0], w).unwrap();
        if i == 0 || rho >= 0.85 {
            want.push(panels[i].sector_label().unwrap().to_string());
        }
    }
    assert_eq!(got, want);
    // sectors sharing factors correlate, the independent one does not
    assert_eq!(got, vec!["28".to_string(), "35".to_string()]);
    assert!(backtest::select_related_sectors("99", &panels, 0.85, 0, 100).is_err());
}

#[test]
fn exact_copy_is_always_related() {
    let mut panels = three_sector_panels();
    let copy = panels[2].clone().with_sector_label("37");
    panels.push(copy);
    let got = backtest::select_related_sectors("36", &panels, 1.0, 0, 100).unwrap();
    assert_eq!(got, vec!["36".to_string(), "37".to_string()]);
}

#[test]
fn target_mode_restricts_sectors() {
    let panels = three_sector_panels();
    let config = BacktestConfig {
        strategies: vec![Strategy::Joint],
        lambda_mode: LambdaMode::CvTargetSector,
        target_sector: Some("28".into()),
        ..quick_config()
    };
    let report = backtest::rolling_backtest(&panels, &config).unwrap();
    assert_eq!(report.sectors, vec!["28".to_string(), "35".to_string()]);
}

#[test]
fn aggregate_matches_naive_average() {
    let panels = three_sector_panels();
    let report = backtest::rolling_backtest(&panels, &quick_config()).unwrap();
    let s = report.strategy(Strategy::Individual).unwrap();
    let n = report.dates.len();
    let avg: Vec<f64> = (0..n).map(|t| s.sectors.iter().map(|r| r.returns[t]).sum::<f64>() / s.sectors.len() as f64).collect();
    let mean = avg.iter().sum::<f64>() / n as f64;
    let sd = (avg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((s.aggregate.performance.risk - sd).abs() < 1e-12);
    let direct = PerformanceRow::from_series(&avg);
    assert_eq!(direct.cr, s.aggregate.performance.cr);
}

#[test]
fn report_is_reproducible() {
    let panels = three_sector_panels();
    let a = backtest::rolling_backtest(&panels, &quick_config()).unwrap();
    let b = backtest::rolling_backtest(&panels, &quick_config()).unwrap();
    assert_eq!(a, b);
    let seq = BacktestConfig {
        execution: ppfm_core::par::Execution::Sequential,
        ..quick_config()
    };
    let mut c = backtest::rolling_backtest(&panels, &seq).unwrap();
    c.config.execution = a.config.execution;
    assert_eq!(a, c);
}

#[test]
fn shared_factors_help_joint_risk_in_most_runs() {
    let mut wins = 0;
    for seed in 0..20u64 {
        let panels = fixture_panels(&MarketConfig {
            sectors: vec![
                MarketSector { code: "01".into(), assets: 20, group: 0 },
                MarketSector { code: "02".into(), assets: 20, group: 0 },
            ],
            periods: 205,
            missing_rate: 0.0,
            seed: 100 + seed,
            ..MarketConfig::default()
        });
        let config = BacktestConfig {
            strategies: vec![Strategy::Individual, Strategy::Joint],
            num_factors: Some(2),
            ctau_mode: CtauMode::Fixed { c_tau: 0.5 },
            ..quick_config()
        };
        let r = backtest::rolling_backtest(&panels, &config).unwrap();
        let avg = |s: Strategy| {
            let rows = &r.strategy(s).unwrap().sectors;
            rows.iter().map(|x| x.performance.risk).sum::<f64>() / rows.len() as f64
        };
        if avg(Strategy::Joint) <= avg(Strategy::Individual) {
            wins += 1;
        }
    }
    assert!(wins > 10, "joint risk lower in only {wins} of 20 runs");
}

#[test]
fn missing_held_returns_count_as_zero() {
    let mut panels = single_sector_panels(3, 10, 150);
    let mut v = panels[0].values().clone();
    // asset 0 goes missing on the first out-of-sample day only
    for i in 0..v.nrows() {
        for t in 0..v.ncols() {
            if v[(i, t)].is_nan() {
                v[(i, t)] = 0.0;
            }
        }
    }
    v[(0, 100)] = f64::NAN;
    panels[0] = ReturnPanel::new(panels[0].assets().to_vec(), panels[0].times().to_vec(), v.clone(), Some("10".into())).unwrap();
    let config = BacktestConfig {
        strategies: vec![Strategy::Individual],
        num_factors: Some(2),
        ctau_mode: CtauMode::Fixed { c_tau: 0.5 },
        ..quick_config()
    };
    let report = backtest::rolling_backtest(&panels, &config).unwrap();
    let rec = &report.strategies[0].rebalances[0].sectors[0];
    assert_eq!(rec.assets.len(), 10);
    let w = DVector::from_vec(rec.weights.clone());
    let day: f64 = (1..10).map(|i| w[i] * v[(i, 100)]).sum();
    assert_eq!(report.strategies[0].sectors[0].returns[0], day);
    assert!(report.events.iter().any(|e| e.contains("treated as zero")));
}
