//! The five workflows. Each one returns the files it wrote.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ppfm_core::backtest::{self, BacktestConfig, CtauMode, LambdaMode};
use ppfm_core::covariance;
use ppfm_core::panel::{self, CsvLayout, ReturnPanel};
use ppfm_core::par::Execution;
use ppfm_core::portfolio::PortfolioResult;
use ppfm_core::ppfm::{self, PpfmConfig};
use ppfm_core::simulation::{self, DGPConfig, LambdaChoice, MarketConfig, ScenarioConfig, StudyOptions};
use ppfm_core::tuning::{self, LambdaCvOptions};
use serde::Serialize;

use crate::args::{
    BacktestArgs, Command, CtauModeArg, EstimateArgs, FixtureArgs, InputArgs, LambdaArg, LambdaModeArg, SimulateArgs,
    TuneArgs,
};
use crate::error::{CliError, CliResult};
use crate::manifest::Outputs;

pub fn run(command: &Command, out: &mut Outputs) -> CliResult<()> {
    match command {
        Command::Estimate(a) => estimate(a, out),
        Command::Tune(a) => tune(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::Backtest(a) => run_backtest(a, out),
        Command::Fixture(a) => fixture(a, out),
    }
}

/// Sector panels of (excess) returns, as read.
fn load_sectors(input: &InputArgs) -> CliResult<Vec<ReturnPanel>> {
    let layout = if input.transposed { CsvLayout::Transposed } else { CsvLayout::Wide };
    let mut returns = panel::load_panel(&input.returns, layout)?;
    if let Some(rf) = &input.rf {
        returns = panel::to_excess(&returns, &panel::load_risk_free(rf)?)?;
    }
    let map = panel::load_sector_map(&input.sectors)?;
    let grouping = panel::group_by_sector(&returns, &map, input.min_assets);
    for code in &grouping.dropped_sectors {
        log::warn!("sector {code} has fewer than {} assets and was dropped", input.min_assets);
    }
    if grouping.panels.is_empty() {
        return Err(CliError::Invalid("no sector has enough assets".into()));
    }
    Ok(grouping.panels)
}

/// Full-sample panels restricted to assets without missing returns.
fn load_complete_sectors(input: &InputArgs) -> CliResult<Vec<ReturnPanel>> {
    let mut out = Vec::new();
    for p in load_sectors(input)? {
        let label = p.sector_label().unwrap_or("").to_string();
        let full = panel::complete_case_window(&p, 0, p.num_periods())?;
        let dropped = p.num_assets() - full.num_assets();
        if dropped > 0 {
            log::warn!("sector {label}: {dropped} asset(s) with missing returns left out");
        }
        if full.num_assets() < input.min_assets {
            log::warn!("sector {label}: too few complete assets, skipped");
            continue;
        }
        out.push(full);
    }
    if out.is_empty() {
        return Err(CliError::Invalid("no sector has enough complete assets".into()));
    }
    Ok(out)
}

fn label(p: &ReturnPanel) -> String {
    p.sector_label().unwrap_or("").to_string()
}

fn factor_counts(mats: &[DMatrix<f64>], k: Option<usize>, k_max: usize) -> CliResult<Vec<usize>> {
    mats.iter()
        .map(|x| match k {
            Some(0) => Err(CliError::Invalid("--k must be positive".into())),
            Some(k) => Ok(k),
            None => {
                let bound = k_max.min(x.nrows() - 1).min(x.ncols() - 1).max(1);
                Ok(ppfm::estimate_num_factors(x, bound)?.max(1))
            }
        })
        .collect()
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("results serialize");
    v.push(b'\n');
    v
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_cli = |e: csv::Error| CliError::Invalid(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(to_cli)?;
    for r in rows {
        w.write_record(&r).map_err(to_cli)?;
    }
    w.into_inner().map_err(|e| CliError::Invalid(format!("csv encoding failed: {e}")))
}

fn io_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>, path: &Path) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::io(path, e))?;
    Ok(buf)
}

fn num(x: f64) -> String {
    format!("{x:.12e}")
}

#[derive(Serialize)]
struct SectorSummary {
    sector: String,
    assets: Vec<String>,
    num_factors: usize,
    c_tau: f64,
    nonzeros: usize,
    positive_definite: bool,
    portfolio: PortfolioResult,
}

fn estimate(a: &EstimateArgs, out: &mut Outputs) -> CliResult<()> {
    let panels = load_complete_sectors(&a.input)?;
    let mats: Vec<DMatrix<f64>> = panels
        .iter()
        .map(|p| if a.demean { ppfm::demean_rows(p.values()) } else { p.values().clone() })
        .collect();
    let ks = factor_counts(&mats, a.k, a.k_max)?;
    let lambda = match a.lambda {
        LambdaArg::Value(v) => v,
        LambdaArg::Cv => {
            let grid = tuning::default_lambda_grid(&mats);
            let options = LambdaCvOptions {
                folds: a.folds,
                seed: a.seed,
                c_tau: vec![a.c_tau],
                rule: a.cov_rule,
                max_iter: a.max_iter,
                tol: a.tol,
                ..LambdaCvOptions::default()
            };
            tuning::select_lambda(&mats, &ks, &grid, &options)?.chosen
        }
    };
    let config = PpfmConfig {
        lambda,
        max_iter: a.max_iter,
        tol: a.tol,
        demean: false,
    };
    let mut fit = ppfm::ppfm_fit(&mats, &ks, &config)?;
    for (f, p) in fit.fits.iter_mut().zip(&panels) {
        f.sector_label = p.sector_label().map(str::to_string);
    }
    out.write(&a.out.join("fit.json"), &json_bytes(&fit))?;

    let mut summaries = Vec::new();
    for ((f, p), x) in fit.fits.iter().zip(&panels).zip(&mats) {
        let code = label(p);
        let (sigma, sparse) = covariance::factor_return_cov(f, a.c_tau, a.cov_rule)?;
        let mu = DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.mean()));
        let portfolio = PortfolioResult::minimum_variance(&sigma, Some(&mu))?;
        let cov_path = if a.triplets {
            a.out.join(format!("covariance_{code}.csv"))
        } else {
            a.out.join(format!("covariance_{code}.json"))
        };
        let bytes = if a.triplets {
            io_bytes(|b| sparse.write_triplets(b), &cov_path)?
        } else {
            json_bytes(&sparse)
        };
        out.write(&cov_path, &bytes)?;
        let rows = p.assets().iter().zip(&portfolio.weights).map(|(id, w)| vec![id.clone(), num(*w)]);
        out.write(&a.out.join(format!("weights_{code}.csv")), &csv_bytes(&["asset", "weight"], rows)?)?;
        summaries.push(SectorSummary {
            sector: code,
            assets: p.assets().to_vec(),
            num_factors: f.num_factors,
            c_tau: a.c_tau,
            nonzeros: sparse.nonzeros,
            positive_definite: sparse.positive_definite,
            portfolio,
        });
    }
    out.write(&a.out.join("summary.json"), &json_bytes(&summaries))?;
    println!(
        "estimate: {} sector(s), λ = {lambda}, {} sweep(s), converged = {}",
        panels.len(),
        fit.iterations,
        fit.converged
    );
    Ok(())
}

#[derive(Serialize)]
struct TuneChoice {
    lambda: f64,
    sectors: Vec<SectorChoice>,
}

#[derive(Serialize)]
struct SectorChoice {
    sector: String,
    num_factors: usize,
    c_tau: f64,
    c_min: f64,
}

fn tune(a: &TuneArgs, out: &mut Outputs) -> CliResult<()> {
    let panels = load_complete_sectors(&a.input)?;
    let labels: Vec<String> = panels.iter().map(label).collect();
    let mats: Vec<DMatrix<f64>> = panels.iter().map(|p| p.values().clone()).collect();
    let ks = factor_counts(&mats, a.k, a.k_max)?;
    let ctau_grid = a.ctau_grid.clone().unwrap_or_else(tuning::default_ctau_grid);

    let mut ctau_rows = Vec::new();
    let mut choices = Vec::new();
    for (m, x) in mats.iter().enumerate() {
        let fit = ppfm::pca_single(x, ks[m])?;
        let cv = tuning::select_ctau(&fit.residuals, &ctau_grid, a.ctau_repeats, a.seed.wrapping_add(m as u64), a.cov_rule)?;
        for g in 0..cv.grid.len() {
            ctau_rows.push(vec![
                labels[m].clone(),
                num(cv.grid[g]),
                num(cv.avg_frobenius_loss[g]),
                cv.positive_definite[g].to_string(),
            ]);
        }
        choices.push(SectorChoice {
            sector: labels[m].clone(),
            num_factors: ks[m],
            c_tau: cv.chosen,
            c_min: cv.c_min,
        });
    }

    let target = match &a.target {
        Some(t) => Some(
            labels
                .iter()
                .position(|l| l == t)
                .ok_or_else(|| CliError::Invalid(format!("target sector {t} not found")))?,
        ),
        None => None,
    };
    let grid = a.lambda_grid.clone().unwrap_or_else(|| tuning::default_lambda_grid(&mats));
    let options = LambdaCvOptions {
        folds: a.folds,
        seed: a.seed,
        scheme: a.fold_scheme.into(),
        target,
        c_tau: choices.iter().map(|c| c.c_tau).collect(),
        rule: a.cov_rule,
        max_iter: a.max_iter,
        tol: a.tol,
        execution: Execution::Parallel,
    };
    let cv = tuning::select_lambda(&mats, &ks, &grid, &options)?;

    let mut header = vec!["lambda".to_string(), "avg_risk".to_string()];
    header.extend(labels.iter().map(|l| format!("risk_{l}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..cv.grid.len()).map(|g| {
        let mut r = vec![num(cv.grid[g]), num(cv.avg_risk[g])];
        r.extend(cv.per_sector_risk.iter().map(|s| num(s[g])));
        r
    });
    out.write(&a.out.join("lambda_cv.csv"), &csv_bytes(&header_refs, rows)?)?;
    out.write(
        &a.out.join("ctau_cv.csv"),
        &csv_bytes(&["sector", "c_tau", "avg_frobenius_loss", "positive_definite"], ctau_rows)?,
    )?;
    let chosen = TuneChoice {
        lambda: cv.chosen,
        sectors: choices,
    };
    out.write(&a.out.join("chosen.json"), &json_bytes(&chosen))?;
    println!("tune: λ = {} over {} sector(s)", cv.chosen, labels.len());
    Ok(())
}

fn simulate(a: &SimulateArgs, out: &mut Outputs) -> CliResult<()> {
    let mut config = DGPConfig::calibrated(a.num_sectors, a.assets, a.seed);
    config.t_train = a.t_train;
    config.t_test = a.t_test;
    config.replications = a.replications();
    if let Some(path) = &a.error_cov {
        let cov = simulation::load_error_cov(path)?;
        if cov.nrows() != a.assets {
            return Err(CliError::Invalid(format!(
                "error covariance is {}×{} but --assets is {}",
                cov.nrows(),
                cov.ncols(),
                a.assets
            )));
        }
        config.error_covs = vec![cov];
    }
    let max = config.max_replacements()?;
    let scenarios: Vec<ScenarioConfig> = if a.scenario.is_empty() {
        (0..=max).map(|replacements| ScenarioConfig { replacements }).collect()
    } else {
        a.scenario.iter().map(|&replacements| ScenarioConfig { replacements }).collect()
    };
    let options = StudyOptions {
        lambda: match a.lambda {
            LambdaArg::Value(v) => LambdaChoice::Fixed(v),
            LambdaArg::Cv => LambdaChoice::CrossValidated {
                folds: a.folds,
                grid: a.lambda_grid.clone(),
            },
        },
        c_tau: a.c_tau,
        rule: a.cov_rule,
        pooled_k: None,
        raise_step: if a.no_raise { None } else { Some(0.1) },
        max_iter: a.max_iter,
        tol: a.tol,
        execution: Execution::Parallel,
    };
    let result = simulation::run_study(&config, &scenarios, &a.strategy, &options)?;
    for s in &result.scenarios {
        if s.failures > 0 {
            log::warn!("scenario {}: {} failed replication(s) excluded", s.replacements, s.failures);
        }
        println!(
            "scenario {}: {} replication(s), heterogeneity {:.4}",
            s.replacements, s.replications, s.heterogeneity
        );
    }
    out.write(&a.out, &io_bytes(|b| result.write_table(b), &a.out)?)?;
    let figure = a.figure_path();
    out.write(&figure, &io_bytes(|b| result.write_figure(b), &figure)?)?;
    if let Some(path) = &a.json {
        out.write(path, &json_bytes(&result))?;
    }
    Ok(())
}

fn backtest_config(a: &BacktestArgs) -> CliResult<BacktestConfig> {
    let mode = a.lambda_mode.unwrap_or(if a.target.is_some() {
        LambdaModeArg::CvTarget
    } else {
        LambdaModeArg::CvAll
    });
    let lambda_mode = match mode {
        LambdaModeArg::CvAll => LambdaMode::CvAllSectors,
        LambdaModeArg::CvTarget => LambdaMode::CvTargetSector,
        LambdaModeArg::Fixed => LambdaMode::Fixed {
            lambda: a
                .lambda
                .ok_or_else(|| CliError::Invalid("--lambda-mode fixed needs --lambda".into()))?,
        },
    };
    let ctau_mode = match a.ctau_mode {
        CtauModeArg::FirstNode => CtauMode::FirstNode,
        CtauModeArg::EveryRebalance => CtauMode::EveryRebalance,
        CtauModeArg::Fixed => CtauMode::Fixed {
            c_tau: a
                .c_tau
                .ok_or_else(|| CliError::Invalid("--ctau-mode fixed needs --c-tau".into()))?,
        },
    };
    Ok(BacktestConfig {
        window: a.window,
        rebalance_period: a.rebalance,
        strategies: a.strategy.clone(),
        lambda_mode,
        lambda_grid: a.lambda_grid.clone(),
        folds: a.folds,
        target_sector: a.target.clone(),
        correlation_threshold: a.corr_threshold,
        ctau_mode,
        ctau_grid: a.ctau_grid.clone(),
        ctau_repeats: a.ctau_repeats,
        rule: a.cov_rule,
        num_factors: a.k,
        k_max: a.k_max,
        pooled_k: a.pooled_k,
        min_assets: a.input.min_assets,
        start: a.start,
        end: a.end,
        max_iter: a.max_iter,
        tol: a.tol,
        seed: a.seed,
        execution: Execution::Parallel,
    })
}

fn run_backtest(a: &BacktestArgs, out: &mut Outputs) -> CliResult<()> {
    let config = backtest_config(a)?;
    let panels = load_sectors(&a.input)?;
    let report = backtest::rolling_backtest(&panels, &config)?;
    for e in &report.events {
        log::info!("{e}");
    }
    out.write(&a.out, &json_bytes(&report))?;
    let csv = a.csv_path();
    out.write(&csv, &io_bytes(|b| report.write_csv(b), &csv)?)?;
    for s in &report.strategies {
        let p = &s.aggregate.performance;
        println!("backtest {}: risk {:.6e}, cr {:.6e}", s.strategy.name(), p.risk, p.cr);
    }
    Ok(())
}

fn fixture(a: &FixtureArgs, out: &mut Outputs) -> CliResult<()> {
    let config = MarketConfig {
        seed: a.seed,
        periods: a.periods,
        missing_rate: a.missing_rate,
        ..MarketConfig::default()
    };
    let market = simulation::synthetic_market(&config)?;
    let returns = a.out.join("returns.csv");
    out.write(&returns, &io_bytes(|b| panel::write_panel(&market.returns, b), &returns)?)?;
    let sectors = a.out.join("sectors.csv");
    out.write(&sectors, &io_bytes(|b| panel::write_sector_map(&market.sectors, b), &sectors)?)?;
    let rf = a.out.join("rf.csv");
    out.write(&rf, &io_bytes(|b| panel::write_risk_free(&market.risk_free, b), &rf)?)?;
    println!(
        "fixture: {} assets over {} periods",
        market.returns.num_assets(),
        market.returns.num_periods()
    );
    Ok(())
}
