//! Rolling-window multi-sector backtest with periodic rebalancing.
//!
//! At each decision node the trailing `window` dates are used to fit the
//! chosen strategy; the resulting minimum-variance weights are held fixed
//! for `rebalance_period` days. The number of factors and the thresholding
//! constants are determined at the first decision node, λ is re-selected at
//! every node.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::ThresholdRule;
use crate::linalg;
use crate::panel::{self, ReturnPanel};
use crate::par::{self, Execution};
use crate::ppfm::{self, PpfmProblem};
use crate::simulation::Strategy;
use crate::tuning::{self, LambdaCvOptions};
use crate::{Error, Result};

const MODULE: &str = "backtest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LambdaMode {
    CvAllSectors,
    CvTargetSector,
    Fixed { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CtauMode {
    /// Cross-validated once at the first decision node.
    FirstNode,
    /// Cross-validated at every decision node.
    EveryRebalance,
    Fixed { c_tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub window: usize,
    pub rebalance_period: usize,
    pub strategies: Vec<Strategy>,
    pub lambda_mode: LambdaMode,
    /// λ grid; the scale-aware default grid of each window when `None`.
    pub lambda_grid: Option<Vec<f64>>,
    pub folds: usize,
    pub target_sector: Option<String>,
    pub correlation_threshold: f64,
    pub ctau_mode: CtauMode,
    pub ctau_grid: Option<Vec<f64>>,
    pub ctau_repeats: usize,
    pub rule: ThresholdRule,
    /// Per-sector factor count; estimated at the first node when `None`.
    pub num_factors: Option<usize>,
    pub k_max: usize,
    /// Factors in the pooled fit.
    pub pooled_k: usize,
    /// Sectors with fewer complete assets in a window are skipped.
    pub min_assets: usize,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            window: 100,
            rebalance_period: 21,
            strategies: vec![Strategy::Individual, Strategy::Joint],
            lambda_mode: LambdaMode::CvAllSectors,
            lambda_grid: None,
            folds: 5,
            target_sector: None,
            correlation_threshold: 0.85,
            ctau_mode: CtauMode::FirstNode,
            ctau_grid: None,
            ctau_repeats: 20,
            rule: ThresholdRule::Soft,
            num_factors: None,
            k_max: 8,
            pooled_k: 2,
            min_assets: 3,
            start: None,
            end: None,
            max_iter: 50,
            tol: 1e-8,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rebalance_period == 0 || self.window < self.rebalance_period {
            return Err(Error::validation(MODULE, "need window >= rebalance_period > 0"));
        }
        if !(self.correlation_threshold > 0.0 && self.correlation_threshold <= 1.0) {
            return Err(Error::validation(MODULE, "correlation threshold must lie in (0, 1]"));
        }
        if self.strategies.is_empty() {
            return Err(Error::validation(MODULE, "no strategy selected"));
        }
        if matches!(self.lambda_mode, LambdaMode::CvTargetSector) && self.target_sector.is_none() {
            return Err(Error::validation(MODULE, "target-sector λ selection needs a target sector"));
        }
        if let LambdaMode::Fixed { lambda } = self.lambda_mode {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::validation(MODULE, "fixed λ must be finite and nonnegative"));
            }
        }
        if let CtauMode::Fixed { c_tau } = self.ctau_mode {
            if !(c_tau >= 0.0 && c_tau.is_finite()) {
                return Err(Error::validation(MODULE, "fixed C_τ must be finite and nonnegative"));
            }
        }
        if self.num_factors == Some(0) || self.pooled_k == 0 {
            return Err(Error::validation(MODULE, "factor counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    /// Sample standard deviation of the daily returns.
    pub risk: f64,
    /// Compounded cumulative return.
    pub cr: f64,
    /// Sum of the daily returns.
    pub cr_simple: f64,
    pub mean: f64,
    /// Omitted when the series has zero variance.
    pub sr: Option<f64>,
    pub degenerate: bool,
}

impl PerformanceRow {
    pub fn from_series(returns: &[f64]) -> Self {
        let n = returns.len();
        let mean = if n > 0 { returns.iter().sum::<f64>() / n as f64 } else { 0.0 };
        let risk = if n > 1 {
            (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let degenerate = !(risk > 0.0);
        Self {
            risk,
            cr: returns.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0,
            cr_simple: returns.iter().sum(),
            mean,
            sr: (!degenerate).then(|| mean / risk),
            degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorReport {
    pub sector: String,
    pub dates: Vec<NaiveDate>,
    pub returns: Vec<f64>,
    pub performance: PerformanceRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorWeights {
    pub sector: String,
    pub assets: Vec<String>,
    pub weights: Vec<f64>,
    pub num_factors: usize,
    pub c_tau: f64,
    /// The sector was not solvable in this window and earned zero.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceRecord {
    pub date: NaiveDate,
    /// Index of the first held date in the input panels.
    pub index: usize,
    pub lambda: Option<f64>,
    pub sectors: Vec<SectorWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    /// Per-sector rows; empty for the pooled strategy.
    pub sectors: Vec<SectorReport>,
    pub aggregate: SectorReport,
    pub rebalances: Vec<RebalanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub config: BacktestConfig,
    pub sectors: Vec<String>,
    pub factors: Vec<usize>,
    pub dates: Vec<NaiveDate>,
    pub strategies: Vec<StrategyReport>,
    pub events: Vec<String>,
}

pub const AGGREGATE_LABEL: &str = "ALL";

impl BacktestReport {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategyReport> {
        self.strategies.iter().find(|r| r.strategy == s)
    }

    /// Per-sector table: `strategy,sector,risk,cr,cr_simple,sr`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["strategy", "sector", "risk", "cr", "cr_simple", "sr"])?;
        for s in &self.strategies {
            for row in s.sectors.iter().chain(std::iter::once(&s.aggregate)) {
                let p = &row.performance;
                w.write_record([
                    s.strategy.name().to_string(),
                    row.sector.clone(),
                    format!("{:.10e}", p.risk),
                    format!("{:.10e}", p.cr),
                    format!("{:.10e}", p.cr_simple),
                    p.sr.map(|v| format!("{v:.10e}")).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()
    }
}

/// Equal-weighted average of per-sector portfolio return series.
pub fn aggregate_equal_weight(rows: &[SectorReport]) -> Result<SectorReport> {
    let first = rows
        .first()
        .ok_or_else(|| Error::validation(MODULE, "nothing to aggregate"))?;
    if rows.iter().any(|r| r.dates != first.dates || r.returns.len() != first.dates.len()) {
        return Err(Error::validation(MODULE, "sector return series are not aligned"));
    }
    let n = rows.len() as f64;
    let returns: Vec<f64> = (0..first.dates.len())
        .map(|t| rows.iter().map(|r| r.returns[t]).sum::<f64>() / n)
        .collect();
    Ok(SectorReport {
        sector: AGGREGATE_LABEL.to_string(),
        dates: first.dates.clone(),
        performance: PerformanceRow::from_series(&returns),
        returns,
    })
}

fn check_aligned(panels: &[ReturnPanel]) -> Result<()> {
    let first = panels
        .first()
        .ok_or_else(|| Error::validation(MODULE, "no sector panels supplied"))?;
    if panels.iter().any(|p| p.times() != first.times()) {
        return Err(Error::validation(MODULE, "sector panels do not share the same dates"));
    }
    Ok(())
}

fn label_of(panel: &ReturnPanel, i: usize) -> String {
    panel.sector_label().map(str::to_string).unwrap_or_else(|| format!("sector{i}"))
}

/// The target plus every sector whose equal-weighted returns over
/// `eval_start..eval_start + eval_len` correlate with the target's at or
/// above `threshold`. Only assets complete over the window count.
pub fn select_related_sectors(
    target: &str,
    panels: &[ReturnPanel],
    threshold: f64,
    eval_start: usize,
    eval_len: usize,
) -> Result<Vec<String>> {
    check_aligned(panels)?;
    let labels: Vec<String> = panels.iter().enumerate().map(|(i, p)| label_of(p, i)).collect();
    let ti = labels
        .iter()
        .position(|l| l == target)
        .ok_or_else(|| Error::validation(MODULE, format!("target sector '{target}' not present")))?;
    let windows = panels
        .iter()
        .map(|p| panel::complete_case_window(p, eval_start, eval_len))
        .collect::<Result<Vec<_>>>()?;
    if windows[ti].num_assets() == 0 {
        return Err(Error::validation(MODULE, format!("target sector '{target}' has no complete assets")));
    }
    let mut out = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        if i == ti {
            out.push(labels[i].clone());
            continue;
        }
        if w.num_assets() == 0 {
            log::info!("sector {}: no complete assets in the evaluation window", labels[i]);
            continue;
        }
        match panel::equal_weight_correlation(&windows[ti], w) {
            Ok(rho) if rho >= threshold => out.push(labels[i].clone()),
            Ok(_) => {}
            Err(e) => log::info!("sector {}: correlation unavailable: {e}", labels[i]),
        }
    }
    Ok(out)
}

/// Decision-node indices: first out-of-sample index and every
/// `rebalance_period` after, up to the exclusive `end`.
fn decision_nodes(first: usize, end: usize, period: usize) -> Vec<usize> {
    (first..end).step_by(period).collect()
}

fn default_ctau_grid(config: &BacktestConfig) -> Vec<f64> {
    config.ctau_grid.clone().unwrap_or_else(tuning::default_ctau_grid)
}

/// C_τ by repeated-split cross-validation, falling back to the largest grid
/// value when no grid value keeps the estimate positive definite.
fn choose_ctau(residuals: &DMatrix<f64>, config: &BacktestConfig, seed: u64, events: &mut Vec<String>, who: &str) -> f64 {
    let grid = default_ctau_grid(config);
    match tuning::select_ctau(residuals, &grid, config.ctau_repeats, seed, config.rule) {
        Ok(r) => r.chosen,
        Err(e) => {
            let fallback = grid.last().copied().unwrap_or(0.0);
            let msg = format!("{who}: C_τ selection failed ({e}); using {fallback}");
            log::warn!("{msg}");
            events.push(msg);
            fallback
        }
    }
}

/// Per-window inputs of one sector.
struct SectorWindow {
    assets: Vec<usize>,
    returns: DMatrix<f64>,
}

fn sector_window(panel: &ReturnPanel, node: usize, window: usize) -> Result<SectorWindow> {
    let start = node - window;
    let w = panel.window(start, window)?;
    let assets: Vec<usize> = (0..w.num_assets())
        .filter(|&i| w.values().row(i).iter().all(|x| !x.is_nan()))
        .collect();
    let returns = linalg::select_rows(w.values(), &assets);
    Ok(SectorWindow { assets, returns })
}

/// Daily returns of fixed weights over `from..to`; missing returns count as
/// zero for that day.
fn held_returns(
    panel: &ReturnPanel,
    assets: &[usize],
    weights: &[f64],
    from: usize,
    to: usize,
    events: &mut Vec<String>,
    who: &str,
) -> Vec<f64> {
    let v = panel.values();
    (from..to)
        .map(|t| {
            let mut r = 0.0;
            for (&a, &w) in assets.iter().zip(weights) {
                let x = v[(a, t)];
                if x.is_nan() {
                    events.push(format!(
                        "{who}: missing return for {} on {} treated as zero",
                        panel.assets()[a],
                        panel.times()[t]
                    ));
                } else {
                    r += w * x;
                }
            }
            r
        })
        .collect()
}

/// Everything fixed at the first decision node.
struct FirstNode {
    ks: Vec<usize>,
    c_tau: Vec<f64>,
    pooled_c_tau: f64,
}

struct NodeOutcome {
    record: RebalanceRecord,
    /// Per sector (or one pooled entry) daily returns over the holding span.
    returns: Vec<Vec<f64>>,
    events: Vec<String>,
}

fn node_seed(seed: u64, node: usize) -> u64 {
    seed.wrapping_add(node as u64)
}

fn stack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let total: usize = parts.iter().map(|m| m.nrows()).sum();
    let t = parts.first().map(|m| m.ncols()).unwrap_or(0);
    let mut out = DMatrix::zeros(total, t);
    let mut off = 0;
    for m in parts {
        out.rows_mut(off, m.nrows()).copy_from(m);
        off += m.nrows();
    }
    out
}

fn first_node_settings(
    panels: &[ReturnPanel],
    labels: &[String],
    node: usize,
    config: &BacktestConfig,
    events: &mut Vec<String>,
) -> Result<FirstNode> {
    let windows = panels
        .iter()
        .map(|p| sector_window(p, node, config.window))
        .collect::<Result<Vec<_>>>()?;
    let mut ks = Vec::with_capacity(panels.len());
    for (w, label) in windows.iter().zip(labels) {
        let p = w.returns.nrows();
        let k = match config.num_factors {
            Some(k) => k,
            None if p >= 2 => {
                let k_max = config.k_max.min(p - 1).min(config.window - 1);
                let k = ppfm::estimate_num_factors(&w.returns, k_max)?;
                if k == 0 {
                    events.push(format!("{label}: estimated zero factors, using one"));
                }
                k.max(1)
            }
            None => 1,
        };
        ks.push(k);
    }
    let mut c_tau = Vec::with_capacity(panels.len());
    let mut pooled_c_tau = 0.0;
    match config.ctau_mode {
        CtauMode::Fixed { c_tau: c } => {
            c_tau = vec![c; panels.len()];
            pooled_c_tau = c;
        }
        _ => {
            for (i, (w, label)) in windows.iter().zip(labels).enumerate() {
                let c = match (w.returns.nrows() >= config.min_assets.max(ks[i] + 1))
                    .then(|| ppfm::pca_single(&w.returns, ks[i]))
                {
                    Some(Ok(fit)) => choose_ctau(&fit.residuals, config, node_seed(config.seed, i), events, label),
                    _ => {
                        events.push(format!("{label}: not solvable at the first node; C_τ set to 0.5"));
                        0.5
                    }
                };
                c_tau.push(c);
            }
            if config.strategies.contains(&Strategy::Pooled) {
                let stacked = stack(&windows.iter().map(|w| &w.returns).collect::<Vec<_>>());
                pooled_c_tau = match ppfm::pca_single(&stacked, config.pooled_k) {
                    Ok(fit) => choose_ctau(&fit.residuals, config, config.seed ^ 0x9001, events, AGGREGATE_LABEL),
                    Err(e) => {
                        events.push(format!("{AGGREGATE_LABEL}: pooled fit failed at the first node ({e}); C_τ set to 0.5"));
                        0.5
                    }
                };
            }
        }
    }
    Ok(FirstNode { ks, c_tau, pooled_c_tau })
}

#[allow(clippy::too_many_arguments)]
fn run_node(
    strategy: Strategy,
    panels: &[ReturnPanel],
    labels: &[String],
    target: Option<usize>,
    settings: &FirstNode,
    node: usize,
    hold_end: usize,
    config: &BacktestConfig,
) -> Result<NodeOutcome> {
    let mut events = Vec::new();
    let windows = panels
        .iter()
        .map(|p| sector_window(p, node, config.window))
        .collect::<Result<Vec<_>>>()?;
    let date = panels[0].times()[node];
    let seed = node_seed(config.seed, node);

    if strategy == Strategy::Pooled {
        let mut assets: Vec<(usize, usize)> = Vec::new();
        for (m, w) in windows.iter().enumerate() {
            assets.extend(w.assets.iter().map(|&a| (m, a)));
        }
        let stacked = stack(&windows.iter().map(|w| &w.returns).collect::<Vec<_>>());
        let solved = (|| -> Result<(DVector<f64>, f64)> {
            if stacked.nrows() < config.min_assets.max(config.pooled_k + 1) {
                return Err(Error::validation(MODULE, "too few complete assets"));
            }
            let fit = ppfm::pca_single(&stacked, config.pooled_k)?;
            let c = match config.ctau_mode {
                CtauMode::EveryRebalance => choose_ctau(&fit.residuals, config, seed ^ 0x9001, &mut events, AGGREGATE_LABEL),
                _ => settings.pooled_c_tau,
            };
            Ok((tuning::fit_weights(&fit, c, config.rule)?, c))
        })();
        let span = hold_end - node;
        let (returns, weights, c, skipped) = match solved {
            Ok((w, c)) => {
                let mut r = vec![0.0; span];
                for (m, panel) in panels.iter().enumerate() {
                    let idx: Vec<usize> = (0..assets.len()).filter(|&i| assets[i].0 == m).collect();
                    let rows: Vec<usize> = idx.iter().map(|&i| assets[i].1).collect();
                    let ws: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
                    let part = held_returns(panel, &rows, &ws, node, hold_end, &mut events, AGGREGATE_LABEL);
                    for (acc, x) in r.iter_mut().zip(part) {
                        *acc += x;
                    }
                }
                (r, w.iter().copied().collect(), c, false)
            }
            Err(e) => {
                events.push(format!("{AGGREGATE_LABEL} on {date}: skipped ({e})"));
                (vec![0.0; span], Vec::new(), settings.pooled_c_tau, true)
            }
        };
        let names = assets.iter().map(|&(m, a)| panels[m].assets()[a].clone()).collect();
        return Ok(NodeOutcome {
            record: RebalanceRecord {
                date,
                index: node,
                lambda: None,
                sectors: vec![SectorWeights {
                    sector: AGGREGATE_LABEL.to_string(),
                    assets: if skipped { Vec::new() } else { names },
                    weights,
                    num_factors: config.pooled_k,
                    c_tau: c,
                    skipped,
                }],
            },
            returns: vec![returns],
            events,
        });
    }

    // sectors solvable in this window
    let active: Vec<usize> = (0..panels.len())
        .filter(|&m| {
            let p = windows[m].returns.nrows();
            let ok = p >= config.min_assets.max(settings.ks[m] + 1);
            if !ok {
                events.push(format!("{} on {date}: {p} complete assets, skipped", labels[m]));
            }
            ok
        })
        .collect();

    let mut c_tau = settings.c_tau.clone();
    let mut fits: Vec<Option<ppfm::FactorFit>> = vec![None; panels.len()];
    let mut lambda = None;
    if !active.is_empty() {
        let train: Vec<DMatrix<f64>> = active.iter().map(|&m| windows[m].returns.clone()).collect();
        let ks: Vec<usize> = active.iter().map(|&m| settings.ks[m]).collect();
        match PpfmProblem::new(train.clone(), &ks) {
            Ok(problem) => {
                if config.ctau_mode == CtauMode::EveryRebalance {
                    for (j, &m) in active.iter().enumerate() {
                        c_tau[m] = choose_ctau(
                            &problem.initial_fits()[j].residuals,
                            config,
                            seed.wrapping_add(m as u64),
                            &mut events,
                            &labels[m],
                        );
                    }
                }
                let chosen: Result<Vec<ppfm::FactorFit>> = match strategy {
                    Strategy::Individual => Ok(problem.initial_fits().to_vec()),
                    _ => {
                        let l = match &config.lambda_mode {
                            LambdaMode::Fixed { lambda } => Ok(*lambda),
                            mode => {
                                let grid = config
                                    .lambda_grid
                                    .clone()
                                    .unwrap_or_else(|| tuning::default_lambda_grid(&train));
                                let target_local = match mode {
                                    LambdaMode::CvTargetSector => {
                                        let t = target.and_then(|t| active.iter().position(|&m| m == t));
                                        if t.is_none() {
                                            events.push(format!("{date}: target sector inactive, λ chosen on all sectors"));
                                        }
                                        t
                                    }
                                    _ => None,
                                };
                                tuning::select_lambda(
                                    &train,
                                    &ks,
                                    &grid,
                                    &LambdaCvOptions {
                                        folds: config.folds,
                                        seed,
                                        target: target_local,
                                        c_tau: active.iter().map(|&m| c_tau[m]).collect(),
                                        rule: config.rule,
                                        max_iter: config.max_iter,
                                        tol: config.tol,
                                        execution: config.execution,
                                        ..LambdaCvOptions::default()
                                    },
                                )
                                .map(|r| r.chosen)
                            }
                        };
                        l.and_then(|l| {
                            lambda = Some(l);
                            problem.fit(l, config.max_iter, config.tol)
                        })
                        .map(|multi| multi.fits)
                    }
                };
                match chosen {
                    Ok(chosen) => {
                        for (j, f) in chosen.into_iter().enumerate() {
                            fits[active[j]] = Some(f);
                        }
                    }
                    Err(e) => events.push(format!("{date}: fit failed ({e}); active sectors skipped")),
                }
            }
            Err(e) => events.push(format!("{date}: factor estimation failed ({e}); all sectors skipped")),
        }
    }

    let mut records = Vec::with_capacity(panels.len());
    let mut returns = Vec::with_capacity(panels.len());
    for m in 0..panels.len() {
        let weights = match &fits[m] {
            Some(fit) => match tuning::fit_weights(fit, c_tau[m], config.rule) {
                Ok(w) => Some(w),
                Err(e) => {
                    events.push(format!("{} on {date}: portfolio failed ({e})", labels[m]));
                    None
                }
            },
            None => None,
        };
        match weights {
            Some(w) => {
                let ws: Vec<f64> = w.iter().copied().collect();
                returns.push(held_returns(&panels[m], &windows[m].assets, &ws, node, hold_end, &mut events, &labels[m]));
                records.push(SectorWeights {
                    sector: labels[m].clone(),
                    assets: windows[m].assets.iter().map(|&a| panels[m].assets()[a].clone()).collect(),
                    weights: ws,
                    num_factors: settings.ks[m],
                    c_tau: c_tau[m],
                    skipped: false,
                });
            }
            None => {
                returns.push(vec![0.0; hold_end - node]);
                records.push(SectorWeights {
                    sector: labels[m].clone(),
                    assets: Vec::new(),
                    weights: Vec::new(),
                    num_factors: settings.ks[m],
                    c_tau: c_tau[m],
                    skipped: true,
                });
            }
        }
    }
    Ok(NodeOutcome {
        record: RebalanceRecord {
            date,
            index: node,
            lambda,
            sectors: records,
        },
        returns,
        events,
    })
}

/// Run the rolling backtest over aligned per-sector excess-return panels.
pub fn rolling_backtest(panels: &[ReturnPanel], config: &BacktestConfig) -> Result<BacktestReport> {
    config.validate()?;
    check_aligned(panels)?;
    let times = panels[0].times();
    let n = times.len();
    let first = match config.start {
        Some(d) => times.iter().position(|t| *t >= d).unwrap_or(n),
        None => config.window,
    };
    let end = match config.end {
        Some(d) => times.iter().rposition(|t| *t <= d).map_or(0, |i| i + 1),
        None => n,
    };
    if first < config.window {
        return Err(Error::validation(
            MODULE,
            format!("only {first} dates precede the first out-of-sample date; need {}", config.window),
        ));
    }
    if end < first + config.rebalance_period {
        return Err(Error::validation(
            MODULE,
            format!(
                "need at least window + rebalance_period = {} dates, have {} usable",
                config.window + config.rebalance_period,
                end.saturating_sub(first) + config.window
            ),
        ));
    }
    let mut events = Vec::new();
    let all_labels: Vec<String> = panels.iter().enumerate().map(|(i, p)| label_of(p, i)).collect();

    // restrict to sectors related to the target
    let (panels, labels): (Vec<ReturnPanel>, Vec<String>) = match &config.target_sector {
        Some(target) => {
            let keep = select_related_sectors(
                target,
                panels,
                config.correlation_threshold,
                first - config.window,
                config.window,
            )?;
            events.push(format!("sectors related to {target}: {}", keep.join(",")));
            panels
                .iter()
                .zip(&all_labels)
                .filter(|(_, l)| keep.contains(l))
                .map(|(p, l)| (p.clone(), l.clone()))
                .unzip()
        }
        None => (panels.to_vec(), all_labels),
    };
    let target = config
        .target_sector
        .as_ref()
        .and_then(|t| labels.iter().position(|l| l == t));

    let settings = first_node_settings(&panels, &labels, first, config, &mut events)?;
    let nodes = decision_nodes(first, end, config.rebalance_period);
    let dates: Vec<NaiveDate> = times[first..end].to_vec();

    let mut strategies = Vec::new();
    for &strategy in &config.strategies {
        let outcomes = par::map_indexed(config.execution, nodes.len(), |i| {
            let hold_end = (nodes[i] + config.rebalance_period).min(end);
            run_node(strategy, &panels, &labels, target, &settings, nodes[i], hold_end, config)
        });
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        let series_count = if strategy == Strategy::Pooled { 1 } else { panels.len() };
        let mut series = vec![Vec::with_capacity(dates.len()); series_count];
        let mut rebalances = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            for (acc, part) in series.iter_mut().zip(o.returns) {
                acc.extend(part);
            }
            for e in &o.events {
                log::info!("{}: {e}", strategy.name());
            }
            events.extend(o.events.into_iter().map(|e| format!("{}: {e}", strategy.name())));
            rebalances.push(o.record);
        }
        let (sectors, aggregate) = if strategy == Strategy::Pooled {
            let returns = series.pop().unwrap_or_default();
            let agg = SectorReport {
                sector: AGGREGATE_LABEL.to_string(),
                dates: dates.clone(),
                performance: PerformanceRow::from_series(&returns),
                returns,
            };
            (Vec::new(), agg)
        } else {
            let rows: Vec<SectorReport> = series
                .into_iter()
                .zip(&labels)
                .map(|(returns, label)| SectorReport {
                    sector: label.clone(),
                    dates: dates.clone(),
                    performance: PerformanceRow::from_series(&returns),
                    returns,
                })
                .collect();
            let agg = aggregate_equal_weight(&rows)?;
            (rows, agg)
        };
        strategies.push(StrategyReport {
            strategy,
            sectors,
            aggregate,
            rebalances,
        });
    }
    Ok(BacktestReport {
        config: config.clone(),
        sectors: labels,
        factors: settings.ks,
        dates,
        strategies,
        events,
    })
}
