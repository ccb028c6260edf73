//! Calibrated multi-sector simulation study.
//!
//! Every sector follows `r_t = B F_t + e_t` with two AR(1) factors of unit
//! stationary variance, normally drawn loadings and Gaussian idiosyncratic
//! errors. The baseline gives all sectors the same factors; each
//! replacement step swaps one block of factor slots (ordered as factor 1 of
//! sectors 2..M, then factor 2 of sectors 2..M) for freshly simulated
//! independent series. Individual, joint and pooled estimators are compared
//! on weight, covariance, out-of-sample risk and Sharpe-ratio errors against
//! the oracle minimum-variance portfolio.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{self, ThresholdRule};
use crate::linalg;
use crate::panel::{ReturnPanel, RiskFreeSeries, SectorMap};
use crate::par::{self, Execution};
use crate::portfolio;
use crate::ppfm::{self, FactorFit, PpfmProblem};
use crate::tuning::{self, LambdaCvOptions};
use crate::{Error, Result};

const MODULE: &str = "simulation";

/// Calibrated loading means for the two factors.
pub const LOADING_MEANS: [f64; 2] = [0.018, -0.001];
/// Calibrated loading standard deviations for the two factors.
pub const LOADING_SDS: [f64; 2] = [0.0072, 0.0084];
/// Standard deviation of the AR(1) coefficients.
pub const AR_COEF_SD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DGPConfig {
    pub sectors: usize,
    pub factors: usize,
    pub assets: usize,
    pub t_train: usize,
    pub t_test: usize,
    pub loading_means: Vec<f64>,
    pub loading_sds: Vec<f64>,
    pub ar_coef_sd: f64,
    /// Idiosyncratic covariance per sector; a single matrix is shared by
    /// every sector.
    #[serde(skip)]
    pub error_covs: Vec<DMatrix<f64>>,
    /// Slots replaced per step; `None` derives it from the canonical
    /// six-step schedule.
    pub block_size: Option<usize>,
    pub replications: usize,
    pub seed: u64,
}

impl Default for DGPConfig {
    fn default() -> Self {
        Self::calibrated(16, 50, 0)
    }
}

impl DGPConfig {
    /// Calibrated configuration with generated block-diagonal error
    /// covariances (see [`default_error_cov`]).
    pub fn calibrated(sectors: usize, assets: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e77);
        let error_covs = (0..sectors).map(|_| default_error_cov(assets, &mut rng)).collect();
        Self {
            sectors,
            factors: 2,
            assets,
            t_train: 100,
            t_test: 300,
            loading_means: LOADING_MEANS.to_vec(),
            loading_sds: LOADING_SDS.to_vec(),
            ar_coef_sd: AR_COEF_SD,
            error_covs,
            block_size: None,
            replications: 50,
            seed,
        }
    }

    pub fn total_periods(&self) -> usize {
        self.t_train + self.t_test
    }

    pub fn error_cov(&self, sector: usize) -> &DMatrix<f64> {
        if self.error_covs.len() == 1 {
            &self.error_covs[0]
        } else {
            &self.error_covs[sector]
        }
    }

    /// Number of replaceable factor slots, `K (M − 1)`.
    pub fn num_slots(&self) -> usize {
        self.factors * self.sectors.saturating_sub(1)
    }

    pub fn replacement_block(&self) -> Result<usize> {
        match self.block_size {
            Some(b) if b > 0 => Ok(b),
            Some(_) => Err(Error::validation(MODULE, "block size must be positive")),
            None => {
                let slots = self.num_slots();
                if slots % 6 != 0 || slots == 0 {
                    Err(Error::validation(
                        MODULE,
                        format!("{slots} factor slots do not split into six blocks; set an explicit block size"),
                    ))
                } else {
                    Ok(slots / 6)
                }
            }
        }
    }

    pub fn max_replacements(&self) -> Result<usize> {
        let b = self.replacement_block()?;
        Ok(self.num_slots().div_ceil(b))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.factors;
        if self.sectors == 0 || self.assets == 0 || k == 0 {
            return Err(Error::validation(MODULE, "sectors, assets and factors must be positive"));
        }
        if self.loading_means.len() != k || self.loading_sds.len() != k {
            return Err(Error::dimension(MODULE, format!("need {k} loading means and sds")));
        }
        if self.loading_sds.iter().any(|&s| !(s > 0.0)) || !(self.ar_coef_sd > 0.0) {
            return Err(Error::validation(MODULE, "standard deviations must be positive"));
        }
        if self.t_train < k + 2 || self.t_test < 2 {
            return Err(Error::validation(MODULE, "training or test window too short"));
        }
        if self.error_covs.len() != 1 && self.error_covs.len() != self.sectors {
            return Err(Error::dimension(MODULE, "need one error covariance or one per sector"));
        }
        for c in &self.error_covs {
            if c.shape() != (self.assets, self.assets) {
                return Err(Error::dimension(
                    MODULE,
                    format!("error covariance is {:?}, expected {p}x{p}", c.shape(), p = self.assets),
                ));
            }
        }
        self.replacement_block()?;
        Ok(())
    }
}

/// Block-diagonal SPD covariance at daily idiosyncratic scale: blocks of
/// five assets with within-block correlation 0.25 and volatilities drawn
/// uniformly from 1% to 2%.
pub fn default_error_cov<R: Rng + ?Sized>(p: usize, rng: &mut R) -> DMatrix<f64> {
    const BLOCK: usize = 5;
    const RHO: f64 = 0.25;
    let sd: Vec<f64> = (0..p).map(|_| rng.gen_range(0.01..0.02)).collect();
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            sd[i] * sd[i]
        } else if i / BLOCK == j / BLOCK {
            RHO * sd[i] * sd[j]
        } else {
            0.0
        }
    })
}

/// Read a dense `p × p` covariance from headerless CSV.
pub fn read_error_cov<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            module: MODULE,
            row: r + 1,
            column: 0,
            message: e.to_string(),
        })?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    module: MODULE,
                    row: r + 1,
                    column: c + 1,
                    message: format!("invalid number '{s}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let p = rows.len();
    if p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(Error::dimension(MODULE, "error covariance file must hold a square matrix"));
    }
    let m = DMatrix::from_fn(p, p, |i, j| rows[i][j]);
    if !linalg::is_symmetric(&m, 1e-12) {
        return Err(Error::validation(MODULE, "error covariance is not symmetric"));
    }
    Ok(m)
}

pub fn load_error_cov(path: &Path) -> Result<DMatrix<f64>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io {
        module: MODULE,
        path: path.display().to_string(),
        source: e,
    })?;
    read_error_cov(f)
}

/// `T × K` stationary AR(1) factors with unit variance:
/// `f_t = α f_{t−1} + u_t`, `f_0 = 0`, `u_t ~ N(0, 1 − α²)`,
/// `α ~ N(0, ar_sd²)` redrawn until `|α| < 1`.
pub fn simulate_factors<R: Rng + ?Sized>(k: usize, t: usize, ar_sd: f64, rng: &mut R) -> DMatrix<f64> {
    let coef = Normal::new(0.0, ar_sd).expect("finite AR coefficient sd");
    let mut f = DMatrix::zeros(t, k);
    for j in 0..k {
        let alpha = loop {
            let a: f64 = coef.sample(rng);
            if a.abs() < 1.0 {
                break a;
            }
        };
        let innovation_sd = (1.0 - alpha * alpha).sqrt();
        let mut prev = 0.0;
        for i in 0..t {
            let u: f64 = rng.sample(StandardNormal);
            prev = alpha * prev + innovation_sd * u;
            f[(i, j)] = prev;
        }
    }
    f
}

#[derive(Debug, Clone)]
pub struct SectorDraw {
    /// `p × T` returns.
    pub returns: DMatrix<f64>,
    /// `p × K` loadings.
    pub loadings: DMatrix<f64>,
}

/// Draw loadings `B_ij ~ N(μ_j, σ_j²)` and errors `e_t ~ N(0, Σ_e)` and form
/// `R = B Fᵀ + E`. An all-zero `Σ_e` yields `E = 0`.
pub fn simulate_sector<R: Rng + ?Sized>(
    factors: &DMatrix<f64>,
    loading_means: &[f64],
    loading_sds: &[f64],
    error_cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<SectorDraw> {
    let (t, k) = factors.shape();
    let p = error_cov.nrows();
    if loading_means.len() != k || loading_sds.len() != k || !error_cov.is_square() {
        return Err(Error::dimension(MODULE, "loading parameters or error covariance do not match"));
    }
    let dists = (0..k)
        .map(|j| {
            Normal::new(loading_means[j], loading_sds[j])
                .map_err(|e| Error::validation(MODULE, format!("bad loading distribution: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loadings = DMatrix::zeros(p, k);
    for i in 0..p {
        for j in 0..k {
            loadings[(i, j)] = dists[j].sample(rng);
        }
    }
    let mut returns = &loadings * factors.transpose();
    if error_cov.iter().any(|&x| x != 0.0) {
        let chol = linalg::cholesky(MODULE, error_cov)?;
        let l = chol.l();
        let z = DMatrix::from_fn(p, t, |_, _| rng.sample::<f64, _>(StandardNormal));
        returns += l * z;
    }
    Ok(SectorDraw { returns, loadings })
}

/// Number of replacement steps applied to the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub replacements: usize,
}

#[derive(Debug, Clone)]
pub struct SectorData {
    pub returns: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    /// Population return covariance `B Bᵀ + Σ_e`.
    pub true_cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub sectors: Vec<SectorData>,
    /// `Σ_{m<m'} ‖P_m − P_m'‖²_F` of the population factors over the
    /// training window.
    pub heterogeneity: f64,
}

impl ScenarioData {
    pub fn train_panels(&self, t_train: usize) -> Vec<DMatrix<f64>> {
        self.sectors.iter().map(|s| s.returns.columns(0, t_train).clone_owned()).collect()
    }

    pub fn test_panels(&self, t_train: usize) -> Vec<DMatrix<f64>> {
        self.sectors
            .iter()
            .map(|s| s.returns.columns(t_train, s.returns.ncols() - t_train).clone_owned())
            .collect()
    }
}

/// Sector index (1-based among `1..M`) and factor index of a slot.
fn slot_owner(slot: usize, sectors: usize) -> (usize, usize) {
    let per_factor = sectors - 1;
    (1 + slot % per_factor, slot / per_factor)
}

/// Generate one replication's data for a scenario. Draws are made in a fixed
/// order that does not depend on the scenario, so the same random stream
/// yields nested scenarios that differ only in the replaced factors.
pub fn build_scenario<R: Rng + ?Sized>(
    config: &DGPConfig,
    scenario: ScenarioConfig,
    rng: &mut R,
) -> Result<ScenarioData> {
    config.validate()?;
    let max = config.max_replacements()?;
    if scenario.replacements > max {
        return Err(Error::validation(
            MODULE,
            format!("scenario {} out of range 0..={max}", scenario.replacements),
        ));
    }
    let (m_count, k, t) = (config.sectors, config.factors, config.total_periods());
    let base = simulate_factors(k, t, config.ar_coef_sd, rng);
    let slots = config.num_slots();
    let fresh: Vec<DMatrix<f64>> = (0..slots)
        .map(|_| simulate_factors(1, t, config.ar_coef_sd, rng))
        .collect();
    let replaced = (scenario.replacements * config.replacement_block()?).min(slots);

    let mut factors: Vec<DMatrix<f64>> = vec![base.clone(); m_count];
    for (slot, series) in fresh.iter().enumerate().take(replaced) {
        let (m, j) = slot_owner(slot, m_count);
        factors[m].set_column(j, &series.column(0));
    }

    let mut sectors = Vec::with_capacity(m_count);
    for (m, f) in factors.into_iter().enumerate() {
        let draw = simulate_sector(&f, &config.loading_means, &config.loading_sds, config.error_cov(m), rng)?;
        let true_cov = &draw.loadings * draw.loadings.transpose() + config.error_cov(m);
        sectors.push(SectorData {
            returns: draw.returns,
            factors: f,
            loadings: draw.loadings,
            true_cov,
        });
    }
    let projections = sectors
        .iter()
        .map(|s| ppfm::projection_matrix(&s.factors.rows(0, config.t_train).clone_owned()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DMatrix<f64>> = projections.iter().collect();
    Ok(ScenarioData {
        sectors,
        heterogeneity: ppfm::projection_dispersion(&refs),
    })
}

/// `‖Ŵ − W*‖₁` with `W*` the minimum-variance weights of `sigma_true`.
pub fn weight_error(w_hat: &DVector<f64>, sigma_true: &DMatrix<f64>) -> Result<f64> {
    let w_star = portfolio::mvp_weights(sigma_true)?;
    if w_star.len() != w_hat.len() {
        return Err(Error::dimension(MODULE, "weight vectors differ in length"));
    }
    Ok((w_hat - w_star).iter().map(|x| x.abs()).sum())
}

/// Entrywise `‖Σ̂ − Σ‖₁`.
pub fn cov_error(sigma_hat: &DMatrix<f64>, sigma_true: &DMatrix<f64>) -> Result<f64> {
    if sigma_hat.shape() != sigma_true.shape() {
        return Err(Error::dimension(MODULE, "covariance shapes differ"));
    }
    Ok(linalg::entrywise_l1(&(sigma_hat - sigma_true)))
}

/// `|SD(Ŵ) − SD(W*)|` of the out-of-sample portfolio returns.
pub fn risk_error(w_hat: &DVector<f64>, test: &DMatrix<f64>, w_star: &DVector<f64>) -> Result<f64> {
    let a = portfolio::realized_stats(w_hat, test)?;
    let b = portfolio::realized_stats(w_star, test)?;
    Ok((a.sd - b.sd).abs())
}

/// `|SR(Ŵ) − SR(W*)|` of the out-of-sample portfolio returns.
pub fn sr_error(w_hat: &DVector<f64>, test: &DMatrix<f64>, w_star: &DVector<f64>) -> Result<f64> {
    let a = portfolio::realized_stats(w_hat, test)?;
    let b = portfolio::realized_stats(w_star, test)?;
    Ok((a.sr - b.sr).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Individual,
    Joint,
    Pooled,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Individual, Strategy::Joint, Strategy::Pooled];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Individual => "individual",
            Strategy::Joint => "joint",
            Strategy::Pooled => "pooled",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(Strategy::Individual),
            "joint" => Ok(Strategy::Joint),
            "pooled" | "pool" => Ok(Strategy::Pooled),
            other => Err(Error::validation(MODULE, format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Measures {
    pub cme: f64,
    pub we: f64,
    pub risk_e: f64,
    pub sre: f64,
}

impl Measures {
    fn add(&mut self, o: &Measures) {
        self.cme += o.cme;
        self.we += o.we;
        self.risk_e += o.risk_e;
        self.sre += o.sre;
    }

    fn scale(&mut self, s: f64) {
        self.cme *= s;
        self.we *= s;
        self.risk_e *= s;
        self.sre *= s;
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "CME" => Some(self.cme),
            "WE" => Some(self.we),
            "RiskE" => Some(self.risk_e),
            "SRE" => Some(self.sre),
            _ => None,
        }
    }
}

pub const MEASURE_NAMES: [&str; 4] = ["CME", "WE", "RiskE", "SRE"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaChoice {
    /// Cross-validate over `grid` (default grid when `None`).
    CrossValidated { folds: usize, grid: Option<Vec<f64>> },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub lambda: LambdaChoice,
    pub c_tau: f64,
    pub rule: ThresholdRule,
    /// Factors in the pooled fit (defaults to the per-sector count).
    pub pooled_k: Option<usize>,
    /// When an estimate is indefinite at `c_tau`, raise the constant in
    /// these steps until it is positive definite; `None` fails instead.
    pub raise_step: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub execution: Execution,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            lambda: LambdaChoice::CrossValidated { folds: 5, grid: None },
            c_tau: 0.5,
            rule: ThresholdRule::Soft,
            pooled_k: None,
            raise_step: Some(0.1),
            max_iter: 50,
            tol: 1e-8,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub replacements: usize,
    /// Mean population heterogeneity index over replications.
    pub heterogeneity: f64,
    pub measures: BTreeMap<Strategy, Measures>,
    /// Mean λ used by the joint strategy.
    pub mean_lambda: Option<f64>,
    pub replications: usize,
    pub failures: usize,
    /// Sector estimates whose thresholding constant had to be raised.
    pub raised: BTreeMap<Strategy, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub scenarios: Vec<ScenarioResult>,
}

struct ReplicationOutcome {
    heterogeneity: f64,
    measures: BTreeMap<Strategy, Measures>,
    raised: BTreeMap<Strategy, usize>,
    lambda: Option<f64>,
}

/// Stream seed for one replication.
pub fn replication_seed(seed: u64, replication: usize) -> u64 {
    seed.wrapping_add(replication as u64)
}

fn sector_measures(
    sigma_hat: &DMatrix<f64>,
    sector: &SectorData,
    test: &DMatrix<f64>,
) -> Result<Measures> {
    let w_hat = portfolio::mvp_weights(sigma_hat)?;
    let w_star = portfolio::mvp_weights(&sector.true_cov)?;
    Ok(Measures {
        cme: cov_error(sigma_hat, &sector.true_cov)?,
        we: (&w_hat - &w_star).iter().map(|x| x.abs()).sum(),
        risk_e: risk_error(&w_hat, test, &w_star)?,
        sre: sr_error(&w_hat, test, &w_star)?,
    })
}

fn mean_measures(per_sector: Vec<Measures>) -> Measures {
    let mut acc = Measures::default();
    let n = per_sector.len() as f64;
    for m in &per_sector {
        acc.add(m);
    }
    acc.scale(1.0 / n);
    acc
}

/// Return covariance of one sector and whether `c_tau` had to be raised.
fn sector_cov(
    loadings: &DMatrix<f64>,
    factor_cov: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    rate: f64,
    c_tau: f64,
    rule: ThresholdRule,
    raise_step: Option<f64>,
) -> Result<(DMatrix<f64>, bool)> {
    match raise_step {
        Some(step) => {
            let (sigma, e) =
                covariance::factor_return_cov_definite(loadings, factor_cov, residuals, c_tau, rule, rate, step)?;
            Ok((sigma, e.c_tau.is_some_and(|c| c > c_tau)))
        }
        None => {
            let (sigma, _) = covariance::factor_return_cov_with_rate(loadings, factor_cov, residuals, c_tau, rule, rate)?;
            Ok((sigma, false))
        }
    }
}

fn fits_measures(
    fits: &[FactorFit],
    data: &ScenarioData,
    tests: &[DMatrix<f64>],
    options: &StudyOptions,
) -> Result<(Measures, usize)> {
    let mut raised = 0;
    let per = fits
        .iter()
        .zip(&data.sectors)
        .zip(tests)
        .map(|((fit, sector), test)| {
            let rate = covariance::threshold_rate(fit.residuals.nrows(), fit.residuals.ncols());
            let (sigma, up) = sector_cov(
                &fit.loadings,
                &fit.factor_cov(),
                &fit.residuals,
                rate,
                options.c_tau,
                options.rule,
                options.raise_step,
            )?;
            raised += up as usize;
            sector_measures(&sigma, sector, test)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mean_measures(per), raised))
}

/// Pooled strategy: one PCA on the stacked training panel; each sector's
/// covariance is the corresponding diagonal block of the pooled estimate
/// (thresholding rate set by the pooled dimension). Also returns how many
/// blocks needed a raised constant.
pub fn pooled_sector_covariances(
    train: &[DMatrix<f64>],
    k: usize,
    c_tau: f64,
    rule: ThresholdRule,
    raise_step: Option<f64>,
) -> Result<(Vec<DMatrix<f64>>, usize)> {
    let total: usize = train.iter().map(|r| r.nrows()).sum();
    let t = train[0].ncols();
    let mut stacked = DMatrix::zeros(total, t);
    let mut offset = 0;
    for r in train {
        stacked.rows_mut(offset, r.nrows()).copy_from(r);
        offset += r.nrows();
    }
    let fit = ppfm::pca_single(&stacked, k)?;
    let factor_cov = fit.factor_cov();
    let rate = covariance::threshold_rate(total, t);
    let mut out = Vec::with_capacity(train.len());
    let mut raised = 0;
    let mut offset = 0;
    for r in train {
        let p = r.nrows();
        let b = fit.loadings.rows(offset, p).clone_owned();
        let e = fit.residuals.rows(offset, p).clone_owned();
        let (sigma, up) = sector_cov(&b, &factor_cov, &e, rate, c_tau, rule, raise_step)?;
        raised += up as usize;
        out.push(sigma);
        offset += p;
    }
    Ok((out, raised))
}

struct Replication<'a> {
    config: &'a DGPConfig,
    options: &'a StudyOptions,
    seed: u64,
    data: ScenarioData,
    train: Vec<DMatrix<f64>>,
    tests: Vec<DMatrix<f64>>,
    problem: Option<PpfmProblem>,
}

impl Replication<'_> {
    fn individual(&self) -> Result<(Measures, usize)> {
        let problem = self.problem.as_ref().expect("problem built");
        fits_measures(problem.initial_fits(), &self.data, &self.tests, self.options)
    }

    fn joint(&self) -> Result<(Measures, usize, f64)> {
        let options = self.options;
        let problem = self.problem.as_ref().expect("problem built");
        let ks = vec![self.config.factors; self.config.sectors];
        let candidates = match &options.lambda {
            LambdaChoice::Fixed(l) => vec![*l],
            LambdaChoice::CrossValidated { folds, grid } => {
                let grid = grid.clone().unwrap_or_else(|| tuning::default_lambda_grid(&self.train));
                let cv = tuning::select_lambda(
                    &self.train,
                    &ks,
                    &grid,
                    &LambdaCvOptions {
                        folds: *folds,
                        seed: self.seed ^ 0xc0ff_ee00,
                        c_tau: vec![options.c_tau],
                        rule: options.rule,
                        max_iter: options.max_iter,
                        tol: options.tol,
                        execution: Execution::Sequential,
                        ..LambdaCvOptions::default()
                    },
                )?;
                cv.ranked()
            }
        };
        // walk down the CV ranking when the full-sample estimate at the
        // chosen λ is indefinite
        for (i, &lambda) in candidates.iter().enumerate() {
            let fit = problem.fit(lambda, options.max_iter, options.tol)?;
            match fits_measures(&fit.fits, &self.data, &self.tests, options) {
                Err(Error::NotPositiveDefinite { .. }) if i + 1 < candidates.len() => continue,
                r => {
                    let (m, raised) = r?;
                    return Ok((m, raised, lambda));
                }
            }
        }
        Err(Error::validation(MODULE, "empty λ grid"))
    }

    fn pooled(&self) -> Result<(Measures, usize)> {
        let k = self.options.pooled_k.unwrap_or(self.config.factors);
        let (sigmas, raised) =
            pooled_sector_covariances(&self.train, k, self.options.c_tau, self.options.rule, self.options.raise_step)?;
        let per = sigmas
            .iter()
            .zip(&self.data.sectors)
            .zip(&self.tests)
            .map(|((s, sector), test)| sector_measures(s, sector, test))
            .collect::<Result<Vec<_>>>()?;
        Ok((mean_measures(per), raised))
    }
}

fn run_replication(
    config: &DGPConfig,
    scenario: ScenarioConfig,
    strategies: &[Strategy],
    options: &StudyOptions,
    replication: usize,
) -> Result<ReplicationOutcome> {
    let seed = replication_seed(config.seed, replication);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = build_scenario(config, scenario, &mut rng)?;
    let train = data.train_panels(config.t_train);
    let tests = data.test_panels(config.t_train);
    let needs_problem = strategies.iter().any(|s| matches!(s, Strategy::Individual | Strategy::Joint));
    let problem = if needs_problem {
        Some(PpfmProblem::new(train.clone(), &vec![config.factors; config.sectors])?)
    } else {
        None
    };
    let rep = Replication {
        config,
        options,
        seed,
        data,
        train,
        tests,
        problem,
    };

    let mut measures = BTreeMap::new();
    let mut raised = BTreeMap::new();
    let mut lambda = None;
    for &strategy in strategies {
        let (m, up) = match strategy {
            Strategy::Individual => rep.individual(),
            Strategy::Joint => rep.joint().map(|(m, up, l)| {
                lambda = Some(l);
                (m, up)
            }),
            Strategy::Pooled => rep.pooled(),
        }
        .map_err(|e| Error::numerical(MODULE, format!("{} strategy: {e}", strategy.name())))?;
        measures.insert(strategy, m);
        raised.insert(strategy, up);
    }
    Ok(ReplicationOutcome {
        heterogeneity: rep.data.heterogeneity,
        measures,
        raised,
        lambda,
    })
}

/// Run every scenario × replication and average the measures over sectors
/// and successful replications.
pub fn run_study(
    config: &DGPConfig,
    scenarios: &[ScenarioConfig],
    strategies: &[Strategy],
    options: &StudyOptions,
) -> Result<StudyResult> {
    config.validate()?;
    let reps = config.replications;
    if reps == 0 {
        return Err(Error::validation(MODULE, "need at least one replication"));
    }
    let max = config.max_replacements()?;
    if let Some(s) = scenarios.iter().find(|s| s.replacements > max) {
        return Err(Error::validation(MODULE, format!("scenario {} out of range 0..={max}", s.replacements)));
    }
    let outcomes = par::map_indexed(options.execution, scenarios.len() * reps, |cell| {
        run_replication(config, scenarios[cell / reps], strategies, options, cell % reps)
    });

    let mut results = Vec::with_capacity(scenarios.len());
    for (s, scenario) in scenarios.iter().enumerate() {
        let mut het = 0.0;
        let mut lambda_sum = 0.0;
        let mut lambda_n = 0usize;
        let mut sums: BTreeMap<Strategy, Measures> = BTreeMap::new();
        let mut raised: BTreeMap<Strategy, usize> = BTreeMap::new();
        let mut ok = 0usize;
        let mut failures = 0usize;
        for outcome in &outcomes[s * reps..(s + 1) * reps] {
            match outcome {
                Ok(o) => {
                    ok += 1;
                    het += o.heterogeneity;
                    if let Some(l) = o.lambda {
                        lambda_sum += l;
                        lambda_n += 1;
                    }
                    for (k, m) in &o.measures {
                        sums.entry(*k).or_default().add(m);
                    }
                    for (k, n) in &o.raised {
                        *raised.entry(*k).or_default() += n;
                    }
                }
                Err(e) => {
                    failures += 1;
                    log::warn!("scenario {}: replication failed: {e}", scenario.replacements);
                }
            }
        }
        if ok == 0 {
            return Err(Error::numerical(
                MODULE,
                format!("every replication of scenario {} failed", scenario.replacements),
            ));
        }
        for m in sums.values_mut() {
            m.scale(1.0 / ok as f64);
        }
        if failures > 0 {
            log::warn!("scenario {}: {failures} of {reps} replications excluded", scenario.replacements);
        }
        results.push(ScenarioResult {
            replacements: scenario.replacements,
            heterogeneity: het / ok as f64,
            measures: sums,
            mean_lambda: (lambda_n > 0).then(|| lambda_sum / lambda_n as f64),
            replications: ok,
            failures,
            raised,
        });
    }
    Ok(StudyResult { scenarios: results })
}

impl StudyResult {
    /// Table of measures: `scenario,measure,individual,joint,pooled`.
    pub fn write_table<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "measure", "individual", "joint", "pooled"])?;
        for s in &self.scenarios {
            for name in MEASURE_NAMES {
                let mut rec = vec![s.replacements.to_string(), name.to_string()];
                for strat in Strategy::ALL {
                    rec.push(
                        s.measures
                            .get(&strat)
                            .and_then(|m| m.get(name))
                            .map(|v| format!("{v:.10e}"))
                            .unwrap_or_default(),
                    );
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()
    }

    /// Heterogeneity against individual-minus-joint differences.
    pub fn write_figure<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario", "heterogeneity", "diff_CME", "diff_WE", "diff_RiskE", "diff_SRE"])?;
        for s in &self.scenarios {
            let (Some(ind), Some(joint)) = (
                s.measures.get(&Strategy::Individual),
                s.measures.get(&Strategy::Joint),
            ) else {
                continue;
            };
            let mut rec = vec![s.replacements.to_string(), format!("{:.10e}", s.heterogeneity)];
            for name in MEASURE_NAMES {
                rec.push(format!("{:.10e}", ind.get(name).unwrap() - joint.get(name).unwrap()));
            }
            w.write_record(&rec)?;
        }
        w.flush()
    }
}

/// One sector of a synthetic market; sectors in the same `group` share
/// their factor series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSector {
    pub code: String,
    pub assets: usize,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub sectors: Vec<MarketSector>,
    pub periods: usize,
    pub start: NaiveDate,
    /// Probability that a return cell is missing.
    pub missing_rate: f64,
    /// Mean per-period risk-free rate.
    pub rf_mean: f64,
    pub seed: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        let sector = |code: &str, assets, group| MarketSector {
            code: code.to_string(),
            assets,
            group,
        };
        Self {
            sectors: vec![sector("28", 12, 0), sector("35", 10, 0), sector("36", 8, 1)],
            periods: 200,
            start: NaiveDate::from_ymd_opt(2013, 1, 2).expect("valid date"),
            missing_rate: 0.002,
            rf_mean: 1e-4,
            seed: 2013,
        }
    }
}

/// Raw (not excess) returns with their sector map and risk-free series.
#[derive(Debug, Clone)]
pub struct Market {
    pub returns: ReturnPanel,
    pub sectors: SectorMap,
    pub risk_free: RiskFreeSeries,
}

fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    use chrono::Datelike;
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if d.weekday().number_from_monday() <= 5 {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

/// Generate a synthetic multi-sector market from the calibrated factor
/// model, on business days from `start`.
pub fn synthetic_market(config: &MarketConfig) -> Result<Market> {
    if config.sectors.is_empty() || config.periods < 2 {
        return Err(Error::validation(MODULE, "need at least one sector and two periods"));
    }
    if !(0.0..1.0).contains(&config.missing_rate) {
        return Err(Error::validation(MODULE, "missing rate must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let t = config.periods;
    let groups = config.sectors.iter().map(|s| s.group).max().unwrap_or(0) + 1;
    let factors: Vec<DMatrix<f64>> = (0..groups)
        .map(|_| simulate_factors(2, t, AR_COEF_SD, &mut rng))
        .collect();
    let total: usize = config.sectors.iter().map(|s| s.assets).sum();
    let mut values = DMatrix::zeros(total, t);
    let mut assets = Vec::with_capacity(total);
    let mut map = SectorMap::new();
    let mut row = 0;
    for s in &config.sectors {
        let cov = default_error_cov(s.assets, &mut rng);
        let draw = simulate_sector(&factors[s.group], &LOADING_MEANS, &LOADING_SDS, &cov, &mut rng)?;
        values.rows_mut(row, s.assets).copy_from(&draw.returns);
        for i in 0..s.assets {
            let id = format!("{}_{:03}", s.code, i);
            map.insert(id.clone(), s.code.clone())?;
            assets.push(id);
        }
        row += s.assets;
    }
    if config.missing_rate > 0.0 {
        for j in 0..t {
            for i in 0..total {
                if rng.gen::<f64>() < config.missing_rate {
                    values[(i, j)] = f64::NAN;
                }
            }
        }
    }
    let times = business_days(config.start, t);
    let risk_free = times
        .iter()
        .map(|d| (*d, config.rf_mean * rng.gen_range(0.5..1.5)))
        .collect::<RiskFreeSeries>();
    for (j, d) in times.iter().enumerate() {
        let rf = risk_free.get(d).expect("rate for every date");
        for i in 0..total {
            values[(i, j)] += rf;
        }
    }
    Ok(Market {
        returns: ReturnPanel::new(assets, times, values, None)?,
        sectors: map,
        risk_free,
    })
}
