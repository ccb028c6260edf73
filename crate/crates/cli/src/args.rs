//! Command-line surface. The parsed commands double as the run
//! configuration recorded in every manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ppfm_core::simulation::Strategy;
use ppfm_core::tuning::FoldScheme;
use ppfm_core::ThresholdRule;
use serde::{Deserialize, Serialize};

/// Bumped whenever flags, defaults or output layouts change meaning.
pub const INTERFACE_VERSION: u32 = 1;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (interface 1)");

#[derive(Debug, Parser)]
#[command(
    name = "ppfm",
    version = VERSION,
    about = "Joint multi-sector factor models, sparse covariances and minimum-variance portfolios",
    subcommand_required = false,
    arg_required_else_help = true
)]
pub struct Cli {
    /// Worker threads (all cores by default). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Re-run the workflow recorded in a manifest and check that every
    /// output reproduces byte for byte.
    #[arg(long, value_name = "MANIFEST")]
    pub replay: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Command {
    /// Fit per-sector factor models (jointly for λ > 0) and build each
    /// sector's covariance and minimum-variance portfolio.
    Estimate(EstimateArgs),
    /// Cross-validate λ and the thresholding constant.
    Tune(TuneArgs),
    /// Run the Monte Carlo comparison of the three strategies.
    Simulate(SimulateArgs),
    /// Rolling-window out-of-sample backtest.
    Backtest(BacktestArgs),
    /// Write the bundled synthetic multi-sector market as CSV inputs.
    Fixture(FixtureArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Tune(_) => "tune",
            Command::Simulate(_) => "simulate",
            Command::Backtest(_) => "backtest",
            Command::Fixture(_) => "fixture",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Command::Estimate(a) => a.seed,
            Command::Tune(a) => a.seed,
            Command::Simulate(a) => a.seed,
            Command::Backtest(a) => a.seed,
            Command::Fixture(a) => a.seed,
        }
    }

    /// Files read by the workflow.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::Estimate(a) => a.input.paths(),
            Command::Tune(a) => a.input.paths(),
            Command::Backtest(a) => a.input.paths(),
            Command::Simulate(a) => a.error_cov.iter().cloned().collect(),
            Command::Fixture(_) => Vec::new(),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        match self {
            Command::Estimate(a) => a.out.join("manifest.json"),
            Command::Tune(a) => a.out.join("manifest.json"),
            Command::Fixture(a) => a.out.join("manifest.json"),
            Command::Simulate(a) => sibling(&a.out, "manifest.json"),
            Command::Backtest(a) => sibling(&a.out, "manifest.json"),
        }
    }
}

/// `dir/report.json` -> `dir/report.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct InputArgs {
    /// Return panel CSV (rows = assets, columns = dates).
    #[arg(long, value_name = "CSV")]
    pub returns: PathBuf,
    /// The return CSV has dates as rows and assets as columns.
    #[arg(long)]
    pub transposed: bool,
    /// Asset-to-sector map CSV (`asset,sector`).
    #[arg(long, value_name = "CSV")]
    pub sectors: PathBuf,
    /// Risk-free rate CSV (`date,rate`); returns are converted to excess returns.
    #[arg(long, value_name = "CSV")]
    pub rf: Option<PathBuf>,
    /// Sectors with fewer assets are dropped.
    #[arg(long, default_value_t = 3)]
    pub min_assets: usize,
}

impl InputArgs {
    fn paths(&self) -> Vec<PathBuf> {
        let mut v = vec![self.returns.clone(), self.sectors.clone()];
        v.extend(self.rf.iter().cloned());
        v
    }
}

/// A fixed λ or `cv` for cross-validation over the default grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LambdaArg {
    Value(f64),
    Cv,
}

impl FromStr for LambdaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("cv") {
            return Ok(LambdaArg::Cv);
        }
        let v: f64 = s.parse().map_err(|_| format!("expected a number or `cv`, got `{s}`"))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err("λ must be finite and nonnegative".into());
        }
        Ok(LambdaArg::Value(v))
    }
}

impl fmt::Display for LambdaArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaArg::Value(v) => write!(f, "{v}"),
            LambdaArg::Cv => f.write_str("cv"),
        }
    }
}

impl From<LambdaArg> for String {
    fn from(l: LambdaArg) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for LambdaArg {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Factors per sector; estimated by information criterion when absent.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub k_max: usize,
    /// Penalty weight, or `cv` to cross-validate it.
    #[arg(long, default_value = "0")]
    pub lambda: LambdaArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.5)]
    pub c_tau: f64,
    #[arg(long, default_value = "soft")]
    pub cov_rule: ThresholdRule,
    /// Subtract each asset's mean before fitting.
    #[arg(long)]
    pub demean: bool,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Write residual covariances as `i,j,value` triplets instead of JSON.
    #[arg(long)]
    pub triplets: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldArg {
    Random,
    Contiguous,
}

impl From<FoldArg> for FoldScheme {
    fn from(f: FoldArg) -> Self {
        match f {
            FoldArg::Random => FoldScheme::Random,
            FoldArg::Contiguous => FoldScheme::Contiguous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TuneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub k_max: usize,
    /// Comma-separated λ grid (scale-aware default when absent).
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, value_enum, default_value = "random")]
    pub fold_scheme: FoldArg,
    /// Score λ on this sector only.
    #[arg(long)]
    pub target: Option<String>,
    /// Comma-separated ascending C_τ grid.
    #[arg(long, value_delimiter = ',')]
    pub ctau_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 20)]
    pub ctau_repeats: usize,
    #[arg(long, default_value = "soft")]
    pub cov_rule: ThresholdRule,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Scenarios (replacement counts), comma-separated; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub scenario: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    /// Use 500 replications.
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of sectors.
    #[arg(long, default_value_t = 16)]
    pub num_sectors: usize,
    /// Assets per sector.
    #[arg(long, default_value_t = 50)]
    pub assets: usize,
    #[arg(long, default_value_t = 100)]
    pub t_train: usize,
    #[arg(long, default_value_t = 300)]
    pub t_test: usize,
    #[arg(long, value_delimiter = ',', default_value = "individual,joint,pooled")]
    pub strategy: Vec<Strategy>,
    /// Joint-strategy λ, or `cv`.
    #[arg(long, default_value = "cv")]
    pub lambda: LambdaArg,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.5)]
    pub c_tau: f64,
    #[arg(long, default_value = "soft")]
    pub cov_rule: ThresholdRule,
    /// Fail indefinite estimates instead of raising C_τ.
    #[arg(long)]
    pub no_raise: bool,
    /// Idiosyncratic covariance CSV shared by every sector.
    #[arg(long, value_name = "CSV")]
    pub error_cov: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Measures table CSV.
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Heterogeneity-versus-difference CSV (`<out>.figure.csv` by default).
    #[arg(long, value_name = "CSV")]
    pub figure: Option<PathBuf>,
    /// Full results as JSON.
    #[arg(long, value_name = "JSON")]
    pub json: Option<PathBuf>,
}

impl SimulateArgs {
    pub fn replications(&self) -> usize {
        if self.full {
            500
        } else {
            self.reps
        }
    }

    pub fn figure_path(&self) -> PathBuf {
        self.figure.clone().unwrap_or_else(|| sibling(&self.out, "figure.csv"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaModeArg {
    CvAll,
    CvTarget,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CtauModeArg {
    FirstNode,
    EveryRebalance,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BacktestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[arg(long, value_delimiter = ',', default_value = "individual,joint")]
    pub strategy: Vec<Strategy>,
    #[arg(long, default_value_t = 100)]
    pub window: usize,
    /// Holding period in trading days.
    #[arg(long, default_value_t = 21)]
    pub rebalance: usize,
    /// Target sector code; restricts the run to sectors correlated with it.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value_t = 0.85)]
    pub corr_threshold: f64,
    /// λ selection (cv-target when a target is given, cv-all otherwise).
    #[arg(long, value_enum)]
    pub lambda_mode: Option<LambdaModeArg>,
    /// λ for `--lambda-mode fixed`.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, value_enum, default_value = "first-node")]
    pub ctau_mode: CtauModeArg,
    /// C_τ for `--ctau-mode fixed`.
    #[arg(long)]
    pub c_tau: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub ctau_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 20)]
    pub ctau_repeats: usize,
    #[arg(long, default_value = "soft")]
    pub cov_rule: ThresholdRule,
    /// Factors per sector; estimated at the first node when absent.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub k_max: usize,
    #[arg(long, default_value_t = 2)]
    pub pooled_k: usize,
    /// First out-of-sample date.
    #[arg(long)]
    pub start: Option<NaiveDate>,
    /// Last out-of-sample date.
    #[arg(long)]
    pub end: Option<NaiveDate>,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON.
    #[arg(long, value_name = "JSON")]
    pub out: PathBuf,
    /// Per-sector performance CSV (`<out>.csv` by default).
    #[arg(long, value_name = "CSV")]
    pub csv: Option<PathBuf>,
}

impl BacktestArgs {
    pub fn csv_path(&self) -> PathBuf {
        self.csv.clone().unwrap_or_else(|| sibling(&self.out, "csv"))
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 2013)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub periods: usize,
    #[arg(long, default_value_t = 0.002)]
    pub missing_rate: f64,
    /// Output directory for `returns.csv`, `sectors.csv` and `rf.csv`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}
