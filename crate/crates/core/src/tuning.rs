//! Cross-validated choice of the projection penalty λ and of the
//! thresholding constant C_τ.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{self, ThresholdRule};
use crate::linalg;
use crate::par::{self, Execution};
use crate::portfolio;
use crate::ppfm::{FactorFit, PpfmProblem};
use crate::{Error, Result};

const MODULE: &str = "tuning";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    /// Periods are shuffled before being dealt into folds.
    #[default]
    Random,
    /// Folds are consecutive blocks of periods.
    Contiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCvOptions {
    pub folds: usize,
    pub seed: u64,
    pub scheme: FoldScheme,
    /// Score λ on this sector only instead of averaging over all sectors.
    pub target: Option<usize>,
    /// Threshold constant per sector (a single value is used for every sector).
    pub c_tau: Vec<f64>,
    pub rule: ThresholdRule,
    pub max_iter: usize,
    pub tol: f64,
    pub execution: Execution,
}

impl Default for LambdaCvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            scheme: FoldScheme::Random,
            target: None,
            c_tau: vec![0.5],
            rule: ThresholdRule::Soft,
            max_iter: 50,
            tol: 1e-8,
            execution: Execution::Parallel,
        }
    }
}

impl LambdaCvOptions {
    fn c_tau_for(&self, m: usize) -> f64 {
        if self.c_tau.len() == 1 {
            self.c_tau[0]
        } else {
            self.c_tau[m]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCVResult {
    pub grid: Vec<f64>,
    pub avg_risk: Vec<f64>,
    pub chosen: f64,
    /// `per_sector_risk[m][g]`: fold-averaged validation risk of sector `m`
    /// at grid point `g`.
    pub per_sector_risk: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtauCVResult {
    pub grid: Vec<f64>,
    pub avg_frobenius_loss: Vec<f64>,
    pub chosen: f64,
    pub c_min: f64,
    /// Whether the estimator was positive definite in every split.
    pub positive_definite: Vec<bool>,
}

/// Scale of the λ grid: mean over sectors of `mean(diag(RᵀR/T))`.
pub fn lambda_scale(panels: &[DMatrix<f64>]) -> f64 {
    let total: f64 = panels
        .iter()
        .map(|r| {
            let t = r.ncols() as f64;
            linalg::frobenius_sq(r) / (t * t)
        })
        .sum();
    total / panels.len() as f64
}

/// `{0} ∪ {10^j · s : j = −2..=3}`.
pub fn default_lambda_grid(panels: &[DMatrix<f64>]) -> Vec<f64> {
    let s = lambda_scale(panels);
    std::iter::once(0.0)
        .chain((-2..=3).map(|j| 10f64.powi(j) * s))
        .collect()
}

/// `0.0, 0.1, ..., 3.0`.
pub fn default_ctau_grid() -> Vec<f64> {
    (0..=30).map(|i| i as f64 / 10.0).collect()
}

/// Deal `0..t` into `k` folds; each fold's indices are returned sorted.
pub fn assign_folds(t: usize, k: usize, seed: u64, scheme: FoldScheme) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..t).collect();
    let mut folds = vec![Vec::new(); k];
    match scheme {
        FoldScheme::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            for (pos, idx) in order.into_iter().enumerate() {
                folds[pos % k].push(idx);
            }
        }
        FoldScheme::Contiguous => {
            for idx in order {
                folds[idx * k / t].push(idx);
            }
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Minimum-variance weights from one sector fit.
pub fn fit_weights(fit: &FactorFit, c_tau: f64, rule: ThresholdRule) -> Result<DVector<f64>> {
    let (sigma, _) = covariance::factor_return_cov(fit, c_tau, rule)?;
    portfolio::mvp_weights(&sigma)
}

/// Sample variance of `wᵀ r_t` over the columns of `test`.
pub fn validation_risk(weights: &DVector<f64>, test: &DMatrix<f64>) -> f64 {
    let series = test.transpose() * weights;
    let n = series.len() as f64;
    let mean = series.sum() / n;
    series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

fn complement(t: usize, held_out: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; t];
    for &i in held_out {
        mask[i] = false;
    }
    (0..t).filter(|&i| mask[i]).collect()
}

/// k-fold cross-validation of λ by average out-of-sample portfolio variance.
pub fn select_lambda(
    panels: &[DMatrix<f64>],
    ks: &[usize],
    grid: &[f64],
    options: &LambdaCvOptions,
) -> Result<LambdaCVResult> {
    let m_count = panels.len();
    if m_count == 0 {
        return Err(Error::validation(MODULE, "no sector panels supplied"));
    }
    if ks.len() != m_count {
        return Err(Error::dimension(MODULE, format!("{m_count} panels but {} factor counts", ks.len())));
    }
    if options.folds < 2 {
        return Err(Error::validation(MODULE, "need at least two folds"));
    }
    if grid.is_empty() || grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::validation(MODULE, "λ grid must be non-empty, finite and nonnegative"));
    }
    if options.c_tau.len() != 1 && options.c_tau.len() != m_count {
        return Err(Error::dimension(MODULE, "c_tau needs one value or one per sector"));
    }
    if let Some(target) = options.target {
        if target >= m_count {
            return Err(Error::validation(MODULE, format!("target sector {target} out of range")));
        }
    }
    let t = panels[0].ncols();
    if panels.iter().any(|r| r.ncols() != t) {
        return Err(Error::dimension(MODULE, "panels do not share the same periods"));
    }
    let folds = assign_folds(t, options.folds, options.seed, options.scheme);
    let k_max = ks.iter().copied().max().unwrap_or(0);
    for f in &folds {
        let t_train = t - f.len();
        if f.len() < 2 || t_train < k_max + 2 {
            return Err(Error::validation(
                MODULE,
                format!(
                    "fold too small for estimation: {} held-out and {t_train} training periods with K = {k_max}",
                    f.len()
                ),
            ));
        }
    }

    let problems: Vec<Result<(PpfmProblem, Vec<DMatrix<f64>>)>> =
        par::map_indexed(options.execution, folds.len(), |i| {
            let train_idx = complement(t, &folds[i]);
            let train: Vec<DMatrix<f64>> =
                panels.iter().map(|r| linalg::select_columns(r, &train_idx)).collect();
            let test: Vec<DMatrix<f64>> =
                panels.iter().map(|r| linalg::select_columns(r, &folds[i])).collect();
            Ok((PpfmProblem::new(train, ks)?, test))
        });
    let problems = problems.into_iter().collect::<Result<Vec<_>>>()?;

    let cells = folds.len() * grid.len();
    let risks: Vec<Result<Vec<f64>>> = par::map_indexed(options.execution, cells, |c| {
        let (fold, g) = (c / grid.len(), c % grid.len());
        let (problem, test) = &problems[fold];
        let fit = problem.fit(grid[g], options.max_iter, options.tol)?;
        fit.fits
            .iter()
            .enumerate()
            .map(|(m, f)| {
                match fit_weights(f, options.c_tau_for(m), options.rule) {
                    Ok(w) => Ok(validation_risk(&w, &test[m])),
                    // an indefinite estimate rules this λ out
                    Err(Error::NotPositiveDefinite { .. }) => Ok(f64::INFINITY),
                    Err(e) => Err(e),
                }
            })
            .collect()
    });
    let risks = risks.into_iter().collect::<Result<Vec<_>>>()?;

    let kf = folds.len() as f64;
    let per_sector_risk: Vec<Vec<f64>> = (0..m_count)
        .map(|m| {
            (0..grid.len())
                .map(|g| (0..folds.len()).map(|f| risks[f * grid.len() + g][m]).sum::<f64>() / kf)
                .collect()
        })
        .collect();
    let avg_risk: Vec<f64> = (0..grid.len())
        .map(|g| match options.target {
            Some(target) => per_sector_risk[target][g],
            None => per_sector_risk.iter().map(|row| row[g]).sum::<f64>() / m_count as f64,
        })
        .collect();
    let mut best = 0;
    for g in 1..grid.len() {
        if avg_risk[g] < avg_risk[best] {
            best = g;
        }
    }
    if !avg_risk[best].is_finite() {
        return Err(Error::numerical(
            MODULE,
            "every λ in the grid gives an indefinite covariance estimate",
        ));
    }
    Ok(LambdaCVResult {
        grid: grid.to_vec(),
        avg_risk,
        chosen: grid[best],
        per_sector_risk,
    })
}

impl LambdaCVResult {
    /// Grid values ordered by average risk, ties kept in grid order.
    pub fn ranked(&self) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..self.grid.len()).collect();
        idx.sort_by(|&a, &b| self.avg_risk[a].total_cmp(&self.avg_risk[b]));
        idx.into_iter()
            .filter(|&g| self.avg_risk[g].is_finite())
            .map(|g| self.grid[g])
            .collect()
    }
}

/// Repeated random-split choice of the thresholding constant.
pub fn select_ctau(
    residuals: &DMatrix<f64>,
    grid: &[f64],
    repeats: usize,
    seed: u64,
    rule: ThresholdRule,
) -> Result<CtauCVResult> {
    if repeats == 0 {
        return Err(Error::validation(MODULE, "need at least one split"));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] < 0.0 {
        return Err(Error::validation(MODULE, "C_τ grid must be non-empty, nonnegative and ascending"));
    }
    let (p, t) = residuals.shape();
    let t_a = 2 * t / 3;
    if t_a < 2 || t - t_a < 1 || p < 1 {
        return Err(Error::validation(MODULE, format!("{t} periods are too few to split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss = vec![0.0; grid.len()];
    let mut pd = vec![true; grid.len()];
    for _ in 0..repeats {
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        let mut a = order[..t_a].to_vec();
        let mut b = order[t_a..].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        let e_a = linalg::select_columns(residuals, &a);
        let e_b = linalg::select_columns(residuals, &b);
        let s_a = covariance::sample_cov(&e_a);
        let s_b = covariance::sample_cov(&e_b);
        let base = covariance::adaptive_thresholds(&e_a, 1.0);
        for (g, &c) in grid.iter().enumerate() {
            let est = covariance::threshold_cov(&s_a, &(&base * c), rule)?;
            pd[g] &= est.positive_definite;
            loss[g] += linalg::frobenius_sq(&(&est.matrix - &s_b));
        }
    }
    for l in &mut loss {
        *l /= repeats as f64;
    }
    let first_pd = pd.iter().position(|&x| x).ok_or_else(|| {
        Error::validation(
            MODULE,
            format!(
                "no C_τ up to {} gives a positive-definite estimate; extend the grid",
                grid[grid.len() - 1]
            ),
        )
    })?;
    let mut best = first_pd;
    for g in first_pd..grid.len() {
        if loss[g] < loss[best] {
            best = g;
        }
    }
    Ok(CtauCVResult {
        grid: grid.to_vec(),
        avg_frobenius_loss: loss,
        chosen: grid[best],
        c_min: grid[first_pd],
        positive_definite: pd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_periods() {
        for scheme in [FoldScheme::Random, FoldScheme::Contiguous] {
            let folds = assign_folds(23, 5, 7, scheme);
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            assert_eq!(all, (0..23).collect::<Vec<_>>());
            assert!(folds.iter().all(|f| f.len() >= 4));
        }
        assert_eq!(assign_folds(10, 2, 1, FoldScheme::Contiguous)[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(assign_folds(30, 3, 9, FoldScheme::Random), assign_folds(30, 3, 9, FoldScheme::Random));
    }

    #[test]
    fn default_grids() {
        let r = DMatrix::from_element(2, 4, 1.0);
        // ‖R‖² / T² = 8 / 16
        assert!((lambda_scale(&[r.clone()]) - 0.5).abs() < 1e-15);
        let g = default_lambda_grid(&[r]);
        assert_eq!(g.len(), 7);
        assert_eq!(g[0], 0.0);
        assert!((g[3] - 0.5).abs() < 1e-15);
        let c = default_ctau_grid();
        assert_eq!(c.len(), 31);
        assert_eq!(c[5], 0.5);
    }

    #[test]
    fn invalid_lambda_inputs() {
        let r = DMatrix::from_fn(4, 20, |i, t| ((i * 5 + t * 3) % 7) as f64 - 3.0);
        let opts = LambdaCvOptions {
            folds: 1,
            ..Default::default()
        };
        assert!(select_lambda(&[r.clone()], &[1], &[0.0], &opts).is_err());
        assert!(select_lambda(&[r], &[1], &[-1.0], &LambdaCvOptions::default()).is_err());
    }

    #[test]
    fn ctau_requires_sorted_grid() {
        let e = DMatrix::from_fn(3, 12, |i, t| ((i + t * 7) % 5) as f64);
        assert!(select_ctau(&e, &[0.5, 0.1], 2, 0, ThresholdRule::Soft).is_err());
        assert!(select_ctau(&e, &[0.1], 0, 0, ThresholdRule::Soft).is_err());
    }
}
