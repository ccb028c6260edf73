//! Minimum-variance portfolios and their in- and out-of-sample statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

const MODULE: &str = "portfolio";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioResult {
    pub weights: Vec<f64>,
    /// Estimated per-period variance `Wᵀ Σ W`.
    pub est_risk: f64,
    pub est_sr: Option<f64>,
    pub realized_mean: Option<f64>,
    pub realized_sd: Option<f64>,
    pub realized_sr: Option<f64>,
}

impl PortfolioResult {
    /// Minimum-variance portfolio for `sigma`, with the estimated Sharpe
    /// ratio when expected excess returns are given.
    pub fn minimum_variance(sigma: &DMatrix<f64>, mu: Option<&DVector<f64>>) -> Result<Self> {
        let solver = MvpSolver::new(sigma)?;
        let est_sr = mu.map(|m| solver.sharpe(m)).transpose()?;
        Ok(Self {
            weights: solver.weights().iter().copied().collect(),
            est_risk: solver.min_risk(),
            est_sr,
            realized_mean: None,
            realized_sd: None,
            realized_sr: None,
        })
    }

    /// Attach out-of-sample statistics on `test` (`p × T_test`).
    pub fn with_realized(mut self, test: &DMatrix<f64>) -> Result<Self> {
        let w = DVector::from_column_slice(&self.weights);
        let stats = realized_stats(&w, test)?;
        self.realized_mean = Some(stats.mean);
        self.realized_sd = Some(stats.sd);
        self.realized_sr = Some(stats.sr);
        Ok(self)
    }
}

/// One Cholesky factorization reused for `Σ⁻¹1` and `Σ⁻¹μ`.
struct MvpSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    sigma_inv_ones: DVector<f64>,
    ones_sigma_inv_ones: f64,
}

impl MvpSolver {
    fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let chol = linalg::cholesky(MODULE, sigma)?;
        let ones = DVector::from_element(sigma.nrows(), 1.0);
        let sigma_inv_ones = chol.solve(&ones);
        let ones_sigma_inv_ones = sigma_inv_ones.sum();
        if !(ones_sigma_inv_ones > 0.0) || !ones_sigma_inv_ones.is_finite() {
            return Err(Error::NotPositiveDefinite {
                module: MODULE,
                min_eigenvalue: linalg::eigenvalue_range(sigma).0,
            });
        }
        Ok(Self {
            chol,
            sigma_inv_ones,
            ones_sigma_inv_ones,
        })
    }

    fn weights(&self) -> DVector<f64> {
        &self.sigma_inv_ones / self.ones_sigma_inv_ones
    }

    fn min_risk(&self) -> f64 {
        1.0 / self.ones_sigma_inv_ones
    }

    fn sharpe(&self, mu: &DVector<f64>) -> Result<f64> {
        if mu.len() != self.sigma_inv_ones.len() {
            return Err(Error::dimension(
                MODULE,
                format!("mu has {} entries, covariance is {}x{}", mu.len(), self.sigma_inv_ones.len(), self.sigma_inv_ones.len()),
            ));
        }
        let sigma_inv_mu = self.chol.solve(mu);
        Ok(sigma_inv_mu.sum() / self.ones_sigma_inv_ones.sqrt())
    }
}

/// `W* = Σ⁻¹1 / (1ᵀΣ⁻¹1)`.
pub fn mvp_weights(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(MvpSolver::new(sigma)?.weights())
}

/// `1 / (1ᵀΣ⁻¹1)`, the variance of the minimum-variance portfolio.
pub fn min_risk(sigma: &DMatrix<f64>) -> Result<f64> {
    Ok(MvpSolver::new(sigma)?.min_risk())
}

/// `1ᵀΣ⁻¹μ / √(1ᵀΣ⁻¹1)`.
pub fn est_sharpe(sigma: &DMatrix<f64>, mu: &DVector<f64>) -> Result<f64> {
    MvpSolver::new(sigma)?.sharpe(mu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizedStats {
    pub mean: f64,
    /// Sample standard deviation with the `n − 1` denominator.
    pub sd: f64,
    pub sr: f64,
}

/// Mean, standard deviation and Sharpe ratio of a return series.
pub fn series_stats(returns: &[f64]) -> Result<RealizedStats> {
    let n = returns.len();
    if n < 2 {
        return Err(Error::validation(MODULE, "need at least two returns"));
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::numerical(MODULE, "portfolio returns have zero standard deviation"));
    }
    Ok(RealizedStats {
        mean,
        sd,
        sr: mean / sd,
    })
}

/// Out-of-sample statistics of the portfolio returns `Wᵀ r_t`.
pub fn realized_stats(weights: &DVector<f64>, test: &DMatrix<f64>) -> Result<RealizedStats> {
    if weights.len() != test.nrows() {
        return Err(Error::dimension(
            MODULE,
            format!("{} weights for a {}-asset test panel", weights.len(), test.nrows()),
        ));
    }
    let series: Vec<f64> = (test.transpose() * weights).iter().copied().collect();
    series_stats(&series)
}
