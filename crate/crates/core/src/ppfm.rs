//! Per-sector PCA and the projection-penalized multi-sector factor model.
//!
//! Each sector `m` is fitted as `R_m ≈ B_m F_mᵀ` with `F_mᵀ F_m / T = I`.
//! The joint estimator minimizes the sum of per-sector reconstruction
//! errors plus `λ/T` times the squared Frobenius distances between every
//! pair of factor projection matrices `P_m = F_m F_mᵀ / T`. It is solved by
//! block-coordinate descent: with every other sector held fixed, the best
//! factors for sector `m` are `√T` times the leading eigenvectors of
//!
//! ```text
//! V_m = RᵀR/T − (λ/T) Σ_{j≠m} (I − 2 P_j)
//! ```
//!
//! where sectors earlier in the sweep already use their updated
//! projections.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, matrix_json, SortedEigen};
use crate::{Error, Result};

const MODULE: &str = "ppfm";

/// Factor-model fit for one sector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorFit {
    /// `p × K` loadings.
    #[serde(with = "matrix_json")]
    pub loadings: DMatrix<f64>,
    /// `T × K` factor series.
    #[serde(with = "matrix_json")]
    pub factors: DMatrix<f64>,
    /// `T × T` projection onto the factor column space.
    #[serde(with = "matrix_json")]
    pub projection: DMatrix<f64>,
    /// `p × T` residuals `R − B Fᵀ`.
    #[serde(with = "matrix_json")]
    pub residuals: DMatrix<f64>,
    pub num_factors: usize,
    pub sector_label: Option<String>,
}

impl FactorFit {
    /// Complete a fit from normalized factors: `B = R F / T`,
    /// `P = F Fᵀ / T` and `E = R − B Fᵀ`.
    pub fn from_factors(returns: &DMatrix<f64>, factors: DMatrix<f64>) -> Self {
        let t = returns.ncols() as f64;
        let loadings = returns * &factors / t;
        let projection = &factors * factors.transpose() / t;
        let residuals = returns - &loadings * factors.transpose();
        Self {
            num_factors: factors.ncols(),
            loadings,
            factors,
            projection,
            residuals,
            sector_label: None,
        }
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        self.sector_label = label;
        self
    }

    pub fn num_periods(&self) -> usize {
        self.factors.nrows()
    }

    /// Mean squared reconstruction error `T⁻¹ Σ_t ‖r_t − B F_t‖²`.
    pub fn reconstruction_loss(&self) -> f64 {
        linalg::frobenius_sq(&self.residuals) / self.num_periods() as f64
    }

    /// Second-moment matrix of the estimated factors, `FᵀF / T`.
    pub fn factor_cov(&self) -> DMatrix<f64> {
        self.factors.transpose() * &self.factors / self.num_periods() as f64
    }
}

/// Options for [`ppfm_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpfmConfig {
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop once the absolute change in joint loss falls below this.
    pub tol: f64,
    /// Subtract each asset's time-series mean before fitting.
    pub demean: bool,
}

impl Default for PpfmConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            max_iter: 50,
            tol: 1e-8,
            demean: false,
        }
    }
}

impl PpfmConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiFit {
    pub fits: Vec<FactorFit>,
    pub lambda: f64,
    /// Completed sweeps.
    pub iterations: usize,
    /// Joint loss after initialization followed by one value per sweep.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
}

/// `F (FᵀF)⁻¹ Fᵀ` for a full-column-rank `F`.
pub fn projection_matrix(factors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = factors.transpose() * factors;
    let leading = gram.diagonal().max().max(0.0);
    let chol = linalg::cholesky(MODULE, &gram).map_err(|_| Error::RankDeficient {
        module: MODULE,
        message: format!("factor matrix ({}x{}) lacks full column rank", factors.nrows(), factors.ncols()),
    })?;
    let l = chol.l();
    if l.diagonal().iter().any(|d| d * d <= 1e-12 * leading) {
        return Err(Error::RankDeficient {
            module: MODULE,
            message: format!("factor matrix ({}x{}) lacks full column rank", factors.nrows(), factors.ncols()),
        });
    }
    // P = F G⁻¹ Fᵀ with G = FᵀF
    let solved = chol.solve(&factors.transpose());
    Ok(factors * solved)
}

fn check_complete(r: &DMatrix<f64>) -> Result<()> {
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation(
            MODULE,
            "return matrix has missing or non-finite entries",
        ));
    }
    Ok(())
}

fn scaled_gram(r: &DMatrix<f64>) -> DMatrix<f64> {
    r.transpose() * r / r.ncols() as f64
}

fn factors_from_eigen(eig: &SortedEigen, k: usize, t: usize) -> DMatrix<f64> {
    eig.leading(k) * (t as f64).sqrt()
}

fn pca_from_gram(r: &DMatrix<f64>, gram: &DMatrix<f64>, k: usize) -> Result<FactorFit> {
    let (p, t) = r.shape();
    if k > p.min(t) {
        return Err(Error::validation(
            MODULE,
            format!("K = {k} exceeds min(p, T) = {}", p.min(t)),
        ));
    }
    let eig = SortedEigen::new(gram);
    if k > 0 {
        let top = eig.values[0];
        if !(top > 0.0) || eig.values[k - 1] <= 1e-12 * top {
            return Err(Error::RankDeficient {
                module: MODULE,
                message: format!("return matrix has fewer than K = {k} non-trivial components"),
            });
        }
    }
    Ok(FactorFit::from_factors(r, factors_from_eigen(&eig, k, t)))
}

/// Principal-component fit of one sector: `F = √T ×` the leading `K`
/// eigenvectors of `RᵀR` and `B = R F / T`.
pub fn pca_single(returns: &DMatrix<f64>, k: usize) -> Result<FactorFit> {
    check_complete(returns)?;
    if returns.ncols() == 0 || returns.nrows() == 0 {
        return Err(Error::validation(MODULE, "empty return matrix"));
    }
    pca_from_gram(returns, &scaled_gram(returns), k)
}

/// Subtract each row's mean.
pub fn demean_rows(r: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = r.clone();
    for mut row in out.row_iter_mut() {
        let m = row.mean();
        row.add_scalar_mut(-m);
    }
    out
}

/// Squared Frobenius distance between two projections.
fn projection_distance_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ_{m<m'} ‖P_m − P_m'‖²_F` over a list of projections.
pub fn projection_dispersion(projections: &[&DMatrix<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..projections.len() {
        for j in (i + 1)..projections.len() {
            total += projection_distance_sq(projections[i], projections[j]);
        }
    }
    total
}

/// [`projection_dispersion`] of fits with `P = F Fᵀ / T`, through the
/// `K × K` cross products: `‖P − P'‖² = ‖FᵀF‖² + ‖F'ᵀF'‖² − 2‖FᵀF'‖²` (all
/// over `T²`).
fn factor_dispersion(fits: &[FactorFit]) -> f64 {
    let grams: Vec<f64> = fits
        .iter()
        .map(|f| linalg::frobenius_sq(&(f.factors.transpose() * &f.factors)))
        .collect();
    let mut total = 0.0;
    for a in 0..fits.len() {
        for b in (a + 1)..fits.len() {
            let cross = fits[a].factors.transpose() * &fits[b].factors;
            total += grams[a] + grams[b] - 2.0 * linalg::frobenius_sq(&cross);
        }
    }
    let t = fits.first().map_or(1.0, |f| f.num_periods() as f64);
    (total / (t * t)).max(0.0)
}

/// Joint objective: summed reconstruction losses plus the projection
/// penalty `(λ/T) Σ_{m<m'} ‖P_m − P_m'‖²_F`.
pub fn joint_loss(panels: &[DMatrix<f64>], fits: &[FactorFit], lambda: f64) -> Result<f64> {
    if panels.len() != fits.len() {
        return Err(Error::dimension(
            MODULE,
            format!("{} panels but {} fits", panels.len(), fits.len()),
        ));
    }
    let Some(first) = panels.first() else {
        return Ok(0.0);
    };
    let t = first.ncols();
    let mut total = 0.0;
    for (m, (r, fit)) in panels.iter().zip(fits).enumerate() {
        if r.ncols() != t
            || fit.factors.nrows() != t
            || fit.loadings.nrows() != r.nrows()
            || fit.loadings.ncols() != fit.factors.ncols()
            || fit.projection.shape() != (t, t)
        {
            return Err(Error::dimension(
                MODULE,
                format!("sector {m}: fit dimensions do not match the {}x{} panel", r.nrows(), r.ncols()),
            ));
        }
        let mut resid = r.clone();
        resid.gemm(-1.0, &fit.loadings, &fit.factors.transpose(), 1.0);
        total += linalg::frobenius_sq(&resid) / t as f64;
    }
    if lambda != 0.0 {
        total += lambda / t as f64 * factor_dispersion(fits);
    }
    Ok(total)
}

/// A multi-sector problem with the per-sector Gram matrices and the PCA
/// starting point precomputed, so several penalties can be fitted from the
/// same initialization.
#[derive(Debug, Clone)]
pub struct PpfmProblem {
    panels: Vec<DMatrix<f64>>,
    ks: Vec<usize>,
    grams: Vec<DMatrix<f64>>,
    init: Vec<FactorFit>,
}

impl PpfmProblem {
    pub fn new(panels: Vec<DMatrix<f64>>, ks: &[usize]) -> Result<Self> {
        if panels.is_empty() {
            return Err(Error::validation(MODULE, "no sector panels supplied"));
        }
        if ks.len() != panels.len() {
            return Err(Error::dimension(
                MODULE,
                format!("{} panels but {} factor counts", panels.len(), ks.len()),
            ));
        }
        let t = panels[0].ncols();
        for (m, r) in panels.iter().enumerate() {
            if r.ncols() != t {
                return Err(Error::dimension(
                    MODULE,
                    format!("sector {m} has {} periods, sector 0 has {t}", r.ncols()),
                ));
            }
            check_complete(r)?;
            if r.nrows() == 0 {
                return Err(Error::validation(MODULE, format!("sector {m} has no assets")));
            }
        }
        let grams: Vec<DMatrix<f64>> = panels.iter().map(scaled_gram).collect();
        let init = panels
            .iter()
            .zip(&grams)
            .zip(ks)
            .map(|((r, g), &k)| pca_from_gram(r, g, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            panels,
            ks: ks.to_vec(),
            grams,
            init,
        })
    }

    pub fn panels(&self) -> &[DMatrix<f64>] {
        &self.panels
    }

    /// The per-sector PCA fits used as the starting point.
    pub fn initial_fits(&self) -> &[FactorFit] {
        &self.init
    }

    pub fn num_periods(&self) -> usize {
        self.panels[0].ncols()
    }

    pub fn fit(&self, lambda: f64, max_iter: usize, tol: f64) -> Result<MultiFit> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::validation(MODULE, format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let t = self.num_periods();
        let tf = t as f64;
        let m_count = self.panels.len();
        let mut fits = self.init.clone();
        let mut loss = joint_loss(&self.panels, &fits, lambda)?;
        if !loss.is_finite() {
            return Err(Error::numerical(MODULE, "initial joint loss is not finite"));
        }
        let mut trace = vec![loss];
        if lambda == 0.0 || m_count == 1 || max_iter == 0 {
            // every block update reproduces the PCA start exactly
            if max_iter > 0 {
                trace.push(loss);
            }
            return Ok(MultiFit {
                fits,
                lambda,
                iterations: max_iter.min(1),
                loss_trace: trace,
                converged: max_iter > 0,
            });
        }
        let mut iterations = 0;
        let mut converged = false;
        let mut total = DMatrix::<f64>::zeros(t, t);
        for f in &fits {
            total += &f.projection;
        }
        let shift = DMatrix::<f64>::identity(t, t) * ((m_count - 1) as f64 * lambda / tf);
        for sweep in 1..=max_iter {
            for m in 0..m_count {
                let others = &total - &fits[m].projection;
                // V = RᵀR/T − (λ/T) Σ_{j≠m} (I − 2 P_j)
                let v = &self.grams[m] + others * (2.0 * lambda / tf) - &shift;
                let start = &fits[m].factors / tf.sqrt();
                let factors = linalg::leading_eigenvectors(&v, self.ks[m], &start) * tf.sqrt();
                let fit = FactorFit::from_factors(&self.panels[m], factors);
                total += &fit.projection - &fits[m].projection;
                fits[m] = fit;
            }
            let next = joint_loss(&self.panels, &fits, lambda)?;
            if !next.is_finite() {
                return Err(Error::numerical(MODULE, format!("joint loss became non-finite in sweep {sweep}")));
            }
            trace.push(next);
            iterations = sweep;
            let delta = (next - loss).abs();
            loss = next;
            if delta < tol {
                converged = true;
                break;
            }
        }
        Ok(MultiFit {
            fits,
            lambda,
            iterations,
            loss_trace: trace,
            converged,
        })
    }
}

/// Fit the projection-penalized factor model to several sectors that share
/// the same periods.
pub fn ppfm_fit(panels: &[DMatrix<f64>], ks: &[usize], config: &PpfmConfig) -> Result<MultiFit> {
    let owned: Vec<DMatrix<f64>> = if config.demean {
        panels.iter().map(demean_rows).collect()
    } else {
        panels.to_vec()
    };
    PpfmProblem::new(owned, ks)?.fit(config.lambda, config.max_iter, config.tol)
}

/// Outcome of the information-criterion search for the number of factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCountEstimate {
    /// Argmin under `g₁ = (p+T)/(pT) · ln(pT/(p+T))`.
    pub k_ic1: usize,
    /// Argmin under `g₂ = (p+T)/(pT) · ln(min(p, T))`.
    pub k_ic2: usize,
    /// `⌊(k_ic1 + k_ic2) / 2⌋`.
    pub k: usize,
    /// `ln(‖R − R F Fᵀ/T‖²_F / (pT))` for K = 0..=K_max.
    pub log_residual: Vec<f64>,
}

pub fn ic_penalties(p: usize, t: usize) -> (f64, f64) {
    let (pf, tf) = (p as f64, t as f64);
    let scale = (pf + tf) / (pf * tf);
    (
        scale * (pf * tf / (pf + tf)).ln(),
        scale * (pf.min(tf)).ln(),
    )
}

/// Information-criterion estimate of the number of factors, with details.
pub fn estimate_num_factors_detailed(
    returns: &DMatrix<f64>,
    k_max: usize,
) -> Result<FactorCountEstimate> {
    check_complete(returns)?;
    let (p, t) = returns.shape();
    if p == 0 || t == 0 {
        return Err(Error::validation(MODULE, "empty return matrix"));
    }
    if k_max > p.min(t) {
        return Err(Error::validation(
            MODULE,
            format!("K_max = {k_max} exceeds min(p, T) = {}", p.min(t)),
        ));
    }
    let eig = SortedEigen::new(&scaled_gram(returns));
    let denom = (p * t) as f64;
    let log_residual: Vec<f64> = (0..=k_max)
        .map(|k| {
            let f = factors_from_eigen(&eig, k, t);
            let resid = returns - returns * &f * f.transpose() / t as f64;
            (linalg::frobenius_sq(&resid) / denom).max(1e-300).ln()
        })
        .collect();
    let (g1, g2) = ic_penalties(p, t);
    let argmin = |g: f64| {
        let mut best = 0;
        let mut best_val = f64::INFINITY;
        for (k, lr) in log_residual.iter().enumerate() {
            let v = lr + k as f64 * g;
            if v < best_val {
                best_val = v;
                best = k;
            }
        }
        best
    };
    let (k_ic1, k_ic2) = (argmin(g1), argmin(g2));
    Ok(FactorCountEstimate {
        k_ic1,
        k_ic2,
        k: (k_ic1 + k_ic2) / 2,
        log_residual,
    })
}

pub fn estimate_num_factors(returns: &DMatrix<f64>, k_max: usize) -> Result<usize> {
    Ok(estimate_num_factors_detailed(returns, k_max)?.k)
}

/// Relatedness of each sector: the sum of spectral-norm distances between
/// its projection and every other sector's.
pub fn relatedness(fits: &[FactorFit]) -> Result<Vec<f64>> {
    if fits.len() < 2 {
        return Err(Error::validation(MODULE, "relatedness needs at least two sectors"));
    }
    let t = fits[0].projection.nrows();
    if fits.iter().any(|f| f.projection.shape() != (t, t)) {
        return Err(Error::dimension(MODULE, "fits do not share the same number of periods"));
    }
    let m = fits.len();
    let mut phi = vec![0.0; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = linalg::spectral_norm_symmetric(&(&fits[i].projection - &fits[j].projection));
            phi[i] += d;
            phi[j] += d;
        }
    }
    Ok(phi)
}

/// Eigenvalues of `RᵀR / T`, descending.
pub fn gram_spectrum(returns: &DMatrix<f64>) -> DVector<f64> {
    SortedEigen::new(&scaled_gram(returns)).values
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn basis_projection() {
        let t = 5;
        let mut f = DMatrix::zeros(t, 1);
        f[(0, 0)] = (t as f64).sqrt();
        let p = projection_matrix(&f).unwrap();
        let mut expect = DMatrix::zeros(t, t);
        expect[(0, 0)] = 1.0;
        assert!((p - expect).abs().max() < 1e-15);
    }

    #[test]
    fn rank_deficient_projection_errors() {
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(projection_matrix(&f), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn pca_recovers_rank_one_panel() {
        let t = 8;
        let f = DVector::from_fn(t, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let b = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
        let r = &b * f.transpose();
        let fit = pca_single(&r, 1).unwrap();
        assert!((&fit.loadings * fit.factors.transpose() - &r).abs().max() < 1e-10);
        assert!(fit.residuals.abs().max() < 1e-10);
    }

    #[test]
    fn pca_factors_are_normalized() {
        let r = random(6, 12, 3);
        let fit = pca_single(&r, 3).unwrap();
        let ftf = fit.factor_cov();
        assert!((ftf - DMatrix::identity(3, 3)).abs().max() < 1e-10);
        assert!((fit.projection.trace() - 3.0).abs() < 1e-10);
    }

    #[test]
    fn too_many_factors_is_an_error() {
        let r = random(3, 10, 1);
        assert!(pca_single(&r, 4).is_err());
        let one = DMatrix::from_fn(3, 10, |i, t| (i + 1) as f64 * (t as f64 - 4.5));
        assert!(matches!(pca_single(&one, 2), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn empty_or_mismatched_inputs() {
        assert!(ppfm_fit(&[], &[], &PpfmConfig::default()).is_err());
        let a = random(4, 10, 1);
        let b = random(4, 9, 2);
        assert!(matches!(
            ppfm_fit(&[a, b], &[1, 1], &PpfmConfig::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn factor_count_floor_of_mean() {
        // K̂₁ = 2, K̂₂ = 3 gives 2
        assert_eq!((2 + 3) / 2, 2);
        let r = random(20, 30, 5);
        let est = estimate_num_factors_detailed(&r, 4).unwrap();
        assert_eq!(est.k, (est.k_ic1 + est.k_ic2) / 2);
        assert_eq!(est.log_residual.len(), 5);
    }

    #[test]
    fn zero_panel_does_not_produce_infinities() {
        let r = DMatrix::zeros(5, 10);
        let est = estimate_num_factors_detailed(&r, 2).unwrap();
        assert!(est.log_residual.iter().all(|x| x.is_finite()));
        assert_eq!(est.k, 0);
    }

    #[test]
    fn relatedness_needs_two_fits() {
        let fit = pca_single(&random(4, 6, 9), 1).unwrap();
        assert!(relatedness(&[fit]).is_err());
    }

    #[test]
    fn zero_lambda_one_sweep() {
        let panels = vec![random(5, 12, 1), random(7, 12, 2)];
        let mf = ppfm_fit(&panels, &[2, 1], &PpfmConfig::default()).unwrap();
        assert_eq!(mf.iterations, 1);
        assert!(mf.converged);
        for (r, fit) in panels.iter().zip(&mf.fits) {
            let single = pca_single(r, fit.num_factors).unwrap();
            assert_eq!(single.factors, fit.factors);
        }
    }
}
