//! Sparse residual covariance by entry-adaptive thresholding, the assembled
//! factor-plus-residual return covariance, and precision matrices.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, matrix_json};
use crate::{Error, Result};

const MODULE: &str = "covariance";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    /// `sgn(z)(|z| − τ)₊`
    #[default]
    Soft,
    /// `z · 1{|z| ≥ τ}`
    Hard,
}

impl ThresholdRule {
    /// Shrink one off-diagonal entry.
    pub fn apply(self, z: f64, tau: f64) -> f64 {
        match self {
            ThresholdRule::Soft => {
                let m = z.abs() - tau;
                if m > 0.0 {
                    // rounding can leave |ξ − z| an ulp above τ; step back toward z
                    let mut s = z.signum() * m;
                    while (s - z).abs() > tau {
                        s = if z > 0.0 { s.next_up() } else { s.next_down() };
                    }
                    s
                } else {
                    0.0
                }
            }
            ThresholdRule::Hard => {
                if z.abs() >= tau {
                    z
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for ThresholdRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(ThresholdRule::Soft),
            "hard" => Ok(ThresholdRule::Hard),
            other => Err(Error::validation(
                MODULE,
                format!("unknown threshold rule '{other}' (expected soft or hard)"),
            )),
        }
    }
}

/// Thresholded residual covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCovariance {
    #[serde(with = "matrix_json")]
    pub matrix: DMatrix<f64>,
    /// Threshold constant, when the thresholds were built from one.
    pub c_tau: Option<f64>,
    pub rule: ThresholdRule,
    /// Nonzero off-diagonal entries (both triangles counted).
    pub nonzeros: usize,
    pub positive_definite: bool,
}

impl SparseCovariance {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Write the nonzero entries as `i,j,value` triplets (zero-based).
    pub fn write_triplets<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "value"])?;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                let v = self.matrix[(i, j)];
                if v != 0.0 {
                    w.write_record([i.to_string(), j.to_string(), format!("{v:e}")])?;
                }
            }
        }
        w.flush()
    }
}

/// `S = E Eᵀ / T`, without mean subtraction.
pub fn sample_cov(residuals: &DMatrix<f64>) -> DMatrix<f64> {
    residuals * residuals.transpose() / residuals.ncols() as f64
}

/// `ϑ = √(ln p / T) + p^{-1/2}`.
pub fn threshold_rate(p: usize, t: usize) -> f64 {
    ((p as f64).ln() / t as f64).sqrt() + 1.0 / (p as f64).sqrt()
}

/// Entry-adaptive thresholds `τ_ij = C_τ ϑ √ψ_ij` with
/// `ψ_ij = T⁻¹ Σ_t (E_it E_jt − s_ij)²`.
pub fn adaptive_thresholds(residuals: &DMatrix<f64>, c_tau: f64) -> DMatrix<f64> {
    adaptive_thresholds_with_rate(residuals, c_tau, threshold_rate(residuals.nrows(), residuals.ncols()))
}

/// As [`adaptive_thresholds`] with an explicit rate `ϑ`. Used when the
/// residual rows are a diagonal block of a larger panel whose dimension sets
/// the rate.
pub fn adaptive_thresholds_with_rate(residuals: &DMatrix<f64>, c_tau: f64, rate: f64) -> DMatrix<f64> {
    let (p, t) = residuals.shape();
    let tf = t as f64;
    let s = sample_cov(residuals);
    let mut taus = DMatrix::zeros(p, p);
    if c_tau == 0.0 {
        return taus;
    }
    // row-major copy so the inner loop walks contiguous memory
    let rows: Vec<Vec<f64>> = (0..p).map(|i| residuals.row(i).iter().copied().collect()).collect();
    for i in 0..p {
        for j in i..p {
            let sij = s[(i, j)];
            let psi = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| {
                    let d = a * b - sij;
                    d * d
                })
                .sum::<f64>()
                / tf;
            let tau = c_tau * rate * psi.sqrt();
            taus[(i, j)] = tau;
            taus[(j, i)] = tau;
        }
    }
    taus
}

/// Keep the diagonal of `S` and shrink every off-diagonal entry.
pub fn threshold_cov(s: &DMatrix<f64>, taus: &DMatrix<f64>, rule: ThresholdRule) -> Result<SparseCovariance> {
    if !s.is_square() || s.shape() != taus.shape() {
        return Err(Error::dimension(
            MODULE,
            format!("covariance {:?} and thresholds {:?} must be square and equal", s.shape(), taus.shape()),
        ));
    }
    if !linalg::is_symmetric(s, 1e-10) {
        return Err(Error::validation(MODULE, "sample covariance is not symmetric"));
    }
    if taus.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::validation(MODULE, "thresholds must be nonnegative"));
    }
    let p = s.nrows();
    let mut m = s.clone();
    let mut nonzeros = 0;
    for i in 0..p {
        for j in (i + 1)..p {
            let tau = 0.5 * (taus[(i, j)] + taus[(j, i)]);
            let v = rule.apply(s[(i, j)], tau);
            m[(i, j)] = v;
            m[(j, i)] = v;
            if v != 0.0 {
                nonzeros += 2;
            }
        }
    }
    let positive_definite = linalg::is_positive_definite(&m);
    Ok(SparseCovariance {
        matrix: m,
        c_tau: None,
        rule,
        nonzeros,
        positive_definite,
    })
}

/// Thresholded covariance of a residual panel at constant `c_tau`.
pub fn residual_cov(residuals: &DMatrix<f64>, c_tau: f64, rule: ThresholdRule) -> Result<SparseCovariance> {
    residual_cov_with_rate(
        residuals,
        c_tau,
        rule,
        threshold_rate(residuals.nrows(), residuals.ncols()),
    )
}

pub fn residual_cov_with_rate(
    residuals: &DMatrix<f64>,
    c_tau: f64,
    rule: ThresholdRule,
    rate: f64,
) -> Result<SparseCovariance> {
    if residuals.ncols() < 2 {
        return Err(Error::validation(MODULE, "need at least two periods of residuals"));
    }
    let s = sample_cov(residuals);
    let taus = adaptive_thresholds_with_rate(residuals, c_tau, rate);
    let mut out = threshold_cov(&s, &taus, rule)?;
    out.c_tau = Some(c_tau);
    Ok(out)
}

/// `Σ_r = B Σ_f Bᵀ + Σ_e`.
pub fn assemble_return_cov(
    loadings: &DMatrix<f64>,
    factor_cov: &DMatrix<f64>,
    residual_cov: &SparseCovariance,
) -> Result<DMatrix<f64>> {
    let (p, k) = loadings.shape();
    if factor_cov.shape() != (k, k) || residual_cov.dim() != p {
        return Err(Error::dimension(
            MODULE,
            format!(
                "loadings {p}x{k}, factor covariance {:?}, residual covariance {}x{}",
                factor_cov.shape(),
                residual_cov.dim(),
                residual_cov.dim()
            ),
        ));
    }
    let mut sigma = loadings * factor_cov * loadings.transpose() + &residual_cov.matrix;
    // exact symmetry
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    Ok(sigma)
}

/// Factor-model return covariance of one sector fit: thresholded residual
/// covariance plus `B (FᵀF/T) Bᵀ`.
pub fn factor_return_cov(
    fit: &crate::ppfm::FactorFit,
    c_tau: f64,
    rule: ThresholdRule,
) -> Result<(DMatrix<f64>, SparseCovariance)> {
    let rate = threshold_rate(fit.residuals.nrows(), fit.residuals.ncols());
    factor_return_cov_with_rate(&fit.loadings, &fit.factor_cov(), &fit.residuals, c_tau, rule, rate)
}

/// As [`factor_return_cov`] for explicit loadings and residual rows, with an
/// explicit threshold rate (used for sector blocks of a pooled fit).
pub fn factor_return_cov_with_rate(
    loadings: &DMatrix<f64>,
    factor_cov: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    c_tau: f64,
    rule: ThresholdRule,
    rate: f64,
) -> Result<(DMatrix<f64>, SparseCovariance)> {
    let sigma_e = residual_cov_with_rate(residuals, c_tau, rule, rate)?;
    let sigma = assemble_return_cov(loadings, factor_cov, &sigma_e)?;
    Ok((sigma, sigma_e))
}

/// As [`factor_return_cov_with_rate`], raising `c_tau` in steps of `step`
/// until the thresholded residual covariance is positive definite. Returns
/// the constant actually used.
pub fn factor_return_cov_definite(
    loadings: &DMatrix<f64>,
    factor_cov: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    c_tau: f64,
    rule: ThresholdRule,
    rate: f64,
    step: f64,
) -> Result<(DMatrix<f64>, SparseCovariance)> {
    if !(step > 0.0) {
        return Err(Error::validation(MODULE, "step must be positive"));
    }
    if residuals.ncols() < 2 {
        return Err(Error::validation(MODULE, "need at least two periods of residuals"));
    }
    let s = sample_cov(residuals);
    let base = adaptive_thresholds_with_rate(residuals, 1.0, rate);
    // beyond this constant every off-diagonal entry is zeroed
    let mut c_diag: f64 = 0.0;
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            if i != j && s[(i, j)] != 0.0 {
                c_diag = c_diag.max(s[(i, j)].abs() / base[(i, j)]);
            }
        }
    }
    let mut k = 0u32;
    loop {
        let c = c_tau + step * k as f64;
        let mut sigma_e = threshold_cov(&s, &(&base * c), rule)?;
        sigma_e.c_tau = Some(c);
        if sigma_e.positive_definite {
            let sigma = assemble_return_cov(loadings, factor_cov, &sigma_e)?;
            return Ok((sigma, sigma_e));
        }
        if !(c <= c_diag) {
            let (min_eigenvalue, _) = linalg::eigenvalue_range(&sigma_e.matrix);
            return Err(Error::NotPositiveDefinite {
                module: MODULE,
                min_eigenvalue,
            });
        }
        k += 1;
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn precision(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !linalg::is_symmetric(sigma, 1e-10 * sigma.abs().max().max(1.0)) {
        return Err(Error::validation(MODULE, "matrix is not symmetric"));
    }
    let chol = linalg::cholesky(MODULE, sigma)?;
    let omega = chol.inverse();
    let p = sigma.nrows();
    let resid = (sigma * &omega - DMatrix::<f64>::identity(p, p)).abs().max();
    if !(resid <= 1e-8 * omega.abs().max().max(1.0) * sigma.abs().max().max(1.0)) {
        return Err(Error::NotPositiveDefinite {
            module: MODULE,
            min_eigenvalue: linalg::eigenvalue_range(sigma).0,
        });
    }
    Ok(omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn sample_cov_basics() {
        let e = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 1.0, 0.5, -0.5, 0.5, -0.5]);
        let s = sample_cov(&e);
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(s[(0, 1)], 0.0);
        assert_eq!(sample_cov(&DMatrix::zeros(3, 5)), DMatrix::zeros(3, 3));
    }

    #[test]
    fn rate_for_hundred_by_hundred() {
        let v = threshold_rate(100, 100);
        assert!((v - 0.314_59).abs() < 1e-5, "{v}");
    }

    #[test]
    fn zero_constant_means_zero_thresholds() {
        let e = DMatrix::from_fn(4, 7, |i, t| ((i * 3 + t * 5) % 7) as f64 - 3.0);
        assert_eq!(adaptive_thresholds(&e, 0.0), DMatrix::zeros(4, 4));
    }

    #[test]
    fn constant_products_have_zero_threshold() {
        // E_0t E_1t = 1 for all t
        let e = DMatrix::from_row_slice(3, 4, &[1.0, -1.0, 2.0, 0.5, 1.0, -1.0, 0.5, 2.0, 0.3, 0.1, -0.7, 0.2]);
        let taus = adaptive_thresholds(&e, 1.0);
        assert!(taus[(0, 1)].abs() < 1e-15);
        assert!(taus[(0, 2)] > 0.0);
    }

    #[test]
    fn rule_definitions() {
        assert!((ThresholdRule::Soft.apply(0.5, 0.2) - 0.3).abs() < 1e-15);
        assert_eq!(ThresholdRule::Soft.apply(-0.1, 0.2), 0.0);
        assert_eq!(ThresholdRule::Soft.apply(0.2, 0.2), 0.0);
        assert_eq!(ThresholdRule::Hard.apply(0.5, 0.2), 0.5);
        assert_eq!(ThresholdRule::Hard.apply(0.1, 0.2), 0.0);
        assert_eq!(ThresholdRule::Hard.apply(-0.2, 0.2), -0.2);
    }

    #[test]
    fn zero_thresholds_are_identity() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.3, 1.0, 0.2, -0.1, 0.2, 1.5]);
        for rule in [ThresholdRule::Soft, ThresholdRule::Hard] {
            let out = threshold_cov(&s, &DMatrix::zeros(3, 3), rule).unwrap();
            assert_eq!(out.matrix, s);
            assert_eq!(out.nonzeros, 6);
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let mut s = DMatrix::identity(3, 3);
        s[(0, 1)] = 0.1;
        assert!(threshold_cov(&s, &DMatrix::zeros(3, 3), ThresholdRule::Soft).is_err());
    }

    #[test]
    fn assembled_covariance_cases() {
        let eye = SparseCovariance {
            matrix: DMatrix::identity(3, 3),
            c_tau: None,
            rule: ThresholdRule::Soft,
            nonzeros: 0,
            positive_definite: true,
        };
        let zero_b = DMatrix::zeros(3, 2);
        assert_eq!(
            assemble_return_cov(&zero_b, &DMatrix::identity(2, 2), &eye).unwrap(),
            DMatrix::identity(3, 3)
        );
        let mut e1 = DMatrix::zeros(3, 1);
        e1[(0, 0)] = 1.0;
        let sigma = assemble_return_cov(&e1, &DMatrix::identity(1, 1), &eye).unwrap();
        let mut expect = DMatrix::identity(3, 3);
        expect[(0, 0)] = 2.0;
        assert_eq!(sigma, expect);
    }

    #[test]
    fn precision_cases() {
        assert_eq!(precision(&DMatrix::identity(4, 4)).unwrap(), DMatrix::identity(4, 4));
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 4.0]));
        let omega = precision(&d).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.25]));
        assert!((omega - expect).abs().max() < 1e-15);
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match precision(&indefinite) {
            Err(Error::NotPositiveDefinite { min_eigenvalue, .. }) => {
                assert!((min_eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn triplets_list_nonzeros() {
        let sc = SparseCovariance {
            matrix: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
            c_tau: Some(0.5),
            rule: ThresholdRule::Soft,
            nonzeros: 0,
            positive_definite: true,
        };
        let mut buf = Vec::new();
        sc.write_triplets(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
