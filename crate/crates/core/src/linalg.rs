//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::{Error, Result};

/// Eigen-decomposition of a symmetric matrix with a reproducible ordering.
///
/// Eigenvalues are in descending order; ties keep the solver's original
/// order. Every eigenvector column is sign-normalized so that its entry of
/// largest magnitude is positive (first such index on ties).
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SortedEigen {
    pub fn new(sym: &DMatrix<f64>) -> Self {
        let n = sym.nrows();
        let eig = SymmetricEigen::new(sym.clone());
        let mut order: Vec<usize> = (0..n).collect();
        // sort_by is stable, so equal eigenvalues stay in solver order
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            let mut col = eig.eigenvectors.column(src).clone_owned();
            normalize_sign(&mut col);
            vectors.set_column(dst, &col);
        }
        Self { values, vectors }
    }

    /// The leading `k` eigenvectors as an `n × k` matrix.
    pub fn leading(&self, k: usize) -> DMatrix<f64> {
        self.vectors.columns(0, k).clone_owned()
    }
}

/// Leading `k` eigenvectors of a symmetric matrix by block Krylov iteration
/// with full reorthogonalization, seeded with the columns of `start`
/// (typically a previous estimate). Columns follow the [`SortedEigen`] sign
/// convention. Small problems use the full decomposition.
pub fn leading_eigenvectors(sym: &DMatrix<f64>, k: usize, start: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sym.nrows();
    let b = k + 2;
    if k == 0 || n <= 4 * b {
        return SortedEigen::new(sym).leading(k);
    }
    let mut basis = DMatrix::<f64>::zeros(n, n);
    let mut image = DMatrix::<f64>::zeros(n, n);
    let mut m = 0usize;

    let mut block = DMatrix::<f64>::zeros(n, b);
    let seeded = start.ncols().min(k);
    if start.nrows() == n {
        for j in 0..seeded {
            block.set_column(j, &start.column(j));
        }
    }
    // fixed pseudo-random fill for the remaining columns
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for j in seeded..b {
        for i in 0..n {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            block[(i, j)] = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        }
    }

    let scale = sym.abs().max().max(f64::MIN_POSITIVE);
    let mut checks = 0usize;
    loop {
        let added = append_orthonormal(&mut basis, &mut m, &block);
        if added > 0 {
            let new_cols = basis.columns(m - added, added).clone_owned();
            let w = sym * &new_cols;
            image.columns_mut(m - added, added).copy_from(&w);
        }
        let exhausted = added == 0 || m >= n;
        let due = m >= 4 * b && (m / b) % 2 == 0;
        if exhausted || due {
            checks += 1;
            let q = basis.columns(0, m);
            let wq = image.columns(0, m);
            let mut h = q.transpose() * wq;
            for i in 0..m {
                for j in (i + 1)..m {
                    let v = 0.5 * (h[(i, j)] + h[(j, i)]);
                    h[(i, j)] = v;
                    h[(j, i)] = v;
                }
            }
            let ritz = SortedEigen::new(&h);
            if m >= k {
                let u = ritz.leading(k);
                let y = q * &u;
                let wy = wq * &u;
                let converged = (0..k).all(|j| {
                    let r = wy.column(j) - y.column(j) * ritz.values[j];
                    r.norm() <= 1e-12 * scale * (n as f64).sqrt()
                });
                if converged || exhausted {
                    let mut y = y;
                    orthonormalize_columns(&mut y);
                    normalize_column_signs(&mut y);
                    return y;
                }
            }
            if checks > n {
                return SortedEigen::new(sym).leading(k);
            }
        }
        block = image.columns(m - added, added).clone_owned();
    }
}

/// Orthogonalize `block` against the first `m` columns of `basis` (two
/// Gram-Schmidt passes), orthonormalize it, and append the columns that
/// survive. Returns the number appended.
fn append_orthonormal(basis: &mut DMatrix<f64>, m: &mut usize, block: &DMatrix<f64>) -> usize {
    let n = basis.nrows();
    let mut added = 0;
    for j in 0..block.ncols() {
        if *m >= n {
            break;
        }
        let mut v = block.column(j).clone_owned();
        let original = v.norm();
        if !(original > 0.0) {
            continue;
        }
        for _ in 0..2 {
            for c in 0..*m {
                let col = basis.column(c);
                let d = col.dot(&v);
                v.axpy(-d, &col, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= 1e-10 * original {
            continue;
        }
        basis.set_column(*m, &(v / norm));
        *m += 1;
        added += 1;
    }
    added
}

/// Modified Gram-Schmidt on the columns of `y` in place.
fn orthonormalize_columns(y: &mut DMatrix<f64>) {
    for j in 0..y.ncols() {
        for c in 0..j {
            let d = y.column(c).dot(&y.column(j));
            let col = y.column(c).clone_owned();
            y.column_mut(j).axpy(-d, &col, 1.0);
        }
        let norm = y.column(j).norm();
        if norm > 0.0 {
            y.column_mut(j).unscale_mut(norm);
        }
    }
}

/// Flip `v` so its largest-magnitude entry is positive.
pub fn normalize_sign(v: &mut DVector<f64>) {
    let mut best = 0usize;
    let mut best_abs = f64::NEG_INFINITY;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v.len() > 0 && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Apply [`normalize_sign`] to each column of `m`.
pub fn normalize_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut col = m.column(j).clone_owned();
        normalize_sign(&mut col);
        m.set_column(j, &col);
    }
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// `(smallest, largest)` eigenvalue of a symmetric matrix.
pub fn eigenvalue_range(sym: &DMatrix<f64>) -> (f64, f64) {
    if sym.nrows() == 0 {
        return (0.0, 0.0);
    }
    let vals = sym.clone().symmetric_eigenvalues();
    (vals.min(), vals.max())
}

/// Scale-relative positive-definiteness: `λ_min > 1e-10 · λ_max` and `λ_max > 0`.
pub fn is_positive_definite(sym: &DMatrix<f64>) -> bool {
    let (lo, hi) = eigenvalue_range(sym);
    hi > 0.0 && lo > 1e-10 * hi
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn spectral_norm_symmetric(sym: &DMatrix<f64>) -> f64 {
    let (lo, hi) = eigenvalue_range(sym);
    lo.abs().max(hi.abs())
}

pub(crate) fn cholesky(
    module: &'static str,
    sym: &DMatrix<f64>,
) -> Result<Cholesky<f64, Dyn>> {
    if !sym.is_square() {
        return Err(Error::dimension(
            module,
            format!("expected a square matrix, got {}x{}", sym.nrows(), sym.ncols()),
        ));
    }
    if sym.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical(module, "matrix has non-finite entries"));
    }
    Cholesky::new(sym.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        module,
        min_eigenvalue: eigenvalue_range(sym).0,
    })
}

/// Squared Frobenius norm.
pub fn frobenius_sq(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Entrywise ℓ1 norm.
pub fn entrywise_l1(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

/// Select the listed columns of `m`, in the given order.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Select the listed rows of `m`, in the given order.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Serde adapter writing a matrix as `{"rows", "cols", "data"}` with
/// `data` in row-major order.
pub mod matrix_json {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Dense {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Dense {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let dense = Dense::deserialize(d)?;
        if dense.data.len() != dense.rows * dense.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} entries, expected {}x{}",
                dense.data.len(),
                dense.rows,
                dense.cols
            )));
        }
        Ok(DMatrix::from_row_slice(dense.rows, dense.cols, &dense.data))
    }
}
