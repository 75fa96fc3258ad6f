//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{DfslError, Result};

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Eigen-decomposition sorted by descending eigenvalue.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// `m^{-1/2}` for a symmetric positive definite matrix, with eigenvalues
/// floored at `floor`.
///
/// The exact identity maps to itself without rounding.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if is_identity(m) {
        return m.clone();
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| 1.0 / v.max(floor).sqrt()),
    );
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| eig.eigenvectors[(r, c)] * scale[c]);
    let out = &scaled * eig.eigenvectors.transpose();
    symmetrize(&out)
}

/// Inverse of a symmetric positive definite matrix, eigenvalues floored.
pub fn sym_inv(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if is_identity(m) {
        return m.clone();
    }
    let eig = SymmetricEigen::new(m.clone());
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
        eig.eigenvectors[(r, c)] / eig.eigenvalues[c].max(floor)
    });
    symmetrize(&(&scaled * eig.eigenvectors.transpose()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| 0.5 * (m[(r, c)] + m[(c, r)]))
}

pub fn is_identity(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && m.iter().enumerate().all(|(idx, &v)| {
            let (r, c) = (idx % m.nrows(), idx / m.nrows());
            if r == c {
                v == 1.0
            } else {
                v == 0.0
            }
        })
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    thin_svd(m).1[0]
}

/// Thin singular value decomposition `m = U diag(s) V'` with `s` descending.
///
/// A QR step reduces tall inputs to a square triangle first. Applying the
/// bidiagonal SVD directly to tall rank-deficient matrices can return
/// factors that do not reconstruct the input.
pub fn thin_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    if m.nrows() < m.ncols() {
        let (u, s, v) = thin_svd(&m.transpose());
        return (v, s, u);
    }
    let qr = m.clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let svd = r.svd(true, true);
    let (ur, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = q * DMatrix::from_fn(k, k, |r, c| ur[(r, order[c])]);
    let v = DMatrix::from_fn(m.ncols(), k, |r, c| vt[(order[c], r)]);
    (u, s, v)
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
///
/// Column order is preserved, so the first output column is the normalized
/// first input column. A column whose residual norm drops below
/// `rel_tol` times its original norm is reported as rank deficient.
pub fn gram_schmidt(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let mut q = m.clone();
    for c in 0..q.ncols() {
        let original = q.column(c).norm();
        if original == 0.0 || !original.is_finite() {
            return Err(DfslError::RankDeficient { column: c });
        }
        for _pass in 0..2 {
            for prev in 0..c {
                let proj = q.column(prev).dot(&q.column(c));
                let prev_col = q.column(prev).clone_owned();
                q.column_mut(c).axpy(-proj, &prev_col, 1.0);
            }
        }
        let norm = q.column(c).norm();
        if norm <= rel_tol * original {
            return Err(DfslError::RankDeficient { column: c });
        }
        q.column_mut(c).scale_mut(1.0 / norm);
    }
    Ok(q)
}

/// Lower Cholesky factor.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.l())
}

/// Symmetric Toeplitz matrix `rho^|u-v|`.
pub fn ar1_correlation(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |u, v| rho.powi((u as i64 - v as i64).unsigned_abs() as i32))
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.nrows();
    }
    out
}
