//! Small dense helpers on top of `nalgebra` shared by the entropy kernel,
//! the least-squares fit and the Kalman recursions.

use nalgebra::DMatrix;

/// Relative diagonal jitter used before every log-determinant.
pub const LOG_DET_JITTER: f64 = 1e-10;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Principal submatrix selected by `idx` (rows and columns).
pub fn principal_submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

/// `ln det(M + λI)` with `λ = jitter · trace(M)/dim`.
///
/// Uses a Cholesky factorization, falling back to an eigendecomposition
/// with eigenvalues clipped at `λ` when the factorization fails. The empty
/// matrix has log-determinant zero.
pub fn log_det_regularized(m: &DMatrix<f64>, jitter: f64) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let scale = m.trace() / n as f64;
    let lambda = jitter * if scale > 0.0 { scale } else { 1.0 };
    let mut a = m.clone();
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    if let Some(chol) = a.clone().cholesky() {
        let l = chol.l_dirty();
        return 2.0 * (0..n).map(|i| libm::log(l[(i, i)])).sum::<f64>();
    }
    symmetrize(&mut a);
    a.symmetric_eigenvalues()
        .iter()
        .map(|&ev| libm::log(if ev > lambda { ev } else { lambda }))
        .sum()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let mut a = m.clone();
    symmetrize(&mut a);
    a.symmetric_eigenvalues().min()
}

/// A square root `S` with `S Sᵀ = M` for a symmetric positive semi-definite
/// matrix. Negative eigenvalues from roundoff are clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = m.clone().cholesky() {
        return chol.unpack();
    }
    let mut a = m.clone();
    symmetrize(&mut a);
    let eig = a.symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        let s = if ev > 0.0 { libm::sqrt(ev) } else { 0.0 };
        v.column_mut(j).scale_mut(s);
    }
    v
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix.
pub fn pinv_symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    symmetrize(&mut a);
    let eig = a.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |acc, &e| acc.max(e.abs()));
    let cutoff = max_ev * n as f64 * f64::EPSILON;
    let mut out = DMatrix::zeros(n, n);
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > cutoff {
            let col = eig.eigenvectors.column(j);
            out += (col * col.transpose()) / ev;
        }
    }
    out
}

/// Solves `X A = B` for symmetric positive semi-definite `A`.
///
/// Cholesky when `A` is definite, otherwise the pseudo-inverse.
pub fn solve_right_psd(b: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = a.clone().cholesky() {
        return chol.solve(&b.transpose()).transpose();
    }
    b * pinv_symmetric(a)
}

/// Inverse of a symmetric positive definite matrix, pseudo-inverse if singular.
pub fn inverse_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    match a.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => pinv_symmetric(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_matches_product_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(alloc::vec![2.0, 3.0, 5.0]));
        let expected = libm::log(30.0);
        assert!((log_det_regularized(&m, 0.0) - expected).abs() < 1e-14);
    }

    #[test]
    fn log_det_of_singular_matrix_is_finite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let v = log_det_regularized(&m, LOG_DET_JITTER);
        assert!(v.is_finite());
        assert!(v < -15.0);
    }

    #[test]
    fn psd_sqrt_reconstructs_singular_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 1.0]);
        let s = psd_sqrt(&m);
        assert!((&s * s.transpose() - &m).abs().max() < 1e-12);
    }

    #[test]
    fn solve_right_recovers_known_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -1.2]);
        let b = &x * &a;
        assert!((solve_right_psd(&b, &a) - x).abs().max() < 1e-12);
    }
}
