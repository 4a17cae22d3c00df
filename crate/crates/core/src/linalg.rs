//! Small dense helpers shared by the estimators. Everything here operates on
//! r×r (or thin N×r) matrices; nothing allocates an N×N buffer.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FactorError, Result};

/// Largest condition number accepted for the r×r systems the estimators
/// solve.
pub(crate) const MAX_CONDITION: f64 = 1e13;

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (columns of the returned matrix follow the same order).
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
///
/// Refuses (rather than regularizes) when the matrix is indefinite or its
/// spectral condition number exceeds [`MAX_CONDITION`].
pub(crate) fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<(DMatrix<f64>, f64)> {
    let sym = symmetrize(m);
    let condition = spd_condition(&sym);
    if !(condition.is_finite() && condition <= MAX_CONDITION) {
        return Err(FactorError::IllConditioned { what, condition });
    }
    let chol = sym.cholesky().ok_or(FactorError::IllConditioned { what, condition: f64::INFINITY })?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((symmetrize(&chol.inverse()), log_det))
}

/// Spectral condition number of a symmetric matrix; infinite when it is not
/// positive definite.
pub(crate) fn spd_condition(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Sign that makes a column's largest-magnitude entry positive. Ties go to
/// the lowest row index.
pub(crate) fn dominant_sign(column: impl Iterator<Item = f64>) -> f64 {
    let mut best = 0.0f64;
    for v in column {
        if v.abs() > best.abs() {
            best = v;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Flip every column of `loadings` so its largest-magnitude entry is
/// positive. Returns the applied signs so companion matrices (factor scores,
/// rotations) can be flipped consistently.
pub fn normalize_column_signs(loadings: &mut DMatrix<f64>) -> Vec<f64> {
    let signs: Vec<f64> = (0..loadings.ncols()).map(|k| dominant_sign(loadings.column(k).iter().copied())).collect();
    for (k, &s) in signs.iter().enumerate() {
        if s < 0.0 {
            loadings.column_mut(k).neg_mut();
        }
    }
    signs
}

pub(crate) fn flip_columns(m: &mut DMatrix<f64>, signs: &[f64]) {
    for (k, &s) in signs.iter().enumerate() {
        if s < 0.0 {
            m.column_mut(k).neg_mut();
        }
    }
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

/// Strictly decreasing check with a relative tie threshold; returns the
/// first offending pair.
pub(crate) fn find_tie(values: &[f64], rel_tol: f64) -> Option<(usize, usize)> {
    values.windows(2).enumerate().find_map(|(k, w)| {
        let scale = w[0].abs().max(w[1].abs()).max(f64::MIN_POSITIVE);
        ((w[0] - w[1]) <= rel_tol * scale).then_some((k, k + 1))
    })
}
