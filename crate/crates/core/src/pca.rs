//! Principal-components estimation of `(Λ, F)`: the EM starting value and
//! the efficiency baseline the MLE is compared against.
//!
//! Normalization: `(1/T) F'F = I_r` and `Λ'Λ` diagonal with descending
//! entries (the eigenvalues of `M_zz`). The eigenproblem is solved on the
//! N×N moment when N ≤ T and on the T×T time-dimension moment otherwise, so
//! the cost is `min(N, T)³`.

use nalgebra::{DMatrix, DVector};

use crate::error::{FactorError, Result};
use crate::linalg;
use crate::model::Dataset;

/// Relative eigenvalue threshold below which a component is numerically
/// absent.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PcFit {
    /// N×r.
    pub loadings: DMatrix<f64>,
    /// T×r, with `(1/T) F'F = I_r`.
    pub scores: DMatrix<f64>,
    /// `(1/T) Σ_t ê_it²` from the PC residuals.
    pub idio_var: DVector<f64>,
    /// Leading r eigenvalues of `M_zz`, descending.
    pub eigenvalues: DVector<f64>,
}

impl PcFit {
    /// Residuals `z_t − z̄ − Λ̂ f̂_t` as an N×T matrix.
    pub fn residuals(&self, d: &Dataset) -> DMatrix<f64> {
        d.centered_values() - &self.loadings * self.scores.transpose()
    }
}

pub fn pc_fit(d: &Dataset, r: usize) -> Result<PcFit> {
    pc_fit_with(d, r, d.n_vars() > d.n_obs())
}

fn pc_fit_with(d: &Dataset, r: usize, time_moment: bool) -> Result<PcFit> {
    let (n, t) = (d.n_vars(), d.n_obs());
    if r < 1 || r >= n.min(t) {
        return Err(FactorError::InvalidInput(format!(
            "number of factors must satisfy 1 <= r < min(N, T) = {}, got {r}",
            n.min(t)
        )));
    }
    let x = d.centered_values();
    let tf = t as f64;
    let (values, mut loadings, mut scores) = if !time_moment {
        let (vals, vecs) = linalg::sym_eigen_desc(&(&x * x.transpose() / tf));
        check_rank(&vals, r)?;
        let top = vals.rows(0, r).into_owned();
        let v = vecs.columns(0, r).into_owned();
        let lam = &v * DMatrix::from_diagonal(&top.map(f64::sqrt));
        let f = x.transpose() * &v * DMatrix::from_diagonal(&top.map(|e| 1.0 / e.sqrt()));
        (top, lam, f)
    } else {
        let (vals, vecs) = linalg::sym_eigen_desc(&(x.transpose() * &x / tf));
        check_rank(&vals, r)?;
        let top = vals.rows(0, r).into_owned();
        let f = vecs.columns(0, r).into_owned() * tf.sqrt();
        let lam = &x * &f / tf;
        (top, lam, f)
    };
    let signs = linalg::normalize_column_signs(&mut loadings);
    linalg::flip_columns(&mut scores, &signs);

    let resid = &x - &loadings * scores.transpose();
    let idio_var = DVector::from_fn(n, |i, _| resid.row(i).norm_squared() / tf);
    Ok(PcFit { loadings, scores, idio_var, eigenvalues: values })
}

fn check_rank(vals: &DVector<f64>, r: usize) -> Result<()> {
    let lead = vals[0];
    if !(lead > 0.0) || !(vals[r - 1] > RANK_TOLERANCE * lead) {
        return Err(FactorError::Rank(format!("M_zz has numerical rank below the requested {r} factors")));
    }
    Ok(())
}

/// Sum of squared PC residuals, the objective PC minimizes.
pub fn pc_objective(d: &Dataset, fit: &PcFit) -> f64 {
    fit.residuals(d).norm_squared()
}

/// Plug-in sandwich `M̄_λλ⁻¹ Υ M̄_λλ⁻¹` with `M̄_λλ = (1/N) Σ λ_i λ_i'` and
/// `Υ = (1/N) Σ λ_i λ_i' σ_i²`: the asymptotic covariance of
/// `√N (f̂_t^pc − f_t)`.
pub fn pc_sandwich_cov(loadings: &DMatrix<f64>, idio_var: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = loadings.nrows();
    if idio_var.len() != n {
        return Err(FactorError::Dimension("idio_var length differs from loadings rows".into()));
    }
    let nf = n as f64;
    let gram = loadings.transpose() * loadings / nf;
    let mut weighted = loadings.clone();
    for (mut row, s) in weighted.row_iter_mut().zip(idio_var.iter()) {
        row *= *s;
    }
    let upsilon = loadings.transpose() * weighted / nf;
    let (inv, _) = linalg::spd_inverse(&gram, "loading second moment")
        .map_err(|_| FactorError::Rank("(1/N) Σ λ_i λ_i' is singular".into()))?;
    Ok(linalg::symmetrize(&(&inv * upsilon * &inv)))
}
