//! Rotations of a fitted `(Λ, M_ff)` into the five identification
//! conditions, and checks that a parameter set satisfies one.
//!
//! | tag | `M_ff`                         | loadings                                              |
//! |-----|--------------------------------|-------------------------------------------------------|
//! | IC1 | unrestricted                   | leading r×r block `= I_r`                             |
//! | IC2 | diagonal, distinct, descending | `(1/N)Λ'Σ_ee⁻¹Λ = I_r`                                |
//! | IC3 | `I_r`                          | `(1/N)Λ'Σ_ee⁻¹Λ` diagonal, distinct, descending       |
//! | IC4 | diagonal                       | leading block lower triangular with unit diagonal     |
//! | IC5 | `I_r`                          | leading block lower triangular with nonzero diagonal  |
//!
//! Every rotation preserves `Σ_ee` and the common component `Λ M_ff Λ'`, so
//! the likelihood is unchanged. All transforms accept input under any tag:
//! they first rescale to `M_ff = I_r` through the Cholesky factor of `M_ff`.
//!
//! The QR-based construction produces the `M_ff = I_r` triangular form
//! (IC5 above); rescaling its leading diagonal to one gives the unit
//! triangular form with diagonal `M_ff` (IC4 above). Some write-ups attach
//! these two labels the other way round; the constraint sets in the table
//! are what the tags mean here.

use nalgebra::{DMatrix, DVector};

use crate::em::EMTrace;
use crate::error::{FactorError, Result};
use crate::linalg;
use crate::model::{FactorParams, IdentificationTag};

/// Condition number above which the leading r×r block of `Λ` is treated as
/// singular.
pub const MAX_LEADING_CONDITION: f64 = 1e10;

/// Relative gap below which two diagonal entries count as tied.
pub const TIE_TOLERANCE: f64 = 1e-10;

/// Relative tolerance used when checking a fitted model against its tag.
pub const DEFAULT_VERIFY_TOLERANCE: f64 = 1e-8;

/// A fitted model together with its normalization and fitting record.
#[derive(Debug, Clone)]
pub struct FactorEstimate {
    pub params: FactorParams,
    pub tag: IdentificationTag,
    pub loglik: f64,
    pub trace: EMTrace,
    /// Sample size of the fitting data, needed for finite-sample standard
    /// errors.
    pub n_obs: usize,
}

impl FactorEstimate {
    /// Re-expresses the estimate under `tag`.
    pub fn to_tag(&self, tag: IdentificationTag) -> Result<FactorEstimate> {
        Ok(FactorEstimate { params: rotate_to(&self.params, tag)?, tag, ..self.clone() })
    }
}

pub fn to_ic1(e: &FactorEstimate) -> Result<FactorEstimate> {
    e.to_tag(IdentificationTag::Ic1)
}

pub fn to_ic2(e: &FactorEstimate) -> Result<FactorEstimate> {
    e.to_tag(IdentificationTag::Ic2)
}

pub fn to_ic3(e: &FactorEstimate) -> Result<FactorEstimate> {
    e.to_tag(IdentificationTag::Ic3)
}

pub fn to_ic4(e: &FactorEstimate) -> Result<FactorEstimate> {
    e.to_tag(IdentificationTag::Ic4)
}

pub fn to_ic5(e: &FactorEstimate) -> Result<FactorEstimate> {
    e.to_tag(IdentificationTag::Ic5)
}

pub fn rotate_to(p: &FactorParams, tag: IdentificationTag) -> Result<FactorParams> {
    match tag {
        IdentificationTag::Ic1 => rotate_to_ic1(p),
        IdentificationTag::Ic2 => rotate_to_ic2(p),
        IdentificationTag::Ic3 => rotate_to_ic3(p),
        IdentificationTag::Ic4 => rotate_to_ic4(p),
        IdentificationTag::Ic5 => rotate_to_ic5(p),
    }
}

/// `Λ L` where `L L' = M_ff`, so that `(Λ L)(Λ L)' = Λ M_ff Λ'`.
fn unit_cov_loadings(p: &FactorParams) -> Result<DMatrix<f64>> {
    let r = p.n_factors();
    if p.factor_cov == DMatrix::identity(r, r) {
        return Ok(p.loadings.clone());
    }
    let chol = linalg::symmetrize(&p.factor_cov)
        .cholesky()
        .ok_or_else(|| FactorError::InvalidInput("factor_cov is not positive definite".into()))?;
    Ok(&p.loadings * chol.l())
}

fn with_rotation(p: &FactorParams, loadings: DMatrix<f64>, factor_cov: DMatrix<f64>) -> FactorParams {
    FactorParams { loadings, idio_var: p.idio_var.clone(), factor_cov, intercept: p.intercept.clone() }
}

fn leading_block(loadings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = loadings.ncols();
    if loadings.nrows() < r {
        return Err(FactorError::Dimension("fewer variables than factors".into()));
    }
    let block = loadings.rows(0, r).into_owned();
    let sv = block.singular_values();
    let condition = if sv.min() > 0.0 { sv.max() / sv.min() } else { f64::INFINITY };
    if !(condition <= MAX_LEADING_CONDITION) {
        return Err(FactorError::FirstRowsUnsuitable { condition });
    }
    Ok(block)
}

/// Diagonalizes `(1/N)Λ'Σ_ee⁻¹Λ` at `M_ff = I_r`: eigenvalues descending,
/// column signs normalized.
pub fn rotate_to_ic3(p: &FactorParams) -> Result<FactorParams> {
    let r = p.n_factors();
    let unit = unit_cov_loadings(p)?;
    let tmp = with_rotation(p, unit, DMatrix::identity(r, r));
    let (_, vectors) = ordered_gram_eigen(&tmp)?;
    let mut loadings = &tmp.loadings * vectors;
    linalg::normalize_column_signs(&mut loadings);
    Ok(with_rotation(p, loadings, DMatrix::identity(r, r)))
}

fn ordered_gram_eigen(p: &FactorParams) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let gram = p.scaled_precision_gram();
    let (values, vectors) = linalg::sym_eigen_desc(&gram);
    if let Some(k) = values.iter().position(|&v| !(v > 0.0)) {
        return Err(FactorError::Rank(format!(
            "(1/N) Λ'Σ_ee⁻¹Λ has non-positive eigenvalue {} at position {k}",
            values[k]
        )));
    }
    if let Some((a, b)) = linalg::find_tie(values.as_slice(), TIE_TOLERANCE) {
        return Err(FactorError::NonIdentifiedOrdering { first: a, second: b, value: values[a] });
    }
    Ok((values, vectors))
}

/// `Λ² = Λ S^{-1/2}` followed by the rotation that diagonalizes `M_ff² = S`,
/// with `S = (1/N)Λ'Σ_ee⁻¹Λ` at `M_ff = I_r`. On IC3 input that rotation is
/// a signed permutation, so this is the plain symmetric-root formula.
pub fn rotate_to_ic2(p: &FactorParams) -> Result<FactorParams> {
    let r = p.n_factors();
    let unit = unit_cov_loadings(p)?;
    let tmp = with_rotation(p, unit, DMatrix::identity(r, r));
    let (values, vectors) = ordered_gram_eigen(&tmp)?;
    let inv_root = DVector::from_iterator(r, values.iter().map(|v| 1.0 / v.sqrt()));
    let mut loadings = &tmp.loadings * vectors * DMatrix::from_diagonal(&inv_root);
    linalg::normalize_column_signs(&mut loadings);
    Ok(with_rotation(p, loadings, DMatrix::from_diagonal(&values)))
}

/// `Λ¹ = Λ Λ₁⁻¹`, `M_ff¹ = Λ₁ M_ff Λ₁'`.
pub fn rotate_to_ic1(p: &FactorParams) -> Result<FactorParams> {
    let r = p.n_factors();
    let unit = unit_cov_loadings(p)?;
    let block = leading_block(&unit)?;
    let inv = block.clone().try_inverse().ok_or(FactorError::FirstRowsUnsuitable { condition: f64::INFINITY })?;
    let mut loadings = &unit * inv;
    loadings.rows_mut(0, r).copy_from(&DMatrix::identity(r, r));
    let factor_cov = linalg::symmetrize(&(&block * block.transpose()));
    Ok(with_rotation(p, loadings, factor_cov))
}

/// QR of `Λ₁'`: `Λ Q` has a lower-triangular leading block (`R'`) and keeps
/// `M_ff = I_r`. Diagonal signs are made positive.
pub fn rotate_to_ic5(p: &FactorParams) -> Result<FactorParams> {
    let r = p.n_factors();
    let unit = unit_cov_loadings(p)?;
    let block = leading_block(&unit)?;
    let qr = block.transpose().qr();
    let mut q = qr.q();
    let rr = qr.r();
    let scale = block.norm();
    if (0..r).any(|k| !(rr[(k, k)].abs() > 1e-12 * scale)) {
        return Err(FactorError::FirstRowsUnsuitable { condition: f64::INFINITY });
    }
    let signs: Vec<f64> = (0..r).map(|k| rr[(k, k)].signum()).collect();
    linalg::flip_columns(&mut q, &signs);
    let mut loadings = &unit * q;
    for i in 0..r {
        for j in (i + 1)..r {
            loadings[(i, j)] = 0.0;
        }
    }
    Ok(with_rotation(p, loadings, DMatrix::identity(r, r)))
}

/// The IC5 form rescaled by `W = diag(leading block)`: `Λ W⁻¹` has a unit
/// lower-triangular leading block and `M_ff = W W'`.
pub fn rotate_to_ic4(p: &FactorParams) -> Result<FactorParams> {
    let r = p.n_factors();
    let tri = rotate_to_ic5(p)?;
    let w = DVector::from_fn(r, |k, _| tri.loadings[(k, k)]);
    let mut loadings = tri.loadings.clone();
    for (k, wk) in w.iter().enumerate() {
        loadings.column_mut(k).scale_mut(1.0 / wk);
        loadings[(k, k)] = 1.0;
    }
    let factor_cov = DMatrix::from_diagonal(&w.map(|v| v * v));
    Ok(with_rotation(p, loadings, factor_cov))
}

/// Column signs `s` maximizing `Σ_k s_k ⟨est_k, truth_k⟩`. The objective
/// separates over columns, so each sign is chosen independently; ties go
/// to `+1`.
pub fn align_to_truth(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<f64>> {
    if est.shape() != truth.shape() {
        return Err(FactorError::Dimension(format!("estimate is {:?}, truth is {:?}", est.shape(), truth.shape())));
    }
    Ok((0..est.ncols()).map(|k| if est.column(k).dot(&truth.column(k)) < 0.0 { -1.0 } else { 1.0 }).collect())
}

/// One checked constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub tag: IdentificationTag,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn max_off_diagonal(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

fn check(name: &'static str, value: f64, limit: f64) -> Check {
    Check { name, passed: value <= limit, detail: format!("{value:.3e} (limit {limit:.1e})") }
}

fn check_identity(name: &'static str, m: &DMatrix<f64>, tol: f64) -> Check {
    let r = m.nrows();
    check(name, (m - DMatrix::identity(r, r)).amax(), tol)
}

fn check_diagonal(name: &'static str, m: &DMatrix<f64>, tol: f64) -> Check {
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    check(name, max_off_diagonal(m) / scale, tol)
}

fn check_descending(name: &'static str, m: &DMatrix<f64>) -> Check {
    let d: Vec<f64> = m.diagonal().iter().copied().collect();
    let positive = d.iter().all(|&v| v > 0.0);
    let tie = linalg::find_tie(&d, TIE_TOLERANCE);
    Check { name, passed: positive && tie.is_none(), detail: format!("diagonal {d:?}") }
}

fn check_lower_triangular(name: &'static str, block: &DMatrix<f64>, tol: f64) -> Check {
    let scale = block.amax().max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..block.nrows() {
        for j in (i + 1)..block.ncols() {
            worst = worst.max(block[(i, j)].abs());
        }
    }
    check(name, worst / scale, tol)
}

/// Checks that `p` satisfies the constraints of `tag` to relative tolerance
/// `tol`, plus the generic validity constraints.
pub fn verify(p: &FactorParams, tag: IdentificationTag, tol: f64) -> VerifyReport {
    let r = p.n_factors();
    let mut checks = vec![Check {
        name: "parameters valid",
        passed: p.validate().is_ok(),
        detail: p.validate().err().map_or_else(|| "ok".to_string(), |e| e.to_string()),
    }];
    let valid = checks[0].passed;
    if !valid || p.n_vars() < r {
        return VerifyReport { tag, checks };
    }
    let mff = &p.factor_cov;
    let block = p.loadings.rows(0, r).into_owned();
    let gram = p.scaled_precision_gram();
    match tag {
        IdentificationTag::Ic1 => {
            checks.push(check_identity("leading block is I_r", &block, tol));
        }
        IdentificationTag::Ic2 => {
            checks.push(check_identity("(1/N) L'S^-1 L is I_r", &gram, tol));
            checks.push(check_diagonal("M_ff diagonal", mff, tol));
            checks.push(check_descending("M_ff diagonal distinct, positive, descending", mff));
        }
        IdentificationTag::Ic3 => {
            checks.push(check_identity("M_ff is I_r", mff, tol));
            checks.push(check_diagonal("(1/N) L'S^-1 L diagonal", &gram, tol));
            checks.push(check_descending("(1/N) L'S^-1 L diagonal distinct, positive, descending", &gram));
        }
        IdentificationTag::Ic4 => {
            checks.push(check_diagonal("M_ff diagonal", mff, tol));
            checks.push(check_lower_triangular("leading block lower triangular", &block, tol));
            let unit = block.diagonal().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
            checks.push(check("leading block has unit diagonal", unit, tol));
        }
        IdentificationTag::Ic5 => {
            checks.push(check_identity("M_ff is I_r", mff, tol));
            checks.push(check_lower_triangular("leading block lower triangular", &block, tol));
            let scale = block.amax().max(f64::MIN_POSITIVE);
            let smallest = block.diagonal().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            checks.push(Check {
                name: "leading block diagonal nonzero",
                passed: smallest > tol * scale,
                detail: format!("min |diag| {smallest:.3e}"),
            });
        }
    }
    VerifyReport { tag, checks }
}
