//! Plug-in asymptotic covariances for the estimated loadings, factor
//! covariance, idiosyncratic variances and factor scores, together with the
//! duplication-matrix machinery they need.
//!
//! Every population limit (`M̄_ff`, `Q`, `Ω`, `Σ_eer`) is replaced by its
//! sample counterpart at the fitted parameters, which is a first-order
//! approximation. All returned matrices are finite-sample covariances: the
//! limiting covariance divided by the convergence rate squared (T, NT or N).
//!
//! Loading and score covariances under IC4 and IC5 depend on quantities that
//! are not available in closed form here and are refused with
//! [`FactorError::UnsupportedTag`].
//!
//! Conventions: `vec` stacks columns, `vech` stacks the lower triangle
//! column by column, `veck` stacks the strict lower triangle column by
//! column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FactorError, Result};
use crate::identify::FactorEstimate;
use crate::linalg;
use crate::model::{Dataset, IdentificationTag};
use crate::scores;

const IC45_REASON: &str = "requires the limiting covariance of the rotation matrix, which has no closed form here";

/// `vech` of a square matrix.
pub fn vech(m: &DMatrix<f64>) -> DVector<f64> {
    let r = m.nrows();
    let mut out = Vec::with_capacity(r * (r + 1) / 2);
    for col in 0..r {
        for row in col..r {
            out.push(m[(row, col)]);
        }
    }
    DVector::from_vec(out)
}

/// `veck` (strict lower triangle) of a square matrix.
pub fn veck(m: &DMatrix<f64>) -> DVector<f64> {
    let r = m.nrows();
    let mut out = Vec::with_capacity(r * r.saturating_sub(1) / 2);
    for col in 0..r {
        for row in col + 1..r {
            out.push(m[(row, col)]);
        }
    }
    DVector::from_vec(out)
}

pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Duplication matrix: `vec(S) = D_r vech(S)` for symmetric S.
pub fn dup_matrix(r: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(r * r, r * (r + 1) / 2);
    let mut k = 0;
    for col in 0..r {
        for row in col..r {
            d[(col * r + row, k)] = 1.0;
            d[(row * r + col, k)] = 1.0;
            k += 1;
        }
    }
    d
}

/// Moore-Penrose inverse `(D'D)⁻¹D'`; `D_r⁺ vec(S) = vech(S)`.
pub fn dup_matrix_pinv(r: usize) -> DMatrix<f64> {
    let d = dup_matrix(r);
    // D'D is diagonal with entries 1 (diagonal positions) or 2
    let mut p = d.transpose();
    for (k, mut row) in p.row_iter_mut().enumerate() {
        let weight = d.column(k).sum();
        row /= weight;
    }
    p
}

/// Generalized duplication matrix `D̃(M)` for diagonal `M`, built row by row:
/// row k (1-based) with `j = ⌊(k−1)/r⌋ + 1`, `i = k − (j−1)r` holds a 1 at
/// column `(2r−j+2)(j−1)/2 + i−j+1` when `i ≥ j`, and `−m_j/m_i` at column
/// `(2r−i+2)(i−1)/2 − i+j+1` when `i < j`.
pub fn gen_dup_tilde(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = m.nrows();
    if r == 0 || m.ncols() != r {
        return Err(FactorError::InvalidInput("D̃(M) needs a nonempty square matrix".into()));
    }
    let off_diagonal = (0..r).flat_map(|a| (0..r).map(move |b| (a, b))).any(|(a, b)| a != b && m[(a, b)] != 0.0);
    if off_diagonal {
        return Err(FactorError::InvalidInput("D̃(M) needs a diagonal matrix".into()));
    }
    if m.diagonal().iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(FactorError::InvalidInput("D̃(M) needs nonzero finite diagonal entries".into()));
    }
    let mut out = DMatrix::zeros(r * r, r * (r + 1) / 2);
    for k in 1..=r * r {
        let j = (k - 1) / r + 1;
        let i = k - (j - 1) * r;
        if i >= j {
            let col = (2 * r - j + 2) * (j - 1) / 2 + i - j + 1;
            out[(k - 1, col - 1)] = 1.0;
        } else {
            let col = (2 * r - i + 2) * (i - 1) / 2 + j + 1 - i;
            out[(k - 1, col - 1)] = -m[(j - 1, j - 1)] / m[(i - 1, i - 1)];
        }
    }
    Ok(out)
}

/// `D̄` with `vec(A) = D̄ veck(A)` for skew-symmetric A. For r = 1 this is
/// the empty 1×0 matrix.
pub fn gen_dup_bar(r: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(r * r, r * r.saturating_sub(1) / 2);
    let mut k = 0;
    for col in 0..r {
        for row in col + 1..r {
            out[(col * r + row, k)] = 1.0;
            out[(row * r + col, k)] = -1.0;
            k += 1;
        }
    }
    out
}

/// `J_r` with `diag{M} = J_r vec(M)`.
pub fn j_matrix(r: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(r, r * r);
    for k in 0..r {
        j[(k, k * r + k)] = 1.0;
    }
    j
}

fn check_index(e: &FactorEstimate, j: usize) -> Result<()> {
    let n = e.params.n_vars();
    if j >= n {
        return Err(FactorError::IndexOutOfRange { index: j, size: n });
    }
    Ok(())
}

/// `diag(σ̂₁², …, σ̂_r²)` over the first r variables.
fn leading_idio(e: &FactorEstimate) -> DMatrix<f64> {
    let r = e.params.n_factors();
    DMatrix::from_diagonal(&e.params.idio_var.rows(0, r).into_owned())
}

/// Covariance of `λ̂_j` (r×r), already divided by T.
pub fn loading_cov(e: &FactorEstimate, j: usize) -> Result<DMatrix<f64>> {
    check_index(e, j)?;
    let p = &e.params;
    let (mff_inv, _) = linalg::spd_inverse(&p.factor_cov, "factor covariance")?;
    let sigma = p.idio_var[j];
    let lambda = p.loadings.row(j).transpose();
    let scale = match e.tag {
        IdentificationTag::Ic1 => {
            let s_eer = leading_idio(e);
            (lambda.transpose() * s_eer * &lambda)[(0, 0)] + sigma
        }
        IdentificationTag::Ic2 | IdentificationTag::Ic3 => sigma,
        tag => return Err(FactorError::UnsupportedTag { tag, reason: IC45_REASON }),
    };
    Ok(linalg::symmetrize(&(mff_inv * (scale / e.n_obs as f64))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceRate {
    SqrtT,
    #[serde(rename = "sqrt_nt")]
    SqrtNT,
}

/// Which elements of `M̂_ff` the covariance refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MffElements {
    Vech,
    Diag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorCovCov {
    pub cov: DMatrix<f64>,
    pub tag: IdentificationTag,
    pub rate: ConvergenceRate,
    pub elements: MffElements,
}

/// `Q̂ = (1/N) Λ̂'Σ̂⁻¹Λ̂`.
pub fn precision_gram(e: &FactorEstimate) -> DMatrix<f64> {
    e.params.scaled_precision_gram()
}

/// `Ω̂ = (1/N) Σᵢ σ̂ᵢ⁻⁴ (λ̂ᵢ⊗λ̂ᵢ)(λ̂ᵢ⊗λ̂ᵢ)'`, r²×r².
pub fn omega(e: &FactorEstimate) -> DMatrix<f64> {
    let p = &e.params;
    let r = p.n_factors();
    let mut out = DMatrix::zeros(r * r, r * r);
    for i in 0..p.n_vars() {
        let l = p.loadings.row(i).transpose();
        let kl = l.kronecker(&l);
        out += (&kl * kl.transpose()) / p.idio_var[i].powi(2);
    }
    out / p.n_vars() as f64
}

/// Covariance of the estimated factor covariance elements.
///
/// IC1: `vech`, rate √T. IC2: diagonal, rate √(NT), normal errors. IC4:
/// diagonal, rate √T. IC3 and IC5 fix `M_ff`, so the result is an exact
/// r×r zero.
pub fn mff_cov(e: &FactorEstimate) -> Result<FactorCovCov> {
    let p = &e.params;
    let r = p.n_factors();
    let t = e.n_obs as f64;
    let nt = p.n_vars() as f64 * t;
    let m = &p.factor_cov;
    let (cov, rate, elements) = match e.tag {
        IdentificationTag::Ic1 => {
            let dp = dup_matrix_pinv(r);
            let inner = leading_idio(e).kronecker(m) * 4.0;
            (&dp * inner * dp.transpose() / t, ConvergenceRate::SqrtT, MffElements::Vech)
        }
        IdentificationTag::Ic2 => {
            let jr = j_matrix(r);
            let im = DMatrix::<f64>::identity(r, r).kronecker(m);
            let inner = &im * omega(e) * &im * 2.0 + precision_gram(e).kronecker(m) * 4.0;
            (&jr * inner * jr.transpose() / nt, ConvergenceRate::SqrtNT, MffElements::Diag)
        }
        IdentificationTag::Ic4 => {
            let jr = j_matrix(r);
            let lead = p.loadings.rows(0, r).into_owned();
            let mut weighted = lead.clone();
            for (mut row, s) in weighted.row_iter_mut().zip(p.idio_var.iter()) {
                row /= *s;
            }
            let (inv, _) = linalg::spd_inverse(&(lead.transpose() * weighted), "leading loading gram")?;
            let inner = inv.kronecker(m) * 4.0;
            (&jr * inner * jr.transpose() / t, ConvergenceRate::SqrtT, MffElements::Diag)
        }
        IdentificationTag::Ic3 | IdentificationTag::Ic5 => {
            (DMatrix::zeros(r, r), ConvergenceRate::SqrtT, MffElements::Diag)
        }
    };
    Ok(FactorCovCov { cov: linalg::symmetrize(&cov), tag: e.tag, rate, elements })
}

/// Variance of `σ̂_j²`, divided by T. `kurtosis` is the excess kurtosis of
/// `e_jt`; `None` means normal errors.
pub fn idio_var_cov(e: &FactorEstimate, j: usize, kurtosis: Option<f64>) -> Result<f64> {
    check_index(e, j)?;
    let kappa = kurtosis.unwrap_or(0.0);
    if !(kappa >= -2.0) {
        return Err(FactorError::InvalidKurtosis { var: j, value: kappa });
    }
    Ok(e.params.idio_var[j].powi(2) * (2.0 + kappa) / e.n_obs as f64)
}

/// Per-variable excess kurtosis of the GLS-score residuals
/// `z_it − z̄_i − λ̂ᵢ'f̂_t`. The estimator itself never forms residuals; this
/// is only for inference.
pub fn residual_excess_kurtosis(d: &Dataset, e: &FactorEstimate) -> Result<DVector<f64>> {
    let f = scores::gls_scores(d, &e.params)?.values;
    let resid = d.centered_values() - &e.params.loadings * f.transpose();
    let t = d.n_obs() as f64;
    Ok(DVector::from_fn(d.n_vars(), |i, _| {
        let row = resid.row(i);
        let mean = row.sum() / t;
        let m2 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
        let m4 = row.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / t;
        if m2 > 0.0 {
            m4 / (m2 * m2) - 3.0
        } else {
            0.0
        }
    }))
}

/// Covariance of the GLS score `f̂_t` (r×r), divided by N. `n_vars` and
/// `n_obs` set `Δ = N/T`.
pub fn score_cov(e: &FactorEstimate, score: &DVector<f64>, n_vars: usize, n_obs: usize) -> Result<DMatrix<f64>> {
    let p = &e.params;
    let r = p.n_factors();
    if score.len() != r {
        return Err(FactorError::Dimension(format!("score has length {}, expected {r}", score.len())));
    }
    if n_vars == 0 || n_obs == 0 {
        return Err(FactorError::InvalidInput("N and T must be positive".into()));
    }
    let nf = n_vars as f64;
    let cov = match e.tag {
        IdentificationTag::Ic1 => {
            let delta = nf / n_obs as f64;
            let (mff_inv, _) = linalg::spd_inverse(&p.factor_cov, "factor covariance")?;
            let (q_inv, _) = linalg::spd_inverse(&precision_gram(e), "precision gram")?;
            let quad = (score.transpose() * mff_inv * score)[(0, 0)];
            leading_idio(e) * (delta * quad) + q_inv
        }
        IdentificationTag::Ic2 => DMatrix::identity(r, r),
        IdentificationTag::Ic3 => linalg::spd_inverse(&precision_gram(e), "precision gram")?.0,
        tag => return Err(FactorError::UnsupportedTag { tag, reason: IC45_REASON }),
    };
    Ok(linalg::symmetrize(&(cov / nf)))
}

/// Plug-in standard errors for a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    /// N×r, row-major nested as `[variable][factor]`.
    pub loadings: Vec<Vec<f64>>,
    /// Normal-error standard errors of the idiosyncratic variances.
    pub idio_var: Vec<f64>,
    /// Standard errors of the estimated factor covariance elements.
    pub factor_cov: Vec<f64>,
    pub factor_cov_elements: MffElements,
    pub factor_cov_rate: ConvergenceRate,
}

pub fn standard_errors(e: &FactorEstimate) -> Result<StandardErrors> {
    let n = e.params.n_vars();
    let loadings = (0..n)
        .map(|j| loading_cov(e, j).map(|c| c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let idio_var = (0..n).map(|j| idio_var_cov(e, j, None).map(f64::sqrt)).collect::<Result<Vec<_>>>()?;
    let mff = mff_cov(e)?;
    Ok(StandardErrors {
        loadings,
        idio_var,
        factor_cov: mff.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        factor_cov_elements: mff.elements,
        factor_cov_rate: mff.rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::EMTrace;
    use crate::identify;
    use crate::model::{FactorParams, FocResiduals};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn estimate(p: FactorParams, tag: IdentificationTag, n_obs: usize) -> FactorEstimate {
        let trace = EMTrace {
            iterations: 0,
            loglik_path: vec![],
            converged: true,
            final_param_delta: 0.0,
            final_foc_residuals: FocResiduals { loadings: 0.0, idio_var: 0.0, factor_cov: 0.0 },
            warnings: vec![],
        };
        FactorEstimate { params: p, tag, loglik: 0.0, trace, n_obs }
    }

    fn random_estimate(seed: u64, n: usize, r: usize, tag: IdentificationTag) -> FactorEstimate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = FactorParams::with_unit_factor_cov(
            gaussian(&mut rng, n, r),
            DVector::from_fn(n, |_, _| 0.1 + 10.0 * rng.random::<f64>()),
        )
        .unwrap();
        estimate(identify::rotate_to(&p, tag).unwrap(), tag, 200)
    }

    fn is_psd(m: &DMatrix<f64>) -> bool {
        (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
            && linalg::sym_eigen_desc(m).0.iter().all(|&v| v >= -1e-12 * m.amax().max(1.0))
    }

    #[test]
    fn duplication_small_cases() {
        assert_eq!(dup_matrix(1), DMatrix::from_element(1, 1, 1.0));
        let expected = DMatrix::from_row_slice(4, 3, &[1., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(dup_matrix(2), expected);
    }

    #[test]
    fn duplication_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in 1..=5 {
            let a = gaussian(&mut rng, r, r);
            let s = &a + a.transpose();
            assert_eq!(dup_matrix(r) * vech(&s), vec(&s));
            assert!((dup_matrix_pinv(r) * vec(&s) - vech(&s)).amax() < 1e-15);
            let pd = dup_matrix_pinv(r) * dup_matrix(r);
            assert!((pd - DMatrix::identity(r * (r + 1) / 2, r * (r + 1) / 2)).amax() < 1e-15);
        }
    }

    #[test]
    fn tilde_scalar_is_one() {
        let m = DMatrix::from_element(1, 1, 3.5);
        assert_eq!(gen_dup_tilde(&m).unwrap(), DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn tilde_matches_printed_two_by_two() {
        let (m1, m2) = (3.0, 7.0);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![m1, m2]));
        #[rustfmt::skip]
        let printed = DMatrix::from_row_slice(4, 3, &[
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            0.0, -m2 / m1, 0.0,
            0.0, 0.0, 1.0,
        ]);
        assert_eq!(gen_dup_tilde(&m).unwrap(), printed);
    }

    #[test]
    fn tilde_matches_printed_three_by_three() {
        let (m1, m2, m3) = (2.0, 5.0, 11.0);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![m1, m2, m3]));
        #[rustfmt::skip]
        let printed = DMatrix::from_row_slice(9, 6, &[
            1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
            0.0, -m2 / m1, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, -m3 / m1, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, -m3 / m2, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ]);
        assert_eq!(gen_dup_tilde(&m).unwrap(), printed);
    }

    #[test]
    fn tilde_rejects_bad_input() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(gen_dup_tilde(&m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(gen_dup_tilde(&m).is_err());
    }

    #[test]
    fn bar_matches_printed() {
        assert_eq!(gen_dup_bar(1).shape(), (1, 0));
        assert_eq!(gen_dup_bar(2), DMatrix::from_column_slice(4, 1, &[0.0, 1.0, -1.0, 0.0]));
        #[rustfmt::skip]
        let printed = DMatrix::from_row_slice(9, 3, &[
            0.0, 0.0, 0.0,
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            -1.0, 0.0, 0.0,
            0.0, 0.0, 0.0,
            0.0, 0.0, 1.0,
            0.0, -1.0, 0.0,
            0.0, 0.0, -1.0,
            0.0, 0.0, 0.0,
        ]);
        assert_eq!(gen_dup_bar(3), printed);
    }

    #[test]
    fn j_matrix_extracts_diagonal() {
        assert_eq!(j_matrix(2), DMatrix::from_row_slice(2, 4, &[1., 0., 0., 0., 0., 0., 0., 1.]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = gaussian(&mut rng, 4, 4);
        assert_eq!(j_matrix(4) * vec(&m), m.diagonal());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn bar_reconstructs_skew_matrices(r in 1usize..=5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian(&mut rng, r, r);
            let skew = &a - a.transpose();
            prop_assert!((gen_dup_bar(r) * veck(&skew) - vec(&skew)).amax() < 1e-14);
        }

        #[test]
        fn tilde_spans_weighted_skew_off_diagonal(r in 1usize..=5, seed in any::<u64>()) {
            // A = unvec(D̃(M) v) keeps vech's lower triangle equal to v and makes
            // the off-diagonal part of M A skew-symmetric
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_diagonal(&DVector::from_fn(r, |_, _| 0.5 + rng.random::<f64>()));
            let v = DVector::from_fn(r * (r + 1) / 2, |_, _| rng.sample(StandardNormal));
            let a = DMatrix::from_column_slice(r, r, (gen_dup_tilde(&m).unwrap() * &v).as_slice());
            prop_assert!((vech(&a) - &v).amax() < 1e-14);
            let ma = &m * &a;
            for i in 0..r {
                for j in 0..i {
                    prop_assert!((ma[(i, j)] + ma[(j, i)]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn covariances_are_psd(seed in any::<u64>(), r in 1usize..=3) {
            for tag in [IdentificationTag::Ic1, IdentificationTag::Ic2, IdentificationTag::Ic3] {
                let e = random_estimate(seed, 12, r, tag);
                prop_assert!(is_psd(&loading_cov(&e, 5).unwrap()));
                prop_assert!(is_psd(&mff_cov(&e).unwrap().cov));
                let f = DVector::from_element(r, 0.7);
                prop_assert!(is_psd(&score_cov(&e, &f, 12, 200).unwrap()));
            }
            let e = random_estimate(seed, 12, r, IdentificationTag::Ic4);
            prop_assert!(is_psd(&mff_cov(&e).unwrap().cov));
            prop_assert!(is_psd(&omega(&e)));
        }
    }

    fn scalar_estimate(tag: IdentificationTag, lambda: &[f64], var: &[f64], mff: f64, t: usize) -> FactorEstimate {
        let n = lambda.len();
        let p = FactorParams::new(
            DMatrix::from_column_slice(n, 1, lambda),
            DVector::from_column_slice(var),
            DMatrix::from_element(1, 1, mff),
            DVector::zeros(n),
        )
        .unwrap();
        estimate(p, tag, t)
    }

    #[test]
    fn ic3_scalar_loading_variance() {
        let e = scalar_estimate(IdentificationTag::Ic3, &[0.5, 1.0, 2.0], &[1.0, 2.0, 3.0], 1.0, 50);
        assert!((loading_cov(&e, 1).unwrap()[(0, 0)] - 2.0 / 50.0).abs() < 1e-15);
    }

    #[test]
    fn ic1_with_noise_free_leading_block_matches_ic3_formula() {
        let mut e = random_estimate(3, 10, 2, IdentificationTag::Ic1);
        e.params.idio_var[0] = 0.0;
        e.params.idio_var[1] = 0.0;
        let j = 6;
        let m_inv = e.params.factor_cov.clone().try_inverse().unwrap();
        let expected = m_inv * (e.params.idio_var[j] / e.n_obs as f64);
        assert!((loading_cov(&e, j).unwrap() - expected).amax() < 1e-14);
    }

    #[test]
    fn ic4_and_ic5_loadings_refuse() {
        for tag in [IdentificationTag::Ic4, IdentificationTag::Ic5] {
            let e = random_estimate(4, 8, 2, tag);
            assert!(matches!(loading_cov(&e, 3), Err(FactorError::UnsupportedTag { .. })));
            let f = DVector::zeros(2);
            assert!(matches!(score_cov(&e, &f, 8, 100), Err(FactorError::UnsupportedTag { .. })));
        }
    }

    #[test]
    fn loading_index_checked() {
        let e = random_estimate(5, 8, 2, IdentificationTag::Ic3);
        assert!(matches!(loading_cov(&e, 8), Err(FactorError::IndexOutOfRange { index: 8, size: 8 })));
    }

    #[test]
    fn mff_cov_ic3_is_zero() {
        let e = random_estimate(6, 8, 2, IdentificationTag::Ic3);
        assert_eq!(mff_cov(&e).unwrap().cov, DMatrix::zeros(2, 2));
    }

    #[test]
    fn mff_cov_ic1_scalar() {
        let e = scalar_estimate(IdentificationTag::Ic1, &[1.0, 0.4, 2.0], &[1.5, 2.0, 3.0], 2.5, 80);
        let c = mff_cov(&e).unwrap();
        assert_eq!(c.elements, MffElements::Vech);
        assert!((c.cov[(0, 0)] - 4.0 * 1.5 * 2.5 / 80.0).abs() < 1e-15);
    }

    #[test]
    fn mff_cov_ic2_scalar_and_rate() {
        let e = random_estimate(7, 15, 1, IdentificationTag::Ic2);
        let c = mff_cov(&e).unwrap();
        assert_eq!(c.rate, ConvergenceRate::SqrtNT);
        let p = &e.params;
        let m = p.factor_cov[(0, 0)];
        let q = p.scaled_precision_gram()[(0, 0)];
        let om: f64 = (0..15).map(|i| p.loadings[(i, 0)].powi(4) / p.idio_var[i].powi(2)).sum::<f64>() / 15.0;
        let expected = (2.0 * m * m * om + 4.0 * q * m) / (15.0 * 200.0);
        assert!((c.cov[(0, 0)] - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn mff_cov_ic4_scalar() {
        let e = scalar_estimate(IdentificationTag::Ic4, &[1.0, 0.4, 2.0], &[1.5, 2.0, 3.0], 2.5, 80);
        let c = mff_cov(&e).unwrap();
        assert!((c.cov[(0, 0)] - 4.0 * 1.5 * 2.5 / 80.0).abs() < 1e-14);
    }

    #[test]
    fn idio_var_formula_and_kurtosis() {
        let e = scalar_estimate(IdentificationTag::Ic3, &[1.0, 0.4], &[3.0, 2.0], 1.0, 60);
        assert!((idio_var_cov(&e, 0, None).unwrap() - 18.0 / 60.0).abs() < 1e-15);
        assert_eq!(idio_var_cov(&e, 0, Some(0.0)).unwrap(), idio_var_cov(&e, 0, None).unwrap());
        assert!((idio_var_cov(&e, 1, Some(1.0)).unwrap() - 12.0 / 60.0).abs() < 1e-15);
        assert!(matches!(idio_var_cov(&e, 0, Some(-2.5)), Err(FactorError::InvalidKurtosis { .. })));
    }

    #[test]
    fn score_cov_cases() {
        let e = random_estimate(8, 20, 2, IdentificationTag::Ic2);
        let f = DVector::from_vec(vec![0.3, -1.2]);
        assert_eq!(score_cov(&e, &f, 20, 100).unwrap(), DMatrix::identity(2, 2) / 20.0);

        let e1 = random_estimate(9, 20, 2, IdentificationTag::Ic1);
        let big_t = usize::MAX / 4;
        let q_inv = e1.params.scaled_precision_gram().try_inverse().unwrap() / 20.0;
        assert!((score_cov(&e1, &f, 20, big_t).unwrap() - &q_inv).amax() < 1e-12);
        let e3 = estimate(e1.params.clone(), IdentificationTag::Ic3, 200);
        assert!((score_cov(&e3, &f, 20, 100).unwrap() - q_inv).amax() < 1e-12);
    }

    #[test]
    fn kurtosis_of_gaussian_residuals_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, t) = (10, 4000);
        let lam = gaussian(&mut rng, n, 1);
        let f = gaussian(&mut rng, t, 1);
        let x = &lam * f.transpose() + gaussian(&mut rng, n, t);
        let d = Dataset::new(x).unwrap();
        let p = FactorParams::with_unit_factor_cov(lam, DVector::from_element(n, 1.0)).unwrap();
        let e = estimate(p, IdentificationTag::Ic3, t);
        let k = residual_excess_kurtosis(&d, &e).unwrap();
        assert!(k.amax() < 0.3, "{k}");
    }

    #[test]
    fn standard_errors_shapes() {
        let e = random_estimate(11, 9, 2, IdentificationTag::Ic1);
        let se = standard_errors(&e).unwrap();
        assert_eq!(se.loadings.len(), 9);
        assert_eq!(se.loadings[0].len(), 2);
        assert_eq!(se.factor_cov.len(), 3);
        assert!(standard_errors(&random_estimate(11, 9, 2, IdentificationTag::Ic5)).is_err());
    }
}
