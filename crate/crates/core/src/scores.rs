//! Factor scores for a fitted model.
//!
//! Projection (posterior-mean) scores
//! `f̃_t = (M_ff⁻¹ + Λ'Σ⁻¹Λ)⁻¹ Λ'Σ⁻¹ (z_t − z̄)` and GLS scores
//! `f̂_t = (Λ'Σ⁻¹Λ)⁻¹ Λ'Σ⁻¹ (z_t − z̄)`. The two differ by O(1/N).
//!
//! `z̄` is always the mean of the dataset being scored, not of the data the
//! model was fitted on, so out-of-sample panels can be scored directly.
//! GLS scores do not change when Σ_ee is multiplied by a positive constant;
//! projection scores do, because the prior term `M_ff⁻¹` does not scale.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FactorError, Result};
use crate::linalg;
use crate::model::{Dataset, FactorParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Projection,
    #[default]
    Gls,
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Projection => "projection",
            Self::Gls => "gls",
        })
    }
}

impl FromStr for ScoreMethod {
    type Err = FactorError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "projection" => Ok(Self::Projection),
            "gls" => Ok(Self::Gls),
            other => Err(FactorError::InvalidInput(format!("unknown score method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorScores {
    /// T×r.
    pub values: DMatrix<f64>,
    pub method: ScoreMethod,
}

impl FactorScores {
    pub fn n_obs(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.values.ncols()
    }
}

fn check_shapes(d: &Dataset, p: &FactorParams) -> Result<()> {
    p.validate()?;
    if d.n_vars() != p.n_vars() {
        return Err(FactorError::Dimension(format!("dataset has {} variables, model has {}", d.n_vars(), p.n_vars())));
    }
    Ok(())
}

/// Λ'Σ⁻¹(z_t − z̄) stacked as an r×T matrix.
fn weighted_projection(d: &Dataset, p: &FactorParams) -> DMatrix<f64> {
    p.weighted_loadings().transpose() * d.centered_values()
}

fn precision_gram(p: &FactorParams) -> DMatrix<f64> {
    p.loadings.transpose() * p.weighted_loadings()
}

pub fn projection_scores(d: &Dataset, p: &FactorParams) -> Result<FactorScores> {
    check_shapes(d, p)?;
    let (mff_inv, _) = linalg::spd_inverse(&p.factor_cov, "factor covariance")?;
    let (inner_inv, _) = linalg::spd_inverse(&(mff_inv + precision_gram(p)), "projection score system")?;
    let values = (inner_inv * weighted_projection(d, p)).transpose();
    Ok(FactorScores { values, method: ScoreMethod::Projection })
}

pub fn gls_scores(d: &Dataset, p: &FactorParams) -> Result<FactorScores> {
    check_shapes(d, p)?;
    let (gram_inv, _) = linalg::spd_inverse(&precision_gram(p), "GLS score system")
        .map_err(|_| FactorError::Rank("Λ'Σ_ee⁻¹Λ is singular".into()))?;
    let values = (gram_inv * weighted_projection(d, p)).transpose();
    Ok(FactorScores { values, method: ScoreMethod::Gls })
}

pub fn scores(d: &Dataset, p: &FactorParams, method: ScoreMethod) -> Result<FactorScores> {
    match method {
        ScoreMethod::Projection => projection_scores(d, p),
        ScoreMethod::Gls => gls_scores(d, p),
    }
}

/// `max_t ‖f̃_t − f̂_t‖`.
pub fn score_gap(d: &Dataset, p: &FactorParams) -> Result<f64> {
    let proj = projection_scores(d, p)?;
    let gls = gls_scores(d, p)?;
    let diff = proj.values - gls.values;
    Ok(diff.row_iter().map(|row| row.norm()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn random_params(rng: &mut ChaCha8Rng, n: usize, r: usize) -> FactorParams {
        let a = gaussian(rng, r, r);
        let mff = &a * a.transpose() + DMatrix::identity(r, r);
        FactorParams::new(
            gaussian(rng, n, r),
            DVector::from_fn(n, |_, _| 0.1 + 10.0 * rng.random::<f64>()),
            mff,
            DVector::zeros(n),
        )
        .unwrap()
    }

    #[test]
    fn observation_at_the_mean_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 5, 2);
        // two symmetric columns around their mean plus one at the mean
        let x = gaussian(&mut rng, 5, 1);
        let mut values = DMatrix::zeros(5, 3);
        values.set_column(0, &x.column(0));
        values.set_column(2, &(-x.column(0)));
        let d = Dataset::new(values).unwrap();
        for s in [projection_scores(&d, &p).unwrap(), gls_scores(&d, &p).unwrap()] {
            assert!(s.values.row(1).amax() < 1e-14);
        }
    }

    #[test]
    fn projection_scalar_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 7;
        let p = FactorParams::with_unit_factor_cov(DMatrix::from_element(n, 1, 1.0), DVector::from_element(n, 1.0))
            .unwrap();
        let d = Dataset::new(gaussian(&mut rng, n, 10)).unwrap();
        let s = projection_scores(&d, &p).unwrap();
        let x = d.centered_values();
        for t in 0..10 {
            let expected = x.column(t).sum() / (1.0 + n as f64);
            assert!((s.values[(t, 0)] - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn projection_matches_dense_posterior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 6, 2);
        let d = Dataset::new(gaussian(&mut rng, 6, 15)).unwrap();
        let s = projection_scores(&d, &p).unwrap();
        // E(f|z) = M Λ' Σ_zz⁻¹ (z − z̄) from the joint normal
        let sigma_inv = p.implied_covariance().try_inverse().unwrap();
        let oracle = (&p.factor_cov * p.loadings.transpose() * sigma_inv * d.centered_values()).transpose();
        assert!(linalg::rel_diff(&s.values, &oracle) < 1e-10);
    }

    #[test]
    fn gls_recovers_noiseless_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 8, 3);
        let mut f = gaussian(&mut rng, 12, 3);
        let col_means = f.row_mean();
        for mut row in f.row_iter_mut() {
            row -= &col_means;
        }
        let d = Dataset::new(&p.loadings * f.transpose()).unwrap();
        let s = gls_scores(&d, &p).unwrap();
        assert!((s.values - f).amax() < 1e-10);
    }

    #[test]
    fn gls_scalar_ols_and_homoskedastic_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lam = gaussian(&mut rng, 9, 1);
        let d = Dataset::new(gaussian(&mut rng, 9, 6)).unwrap();
        let p = FactorParams::with_unit_factor_cov(lam.clone(), DVector::from_element(9, 1.0)).unwrap();
        let s = gls_scores(&d, &p).unwrap();
        let x = d.centered_values();
        for t in 0..6 {
            let expected = lam.column(0).dot(&x.column(t)) / lam.norm_squared();
            assert!((s.values[(t, 0)] - expected).abs() < 1e-13);
        }
        let lam = gaussian(&mut rng, 9, 2);
        let p = FactorParams::with_unit_factor_cov(lam.clone(), DVector::from_element(9, 3.7)).unwrap();
        let ols = ((lam.transpose() * &lam).try_inverse().unwrap() * lam.transpose() * &x).transpose();
        assert!(linalg::rel_diff(&gls_scores(&d, &p).unwrap().values, &ols) < 1e-12);
    }

    #[test]
    fn scores_are_linear_in_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&mut rng, 6, 2);
        let a = gaussian(&mut rng, 6, 10);
        let b = gaussian(&mut rng, 6, 10);
        let da = Dataset::new(a.clone()).unwrap();
        let db = Dataset::new(b.clone()).unwrap();
        let dab = Dataset::new(a + b).unwrap();
        for m in [ScoreMethod::Gls, ScoreMethod::Projection] {
            let sum = scores(&da, &p, m).unwrap().values + scores(&db, &p, m).unwrap().values;
            assert!((scores(&dab, &p, m).unwrap().values - sum).amax() < 1e-12);
        }
    }

    #[test]
    fn gls_invariant_to_variance_scale_projection_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_params(&mut rng, 6, 2);
        let d = Dataset::new(gaussian(&mut rng, 6, 10)).unwrap();
        let mut q = p.clone();
        q.idio_var *= 4.0;
        let g = gls_scores(&d, &p).unwrap().values;
        assert!(linalg::rel_diff(&gls_scores(&d, &q).unwrap().values, &g) < 1e-12);
        let pr = projection_scores(&d, &p).unwrap().values;
        assert!(linalg::rel_diff(&projection_scores(&d, &q).unwrap().values, &pr) > 1e-3);
    }

    #[test]
    fn unit_precision_gram_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(&mut rng, 20, 3);
        let p = crate::identify::rotate_to_ic2(&p).unwrap();
        let d = Dataset::new(gaussian(&mut rng, 20, 10)).unwrap();
        let shortcut = (weighted_projection(&d, &p) / 20.0).transpose();
        assert!(linalg::rel_diff(&gls_scores(&d, &p).unwrap().values, &shortcut) < 1e-10);
    }

    #[test]
    fn gap_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 10, 2);
        let d = Dataset::new(gaussian(&mut rng, 10, 8)).unwrap();
        let h = precision_gram(&p);
        let mff_inv = p.factor_cov.clone().try_inverse().unwrap();
        let k = (mff_inv + &h).try_inverse().unwrap() - h.try_inverse().unwrap();
        let diff = k * weighted_projection(&d, &p);
        let direct = diff.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!((score_gap(&d, &p).unwrap() - direct).abs() < 1e-12 * direct.max(1.0));
    }

    #[test]
    fn gap_vanishes_for_diffuse_factor_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = random_params(&mut rng, 10, 2);
        let d = Dataset::new(gaussian(&mut rng, 10, 8)).unwrap();
        let base = score_gap(&d, &p).unwrap();
        p.factor_cov *= 1e8;
        assert!(score_gap(&d, &p).unwrap() < 1e-6 * base);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng, 5, 1);
        let d = Dataset::new(gaussian(&mut rng, 6, 4)).unwrap();
        assert!(matches!(gls_scores(&d, &p), Err(FactorError::Dimension(_))));
    }

    #[test]
    fn method_parses() {
        assert_eq!("GLS".parse::<ScoreMethod>().unwrap(), ScoreMethod::Gls);
        assert_eq!("projection".parse::<ScoreMethod>().unwrap(), ScoreMethod::Projection);
        assert!("ols".parse::<ScoreMethod>().is_err());
        assert_eq!(ScoreMethod::default(), ScoreMethod::Gls);
    }
}
