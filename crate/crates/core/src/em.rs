//! EM for the quasi maximum-likelihood estimator under the working
//! normalization `M_ff = I_r`.
//!
//! With `P = Σ_zz⁻¹` at the current iterate, the expected sufficient
//! statistics are
//!
//! ```text
//! (1/T) Σ E(z_t f_t')  = M_zz P Λ
//! (1/T) Σ E(f_t f_t')  = Λ'P M_zz P Λ + I_r − Λ'P Λ
//! ```
//!
//! and the update is `Λ⁺ = [M_zz P Λ][…]⁻¹`,
//! `Σ_ee⁺ = diag(M_zz − Λ⁺ Λ'P M_zz)`, clamped to the variance box. Every
//! product with `P` goes through [`LowRankPrecision`], so an iteration costs
//! O(N² r) for the single `M_zz` product and O(N r²) otherwise.
//!
//! After the last iteration the loadings are rotated by the eigenvectors of
//! `(1/N) Λ'Σ_ee⁻¹Λ` (descending) so the output satisfies IC3.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FactorError, Result};
use crate::identify::{self, FactorEstimate};
use crate::linalg;
use crate::model::{self, Dataset, FactorParams, FocResiduals, IdentificationTag, LowRankPrecision, VarianceBounds};
use crate::pca;

/// Consecutive iterations a variance may sit on the floor before a Heywood
/// warning is raised.
pub const HEYWOOD_PATIENCE: usize = 10;

/// Starting value for EM.
#[derive(Debug, Clone)]
pub enum Init {
    /// Principal components.
    Pca,
    /// A user-supplied parameter set (any `M_ff`; it is rescaled to `I_r`).
    Provided(FactorParams),
    /// Gaussian loadings drawn from the given seed.
    Random(u64),
}

#[derive(Debug, Clone)]
pub struct EMConfig {
    pub max_iter: usize,
    /// Threshold on `‖θ⁺ − θ‖ / (1 + ‖θ‖)` over the stacked `(Λ, diag Σ_ee)`.
    pub tol: f64,
    /// Threshold on the absolute log-likelihood change; `0.0` disables it.
    pub loglik_tol: f64,
    pub init: Init,
    /// Absolute variance floor; `None` means `1e-8` times the mean sample
    /// variance.
    pub var_floor: Option<f64>,
    /// Absolute variance ceiling; `None` means `1e8` times the mean sample
    /// variance.
    pub var_ceiling: Option<f64>,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self { max_iter: 5000, tol: 1e-6, loglik_tol: 1e-9, init: Init::Pca, var_floor: None, var_ceiling: None }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(FactorError::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) || !(self.loglik_tol >= 0.0) {
            return Err(FactorError::InvalidInput("tol must be positive and loglik_tol non-negative".into()));
        }
        if let (Some(lo), Some(hi)) = (self.var_floor, self.var_ceiling) {
            VarianceBounds::new(lo, hi)?;
        }
        Ok(())
    }

    fn bounds(&self, m_zz: &DMatrix<f64>) -> Result<VarianceBounds> {
        let default = VarianceBounds::default_for(m_zz)?;
        VarianceBounds::new(self.var_floor.unwrap_or(default.floor), self.var_ceiling.unwrap_or(default.ceiling))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitWarning {
    /// `max_iter` reached without meeting either tolerance.
    NotConverged { max_iter: usize },
    /// Variances held at the floor for more than [`HEYWOOD_PATIENCE`]
    /// consecutive iterations.
    Heywood { variables: Vec<usize> },
    /// Variances that ended on the ceiling.
    CeilingPinned { variables: Vec<usize> },
}

impl fmt::Display for FitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NotConverged { max_iter } => write!(f, "EM did not converge in {max_iter} iterations"),
            Self::Heywood { variables } => {
                write!(f, "Heywood case: variances of variables {variables:?} pinned at the floor")
            }
            Self::CeilingPinned { variables } => {
                write!(f, "variances of variables {variables:?} pinned at the ceiling")
            }
        }
    }
}

/// Record of one EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EMTrace {
    pub iterations: usize,
    /// Log-likelihood at the starting value and after every iteration.
    pub loglik_path: Vec<f64>,
    pub converged: bool,
    pub final_param_delta: f64,
    pub final_foc_residuals: FocResiduals,
    pub warnings: Vec<FitWarning>,
}

impl EMTrace {
    /// Largest single-step decrease of the log-likelihood (zero when the
    /// path is nondecreasing).
    pub fn max_loglik_drop(&self) -> f64 {
        self.loglik_path.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
    }

    pub fn has_heywood(&self) -> bool {
        self.warnings.iter().any(|w| matches!(w, FitWarning::Heywood { .. }))
    }
}

fn require_unit_factor_cov(p: &FactorParams) -> Result<()> {
    let r = p.n_factors();
    if (&p.factor_cov - DMatrix::identity(r, r)).amax() > 1e-12 {
        return Err(FactorError::InvalidInput("em_step requires factor_cov = I_r".into()));
    }
    Ok(())
}

/// One EM update at `M_ff = I_r`.
pub fn em_step(m_zz: &DMatrix<f64>, p: &FactorParams, bounds: &VarianceBounds) -> Result<FactorParams> {
    require_unit_factor_cov(p)?;
    if m_zz.shape() != (p.n_vars(), p.n_vars()) {
        return Err(FactorError::Dimension("M_zz does not match the model".into()));
    }
    let prec = LowRankPrecision::new(p)?;
    step_with(m_zz, p, &prec, bounds)
}

fn step_with(
    m_zz: &DMatrix<f64>,
    p: &FactorParams,
    prec: &LowRankPrecision,
    bounds: &VarianceBounds,
) -> Result<FactorParams> {
    let r = p.n_factors();
    let a = prec.loadings_precision(); // Λ'P, r×N
    let ezf = m_zz * a.transpose(); // M P Λ, N×r
    let eff = &a * &ezf + DMatrix::identity(r, r) - &a * &p.loadings;
    let (eff_inv, _) = linalg::spd_inverse(&eff, "E-step factor moment")?;
    let loadings = &ezf * eff_inv;
    // diag(Λ⁺ Λ'P M)_i = Λ⁺_i · (M P Λ)_i
    let idio_var = DVector::from_fn(p.n_vars(), |i, _| bounds.clamp(m_zz[(i, i)] - loadings.row(i).dot(&ezf.row(i))));
    Ok(FactorParams { loadings, idio_var, factor_cov: p.factor_cov.clone(), intercept: p.intercept.clone() })
}

fn param_norm(p: &FactorParams) -> f64 {
    (p.loadings.norm_squared() + p.idio_var.norm_squared()).sqrt()
}

fn param_distance(a: &FactorParams, b: &FactorParams) -> f64 {
    ((&a.loadings - &b.loadings).norm_squared() + (&a.idio_var - &b.idio_var).norm_squared()).sqrt()
}

fn initial_params(
    d: &Dataset,
    m_zz: &DMatrix<f64>,
    r: usize,
    cfg: &EMConfig,
    bounds: &VarianceBounds,
) -> Result<FactorParams> {
    let n = d.n_vars();
    let (loadings, idio_var) = match &cfg.init {
        Init::Pca => {
            let pc = pca::pc_fit(d, r)?;
            (pc.loadings, pc.idio_var)
        }
        Init::Provided(p) => {
            p.validate()?;
            if p.n_vars() != n || p.n_factors() != r {
                return Err(FactorError::Dimension(format!(
                    "initial parameters are {}x{}, expected {n}x{r}",
                    p.n_vars(),
                    p.n_factors()
                )));
            }
            let chol = p
                .factor_cov
                .clone()
                .cholesky()
                .ok_or_else(|| FactorError::InvalidInput("initial factor_cov is not positive definite".into()))?;
            (&p.loadings * chol.l(), p.idio_var.clone())
        }
        Init::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let scale = (m_zz.trace() / n as f64 / (2.0 * r as f64)).sqrt();
            let l = DMatrix::from_fn(n, r, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
            (l, m_zz.diagonal() * 0.5)
        }
    };
    let idio_var = idio_var.map(|v| bounds.clamp(v));
    FactorParams::new(loadings, idio_var, DMatrix::identity(r, r), d.mean())
}

/// Fits an r-factor model by EM and returns the IC3-normalized estimate.
///
/// Stops when the relative parameter change falls below `cfg.tol`, the
/// log-likelihood change falls below `cfg.loglik_tol`, or after
/// `cfg.max_iter` iterations (in which case `trace.converged` is false and a
/// warning is attached).
pub fn fit(d: &Dataset, r: usize, cfg: &EMConfig) -> Result<FactorEstimate> {
    cfg.validate()?;
    let (n, t) = (d.n_vars(), d.n_obs());
    if r < 1 || r >= n.min(t) {
        return Err(FactorError::InvalidInput(format!(
            "number of factors must satisfy 1 <= r < min(N, T) = {}, got {r}",
            n.min(t)
        )));
    }
    let m_zz = model::sample_second_moment(d);
    let bounds = cfg.bounds(&m_zz)?;
    let mut params = initial_params(d, &m_zz, r, cfg, &bounds)?;
    let mut prec = LowRankPrecision::new(&params)?;
    let mut loglik = model::log_likelihood_with(&m_zz, &prec, n);
    let mut path = vec![loglik];
    let mut converged = false;
    let mut delta = f64::INFINITY;
    let mut floor_run = vec![0usize; n];
    let mut heywood = vec![false; n];
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        let next = step_with(&m_zz, &params, &prec, &bounds)?;
        let next_prec = LowRankPrecision::new(&next)?;
        let next_loglik = model::log_likelihood_with(&m_zz, &next_prec, n);
        iterations += 1;
        delta = param_distance(&next, &params) / (1.0 + param_norm(&params));
        for (i, v) in next.idio_var.iter().enumerate() {
            if *v <= bounds.floor {
                floor_run[i] += 1;
                heywood[i] |= floor_run[i] > HEYWOOD_PATIENCE;
            } else {
                floor_run[i] = 0;
            }
        }
        let change = (next_loglik - loglik).abs();
        path.push(next_loglik);
        params = next;
        prec = next_prec;
        loglik = next_loglik;
        if delta < cfg.tol || change < cfg.loglik_tol {
            converged = true;
            break;
        }
    }

    let mut warnings = Vec::new();
    if !converged {
        warnings.push(FitWarning::NotConverged { max_iter: cfg.max_iter });
    }
    let pinned: Vec<usize> = (0..n).filter(|&i| heywood[i]).collect();
    if !pinned.is_empty() {
        warnings.push(FitWarning::Heywood { variables: pinned });
    }
    let ceiling: Vec<usize> = (0..n).filter(|&i| params.idio_var[i] >= bounds.ceiling).collect();
    if !ceiling.is_empty() {
        warnings.push(FitWarning::CeilingPinned { variables: ceiling });
    }

    let params = identify::rotate_to_ic3(&params)?;
    let final_foc_residuals = model::foc_residuals(&m_zz, &params)?;
    let trace =
        EMTrace { iterations, loglik_path: path, converged, final_param_delta: delta, final_foc_residuals, warnings };
    Ok(FactorEstimate { params, tag: IdentificationTag::Ic3, loglik, trace, n_obs: t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_second_moment;

    fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    /// Panel from the simulation design: standard normal loadings and
    /// factors, variances 0.1 + 10 U.
    fn simulated(seed: u64, n: usize, t: usize, r: usize) -> (Dataset, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lam = gaussian(&mut rng, n, r);
        let f = gaussian(&mut rng, t, r);
        let var = DVector::from_fn(n, |_, _| 0.1 + 10.0 * rng.random::<f64>());
        let mut x = &lam * f.transpose();
        for i in 0..n {
            for s in 0..t {
                x[(i, s)] += var[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        (Dataset::new(x).unwrap(), lam, var)
    }

    fn wide_bounds() -> VarianceBounds {
        VarianceBounds::new(1e-10, 1e10).unwrap()
    }

    /// Per-observation E-step: conditional moments of f_t given z_t from the
    /// dense joint normal, averaged over t.
    fn per_observation_em_step(d: &Dataset, p: &FactorParams) -> FactorParams {
        let n = d.n_vars();
        let r = p.n_factors();
        let x = d.centered_values();
        let sigma_inv = p.implied_covariance().try_inverse().unwrap();
        let beta = p.loadings.transpose() * &sigma_inv; // r×N
        let cond_var = DMatrix::identity(r, r) - &beta * &p.loadings;
        let mut szf = DMatrix::zeros(n, r);
        let mut sff = DMatrix::zeros(r, r);
        for t in 0..d.n_obs() {
            let z = x.column(t).into_owned();
            let ef = &beta * &z;
            szf += &z * ef.transpose();
            sff += &cond_var + &ef * ef.transpose();
        }
        let tf = d.n_obs() as f64;
        szf /= tf;
        sff /= tf;
        let lam = &szf * sff.try_inverse().unwrap();
        let m = sample_second_moment(d);
        let var = DVector::from_fn(n, |i, _| m[(i, i)] - (&lam * szf.transpose())[(i, i)]);
        FactorParams::with_unit_factor_cov(lam, var).unwrap()
    }

    #[test]
    fn step_matches_per_observation_oracle() {
        let (d, _, _) = simulated(1, 5, 20, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let p = FactorParams::with_unit_factor_cov(
            gaussian(&mut rng, 5, 2),
            DVector::from_fn(5, |_, _| 0.5 + rng.random::<f64>()),
        )
        .unwrap();
        let fast = em_step(&sample_second_moment(&d), &p, &wide_bounds()).unwrap();
        let slow = per_observation_em_step(&d, &p);
        assert!(linalg::rel_diff(&fast.loadings, &slow.loadings) < 1e-10);
        let dv = (&fast.idio_var - &slow.idio_var).norm() / slow.idio_var.norm();
        assert!(dv < 1e-10, "{dv}");
    }

    #[test]
    fn exact_fit_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = FactorParams::with_unit_factor_cov(
            gaussian(&mut rng, 8, 2),
            DVector::from_fn(8, |_, _| 0.5 + rng.random::<f64>()),
        )
        .unwrap();
        let m = p.implied_covariance();
        let q = em_step(&m, &p, &wide_bounds()).unwrap();
        assert!((&q.loadings - &p.loadings).amax() < 1e-10);
        assert!((&q.idio_var - &p.idio_var).amax() < 1e-10);
    }

    #[test]
    fn one_step_from_pca_increases_likelihood() {
        let (d, _, _) = simulated(3, 20, 50, 2);
        let m = sample_second_moment(&d);
        let bounds = VarianceBounds::default_for(&m).unwrap();
        let pc = pca::pc_fit(&d, 2).unwrap();
        let p0 = FactorParams::with_unit_factor_cov(pc.loadings, pc.idio_var).unwrap();
        let p1 = em_step(&m, &p0, &bounds).unwrap();
        let l0 = model::log_likelihood(&m, &p0).unwrap();
        let l1 = model::log_likelihood(&m, &p1).unwrap();
        assert!(l1 > l0, "{l0} -> {l1}");
    }

    #[test]
    fn em_step_requires_unit_factor_cov() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = FactorParams::new(
            gaussian(&mut rng, 4, 1),
            DVector::from_element(4, 1.0),
            DMatrix::from_element(1, 1, 2.0),
            DVector::zeros(4),
        )
        .unwrap();
        assert!(em_step(&DMatrix::identity(4, 4), &p, &wide_bounds()).is_err());
    }

    #[test]
    fn fit_path_is_monotone_and_output_is_ic3() {
        let (d, _, _) = simulated(5, 30, 60, 2);
        let est = fit(&d, 2, &EMConfig::default()).unwrap();
        assert!(est.trace.converged);
        assert!(est.trace.max_loglik_drop() <= 1e-10);
        let gram = est.params.scaled_precision_gram();
        assert!(gram[(0, 0)] > gram[(1, 1)]);
        assert!(gram[(0, 1)].abs() < 1e-8 * gram[(0, 0)]);
        assert_eq!(est.params.factor_cov, DMatrix::identity(2, 2));
        assert_eq!(est.params.intercept, d.mean());
        assert!(identify::verify(&est.params, IdentificationTag::Ic3, 1e-8).passed());
    }

    #[test]
    fn converged_fit_is_nearly_stationary() {
        let (d, _, _) = simulated(6, 40, 80, 2);
        let cfg = EMConfig { tol: 1e-8, loglik_tol: 1e-15, ..EMConfig::default() };
        let est = fit(&d, 2, &cfg).unwrap();
        assert!(est.trace.final_foc_residuals.loadings < 1e-5, "{:?}", est.trace.final_foc_residuals);
    }

    #[test]
    fn final_rotation_keeps_likelihood() {
        let (d, _, _) = simulated(7, 25, 40, 3);
        let m = sample_second_moment(&d);
        let est = fit(&d, 3, &EMConfig::default()).unwrap();
        let ll = model::log_likelihood(&m, &est.params).unwrap();
        assert!((ll - est.loglik).abs() < 1e-12 * ll.abs());
    }

    #[test]
    fn null_model_loadings_shrink_with_t() {
        let mut norms = Vec::new();
        for &t in &[100usize, 1000, 10000] {
            let mut total = 0.0;
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let var = DVector::from_fn(12, |_, _| 0.1 + 10.0 * rng.random::<f64>());
                let x = DMatrix::from_fn(12, t, |i, _| var[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
                let est = fit(&Dataset::new(x).unwrap(), 1, &EMConfig::default()).unwrap();
                assert!(est.trace.max_loglik_drop() <= 1e-10);
                let scaled = DVector::from_fn(12, |i, _| est.params.loadings[(i, 0)] / var[i].sqrt());
                total += scaled.norm();
            }
            norms.push(total / 5.0);
        }
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn random_and_provided_inits_reach_the_same_fit() {
        let (d, _, _) = simulated(8, 20, 100, 2);
        let cfg = EMConfig { tol: 1e-10, loglik_tol: 1e-15, max_iter: 50_000, ..EMConfig::default() };
        let a = fit(&d, 2, &cfg).unwrap();
        let b = fit(&d, 2, &EMConfig { init: Init::Random(9), ..cfg.clone() }).unwrap();
        let c = fit(&d, 2, &EMConfig { init: Init::Provided(a.params.clone()), ..cfg }).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-9);
        assert!(linalg::rel_diff(&b.params.common_component(), &a.params.common_component()) < 1e-4);
        assert!(c.trace.iterations <= 2);
    }

    #[test]
    fn invalid_factor_count_is_rejected() {
        let (d, _, _) = simulated(9, 5, 10, 1);
        assert!(fit(&d, 0, &EMConfig::default()).is_err());
        assert!(fit(&d, 5, &EMConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EMConfig { loglik_tol: 0.0, ..EMConfig::default() }.validate().is_ok());
        assert!(EMConfig { loglik_tol: -1.0, ..EMConfig::default() }.validate().is_err());
        assert!(EMConfig { tol: 0.0, ..EMConfig::default() }.validate().is_err());
        assert!(EMConfig { max_iter: 0, ..EMConfig::default() }.validate().is_err());
        let crossed = EMConfig { var_floor: Some(2.0), var_ceiling: Some(1.0), ..EMConfig::default() };
        assert!(crossed.validate().is_err());
    }

    #[test]
    fn max_iter_reports_non_convergence() {
        let (d, _, _) = simulated(10, 15, 40, 2);
        let cfg = EMConfig { max_iter: 2, tol: 1e-14, loglik_tol: 1e-300, ..EMConfig::default() };
        let est = fit(&d, 2, &cfg).unwrap();
        assert!(!est.trace.converged);
        assert_eq!(est.trace.iterations, 2);
        assert_eq!(est.trace.loglik_path.len(), 3);
        assert!(est.trace.warnings.contains(&FitWarning::NotConverged { max_iter: 2 }));
    }

    #[test]
    fn transposed_fit_has_time_dimension_structure() {
        let (d, _, _) = simulated(11, 40, 12, 2);
        let dt = model::transpose_representation(&d);
        let est = fit(&dt, 2, &EMConfig::default()).unwrap();
        // loadings of the transposed fit are factor paths (T×r), variances
        // are per time point
        assert_eq!(est.params.loadings.shape(), (12, 2));
        assert_eq!(est.params.idio_var.len(), 12);
        let sigma = est.params.implied_covariance();
        let m = sample_second_moment(&dt);
        assert_eq!(sigma.shape(), m.shape());
        // fitted structure F M F' + Σ† reproduces the diagonal of the T×T moment
        // at a stationary point of the variance condition
        let res = est.trace.final_foc_residuals;
        assert!(res.loadings < 1e-3, "{res:?}");
    }
}
