//! Domain types for the static factor model `z_t = α + Λ f_t + e_t` and the
//! Gaussian quasi log-likelihood of its implied covariance
//! `Σ_zz = Λ M_ff Λ' + Σ_ee`.
//!
//! `Σ_ee` is strictly diagonal and is stored as a vector. The likelihood and
//! first-order conditions never build the dense N×N `Σ_zz` or its inverse;
//! they go through [`LowRankPrecision`], which applies `Σ_zz⁻¹` through the
//! r×r inner system `M_ff⁻¹ + Λ'Σ_ee⁻¹Λ`.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FactorError, Result};
use crate::linalg;

/// An observed N×T panel: row `i` is variable `i`, column `t` is time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
}

impl Dataset {
    /// Wraps an N×T matrix. Requires N ≥ 1, T ≥ 2 and finite entries.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 1 || values.ncols() < 2 {
            return Err(FactorError::InvalidInput(format!(
                "dataset needs N >= 1 and T >= 2, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            // column-major storage
            let n = values.nrows();
            return Err(FactorError::NonFinite { var: k % n, obs: k / n });
        }
        Ok(Self { values })
    }

    /// Builds a dataset from T observation vectors, each of length N.
    pub fn from_observations(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(FactorError::Dimension(format!("observation {k} has {} values, expected {n}", r.len())));
        }
        Self::new(DMatrix::from_fn(n, t, |i, j| rows[j][i]))
    }

    /// Reads the CSV layout used throughout the crate: one row per time
    /// point, one column per variable, an optional header row, `.` as the
    /// decimal separator. Empty or non-numeric cells are rejected with the
    /// offending line number.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr =
            csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut width: Option<usize> = None;
        for (k, record) in rdr.records().enumerate() {
            let record = record
                .map_err(|e| FactorError::Csv { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
            let line = record.position().map_or(k as u64 + 1, |p| p.line());
            if record.iter().all(str::is_empty) {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, usize> =
                record.iter().enumerate().map(|(c, field)| parse_cell(field).ok_or(c)).collect();
            match parsed {
                Ok(values) => {
                    match width {
                        Some(w) if w != values.len() => {
                            return Err(FactorError::Csv {
                                line,
                                message: format!("expected {w} fields, found {}", values.len()),
                            })
                        }
                        _ => width = Some(values.len()),
                    }
                    rows.push(values);
                }
                // A non-numeric first row is a header.
                Err(_) if rows.is_empty() && width.is_none() => width = Some(record.len()),
                Err(c) => {
                    return Err(FactorError::Csv {
                        line,
                        message: format!(
                            "field {} ({:?}) is missing or not a finite number",
                            c + 1,
                            record.get(c).unwrap_or("")
                        ),
                    })
                }
            }
        }
        if rows.is_empty() {
            return Err(FactorError::Csv { line: 0, message: "no data rows".into() });
        }
        Self::from_observations(&rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_vars(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.values.ncols()
    }

    /// Time average `z̄` (length N).
    pub fn mean(&self) -> DVector<f64> {
        self.values.column_mean()
    }

    /// Copy with each variable's time mean removed.
    pub fn demeaned(&self) -> Dataset {
        Dataset { values: self.centered_values() }
    }

    /// `z_t − z̄` stacked as an N×T matrix.
    pub fn centered_values(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut centered = self.values.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        centered
    }

    /// The T×N panel in which time points play the role of variables.
    pub fn transpose(&self) -> Dataset {
        Dataset { values: self.values.transpose() }
    }
}

fn parse_cell(field: &str) -> Option<f64> {
    field.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// `M_zz = (1/T) Σ_t (z_t − z̄)(z_t − z̄)'`.
///
/// Divides by T, not T − 1: this is the moment the likelihood is written
/// in, not the unbiased sample covariance.
pub fn sample_second_moment(d: &Dataset) -> DMatrix<f64> {
    let centered = d.centered_values();
    let m = &centered * centered.transpose() / d.n_obs() as f64;
    linalg::symmetrize(&m)
}

/// Swaps the roles of variables and time. Fitting the transposed panel
/// estimates the factors `F` with time-dimension heteroskedasticity in
/// place of `Λ` and the cross-sectional variances.
pub fn transpose_representation(d: &Dataset) -> Dataset {
    d.transpose()
}

/// Identification conditions pinning down the rotation of `(Λ, M_ff)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IdentificationTag {
    /// `Λ = (I_r, Λ_2')'`, `M_ff` unrestricted.
    #[serde(rename = "IC1")]
    Ic1,
    /// `M_ff` diagonal (distinct, descending), `(1/N)Λ'Σ_ee⁻¹Λ = I_r`.
    #[serde(rename = "IC2")]
    Ic2,
    /// `M_ff = I_r`, `(1/N)Λ'Σ_ee⁻¹Λ` diagonal (distinct, descending).
    #[serde(rename = "IC3")]
    Ic3,
    /// `M_ff` diagonal, leading block of `Λ` unit lower triangular.
    #[serde(rename = "IC4")]
    Ic4,
    /// `M_ff = I_r`, leading block of `Λ` lower triangular, nonzero diagonal.
    #[serde(rename = "IC5")]
    Ic5,
}

impl IdentificationTag {
    pub const ALL: [IdentificationTag; 5] = [Self::Ic1, Self::Ic2, Self::Ic3, Self::Ic4, Self::Ic5];

    pub fn index(self) -> u8 {
        match self {
            Self::Ic1 => 1,
            Self::Ic2 => 2,
            Self::Ic3 => 3,
            Self::Ic4 => 4,
            Self::Ic5 => 5,
        }
    }

    pub fn from_index(k: u8) -> Option<Self> {
        Self::ALL.get(usize::from(k).checked_sub(1)?).copied()
    }
}

impl fmt::Display for IdentificationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IC{}", self.index())
    }
}

impl FromStr for IdentificationTag {
    type Err = FactorError;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.trim().trim_start_matches("IC").trim_start_matches("ic");
        digits
            .parse::<u8>()
            .ok()
            .and_then(Self::from_index)
            .ok_or_else(|| FactorError::InvalidInput(format!("unknown identification condition {s:?}")))
    }
}

/// Box constraint on the idiosyncratic variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceBounds {
    pub floor: f64,
    pub ceiling: f64,
}

impl VarianceBounds {
    pub const DEFAULT_FLOOR_FACTOR: f64 = 1e-8;
    pub const DEFAULT_CEILING_FACTOR: f64 = 1e8;

    pub fn new(floor: f64, ceiling: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < ceiling && ceiling.is_finite()) {
            return Err(FactorError::InvalidInput(format!(
                "variance bounds need 0 < floor < ceiling < inf, got [{floor}, {ceiling}]"
            )));
        }
        Ok(Self { floor, ceiling })
    }

    /// Bounds scaled by the mean sample variance `tr(M_zz)/N`.
    pub fn relative(m_zz: &DMatrix<f64>, floor_factor: f64, ceiling_factor: f64) -> Result<Self> {
        let mean_var = m_zz.trace() / m_zz.nrows() as f64;
        if !(mean_var > 0.0) {
            return Err(FactorError::InvalidInput("every variable is constant".into()));
        }
        Self::new(floor_factor * mean_var, ceiling_factor * mean_var)
    }

    pub fn default_for(m_zz: &DMatrix<f64>) -> Result<Self> {
        Self::relative(m_zz, Self::DEFAULT_FLOOR_FACTOR, Self::DEFAULT_CEILING_FACTOR)
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.floor, self.ceiling)
    }
}

/// Parameters `(Λ, diag Σ_ee, M_ff, α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorParams {
    /// N×r loadings.
    pub loadings: DMatrix<f64>,
    /// Diagonal of `Σ_ee`.
    pub idio_var: DVector<f64>,
    /// r×r second moment of the factors.
    pub factor_cov: DMatrix<f64>,
    /// Intercept, always the sample mean of the fitting data.
    pub intercept: DVector<f64>,
}

impl FactorParams {
    pub fn new(
        loadings: DMatrix<f64>,
        idio_var: DVector<f64>,
        factor_cov: DMatrix<f64>,
        intercept: DVector<f64>,
    ) -> Result<Self> {
        let p = Self { loadings, idio_var, factor_cov, intercept };
        p.validate()?;
        Ok(p)
    }

    /// `M_ff = I_r` and a zero intercept.
    pub fn with_unit_factor_cov(loadings: DMatrix<f64>, idio_var: DVector<f64>) -> Result<Self> {
        let r = loadings.ncols();
        let n = loadings.nrows();
        Self::new(loadings, idio_var, DMatrix::identity(r, r), DVector::zeros(n))
    }

    pub fn n_vars(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    /// Shape, finiteness, positivity and symmetry checks. The variance box
    /// is checked separately by [`FactorParams::check_bounds`] since it
    /// depends on the data.
    pub fn validate(&self) -> Result<()> {
        let n = self.loadings.nrows();
        let r = self.loadings.ncols();
        if self.idio_var.len() != n || self.intercept.len() != n {
            return Err(FactorError::Dimension(format!(
                "loadings have {n} rows but idio_var has {} and intercept {}",
                self.idio_var.len(),
                self.intercept.len()
            )));
        }
        if self.factor_cov.shape() != (r, r) {
            return Err(FactorError::Dimension(format!(
                "factor_cov is {:?}, expected {r}x{r}",
                self.factor_cov.shape()
            )));
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !finite(self.loadings.as_slice())
            || !finite(self.idio_var.as_slice())
            || !finite(self.factor_cov.as_slice())
            || !finite(self.intercept.as_slice())
        {
            return Err(FactorError::InvalidInput("parameters contain non-finite values".into()));
        }
        if let Some(i) = self.idio_var.iter().position(|&v| !(v > 0.0)) {
            return Err(FactorError::InvalidInput(format!("idio_var[{i}] is not positive")));
        }
        let asym = (&self.factor_cov - self.factor_cov.transpose()).norm();
        if asym > 1e-12 * self.factor_cov.norm().max(1.0) {
            return Err(FactorError::InvalidInput("factor_cov is not symmetric".into()));
        }
        if r > 0 && !(linalg::spd_condition(&self.factor_cov) < f64::INFINITY) {
            return Err(FactorError::InvalidInput("factor_cov is not positive definite".into()));
        }
        Ok(())
    }

    pub fn check_bounds(&self, bounds: &VarianceBounds) -> Result<()> {
        match self.idio_var.iter().position(|&v| v < bounds.floor || v > bounds.ceiling) {
            Some(i) => Err(FactorError::InvalidInput(format!(
                "idio_var[{i}] = {} outside [{}, {}]",
                self.idio_var[i], bounds.floor, bounds.ceiling
            ))),
            None => Ok(()),
        }
    }

    /// Dense `Λ M_ff Λ'`. For diagnostics and small problems only.
    pub fn common_component(&self) -> DMatrix<f64> {
        &self.loadings * &self.factor_cov * self.loadings.transpose()
    }

    /// Dense `Σ_zz`. For diagnostics and small problems only.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let mut s = self.common_component();
        for (i, v) in self.idio_var.iter().enumerate() {
            s[(i, i)] += v;
        }
        s
    }

    /// `(1/N) Λ'Σ_ee⁻¹Λ`.
    pub fn scaled_precision_gram(&self) -> DMatrix<f64> {
        let b = self.weighted_loadings();
        linalg::symmetrize(&(self.loadings.transpose() * b / self.n_vars() as f64))
    }

    /// `Σ_ee⁻¹ Λ` (N×r).
    pub fn weighted_loadings(&self) -> DMatrix<f64> {
        let mut b = self.loadings.clone();
        for (mut row, v) in b.row_iter_mut().zip(self.idio_var.iter()) {
            row /= *v;
        }
        b
    }
}

/// `Σ_zz⁻¹` in factored form:
/// `Σ_zz⁻¹ = D − B G B'` with `D = Σ_ee⁻¹`, `B = Σ_ee⁻¹Λ` and
/// `G = (M_ff⁻¹ + Λ'Σ_ee⁻¹Λ)⁻¹`, together with
/// `ln|Σ_zz| = ln|Σ_ee| + ln|M_ff| + ln|M_ff⁻¹ + Λ'Σ_ee⁻¹Λ|`.
#[derive(Debug, Clone)]
pub struct LowRankPrecision {
    inv_var: DVector<f64>,
    weighted: DMatrix<f64>,
    inner_inv: DMatrix<f64>,
    factor_cov_inv: DMatrix<f64>,
    log_det: f64,
}

impl LowRankPrecision {
    pub fn new(p: &FactorParams) -> Result<Self> {
        let inv_var = p.idio_var.map(|v| 1.0 / v);
        let weighted = p.weighted_loadings();
        let (factor_cov_inv, log_det_mff) = linalg::spd_inverse(&p.factor_cov, "factor covariance")?;
        let inner = &factor_cov_inv + p.loadings.transpose() * &weighted;
        let (inner_inv, log_det_inner) = linalg::spd_inverse(&inner, "inner r x r system")?;
        let log_det = p.idio_var.iter().map(|v| v.ln()).sum::<f64>() + log_det_mff + log_det_inner;
        Ok(Self { inv_var, weighted, inner_inv, factor_cov_inv, log_det })
    }

    /// `ln|Σ_zz|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `G = (M_ff⁻¹ + Λ'Σ_ee⁻¹Λ)⁻¹`.
    pub fn inner_inverse(&self) -> &DMatrix<f64> {
        &self.inner_inv
    }

    /// `Σ_zz⁻¹ X` for an N×k matrix `X`, in O(N r k).
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (mut row, d) in out.row_iter_mut().zip(self.inv_var.iter()) {
            row *= *d;
        }
        let correction = &self.weighted * (&self.inner_inv * (self.weighted.transpose() * x));
        out - correction
    }

    /// `Λ'Σ_zz⁻¹ = M_ff⁻¹ G Λ'Σ_ee⁻¹` (r×N).
    pub fn loadings_precision(&self) -> DMatrix<f64> {
        &self.factor_cov_inv * &self.inner_inv * self.weighted.transpose()
    }

    /// Diagonal of `Σ_zz⁻¹`.
    pub fn diagonal(&self) -> DVector<f64> {
        let bg = &self.weighted * &self.inner_inv;
        DVector::from_fn(self.inv_var.len(), |i, _| self.inv_var[i] - bg.row(i).dot(&self.weighted.row(i)))
    }

    /// `tr(M Σ_zz⁻¹)` for symmetric `M`, in O(N² r).
    pub fn trace_product(&self, m: &DMatrix<f64>) -> f64 {
        let diag_part: f64 = m.diagonal().iter().zip(self.inv_var.iter()).map(|(a, b)| a * b).sum();
        let mb = m * &self.weighted;
        let inner = self.weighted.transpose() * mb;
        diag_part - (&self.inner_inv * inner).trace()
    }
}

fn check_moment_dims(m_zz: &DMatrix<f64>, p: &FactorParams) -> Result<()> {
    let n = p.n_vars();
    if m_zz.shape() != (n, n) {
        return Err(FactorError::Dimension(format!("M_zz is {:?} but the model has {n} variables", m_zz.shape())));
    }
    Ok(())
}

/// Quasi log-likelihood `−(1/2N) ln|Σ_zz| − (1/2N) tr(M_zz Σ_zz⁻¹)`.
pub fn log_likelihood(m_zz: &DMatrix<f64>, p: &FactorParams) -> Result<f64> {
    check_moment_dims(m_zz, p)?;
    let prec = LowRankPrecision::new(p)?;
    Ok(log_likelihood_with(m_zz, &prec, p.n_vars()))
}

pub(crate) fn log_likelihood_with(m_zz: &DMatrix<f64>, prec: &LowRankPrecision, n: usize) -> f64 {
    let n = n as f64;
    -(prec.log_det() + prec.trace_product(m_zz)) / (2.0 * n)
}

/// Normalized residuals of the three first-order conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocResiduals {
    /// `‖Λ'Σ_zz⁻¹(M_zz − Σ_zz)‖ / ‖Λ'Σ_zz⁻¹M_zz‖`.
    pub loadings: f64,
    /// `‖diag(Σ_zz⁻¹) − diag(Σ_zz⁻¹M_zzΣ_zz⁻¹)‖ / ‖diag(Σ_zz⁻¹)‖`.
    pub idio_var: f64,
    /// `‖Λ'Σ_zz⁻¹Λ − Λ'Σ_zz⁻¹M_zzΣ_zz⁻¹Λ‖ / ‖Λ'Σ_zz⁻¹Λ‖`.
    pub factor_cov: f64,
}

impl FocResiduals {
    pub fn max(&self) -> f64 {
        self.loadings.max(self.idio_var).max(self.factor_cov)
    }
}

/// Unnormalized first-order-condition residual matrices with the norms of
/// their leading terms.
#[derive(Debug, Clone)]
pub struct FocMatrices {
    /// r×N: `Λ'Σ_zz⁻¹(M_zz − Σ_zz)`.
    pub loadings: DMatrix<f64>,
    /// N: `diag(Σ_zz⁻¹) − diag(Σ_zz⁻¹M_zzΣ_zz⁻¹)`.
    pub idio_var: DVector<f64>,
    /// r×r: `Λ'Σ_zz⁻¹Λ − Λ'Σ_zz⁻¹M_zzΣ_zz⁻¹Λ`.
    pub factor_cov: DMatrix<f64>,
    pub scales: [f64; 3],
}

pub fn foc_matrices(m_zz: &DMatrix<f64>, p: &FactorParams) -> Result<FocMatrices> {
    check_moment_dims(m_zz, p)?;
    let prec = LowRankPrecision::new(p)?;
    let a = prec.loadings_precision(); // Λ'P, r×N
    let am = &a * m_zz; // Λ'P M
    let loadings = &am - p.loadings.transpose();

    // diag(P M P)_i = d_i² M_ii − 2 d_i c_i'G b_i + b_i'G S G b_i with
    // C = M B and S = B'M B.
    let b = &prec.weighted;
    let g = &prec.inner_inv;
    let c = m_zz * b;
    let s = b.transpose() * &c;
    let gsg = g * s * g;
    let bg = b * g;
    let diag_p = prec.diagonal();
    let diag_pmp = DVector::from_fn(p.n_vars(), |i, _| {
        let d = prec.inv_var[i];
        let bi = b.row(i).transpose();
        d * d * m_zz[(i, i)] - 2.0 * d * c.row(i).dot(&bg.row(i)) + (bi.transpose() * &gsg * &bi)[(0, 0)]
    });
    let idio_var = &diag_p - diag_pmp;

    let lpl = linalg::symmetrize(&(&a * &p.loadings));
    let lpmpl = linalg::symmetrize(&(&am * a.transpose()));
    let factor_cov = &lpl - lpmpl;

    Ok(FocMatrices { loadings, idio_var, factor_cov, scales: [am.norm(), diag_p.norm(), lpl.norm()] })
}

pub fn foc_residuals(m_zz: &DMatrix<f64>, p: &FactorParams) -> Result<FocResiduals> {
    let f = foc_matrices(m_zz, p)?;
    let rel = |num: f64, den: f64| if den > 0.0 { num / den } else { num };
    Ok(FocResiduals {
        loadings: rel(f.loadings.norm(), f.scales[0]),
        idio_var: rel(f.idio_var.norm(), f.scales[1]),
        factor_cov: rel(f.factor_cov.norm(), f.scales[2]),
    })
}
