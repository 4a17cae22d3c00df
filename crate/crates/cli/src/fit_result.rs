//! Serialized form of a fitted model.
//!
//! Numbers are written with the shortest representation that parses back to
//! the same `f64`, so a result read back from disk reproduces the fit bit for
//! bit.

use factor_mle::em::FitWarning;
use factor_mle::inference::StandardErrors;
use factor_mle::{FactorError, FactorEstimate, FactorParams, FocResiduals, IdentificationTag};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const SCHEMA_ID: &str = "factor-mle/fit-result/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitResult {
    pub schema: String,
    pub n_vars: usize,
    pub n_obs: usize,
    pub n_factors: usize,
    pub ic: IdentificationTag,
    /// `[variable][factor]`.
    pub loadings: Vec<Vec<f64>>,
    pub idio_var: Vec<f64>,
    pub factor_cov: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub foc_residuals: FocResiduals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<StandardErrors>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warning {
    pub kind: String,
    pub message: String,
}

impl Warning {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Self { kind: kind.to_string(), message: message.into() }
    }
}

impl From<&FitWarning> for Warning {
    fn from(w: &FitWarning) -> Self {
        let kind = match w {
            FitWarning::NotConverged { .. } => "not_converged",
            FitWarning::Heywood { .. } => "heywood",
            FitWarning::CeilingPinned { .. } => "ceiling_pinned",
        };
        Self::new(kind, w.to_string())
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(name: &str, rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>, FactorError> {
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(FactorError::Dimension(format!("{name} row {i} has {} entries, expected {ncols}", r.len())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl FitResult {
    pub fn from_estimate(e: &FactorEstimate, standard_errors: Option<StandardErrors>, warnings: Vec<Warning>) -> Self {
        let p = &e.params;
        Self {
            schema: SCHEMA_ID.to_string(),
            n_vars: p.n_vars(),
            n_obs: e.n_obs,
            n_factors: p.n_factors(),
            ic: e.tag,
            loadings: rows(&p.loadings),
            idio_var: p.idio_var.iter().copied().collect(),
            factor_cov: rows(&p.factor_cov),
            intercept: p.intercept.iter().copied().collect(),
            loglik: e.loglik,
            iterations: e.trace.iterations,
            converged: e.trace.converged,
            foc_residuals: e.trace.final_foc_residuals,
            standard_errors,
            warnings,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, FactorError> {
        let result: Self =
            serde_json::from_str(text).map_err(|e| FactorError::InvalidInput(format!("model file: {e}")))?;
        if result.schema != SCHEMA_ID {
            return Err(FactorError::InvalidInput(format!(
                "model file has schema {:?}, expected {SCHEMA_ID:?}",
                result.schema
            )));
        }
        Ok(result)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("fit result serializes");
        s.push('\n');
        s
    }

    /// Rebuilds and validates the model parameters.
    pub fn params(&self) -> Result<FactorParams, FactorError> {
        let p = self.unchecked_params()?;
        p.validate()?;
        Ok(p)
    }

    /// Rebuilds the parameters checking only their shapes, so a damaged model
    /// can still be inspected constraint by constraint.
    pub fn unchecked_params(&self) -> Result<FactorParams, FactorError> {
        let (n, r) = (self.n_vars, self.n_factors);
        if self.loadings.len() != n || self.idio_var.len() != n || self.intercept.len() != n {
            return Err(FactorError::Dimension(format!(
                "n_vars is {n} but loadings, idio_var and intercept have {}, {} and {} entries",
                self.loadings.len(),
                self.idio_var.len(),
                self.intercept.len()
            )));
        }
        if self.factor_cov.len() != r {
            return Err(FactorError::Dimension(format!("factor_cov has {} rows, expected {r}", self.factor_cov.len())));
        }
        Ok(FactorParams {
            loadings: matrix("loadings", &self.loadings, r)?,
            idio_var: DVector::from_vec(self.idio_var.clone()),
            factor_cov: matrix("factor_cov", &self.factor_cov, r)?,
            intercept: DVector::from_vec(self.intercept.clone()),
        })
    }
}
