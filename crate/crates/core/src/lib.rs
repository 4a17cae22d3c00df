//! Maximum-likelihood estimation of high-dimensional approximate factor
//! models with heteroskedastic idiosyncratic errors.
//!
//! The estimator maximizes the Gaussian quasi likelihood of the low-rank plus
//! diagonal covariance `Σ_zz = Λ M_ff Λ' + Σ_ee` by EM under the
//! `M_ff = I_r` normalization, then rotates the fit into any of five
//! identification conditions. Factor scores, plug-in asymptotic standard
//! errors, a principal-components baseline and a seeded Monte Carlo harness
//! sit on top.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons reject NaN

pub mod em;
pub mod error;
pub mod identify;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod pca;
pub mod scores;

pub use em::{fit, EMConfig, EMTrace, FitWarning, Init};
pub use error::{FactorError, Result};
pub use identify::FactorEstimate;
pub use model::{Dataset, FactorParams, FocResiduals, IdentificationTag, VarianceBounds};
pub use scores::{FactorScores, ScoreMethod};
