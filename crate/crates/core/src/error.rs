use thiserror::Error;

use crate::model::IdentificationTag;

pub type Result<T> = std::result::Result<T, FactorError>;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at variable {var}, observation {obs}")]
    NonFinite { var: usize, obs: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("ill-conditioned model: {what} (condition estimate {condition:e})")]
    IllConditioned { what: &'static str, condition: f64 },

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error(
        "the first r rows of the loadings are unsuitable for this normalization \
         (condition estimate {condition:e}); reorder the variables so the leading \
         block is well conditioned"
    )]
    FirstRowsUnsuitable { condition: f64 },

    #[error("non-identified ordering: diagonal entries {first} and {second} coincide (value {value:e})")]
    NonIdentifiedOrdering { first: usize, second: usize, value: f64 },

    #[error("{tag} is not supported here: {reason}")]
    UnsupportedTag { tag: IdentificationTag, reason: &'static str },

    #[error("excess kurtosis {value} for variable {var} is below -2")]
    InvalidKurtosis { var: usize, value: f64 },

    #[error("index {index} out of range (size {size})")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("CSV error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("{failed} of {total} replications failed in cell N={n_vars}, T={n_obs}")]
    HarnessFailure { n_vars: usize, n_obs: usize, failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
