//! Error type shared by the numerical modules.

use thiserror::Error;

/// Failures of the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("input contains NaN or infinite entries")]
    NonFinite,
    #[error("Newton-Schulz residual rose for 3 consecutive iterations (stopped at iteration {iters})")]
    Diverged { iters: usize },
    #[error("column mean is zero")]
    ZeroMean,
    #[error("all counts are zero")]
    EmptySequence,
    #[error("vector is identically zero")]
    ZeroVector,
    #[error("argument {0} lies outside [-1, 1]")]
    DomainError(f64),
    #[error("row {0} is zero")]
    ZeroRow(usize),
    #[error("column {0} is zero")]
    ZeroColumn(usize),
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("gradient is zero")]
    ZeroGradient,
    #[error("constant {name} must be positive, got {value}")]
    NonPositiveConstant { name: &'static str, value: f64 },
    #[error("invalid partition scheme: {0}")]
    InvalidScheme(String),
    #[error("activation has zero Gaussian mean")]
    CenteredActivation,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(
    context: &'static str,
    expected: (usize, usize),
    found: (usize, usize),
) -> Error {
    Error::ShapeMismatch {
        context,
        expected: format!("{}x{}", expected.0, expected.1),
        found: format!("{}x{}", found.0, found.1),
    }
}
