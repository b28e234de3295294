//! Spectral versus Euclidean gradient steps for matrix-parameterized models.
//!
//! The crate provides SVD-based norm and rank diagnostics, the exact and
//! Newton-Schulz polar factor, the criterion `nr(G) >= st(A)` that decides
//! between gradient descent and spectral gradient descent, random-feature
//! testbeds with closed-form gradient recursions, stable-rank propagation
//! measurements through network building blocks, and the shardwise spectral
//! step for partitioned gradients.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod nets;
pub mod optim;
pub mod propagation;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Real;

/// Dense double-precision matrix.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense double-precision vector.
pub type Vector = nalgebra::DVector<f64>;
/// Spectral summary of a double-precision matrix.
pub type SpectralSummary = linalg::SpectralSummary<f64>;
/// Criterion report in double precision.
pub type CriterionReport = diagnostics::CriterionReport<f64>;
