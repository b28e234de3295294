//! Decision criteria between spectral and Euclidean steps.
//!
//! A block with gradient `G` and incoming features `A` favors the spectral
//! step when `nr(G) >= st(A)`; the refined form adds a curvature correction
//! `alpha` but is algebraically equivalent to the bare inequality.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{lit, nuclear_rank, stable_rank, Real};

/// Outcome of one criterion evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport<T> {
    pub nr_gradient: T,
    pub st_activation: T,
    /// `nr_gradient / st_activation`.
    pub ratio: T,
    /// Bare criterion `nr_gradient >= st_activation`; ties count as favored.
    pub spectral_favored: bool,
    /// `(st_activation + alpha) / (1 + alpha / nr_gradient)`.
    pub refined_threshold: T,
    pub alpha: T,
}

/// Builds a report from precomputed ranks.
pub fn criterion_from_ranks<T: Real>(nr: T, st: T, alpha: T) -> Result<CriterionReport<T>> {
    if alpha < T::zero() || !alpha.is_finite() {
        return Err(Error::InvalidSpec("alpha must be finite and nonnegative".into()));
    }
    Ok(CriterionReport {
        nr_gradient: nr,
        st_activation: st,
        ratio: nr / st,
        spectral_favored: nr >= st,
        refined_threshold: (st + alpha) / (T::one() + alpha / nr),
        alpha,
    })
}

/// Criterion for a matrix block with gradient `g` and incoming features `a`.
pub fn layer_criterion<T: Real>(
    g: &DMatrix<T>,
    a: &DMatrix<T>,
    alpha: T,
) -> Result<CriterionReport<T>> {
    criterion_from_ranks(nuclear_rank(g)?, stable_rank(a)?, alpha)
}

/// Whether the refined and bare criteria agree at `(r, s, alpha)`.
///
/// The refined threshold is evaluated with a few ulps of slack so that an
/// exact tie `r = s` is not lost to rounding in the division.
pub fn refined_equivalence_check(r: f64, s: f64, alpha: f64) -> bool {
    let threshold = (s + alpha) / (1.0 + alpha / r);
    let refined = r >= threshold * (1.0 - 4.0 * f64::EPSILON);
    let bare = r >= s;
    refined == bare
}

/// Noise-to-signal ratio: mean squared column norm over the squared norm of
/// the column mean.
pub fn empirical_nsr<T: Real>(z: &DMatrix<T>) -> Result<T> {
    crate::linalg::check_nonzero_finite(z)?;
    let n = lit::<T>(z.ncols() as f64);
    let mean = z.column_mean();
    let mean_sq = mean.norm_squared();
    let second = z.norm_squared() / n;
    if mean_sq == T::zero() || mean_sq <= T::default_epsilon() * second {
        return Err(Error::ZeroMean);
    }
    Ok(second / mean_sq)
}

/// Stable rank of a token-indicator matrix, `n / max(counts) = 1 / p_max`.
pub fn token_indicator_stable_rank(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(total as f64 / max as f64)
}

/// Explicit one-hot matrix `H` (vocabulary x tokens) with `counts[v]` columns equal to `e_v`.
pub fn token_indicator_matrix(counts: &[u64]) -> Result<DMatrix<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptySequence);
    }
    let mut h = DMatrix::zeros(counts.len(), total as usize);
    let mut col = 0;
    for (v, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            h[(v, col)] = 1.0;
            col += 1;
        }
    }
    Ok(h)
}

/// `||g||_1^2 / ||g||_2^2`, the nuclear-rank analogue of a diagonal block.
pub fn l1_l2_ratio<T: Real>(g: &DVector<T>) -> Result<T> {
    let l2 = g.norm_squared();
    if l2 == T::zero() {
        return Err(Error::ZeroVector);
    }
    let l1 = g.iter().fold(T::zero(), |acc, &x| acc + x.abs());
    Ok(l1 * l1 / l2)
}

/// `||g||_2^2 / ||g||_inf^2`, the stable rank of `Diag(g)`.
pub fn l2_linf_ratio<T: Real>(g: &DVector<T>) -> Result<T> {
    let linf = g.amax();
    if linf == T::zero() {
        return Err(Error::ZeroVector);
    }
    Ok(g.norm_squared() / (linf * linf))
}

/// Criterion for a diagonal (RMSNorm weight) block: `||g||_1^2 / ||g||_2^2 >= st(A)`.
pub fn diag_criterion<T: Real>(
    g: &DVector<T>,
    a: &DMatrix<T>,
    alpha: T,
) -> Result<CriterionReport<T>> {
    let st = stable_rank(a)?;
    criterion_from_ranks(l1_l2_ratio(g)?, st, alpha)
}
