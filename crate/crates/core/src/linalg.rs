//! Dense spectral linear algebra: SVD-derived norms, the exact polar factor,
//! and its Newton-Schulz approximation.

use nalgebra::{DMatrix, DVector, RealField, SymmetricEigen, SVD};
use num_traits::{FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Real scalar accepted by the generic routines (implemented for `f32` and `f64`).
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {}

impl<T: RealField + Copy + FromPrimitive + ToPrimitive> Real for T {}

/// Converts an `f64` constant into `T`.
pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in the scalar type")
}

/// Converts `T` into `f64`.
pub(crate) fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("scalar converts to f64")
}

/// Norm and rank diagnostics of one matrix, all read off a full SVD.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary<T> {
    pub frob: T,
    pub op_norm: T,
    pub nuclear: T,
    /// `frob^2 / op_norm^2`.
    pub stable_rank: T,
    /// `nuclear^2 / frob^2`.
    pub nuclear_rank: T,
    /// `tr(M^T M) / ||M^T M||_op` of the Gram matrix, which equals the stable rank.
    pub effective_rank: T,
    /// Singular values in descending order.
    pub singular_values: Vec<T>,
}

/// Rejects matrices with non-finite or only zero entries.
pub(crate) fn check_nonzero_finite<T: Real>(m: &DMatrix<T>) -> Result<()> {
    let mut any_nonzero = false;
    for &x in m.iter() {
        if !x.is_finite() {
            return Err(Error::NonFinite);
        }
        if x != T::zero() {
            any_nonzero = true;
        }
    }
    if any_nonzero {
        Ok(())
    } else {
        Err(Error::ZeroMatrix)
    }
}

/// Thin SVD factors `M = U diag(s) V^T`.
pub(crate) struct Factors<T: Real> {
    pub u: Option<DMatrix<T>>,
    pub s: DVector<T>,
    pub v_t: Option<DMatrix<T>>,
}

/// Whether `s` carries the Frobenius mass of `m` to within `1e-8` relative.
fn consistent<T: Real>(m: &DMatrix<T>, s: &DVector<T>) -> bool {
    let frob_sq = m.norm_squared();
    (s.norm_squared() - frob_sq).abs() <= lit::<T>(1e-8) * frob_sq
}

/// Thin SVD that always terminates and is checked before use.
///
/// The Golub-Kahan iteration runs with nalgebra's own tolerance (`5 eps`)
/// and an iteration cap. It can stall on exactly rank-deficient inputs, and
/// with a tighter tolerance it can return factors that do not reproduce the
/// input, so each attempt must reproduce `||M||_F^2` from its singular
/// values. On failure the transpose is tried, and as a last resort the
/// factors come from the symmetric eigendecomposition of the smaller Gram
/// matrix, where singular values below `sqrt(max(rows, cols) eps) sigma_1`
/// are unresolvable and set to zero.
///
/// The input is first scaled by a power of two so its largest entry lies in
/// `[1, 2)`, which keeps squared norms and Gram matrices finite and costs no
/// rounding.
pub(crate) fn factorize<T: Real>(m: &DMatrix<T>, vectors: bool) -> Factors<T> {
    let amax = to_f64(m.amax());
    if amax == 0.0 || !amax.is_finite() {
        return factorize_unscaled(m, vectors);
    }
    let scale = lit::<T>(2f64.powi(amax.log2().floor() as i32));
    let mut f = factorize_unscaled(&(m / scale), vectors);
    f.s *= scale;
    f
}

fn factorize_unscaled<T: Real>(m: &DMatrix<T>, vectors: bool) -> Factors<T> {
    let eps = T::default_epsilon() * lit::<T>(5.0);
    let limit = 50 * m.nrows().min(m.ncols()) + 200;
    if let Some(svd) = SVD::try_new(m.clone(), vectors, vectors, eps, limit) {
        if consistent(m, &svd.singular_values) {
            return Factors { u: svd.u, s: svd.singular_values, v_t: svd.v_t };
        }
    }
    if let Some(svd) = SVD::try_new(m.transpose(), vectors, vectors, eps, limit) {
        if consistent(m, &svd.singular_values) {
            return Factors {
                u: svd.v_t.map(|v| v.transpose()),
                s: svd.singular_values,
                v_t: svd.u.map(|u| u.transpose()),
            };
        }
    }
    gram_factors(m, vectors)
}

/// Factors from the eigendecomposition of the smaller Gram matrix.
fn gram_factors<T: Real>(m: &DMatrix<T>, vectors: bool) -> Factors<T> {
    let eps = T::default_epsilon();
    let tall = m.nrows() >= m.ncols();
    let gram = if tall { m.transpose() * m } else { m * m.transpose() };
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite eigenvalues"));
    let mut s = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i].max(T::zero()).sqrt()));
    let floor = (lit::<T>(m.nrows().max(m.ncols()) as f64) * eps).sqrt() * s[0];
    s.iter_mut().filter(|x| **x <= floor).for_each(|x| *x = T::zero());
    if !vectors {
        return Factors { u: None, s, v_t: None };
    }
    let basis = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    let inv = s.map(|x| if x > T::zero() { T::one() / x } else { T::zero() });
    let other = if tall { m * &basis } else { m.transpose() * &basis } * DMatrix::from_diagonal(&inv);
    let (u, v) = if tall { (other, basis) } else { (basis, other) };
    Factors { u: Some(u), s, v_t: Some(v.transpose()) }
}

/// Singular values in descending order.
pub fn singular_values<T: Real>(m: &DMatrix<T>) -> Result<Vec<T>> {
    check_nonzero_finite(m)?;
    let mut sv: Vec<T> = factorize(m, false).s.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(sv)
}

/// Frobenius, operator and nuclear norms with the derived ranks.
pub fn spectral_summary<T: Real>(m: &DMatrix<T>) -> Result<SpectralSummary<T>> {
    let sv = singular_values(m)?;
    let op = sv[0];
    let (rel_sq, rel_sum) = relative_sums(&sv);
    let stable_rank = rel_sq;
    Ok(SpectralSummary {
        frob: op * rel_sq.sqrt(),
        op_norm: op,
        nuclear: op * rel_sum,
        stable_rank,
        nuclear_rank: rel_sum * rel_sum / rel_sq,
        effective_rank: stable_rank,
        singular_values: sv,
    })
}

/// `sum (s_i / s_0)^2` and `sum s_i / s_0`, which stay finite for any finite input.
fn relative_sums<T: Real>(sv: &[T]) -> (T, T) {
    let top = sv[0];
    sv.iter().fold((T::zero(), T::zero()), |(sq, sum), &s| {
        let r = s / top;
        (sq + r * r, sum + r)
    })
}

/// `||M||_F^2 / ||M||_op^2`.
pub fn stable_rank<T: Real>(m: &DMatrix<T>) -> Result<T> {
    Ok(relative_sums(&singular_values(m)?).0)
}

/// `||M||_*^2 / ||M||_F^2`.
pub fn nuclear_rank<T: Real>(m: &DMatrix<T>) -> Result<T> {
    Ok(spectral_summary(m)?.nuclear_rank)
}

/// Sum of singular values.
pub fn nuclear_norm<T: Real>(m: &DMatrix<T>) -> Result<T> {
    Ok(singular_values(m)?.into_iter().fold(T::zero(), |acc, s| acc + s))
}

/// Largest singular value.
pub fn op_norm<T: Real>(m: &DMatrix<T>) -> Result<T> {
    Ok(singular_values(m)?[0])
}

/// `tr(M) / ||M||_op` for a symmetric positive semidefinite `M`.
pub fn effective_rank_psd<T: Real>(m: &DMatrix<T>) -> Result<T> {
    if !m.is_square() {
        return Err(crate::error::shape_mismatch(
            "effective_rank_psd",
            (m.nrows(), m.nrows()),
            m.shape(),
        ));
    }
    Ok(m.trace() / op_norm(m)?)
}

/// Frobenius inner product `<A, B> = tr(A^T B)`.
pub fn inner<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.dot(b)
}

/// Relative level below which a singular value counts as zero:
/// `max(rows, cols) * eps * sigma_1`.
pub fn rank_tolerance<T: Real>(rows: usize, cols: usize, sigma_max: T) -> T {
    lit::<T>(rows.max(cols) as f64) * T::default_epsilon() * sigma_max
}

/// Polar factor `U V^T` from the thin SVD `M = U S V^T`.
///
/// Singular triplets at or below [`rank_tolerance`] are dropped, so a
/// numerically rank-deficient `M` gets the minimum-norm subgradient of the
/// nuclear norm (for `M = s u v^T` the result is `u v^T`). `<M, P> = ||M||_*`
/// and `||P||_op <= 1` hold either way.
pub fn polar_exact<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_nonzero_finite(m)?;
    let f = factorize(m, true);
    let u = f.u.expect("left singular vectors requested");
    let v_t = f.v_t.expect("right singular vectors requested");
    let cutoff = rank_tolerance(m.nrows(), m.ncols(), f.s.max());
    let mask = f.s.map(|s| if s > cutoff { T::one() } else { T::zero() });
    Ok(u * DMatrix::from_diagonal(&mask) * v_t)
}

/// Number of singular values above [`rank_tolerance`].
pub fn numerical_rank<T: Real>(sv: &[T], rows: usize, cols: usize) -> usize {
    let cutoff = rank_tolerance(rows, cols, sv[0]);
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Cubic Newton-Schulz approximation of the polar factor.
///
/// Starts from `M / ||M||_F` and iterates `X <- 1.5 X - 0.5 X X^T X` until the
/// residual `||X X^T - I||_F` on the smaller Gram side is at most `tol`, or
/// `max_iters` updates have been applied. Returns the iterate and the number
/// of updates used.
pub fn polar_newton_schulz<T: Real>(
    m: &DMatrix<T>,
    max_iters: usize,
    tol: T,
) -> Result<(DMatrix<T>, usize)> {
    check_nonzero_finite(m)?;
    if max_iters == 0 {
        return Err(Error::InvalidSpec("max_iters must be at least 1".into()));
    }
    if tol <= T::zero() {
        return Err(Error::NonPositiveConstant {
            name: "tol",
            value: to_f64(tol),
        });
    }
    let (rows, cols) = m.shape();
    let wide = rows <= cols;
    let side = rows.min(cols);
    let identity = DMatrix::<T>::identity(side, side);
    let floor = lit::<T>(64.0) * T::default_epsilon() * lit::<T>(side as f64).sqrt();
    let (three_halves, half) = (lit::<T>(1.5), lit::<T>(0.5));

    let mut x = m / m.norm();
    let mut prev = T::max_value().expect("bounded scalar");
    let mut rises = 0;
    let mut iters = 0;
    loop {
        let gram = if wide {
            &x * x.transpose()
        } else {
            x.transpose() * &x
        };
        let residual = (&gram - &identity).norm();
        if !residual.is_finite() {
            return Err(Error::Diverged { iters });
        }
        if residual <= tol || residual <= floor {
            return Ok((x, iters));
        }
        if residual > prev + floor {
            rises += 1;
            if rises >= 3 {
                return Err(Error::Diverged { iters });
            }
        } else {
            rises = 0;
        }
        prev = residual;
        if iters == max_iters {
            return Ok((x, iters));
        }
        x = if wide {
            &x * three_halves - (&gram * &x) * half
        } else {
            &x * three_halves - (&x * &gram) * half
        };
        iters += 1;
    }
}
