//! Update rules: Euclidean and spectral steps, the layered mixed step with
//! blockwise step sizes, the diagonal sign step, and the shardwise spectral
//! step on partitioned gradients.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diagnostics::l2_linf_ratio;
use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::{
    check_nonzero_finite, inner, lit, nuclear_norm, numerical_rank, polar_exact, polar_newton_schulz,
    singular_values, to_f64, Real,
};

/// How the spectral direction `polar(G)` and `||G||_*` are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolarMode {
    /// Both from a full SVD.
    Exact,
    /// Newton-Schulz direction, nuclear norm from the SVD. Falls back to the
    /// exact polar factor if the iteration diverges or the SVD shows the
    /// gradient is numerically rank-deficient (where the iteration would
    /// amplify round-off directions).
    NewtonSchulz { max_iters: usize, tol: f64 },
    /// Newton-Schulz direction with `||G||_* ~ <G, NS(G)>`; no SVD at all.
    PureNewtonSchulz { max_iters: usize, tol: f64 },
}

impl Default for PolarMode {
    fn default() -> Self {
        PolarMode::NewtonSchulz { max_iters: 100, tol: 1e-10 }
    }
}

fn positive<T: Real>(name: &'static str, value: T) -> Result<()> {
    if value > T::zero() && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveConstant { name, value: to_f64(value) })
    }
}

fn same_shape<T: Real>(context: &'static str, w: &DMatrix<T>, g: &DMatrix<T>) -> Result<()> {
    if w.shape() == g.shape() {
        Ok(())
    } else {
        Err(shape_mismatch(context, w.shape(), g.shape()))
    }
}

fn is_zero<T: Real>(g: &DMatrix<T>) -> bool {
    g.iter().all(|&x| x == T::zero())
}

/// `W - G / L_F`.
pub fn gd_step<T: Real>(w: &DMatrix<T>, g: &DMatrix<T>, l_f: T) -> Result<DMatrix<T>> {
    positive("L_F", l_f)?;
    same_shape("gd_step", w, g)?;
    Ok(w - g / l_f)
}

/// Nuclear norm and polar direction of `g` under `mode`.
pub fn spectral_direction<T: Real>(g: &DMatrix<T>, mode: PolarMode) -> Result<(T, DMatrix<T>)> {
    check_nonzero_finite(g).map_err(|e| if e == Error::ZeroMatrix { Error::ZeroGradient } else { e })?;
    match mode {
        PolarMode::Exact => Ok((nuclear_norm(g)?, polar_exact(g)?)),
        PolarMode::NewtonSchulz { max_iters, tol } => {
            let sv = singular_values(g)?;
            let nuc = sv.iter().fold(T::zero(), |acc, &s| acc + s);
            if numerical_rank(&sv, g.nrows(), g.ncols()) < sv.len() {
                return Ok((nuc, polar_exact(g)?));
            }
            let dir = match polar_newton_schulz(g, max_iters, lit(tol)) {
                Ok((p, _)) => p,
                Err(Error::Diverged { .. }) => polar_exact(g)?,
                Err(e) => return Err(e),
            };
            Ok((nuc, dir))
        }
        PolarMode::PureNewtonSchulz { max_iters, tol } => {
            let (dir, _) = polar_newton_schulz(g, max_iters, lit(tol))?;
            Ok((inner(g, &dir), dir))
        }
    }
}

/// `W - (||G||_* / L_op) polar(G)`.
pub fn spec_step<T: Real>(w: &DMatrix<T>, g: &DMatrix<T>, l_op: T, mode: PolarMode) -> Result<DMatrix<T>> {
    positive("L_op", l_op)?;
    same_shape("spec_step", w, g)?;
    let (nuc, dir) = spectral_direction(g, mode)?;
    Ok(w - dir * (nuc / l_op))
}

/// Guaranteed decrease of the GD step, `||G||_F^2 / (2 L_F)`.
pub fn gd_guaranteed_decrease<T: Real>(g: &DMatrix<T>, l_f: T) -> T {
    g.norm_squared() / (lit::<T>(2.0) * l_f)
}

/// Guaranteed decrease of the spectral step, `||G||_*^2 / (2 L_op)`.
pub fn spec_guaranteed_decrease<T: Real>(g: &DMatrix<T>, l_op: T) -> Result<T> {
    let nuc = nuclear_norm(g)?;
    Ok(nuc * nuc / (lit::<T>(2.0) * l_op))
}

/// `gamma_i - (||g||_1 / a) sign(g_i)` with `sign(0) = 0`.
pub fn diag_sign_step<T: Real>(gamma: &DVector<T>, g: &DVector<T>, a: T) -> Result<DVector<T>> {
    positive("a", a)?;
    if gamma.len() != g.len() {
        return Err(shape_mismatch("diag_sign_step", (gamma.len(), 1), (g.len(), 1)));
    }
    let l1 = g.iter().fold(T::zero(), |acc, &x| acc + x.abs());
    let step = l1 / a;
    Ok(DVector::from_fn(gamma.len(), |i, _| {
        let s = if g[i] > T::zero() {
            T::one()
        } else if g[i] < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        gamma[i] - step * s
    }))
}

/// Position of a block in a layered network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    Input,
    Internal,
    Output,
    /// Diagonal gain (RMSNorm weight) stored as a diagonal matrix.
    Diagonal,
}

/// One trainable block and whether it belongs to the spectral set.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState<T: Real> {
    pub w: DMatrix<T>,
    pub role: BlockRole,
    pub spectral: bool,
}

/// Per-block bookkeeping of a mixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStepInfo<T> {
    /// `L^F + C_op / st(G)`.
    pub a_gd: T,
    /// `L^op + C_op`.
    pub a_spec: T,
    /// Whether the spectral (or sign) step was applied.
    pub used_spectral: bool,
    /// Guaranteed decrease of the step that was applied.
    pub predicted_decrease: T,
    /// Guaranteed decrease had the block taken the GD step.
    pub gd_predicted_decrease: T,
    /// Guaranteed decrease had the block taken the spectral step.
    pub spec_predicted_decrease: T,
}

/// Result of [`mixed_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixedStep<T: Real> {
    pub blocks: Vec<BlockState<T>>,
    pub info: Vec<Option<BlockStepInfo<T>>>,
    /// Sum of the applied blocks' guaranteed decreases.
    pub predicted_decrease: T,
}

/// Layered update with blockwise step sizes.
///
/// For block `l` with incoming features `A`, `L^F = C_F ||A||_op^2` and
/// `L^op = C_F ||A||_F^2`. Blocks in the spectral set take
/// `W - (||G||_* / a_spec) polar(G)` (the sign step for diagonal blocks);
/// the others take `W - G / a_gd`. Zero-gradient blocks are left unchanged
/// and report no info.
pub fn mixed_step<T: Real>(
    blocks: &[BlockState<T>],
    grads: &[DMatrix<T>],
    feats: &[DMatrix<T>],
    c_f: T,
    c_op: T,
    mode: PolarMode,
) -> Result<MixedStep<T>> {
    positive("C_F", c_f)?;
    if c_op < T::zero() || !c_op.is_finite() {
        return Err(Error::NonPositiveConstant { name: "C_op", value: to_f64(c_op) });
    }
    if grads.len() != blocks.len() || feats.len() != blocks.len() {
        return Err(shape_mismatch("mixed_step block count", (blocks.len(), 1), (grads.len(), feats.len())));
    }
    let two = lit::<T>(2.0);
    let mut out = Vec::with_capacity(blocks.len());
    let mut info = Vec::with_capacity(blocks.len());
    let mut total = T::zero();
    for ((block, g), a) in blocks.iter().zip(grads).zip(feats) {
        same_shape("mixed_step gradient", &block.w, g)?;
        if block.w.ncols() != a.nrows() {
            return Err(shape_mismatch("mixed_step features", (block.w.ncols(), a.ncols()), a.shape()));
        }
        if is_zero(g) {
            out.push(block.clone());
            info.push(None);
            continue;
        }
        let sv = singular_values(a)?;
        let l_f = c_f * sv[0] * sv[0];
        let l_op = c_f * sv.iter().fold(T::zero(), |acc, &s| acc + s * s);
        let a_spec = l_op + c_op;
        let (w_new, a_gd, gd_dec, spec_dec) = if block.role == BlockRole::Diagonal {
            let gamma = block.w.diagonal();
            let gv = g.diagonal();
            let st_g = l2_linf_ratio(&gv)?;
            let a_gd = l_f + c_op / st_g;
            let l1 = gv.iter().fold(T::zero(), |acc, &x| acc + x.abs());
            let gd_dec = gv.norm_squared() / (two * a_gd);
            let spec_dec = l1 * l1 / (two * a_spec);
            let w_new = if block.spectral {
                DMatrix::from_diagonal(&diag_sign_step(&gamma, &gv, a_spec)?)
            } else {
                DMatrix::from_diagonal(&(gamma - gv / a_gd))
            };
            (w_new, a_gd, gd_dec, spec_dec)
        } else {
            let gsv = singular_values(g)?;
            let frob_sq = g.norm_squared();
            let st_g = frob_sq / (gsv[0] * gsv[0]);
            let a_gd = l_f + c_op / st_g;
            let nuc = gsv.iter().fold(T::zero(), |acc, &s| acc + s);
            let w_new = if block.spectral {
                let (_, dir) = spectral_direction(g, mode)?;
                &block.w - dir * (nuc / a_spec)
            } else {
                &block.w - g / a_gd
            };
            (w_new, a_gd, frob_sq / (two * a_gd), nuc * nuc / (two * a_spec))
        };
        let predicted = if block.spectral { spec_dec } else { gd_dec };
        total += predicted;
        out.push(BlockState { w: w_new, role: block.role, spectral: block.spectral });
        info.push(Some(BlockStepInfo {
            a_gd,
            a_spec,
            used_spectral: block.spectral,
            predicted_decrease: predicted,
            gd_predicted_decrease: gd_dec,
            spec_predicted_decrease: spec_dec,
        }));
    }
    Ok(MixedStep { blocks: out, info, predicted_decrease: total })
}

/// How a matrix is cut into shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardScheme {
    /// `S` contiguous row groups spanning all columns.
    RowShards(usize),
    /// `S` contiguous column groups spanning all rows.
    ColShards(usize),
    /// `p` row groups times `q` column groups.
    Grid(usize, usize),
    /// One block per entry.
    Singletons,
    /// The whole matrix as one block.
    Whole,
}

/// A rectangular shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// A disjoint cover of `[rows] x [cols]` by rectangular shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub rows: usize,
    pub cols: usize,
    pub blocks: Vec<Shard>,
    /// Largest number of shards meeting one row.
    pub nu: usize,
    /// Largest number of shards meeting one column.
    pub mu: usize,
    /// `min(mu, nu)`.
    pub kappa: usize,
}

impl Partition {
    /// Validates that `blocks` tile the matrix and computes the multiplicities.
    pub fn from_blocks(rows: usize, cols: usize, blocks: Vec<Shard>) -> Result<Self> {
        if rows == 0 || cols == 0 || blocks.is_empty() {
            return Err(Error::InvalidScheme("empty matrix or block list".into()));
        }
        let mut cover = vec![0u32; rows * cols];
        let mut row_hits = vec![0usize; rows];
        let mut col_hits = vec![0usize; cols];
        for b in &blocks {
            if b.rows.is_empty() || b.cols.is_empty() || b.rows.end > rows || b.cols.end > cols {
                return Err(Error::InvalidScheme(format!("shard {b:?} is empty or out of range")));
            }
            for i in b.rows.clone() {
                row_hits[i] += 1;
                for j in b.cols.clone() {
                    cover[i * cols + j] += 1;
                }
            }
            for j in b.cols.clone() {
                col_hits[j] += 1;
            }
        }
        if cover.iter().any(|&c| c != 1) {
            return Err(Error::InvalidScheme("shards must cover every entry exactly once".into()));
        }
        let nu = row_hits.into_iter().max().unwrap_or(0);
        let mu = col_hits.into_iter().max().unwrap_or(0);
        Ok(Self { rows, cols, blocks, nu, mu, kappa: nu.min(mu) })
    }

    /// Row footprint of each shard.
    pub fn row_footprints(&self) -> Vec<Range<usize>> {
        self.blocks.iter().map(|b| b.rows.clone()).collect()
    }

    /// Column footprint of each shard.
    pub fn col_footprints(&self) -> Vec<Range<usize>> {
        self.blocks.iter().map(|b| b.cols.clone()).collect()
    }

    /// Copy of shard `p` of `g`.
    pub fn shard_of<T: Real>(&self, g: &DMatrix<T>, p: usize) -> DMatrix<T> {
        let b = &self.blocks[p];
        g.view((b.rows.start, b.cols.start), (b.rows.len(), b.cols.len())).into_owned()
    }
}

fn split(len: usize, parts: usize, what: &str) -> Result<Vec<Range<usize>>> {
    if parts == 0 || parts > len {
        return Err(Error::InvalidScheme(format!("cannot split {len} {what} into {parts} shards")));
    }
    let size = len / parts;
    Ok((0..parts)
        .map(|s| s * size..if s + 1 == parts { len } else { (s + 1) * size })
        .collect())
}

/// Partition of a `rows x cols` matrix; the last shard along an axis absorbs any remainder.
pub fn make_partition(rows: usize, cols: usize, scheme: ShardScheme) -> Result<Partition> {
    let grid = |p: usize, q: usize| -> Result<Vec<Shard>> {
        let rs = split(rows, p, "rows")?;
        let cs = split(cols, q, "columns")?;
        Ok(rs
            .iter()
            .flat_map(|r| cs.iter().map(move |c| Shard { rows: r.clone(), cols: c.clone() }))
            .collect())
    };
    let blocks = match scheme {
        ShardScheme::RowShards(s) => grid(s, 1)?,
        ShardScheme::ColShards(s) => grid(1, s)?,
        ShardScheme::Grid(p, q) => grid(p, q)?,
        ShardScheme::Singletons => grid(rows, cols)?,
        ShardScheme::Whole => grid(1, 1)?,
    };
    Partition::from_blocks(rows, cols, blocks)
}

/// Result of [`shardwise_spec_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShardStep<T: Real> {
    pub w: DMatrix<T>,
    /// `(1 / 2 L_P) sum_p ||G_p||_*^2`.
    pub guaranteed_decrease: T,
    /// Shared step constant `L_P = kappa ||A||_F^2 / n`.
    pub l_partition: T,
    /// `sum_p ||G_p||_*^2 / ||G||_F^2`.
    pub nr_partition: T,
}

/// Spectral step applied shard by shard with the shared constant `L_P`.
///
/// Shard `p` moves by `-(||G_p||_* / L_P) polar(G_p)`; zero shards are skipped.
/// Shards are evaluated in parallel and merged in block order.
pub fn shardwise_spec_step<T: Real>(
    w: &DMatrix<T>,
    g: &DMatrix<T>,
    part: &Partition,
    a: &DMatrix<T>,
    n: usize,
    mode: PolarMode,
) -> Result<ShardStep<T>> {
    same_shape("shardwise_spec_step", w, g)?;
    if g.shape() != (part.rows, part.cols) {
        return Err(shape_mismatch("shardwise_spec_step partition", (part.rows, part.cols), g.shape()));
    }
    if a.nrows() != part.cols {
        return Err(shape_mismatch("shardwise_spec_step features", (part.cols, a.ncols()), a.shape()));
    }
    if n == 0 {
        return Err(Error::NonPositiveConstant { name: "n", value: 0.0 });
    }
    let l_p = lit::<T>(part.kappa as f64) * a.norm_squared() / lit::<T>(n as f64);
    positive("L_P", l_p)?;
    let steps: Vec<Option<(T, DMatrix<T>)>> = (0..part.blocks.len())
        .into_par_iter()
        .map(|p| {
            let gp = part.shard_of(g, p);
            if is_zero(&gp) {
                Ok(None)
            } else {
                spectral_direction(&gp, mode).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    if steps.iter().all(Option::is_none) {
        return Err(Error::ZeroGradient);
    }
    let mut w_new = w.clone();
    let mut nuc_sq = T::zero();
    for (b, step) in part.blocks.iter().zip(steps) {
        if let Some((nuc, dir)) = step {
            let mut view = w_new.view_mut((b.rows.start, b.cols.start), (b.rows.len(), b.cols.len()));
            view -= dir * (nuc / l_p);
            nuc_sq += nuc * nuc;
        }
    }
    Ok(ShardStep {
        w: w_new,
        guaranteed_decrease: nuc_sq / (lit::<T>(2.0) * l_p),
        l_partition: l_p,
        nr_partition: nuc_sq / g.norm_squared(),
    })
}

/// `kappa * st(A)`, the partitioned stable-rank threshold.
pub fn partition_stable_rank<T: Real>(a: &DMatrix<T>, part: &Partition) -> Result<T> {
    Ok(lit::<T>(part.kappa as f64) * crate::linalg::stable_rank(a)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{nuclear_norm, op_norm};
    use crate::models::{gen_realizable, rf_loss, rf_loss_grad, RFInstance};
    use crate::rng::{gaussian_matrix, stream};
    use crate::Matrix;
    use nalgebra::dvector;
    use proptest::prelude::*;

    #[test]
    fn gd_step_basics() {
        let w = gaussian_matrix(&mut stream(1, "w"), 3, 4, 1.0);
        assert_eq!(gd_step(&w, &Matrix::zeros(3, 4), 2.0).unwrap(), w);
        assert!(matches!(gd_step(&w, &w, 0.0), Err(Error::NonPositiveConstant { .. })));
        assert!(matches!(gd_step(&w, &Matrix::zeros(2, 2), 1.0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gd_step_from_zero_on_rf() {
        let inst = gen_realizable(10, 12, 6, 40, 2).unwrap();
        let g = -&inst.w_truth * &inst.b;
        let w1 = gd_step(&Matrix::zeros(6, 12), &g, inst.l_f).unwrap();
        let expected = &inst.w_truth * &inst.b * (inst.n as f64) / (op_norm(&inst.a).unwrap().powi(2));
        assert!((w1 - expected).norm() <= 1e-12);
    }

    #[test]
    fn descent_guarantees_on_rf_quadratic() {
        for seed in 0..5 {
            let inst = gen_realizable(10, 12, 6, 40, seed).unwrap();
            let w = gaussian_matrix(&mut stream(seed, "w0"), 6, 12, 1.0);
            let (loss, g) = rf_loss_grad(&w, &inst).unwrap();
            let gd = gd_step(&w, &g, inst.l_f).unwrap();
            assert!(loss - rf_loss(&gd, &inst) >= gd_guaranteed_decrease(&g, inst.l_f) * (1.0 - 1e-10));
            let sd = spec_step(&w, &g, inst.l_op, PolarMode::Exact).unwrap();
            assert!(loss - rf_loss(&sd, &inst) >= spec_guaranteed_decrease(&g, inst.l_op).unwrap() * (1.0 - 1e-10));
        }
    }

    #[test]
    fn spec_step_with_orthonormal_rows() {
        let inst = gen_realizable(8, 10, 4, 30, 4).unwrap();
        let q = gaussian_matrix(&mut stream(4, "q"), 10, 4, 1.0).qr().q().transpose();
        let w = &inst.w_truth + &q * 0.3;
        let (loss, g) = rf_loss_grad(&w, &inst).unwrap();
        let sd = spec_step(&w, &g, inst.l_op, PolarMode::Exact).unwrap();
        assert!(loss - rf_loss(&sd, &inst) >= spec_guaranteed_decrease(&g, inst.l_op).unwrap() * (1.0 - 1e-10));
    }

    #[test]
    fn spec_step_rank_one_equals_gd() {
        let u = gaussian_matrix(&mut stream(3, "u"), 5, 1, 1.0);
        let v = gaussian_matrix(&mut stream(3, "v"), 1, 7, 1.0);
        let g = &u * &v * 2.5;
        let w = gaussian_matrix(&mut stream(3, "w"), 5, 7, 1.0);
        let sd = spec_step(&w, &g, 3.0, PolarMode::Exact).unwrap();
        let gd = gd_step(&w, &g, 3.0).unwrap();
        assert!((sd - gd).norm() <= 1e-12);
    }

    #[test]
    fn spec_step_modes_agree() {
        let g = gaussian_matrix(&mut stream(5, "g"), 12, 20, 1.0);
        let w = Matrix::zeros(12, 20);
        let exact = spec_step(&w, &g, 2.0, PolarMode::Exact).unwrap();
        let ns = spec_step(&w, &g, 2.0, PolarMode::default()).unwrap();
        let pure = spec_step(&w, &g, 2.0, PolarMode::PureNewtonSchulz { max_iters: 100, tol: 1e-10 }).unwrap();
        assert!((&exact - ns).norm() <= 1e-6);
        assert!((&exact - pure).norm() <= 1e-6);
    }

    #[test]
    fn spec_step_errors() {
        let w = Matrix::zeros(2, 2);
        assert_eq!(spec_step(&w, &w, 1.0, PolarMode::Exact), Err(Error::ZeroGradient));
        let g = Matrix::identity(2, 2);
        assert!(matches!(spec_step(&w, &g, -1.0, PolarMode::Exact), Err(Error::NonPositiveConstant { .. })));
    }

    #[test]
    fn diag_sign_step_examples() {
        let gamma = dvector![0.5, -1.0];
        assert_eq!(diag_sign_step(&gamma, &dvector![0.0, 0.0], 1.0).unwrap(), gamma);
        assert_eq!(diag_sign_step(&gamma, &dvector![1.0, 0.0], 1.0).unwrap(), dvector![-0.5, -1.0]);
        assert_eq!(diag_sign_step(&gamma, &dvector![2.0, -1.0], 3.0).unwrap(), dvector![-0.5, 0.0]);
        assert!(matches!(diag_sign_step(&gamma, &gamma, 0.0), Err(Error::NonPositiveConstant { .. })));
    }

    fn block(w: Matrix, role: BlockRole, spectral: bool) -> BlockState<f64> {
        BlockState { w, role, spectral }
    }

    #[test]
    fn mixed_step_reduces_to_gd_without_spectral_blocks() {
        let w = gaussian_matrix(&mut stream(1, "mw"), 4, 6, 1.0);
        let g = gaussian_matrix(&mut stream(1, "mg"), 4, 6, 1.0);
        let a = gaussian_matrix(&mut stream(1, "ma"), 6, 9, 1.0);
        let out = mixed_step(&[block(w.clone(), BlockRole::Internal, false)], &[g.clone()], &[a.clone()], 0.5, 0.0, PolarMode::Exact)
            .unwrap();
        let l_f = 0.5 * op_norm(&a).unwrap().powi(2);
        assert!((&out.blocks[0].w - gd_step(&w, &g, l_f).unwrap()).norm() <= 1e-12);
    }

    #[test]
    fn mixed_step_reduces_to_spec_step_for_one_spectral_block() {
        let w = gaussian_matrix(&mut stream(2, "mw"), 4, 6, 1.0);
        let g = gaussian_matrix(&mut stream(2, "mg"), 4, 6, 1.0);
        let a = gaussian_matrix(&mut stream(2, "ma"), 6, 9, 1.0);
        let out = mixed_step(&[block(w.clone(), BlockRole::Internal, true)], &[g.clone()], &[a.clone()], 0.5, 0.0, PolarMode::Exact)
            .unwrap();
        let l_op = 0.5 * a.norm_squared();
        assert!((&out.blocks[0].w - spec_step(&w, &g, l_op, PolarMode::Exact).unwrap()).norm() <= 1e-12);
    }

    #[test]
    fn mixed_step_predicted_decrease_follows_criterion() {
        let a1 = gaussian_matrix(&mut stream(3, "a1"), 6, 40, 1.0).add_scalar(3.0);
        let a2 = gaussian_matrix(&mut stream(3, "a2"), 5, 40, 1.0);
        let g1 = gaussian_matrix(&mut stream(3, "g1"), 5, 6, 1.0);
        let g2 = gaussian_matrix(&mut stream(3, "g2"), 4, 1, 1.0) * gaussian_matrix(&mut stream(3, "g2r"), 1, 5, 1.0);
        let w1 = Matrix::zeros(5, 6);
        let w2 = Matrix::zeros(4, 5);
        let grads = [g1.clone(), g2.clone()];
        let feats = [a1.clone(), a2.clone()];
        let out = mixed_step(
            &[block(w1, BlockRole::Input, true), block(w2, BlockRole::Output, true)],
            &grads,
            &feats,
            1.0,
            0.0,
            PolarMode::Exact,
        )
        .unwrap();
        for (i, (g, a)) in grads.iter().zip(&feats).enumerate() {
            let info = out.info[i].as_ref().unwrap();
            let report = crate::diagnostics::layer_criterion(g, a, 0.0).unwrap();
            assert_eq!(report.spectral_favored, info.spec_predicted_decrease >= info.gd_predicted_decrease);
        }
    }

    #[test]
    fn mixed_step_all_spectral_dominates_when_criterion_holds() {
        let mut checked = 0;
        for seed in 0..40 {
            let feats: Vec<Matrix> =
                (0..3).map(|i| gaussian_matrix(&mut stream(seed, &format!("f{i}")), 6, 30, 1.0).add_scalar(2.0)).collect();
            let grads: Vec<Matrix> = (0..3).map(|i| gaussian_matrix(&mut stream(seed, &format!("g{i}")), 6, 6, 1.0)).collect();
            let favored = grads
                .iter()
                .zip(&feats)
                .all(|(g, a)| crate::diagnostics::layer_criterion(g, a, 0.0).unwrap().spectral_favored);
            if !favored {
                continue;
            }
            checked += 1;
            let blocks = |s: bool| -> Vec<BlockState<f64>> { (0..3).map(|_| block(Matrix::zeros(6, 6), BlockRole::Internal, s)).collect() };
            let spec = mixed_step(&blocks(true), &grads, &feats, 0.1, 0.7, PolarMode::Exact).unwrap();
            let gd = mixed_step(&blocks(false), &grads, &feats, 0.1, 0.7, PolarMode::Exact).unwrap();
            assert!(spec.predicted_decrease >= gd.predicted_decrease * (1.0 - 1e-12));
        }
        assert!(checked > 5);
    }

    #[test]
    fn mixed_step_diagonal_and_zero_blocks() {
        let gamma = dvector![1.0, 2.0, 3.0];
        let g = dvector![0.5, -0.25, 0.0];
        let a = gaussian_matrix(&mut stream(4, "da"), 3, 10, 1.0);
        let out = mixed_step(
            &[
                block(Matrix::from_diagonal(&gamma), BlockRole::Diagonal, true),
                block(Matrix::identity(3, 3), BlockRole::Internal, true),
            ],
            &[Matrix::from_diagonal(&g), Matrix::zeros(3, 3)],
            &[a.clone(), a.clone()],
            1.0,
            0.0,
            PolarMode::Exact,
        )
        .unwrap();
        let expected = diag_sign_step(&gamma, &g, a.norm_squared()).unwrap();
        assert!((out.blocks[0].w.diagonal() - expected).norm() <= 1e-14);
        assert_eq!(out.blocks[1].w, Matrix::identity(3, 3));
        assert!(out.info[1].is_none());
    }

    #[test]
    fn mixed_step_shape_errors() {
        let b = block(Matrix::zeros(2, 3), BlockRole::Internal, false);
        let r = mixed_step(&[b.clone()], &[Matrix::zeros(2, 2)], &[Matrix::zeros(3, 1)], 1.0, 0.0, PolarMode::Exact);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
        let r = mixed_step(&[b], &[], &[], 1.0, 0.0, PolarMode::Exact);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn partition_multiplicities() {
        let p = make_partition(8, 6, ShardScheme::RowShards(4)).unwrap();
        assert_eq!((p.nu, p.mu, p.kappa), (1, 4, 1));
        let p = make_partition(8, 6, ShardScheme::ColShards(3)).unwrap();
        assert_eq!((p.nu, p.mu, p.kappa), (3, 1, 1));
        let p = make_partition(5, 7, ShardScheme::Singletons).unwrap();
        assert_eq!((p.nu, p.mu, p.kappa), (7, 5, 5));
        let p = make_partition(5, 7, ShardScheme::Whole).unwrap();
        assert_eq!((p.nu, p.mu, p.kappa), (1, 1, 1));
        let p = make_partition(9, 10, ShardScheme::Grid(2, 3)).unwrap();
        assert_eq!((p.nu, p.mu, p.kappa), (3, 2, 2));
        assert_eq!(p.row_footprints()[5], 4..9);
        assert_eq!(p.col_footprints()[5], 6..10);
        assert!(matches!(make_partition(4, 4, ShardScheme::RowShards(5)), Err(Error::InvalidScheme(_))));
        assert!(matches!(make_partition(4, 4, ShardScheme::ColShards(0)), Err(Error::InvalidScheme(_))));
        let overlap = vec![Shard { rows: 0..2, cols: 0..2 }, Shard { rows: 1..2, cols: 0..2 }];
        assert!(Partition::from_blocks(2, 2, overlap).is_err());
    }

    fn small_instance(seed: u64) -> RFInstance {
        gen_realizable(5, 6, 6, 20, seed).unwrap()
    }

    #[test]
    fn whole_partition_matches_spec_step() {
        let inst = small_instance(1);
        let w = gaussian_matrix(&mut stream(1, "w"), 6, 6, 1.0);
        let (_, g) = rf_loss_grad(&w, &inst).unwrap();
        let part = make_partition(6, 6, ShardScheme::Whole).unwrap();
        let step = shardwise_spec_step(&w, &g, &part, &inst.a, inst.n, PolarMode::Exact).unwrap();
        let reference = spec_step(&w, &g, inst.l_op, PolarMode::Exact).unwrap();
        assert!((step.w - reference).norm() <= 1e-12);
    }

    #[test]
    fn row_shards_realize_guaranteed_decrease() {
        let inst = small_instance(2);
        let w = gaussian_matrix(&mut stream(2, "w"), 6, 6, 1.0);
        let (loss, g) = rf_loss_grad(&w, &inst).unwrap();
        let part = make_partition(6, 6, ShardScheme::RowShards(2)).unwrap();
        let step = shardwise_spec_step(&w, &g, &part, &inst.a, inst.n, PolarMode::Exact).unwrap();
        let by_hand: f64 = (0..2).map(|p| nuclear_norm(&part.shard_of(&g, p)).unwrap().powi(2)).sum::<f64>()
            * inst.n as f64
            / (2.0 * inst.a.norm_squared());
        assert!((step.guaranteed_decrease - by_hand).abs() <= 1e-12 * by_hand);
        assert!(loss - rf_loss(&step.w, &inst) >= step.guaranteed_decrease * (1.0 - 1e-10));
        assert!(step.nr_partition >= 1.0 - 1e-12);
    }

    #[test]
    fn shardwise_skips_zero_shards_and_rejects_all_zero() {
        let a = gaussian_matrix(&mut stream(3, "a"), 4, 10, 1.0);
        let mut g = Matrix::zeros(4, 4);
        g[(0, 0)] = 1.0;
        let part = make_partition(4, 4, ShardScheme::RowShards(2)).unwrap();
        let w = Matrix::zeros(4, 4);
        let step = shardwise_spec_step(&w, &g, &part, &a, 10, PolarMode::Exact).unwrap();
        assert!(step.w.rows(2, 2).iter().all(|&x| x == 0.0));
        assert_eq!(
            shardwise_spec_step(&w, &Matrix::zeros(4, 4), &part, &a, 10, PolarMode::Exact),
            Err(Error::ZeroGradient)
        );
    }

    proptest! {
        #[test]
        fn partition_nuclear_rank_at_least_one(seed in any::<u64>(), p in 1usize..4, q in 1usize..4) {
            let g = gaussian_matrix(&mut stream(seed, "pg"), 6, 8, 1.0);
            let a = gaussian_matrix(&mut stream(seed, "pa"), 8, 12, 1.0);
            let part = make_partition(6, 8, ShardScheme::Grid(p, q)).unwrap();
            let step = shardwise_spec_step(&Matrix::zeros(6, 8), &g, &part, &a, 12, PolarMode::Exact).unwrap();
            prop_assert!(step.nr_partition >= 1.0 - 1e-12);
        }
    }
}
