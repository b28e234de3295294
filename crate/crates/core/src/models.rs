//! Random-feature regression testbeds.
//!
//! Features are `A = ReLU(V X)` with Gaussian data `X`; the loss is
//! `L(W) = (1/2n) ||W A - Y||_F^2`, whose gradient has the Gram form
//! `W B - C` with `B = (1/n) A A^T` and a constant target term `C`.

use nalgebra::{DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::{nuclear_rank, singular_values};
use crate::propagation::{gated_block, Activation};
use crate::rng::{derive_seed, gaussian_matrix, stream};
use crate::Matrix;

/// Which target model generated `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfVariant {
    /// `Y = W# A`: the student can fit the targets exactly.
    Realizable,
    /// `Y = Wbar Abar` with teacher features `Abar = ReLU(Vbar X)`.
    TeacherStudent,
}

/// Entry variance convention for a random weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScale {
    /// Variance `1 / fan`, where fan is `d` for feature weights and `m` for the ground truth.
    InvDim,
    /// Unit variance.
    Unit,
}

impl WeightScale {
    fn std(self, fan: usize) -> f64 {
        match self {
            WeightScale::InvDim => 1.0 / (fan as f64).sqrt(),
            WeightScale::Unit => 1.0,
        }
    }
}

/// Dimensions and scale conventions of a random-feature problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RfConfig {
    /// Input dimension.
    pub d: usize,
    /// Number of features.
    pub k: usize,
    /// Output dimension.
    pub m: usize,
    /// Number of samples.
    pub n: usize,
    /// Variance convention of the feature weights `V` (and `Vbar`).
    pub feature_scale: WeightScale,
    /// Variance convention of `W#` or `Wbar`.
    pub truth_scale: WeightScale,
    /// Reuse the student weights as teacher weights (`Vbar = V`).
    pub tie_teacher: bool,
}

impl RfConfig {
    /// `V ~ N(0, 1/d)`, ground truth `N(0, 1/m)`, independent teacher.
    pub fn new(d: usize, k: usize, m: usize, n: usize) -> Self {
        Self {
            d,
            k,
            m,
            n,
            feature_scale: WeightScale::InvDim,
            truth_scale: WeightScale::InvDim,
            tie_teacher: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::InvalidSpec("all dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// A random-feature regression problem with its Gram matrices and smoothness constants.
#[derive(Debug, Clone, PartialEq)]
pub struct RFInstance {
    pub variant: RfVariant,
    /// Student features, `k x n`.
    pub a: Matrix,
    /// Teacher features, `k x n` (teacher-student only).
    pub a_bar: Option<Matrix>,
    /// Targets, `m x n`.
    pub y: Matrix,
    /// `W#` or `Wbar`, `m x k`.
    pub w_truth: Matrix,
    /// `(1/n) A A^T`.
    pub b: Matrix,
    /// `(1/n) Abar A^T` (teacher-student only).
    pub b_bar: Option<Matrix>,
    /// `||A||_op^2 / n`.
    pub l_f: f64,
    /// `||A||_F^2 / n`.
    pub l_op: f64,
    pub n: usize,
    pub seed: u64,
    /// Constant term of the gradient, `W# B` or `Wbar Bbar`.
    target: Matrix,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

impl RFInstance {
    /// Assembles an instance from features and ground truth.
    ///
    /// With `a_bar = None` the targets are `w_truth * a` (realizable),
    /// otherwise `w_truth * a_bar` (teacher-student).
    pub fn from_parts(a: Matrix, a_bar: Option<Matrix>, w_truth: Matrix, seed: u64) -> Result<Self> {
        let (k, n) = a.shape();
        if w_truth.ncols() != k {
            return Err(shape_mismatch("RFInstance w_truth", (w_truth.nrows(), k), w_truth.shape()));
        }
        if let Some(t) = &a_bar {
            if t.shape() != (k, n) {
                return Err(shape_mismatch("RFInstance a_bar", (k, n), t.shape()));
            }
        }
        let sv = singular_values(&a)?;
        let nf = n as f64;
        let b = symmetrize(&(&a * a.transpose() / nf));
        let (variant, y, b_bar, target) = match &a_bar {
            None => {
                let target = &w_truth * &b;
                (RfVariant::Realizable, &w_truth * &a, None, target)
            }
            Some(t) => {
                let b_bar = t * a.transpose() / nf;
                let target = &w_truth * &b_bar;
                (RfVariant::TeacherStudent, &w_truth * t, Some(b_bar), target)
            }
        };
        Ok(Self {
            variant,
            l_f: sv[0] * sv[0] / nf,
            l_op: sv.iter().map(|s| s * s).sum::<f64>() / nf,
            a,
            a_bar,
            y,
            w_truth,
            b,
            b_bar,
            n,
            seed,
            target,
        })
    }

    /// Realizable instance whose feature Gram matrix equals the given SPD `b`.
    ///
    /// Uses `n = k` samples with `A = sqrt(n) chol(B)`, so `(1/n) A A^T = B`.
    pub fn from_gram(b: &Matrix, w_truth: Matrix, seed: u64) -> Result<Self> {
        let k = b.nrows();
        if !b.is_square() {
            return Err(shape_mismatch("from_gram", (k, k), b.shape()));
        }
        let chol = nalgebra::Cholesky::new(symmetrize(b))
            .ok_or_else(|| Error::InvalidSpec("Gram matrix is not positive definite".into()))?;
        let a = chol.l() * (k as f64).sqrt();
        Self::from_parts(a, None, w_truth, seed)
    }

    /// Output dimension `m`.
    pub fn m(&self) -> usize {
        self.w_truth.nrows()
    }

    /// Number of features `k`.
    pub fn k(&self) -> usize {
        self.a.nrows()
    }

    /// Gradient at `W = 0`: `-W# B` or `-Wbar Bbar`.
    pub fn initial_gradient(&self) -> Matrix {
        -&self.target
    }
}

fn relu_features(v: &Matrix, x: &Matrix) -> Matrix {
    (v * x).map(relu)
}

/// Realizable ReLU random-feature instance with the default scale conventions.
pub fn gen_realizable(d: usize, k: usize, m: usize, n: usize, seed: u64) -> Result<RFInstance> {
    gen_realizable_with(&RfConfig::new(d, k, m, n), seed)
}

/// Realizable ReLU random-feature instance.
pub fn gen_realizable_with(cfg: &RfConfig, seed: u64) -> Result<RFInstance> {
    cfg.validate()?;
    let v = gaussian_matrix(&mut stream(seed, "rf/v"), cfg.k, cfg.d, cfg.feature_scale.std(cfg.d));
    let x = gaussian_matrix(&mut stream(seed, "rf/x"), cfg.d, cfg.n, 1.0);
    let w = gaussian_matrix(&mut stream(seed, "rf/w-truth"), cfg.m, cfg.k, cfg.truth_scale.std(cfg.m));
    RFInstance::from_parts(relu_features(&v, &x), None, w, seed)
}

/// Teacher-student ReLU random-feature instance with the default scale conventions.
pub fn gen_teacher_student(d: usize, k: usize, m: usize, n: usize, seed: u64) -> Result<RFInstance> {
    gen_teacher_student_with(&RfConfig::new(d, k, m, n), seed)
}

/// Teacher-student ReLU random-feature instance.
pub fn gen_teacher_student_with(cfg: &RfConfig, seed: u64) -> Result<RFInstance> {
    cfg.validate()?;
    let std = cfg.feature_scale.std(cfg.d);
    let v = gaussian_matrix(&mut stream(seed, "rf/v"), cfg.k, cfg.d, std);
    let v_bar = if cfg.tie_teacher {
        v.clone()
    } else {
        gaussian_matrix(&mut stream(seed, "rf/v-teacher"), cfg.k, cfg.d, std)
    };
    let x = gaussian_matrix(&mut stream(seed, "rf/x"), cfg.d, cfg.n, 1.0);
    let w = gaussian_matrix(&mut stream(seed, "rf/w-truth"), cfg.m, cfg.k, cfg.truth_scale.std(cfg.m));
    RFInstance::from_parts(relu_features(&v, &x), Some(relu_features(&v_bar, &x)), w, seed)
}

/// Realizable instance with gated features `A = sigma(V X) .* (W X)`.
///
/// `V` and `W` have entry variance `1/d`; the ground truth follows
/// `cfg.truth_scale`, and `cfg.feature_scale` is ignored.
pub fn gen_gated_with(cfg: &RfConfig, act: Activation, seed: u64) -> Result<RFInstance> {
    cfg.validate()?;
    let x = gaussian_matrix(&mut stream(seed, "rf/x"), cfg.d, cfg.n, 1.0);
    let a = gated_block(&x, &x, act, cfg.k, derive_seed(seed, 1))?;
    let w = gaussian_matrix(&mut stream(seed, "rf/w-truth"), cfg.m, cfg.k, cfg.truth_scale.std(cfg.m));
    RFInstance::from_parts(a, None, w, seed)
}

/// `phi(t) = sqrt(1 - t^2) + (pi - arccos t) t - 1` on `[-1, 1]`.
///
/// Inputs within `1e-12` outside the interval are clamped.
pub fn phi(t: f64) -> Result<f64> {
    if !(t.abs() <= 1.0 + 1e-12) {
        return Err(Error::DomainError(t));
    }
    let t = t.clamp(-1.0, 1.0);
    Ok((1.0 - t * t).sqrt() + (std::f64::consts::PI - t.acos()) * t - 1.0)
}

/// Mean and covariance of `ReLU(V x)` for `x ~ N(0, I)`.
///
/// `mu_i = ||v_i|| / sqrt(2 pi)` and
/// `Sigma_ij = ||v_i|| ||v_j|| / (2 pi) * phi(<v_i, v_j> / (||v_i|| ||v_j||))`.
pub fn relu_kernel(v: &Matrix) -> Result<(DVector<f64>, Matrix)> {
    let k = v.nrows();
    let norms: Vec<f64> = (0..k).map(|i| v.row(i).norm()).collect();
    if let Some(i) = norms.iter().position(|&s| s == 0.0) {
        return Err(Error::ZeroRow(i));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mu = DVector::from_iterator(k, norms.iter().map(|s| s / two_pi.sqrt()));
    let mut sigma = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let scale = norms[i] * norms[j];
            let rho = if i == j { 1.0 } else { v.row(i).dot(&v.row(j)) / scale };
            let val = scale / two_pi * phi(rho.clamp(-1.0, 1.0))?;
            sigma[(i, j)] = val;
            sigma[(j, i)] = val;
        }
    }
    Ok((mu, sigma))
}

/// Parameters of a synthetic multi-spiked Gram matrix `B = U Q U^T + Sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikedSpec {
    /// Dimension driving the spike size `d^exponent`.
    pub d: usize,
    /// Size of `B`.
    pub k: usize,
    /// Number of spikes `r`.
    pub spike_rank: usize,
    /// Lower spike exponent in `(0, 1]`.
    pub exp_lo: f64,
    /// Upper spike exponent in `[exp_lo, 1]`.
    pub exp_hi: f64,
    /// Lower bulk level `c1 > 0`.
    pub bulk_lo: f64,
    /// Upper bulk level `c2 >= c1`.
    pub bulk_hi: f64,
}

impl SpikedSpec {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.into()));
        if self.spike_rank == 0 {
            return bad("spike_rank must be at least 1");
        }
        if self.spike_rank > self.k || self.d == 0 {
            return bad("need 1 <= spike_rank <= k and d >= 1");
        }
        if !(self.exp_lo > 0.0 && self.exp_lo <= self.exp_hi && self.exp_hi <= 1.0) {
            return bad("need 0 < exp_lo <= exp_hi <= 1");
        }
        if !(self.bulk_lo > 0.0 && self.bulk_lo <= self.bulk_hi && self.bulk_hi.is_finite()) {
            return bad("need 0 < bulk_lo <= bulk_hi");
        }
        Ok(())
    }
}

fn orthonormal_frame<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    gaussian_matrix(rng, rows, cols, 1.0).qr().q()
}

fn uniform_in<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Synthetic spiked Gram matrix.
///
/// `U` is a random `k x r` orthonormal frame, `Q` has entries log-uniform in
/// `[c1 d^l, c2 d^u]`, and `Sigma` is a random rotation of a diagonal with
/// entries uniform in `[c1, c2]`.
pub fn gen_spiked_gram(spec: &SpikedSpec, seed: u64) -> Result<Matrix> {
    spec.validate()?;
    let (k, r) = (spec.k, spec.spike_rank);
    let d = spec.d as f64;
    let u = orthonormal_frame(&mut stream(seed, "spiked/frame"), k, r);
    let mut rng = stream(seed, "spiked/spikes");
    let (lo, hi) = (
        (spec.bulk_lo * d.powf(spec.exp_lo)).ln(),
        (spec.bulk_hi * d.powf(spec.exp_hi)).ln(),
    );
    let q = DVector::from_fn(r, |_, _| uniform_in(&mut rng, lo, hi).exp());
    let rotation = orthonormal_frame(&mut stream(seed, "spiked/rotation"), k, k);
    let mut rng = stream(seed, "spiked/bulk");
    let bulk = DVector::from_fn(k, |_, _| uniform_in(&mut rng, spec.bulk_lo, spec.bulk_hi));
    let signal = &u * Matrix::from_diagonal(&q) * u.transpose();
    let noise = &rotation * Matrix::from_diagonal(&bulk) * rotation.transpose();
    Ok(symmetrize(&(signal + noise)))
}

/// Loss `(1/2n) ||W A - Y||_F^2` and its gradient in Gram form.
pub fn rf_loss_grad(w: &Matrix, inst: &RFInstance) -> Result<(f64, Matrix)> {
    let expected = (inst.m(), inst.k());
    if w.shape() != expected {
        return Err(shape_mismatch("rf_loss_grad", expected, w.shape()));
    }
    Ok((rf_loss(w, inst), w * &inst.b - &inst.target))
}

/// Loss `(1/2n) ||W A - Y||_F^2`.
pub fn rf_loss(w: &Matrix, inst: &RFInstance) -> f64 {
    (w * &inst.a - &inst.y).norm_squared() / (2.0 * inst.n as f64)
}

/// How `(I - eta B)^t` is applied in [`gradient_recursion_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecursionMethod {
    /// Repeated multiplication by `I - eta B`.
    Iterated,
    /// Eigendecomposition of `B`.
    Eigen,
}

/// Gradient after `t` GD steps of size `eta` from `W = 0`: `G_0 (I - eta B)^t`.
pub fn gradient_recursion(inst: &RFInstance, eta: f64, t: usize) -> Result<Matrix> {
    gradient_recursion_with(inst, eta, t, RecursionMethod::Iterated)
}

/// [`gradient_recursion`] with an explicit evaluation method.
pub fn gradient_recursion_with(
    inst: &RFInstance,
    eta: f64,
    t: usize,
    method: RecursionMethod,
) -> Result<Matrix> {
    if !(eta > 0.0) {
        return Err(Error::NonPositiveConstant { name: "eta", value: eta });
    }
    let g0 = inst.initial_gradient();
    match method {
        RecursionMethod::Iterated => {
            let mut g = g0;
            for _ in 0..t {
                g = &g - (&g * &inst.b) * eta;
            }
            Ok(g)
        }
        RecursionMethod::Eigen => {
            let eig = SymmetricEigen::new(inst.b.clone());
            let factors = eig.eigenvalues.map(|l| (1.0 - eta * l).powi(t as i32));
            let q = &eig.eigenvectors;
            Ok(g0 * q * Matrix::from_diagonal(&factors) * q.transpose())
        }
    }
}

/// Step-size rule expressed through `||B||_op`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `eta = 1 / (c + ||B||_op)`.
    MaxPlusC(f64),
    /// `eta = 1 / (c ||B||_op)`.
    Fraction(f64),
}

impl StepRule {
    /// Step size for a Gram matrix of operator norm `b_op`.
    pub fn eta(self, b_op: f64) -> f64 {
        match self {
            StepRule::MaxPlusC(c) => 1.0 / (c + b_op),
            StepRule::Fraction(c) => 1.0 / (c * b_op),
        }
    }
}

/// One point of a nuclear-rank trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NrPoint {
    pub t: usize,
    pub nr: f64,
    pub loss: f64,
}

/// Nuclear rank of the GD gradient and loss for `t = 0..=t_max` from `W = 0`.
pub fn nuclear_rank_trace(inst: &RFInstance, rule: StepRule, t_max: usize) -> Result<Vec<NrPoint>> {
    if t_max == 0 {
        return Err(Error::InvalidSpec("t_max must be at least 1".into()));
    }
    let eta = rule.eta(inst.l_f);
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::NonPositiveConstant { name: "eta", value: eta });
    }
    let mut w = Matrix::zeros(inst.m(), inst.k());
    let mut g = inst.initial_gradient();
    let mut out = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        out.push(NrPoint {
            t,
            nr: nuclear_rank(&g)?,
            loss: rf_loss(&w, inst),
        });
        w -= &g * eta;
        g = &g - (&g * &inst.b) * eta;
    }
    Ok(out)
}

/// Longest contiguous run of `values` at or above `threshold`, as `(start, len)`.
pub fn longest_run_at_least(values: &[f64], threshold: f64) -> (usize, usize) {
    let (mut best, mut cur_start, mut cur_len) = ((0, 0), 0, 0);
    for (i, &v) in values.iter().enumerate() {
        if v >= threshold {
            if cur_len == 0 {
                cur_start = i;
            }
            cur_len += 1;
            if cur_len > best.1 {
                best = (cur_start, cur_len);
            }
        } else {
            cur_len = 0;
        }
    }
    best
}
