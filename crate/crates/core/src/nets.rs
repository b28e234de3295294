//! Desk-scale trainable models with full activation and gradient capture.
//!
//! An `L`-layer MLP with a linear output layer and half-MSE loss, a single
//! decoder-style attention plus MLP block, and full-batch training loops
//! that record loss, per-block nuclear rank of the gradient, stable rank of
//! the incoming features and the spectral-versus-Euclidean criterion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::{nuclear_rank, stable_rank};
use crate::models::{rf_loss_grad, RFInstance};
use crate::optim::{
    gd_guaranteed_decrease, gd_step, mixed_step, spec_guaranteed_decrease, spec_step, BlockRole, BlockState,
    PolarMode,
};
use crate::propagation::{column_softmax, rms_normalize, Activation};
use crate::rng::{gaussian_matrix, stream};
use crate::Matrix;

/// Architecture of a fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// `d_0, ..., d_L`; layer `l` maps width `d_{l-1}` to `d_l`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Leave the output layer without activation.
    pub linear_last: bool,
}

impl MlpSpec {
    /// Network with a linear output layer.
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidSpec("an MLP needs at least two layers".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidSpec("MLP widths must be positive".into()));
        }
        Ok(Self { widths, activation, linear_last: true })
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    /// Gaussian weights with entry variance `1 / fan_in`.
    pub fn init_weights(&self, seed: u64) -> Vec<Matrix> {
        let mut rng = stream(seed, "mlp/init");
        self.widths
            .windows(2)
            .map(|w| gaussian_matrix(&mut rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt()))
            .collect()
    }

    fn check(&self, weights: &[Matrix], x: &Matrix, y: &Matrix) -> Result<()> {
        if weights.len() != self.depth() {
            return Err(shape_mismatch("mlp layer count", (self.depth(), 1), (weights.len(), 1)));
        }
        for (l, w) in weights.iter().enumerate() {
            let expected = (self.widths[l + 1], self.widths[l]);
            if w.shape() != expected {
                return Err(shape_mismatch("mlp weight", expected, w.shape()));
            }
        }
        if x.nrows() != self.widths[0] {
            return Err(shape_mismatch("mlp input", (self.widths[0], x.ncols()), x.shape()));
        }
        let out = (self.widths[self.depth()], x.ncols());
        if y.shape() != out {
            return Err(shape_mismatch("mlp targets", out, y.shape()));
        }
        Ok(())
    }

    fn activation_at(&self, layer: usize) -> Activation {
        if self.linear_last && layer + 1 == self.depth() {
            Activation::Linear
        } else {
            self.activation
        }
    }
}

/// Forward and backward intermediates of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCapture {
    pub loss: f64,
    /// `A_0 = X, A_1, ..., A_L`.
    pub activations: Vec<Matrix>,
    /// `X_l = W_l A_{l-1}` for `l = 1..=L`.
    pub preactivations: Vec<Matrix>,
    /// `dL/dW_l` for `l = 1..=L`.
    pub grads: Vec<Matrix>,
}

fn mlp_forward(spec: &MlpSpec, weights: &[Matrix], x: &Matrix) -> (Vec<Matrix>, Vec<Matrix>) {
    let mut acts = vec![x.clone()];
    let mut pre = Vec::with_capacity(weights.len());
    for (l, w) in weights.iter().enumerate() {
        let z = w * acts.last().expect("input present");
        acts.push(spec.activation_at(l).apply_matrix(&z));
        pre.push(z);
    }
    (acts, pre)
}

fn half_mse(out: &Matrix, y: &Matrix) -> f64 {
    (out - y).norm_squared() / (2.0 * y.ncols() as f64)
}

/// Loss `(1/2n) ||A_L - Y||_F^2` and reverse-mode gradients of every layer.
pub fn mlp_forward_backward(spec: &MlpSpec, weights: &[Matrix], x: &Matrix, y: &Matrix) -> Result<MlpCapture> {
    spec.check(weights, x, y)?;
    let (acts, pre) = mlp_forward(spec, weights, x);
    let depth = spec.depth();
    let loss = half_mse(&acts[depth], y);
    let n = x.ncols() as f64;
    let mut grads = vec![Matrix::zeros(0, 0); depth];
    let mut delta = (&acts[depth] - y) / n;
    for l in (0..depth).rev() {
        delta.component_mul_assign(&spec.activation_at(l).derivative_matrix(&pre[l]));
        grads[l] = &delta * acts[l].transpose();
        if l > 0 {
            delta = weights[l].transpose() * &delta;
        }
    }
    Ok(MlpCapture { loss, activations: acts, preactivations: pre, grads })
}

fn sign_pattern(pre: &[Matrix]) -> Vec<bool> {
    pre.iter().flat_map(|z| z.iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect()
}

/// Worst relative disagreement per layer between the analytic gradient and
/// central differences at `probes` random coordinates per layer.
///
/// Probes whose perturbation flips the sign of any preactivation (a kink of
/// a piecewise activation) are redrawn; relative errors are measured against
/// `max(|analytic|, |numeric|, 1e-6 max|G_l|)`.
pub fn gradient_check(
    spec: &MlpSpec,
    weights: &[Matrix],
    x: &Matrix,
    y: &Matrix,
    probes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cap = mlp_forward_backward(spec, weights, x, y)?;
    let base_signs = sign_pattern(&cap.preactivations);
    let mut rng = stream(seed, "gradcheck");
    let h = 1e-6;
    let mut worst = vec![0.0f64; weights.len()];
    for (l, g) in cap.grads.iter().enumerate() {
        let floor = 1e-6 * g.amax();
        let mut done = 0;
        let mut attempts = 0;
        while done < probes && attempts < 50 * probes {
            attempts += 1;
            let (i, j) = (rng.random_range(0..g.nrows()), rng.random_range(0..g.ncols()));
            let mut plus = weights.to_vec();
            plus[l][(i, j)] += h;
            let mut minus = weights.to_vec();
            minus[l][(i, j)] -= h;
            let (acts_p, pre_p) = mlp_forward(spec, &plus, x);
            let (acts_m, pre_m) = mlp_forward(spec, &minus, x);
            if sign_pattern(&pre_p) != base_signs || sign_pattern(&pre_m) != base_signs {
                continue;
            }
            let depth = spec.depth();
            let numeric = (half_mse(&acts_p[depth], y) - half_mse(&acts_m[depth], y)) / (2.0 * h);
            let analytic = g[(i, j)];
            let scale = analytic.abs().max(numeric.abs()).max(floor).max(f64::MIN_POSITIVE);
            worst[l] = worst[l].max((numeric - analytic).abs() / scale);
            done += 1;
        }
        if done < probes {
            return Err(Error::InvalidSpec(format!("layer {} has no kink-free probes", l + 1)));
        }
    }
    Ok(worst)
}

/// Weights of a decoder-style block: attention sublayer then MLP sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// `k x d`.
    pub w1: Matrix,
    /// `d x k`.
    pub w2: Matrix,
    pub heads: usize,
    pub activation: Activation,
    pub causal: bool,
}

impl AttentionParams {
    /// Gaussian initialization: `W_Q, W_K, W_V, W_O, W_1 ~ N(0, 1/d)`, `W_2 ~ N(0, 1/k)`.
    pub fn init(d: usize, k: usize, heads: usize, activation: Activation, causal: bool, seed: u64) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(shape_mismatch("attention heads must divide d_model", (d, heads), (d % heads.max(1), heads)));
        }
        let mut rng = stream(seed, "block/init");
        let sd = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_q: gaussian_matrix(&mut rng, d, d, sd),
            w_k: gaussian_matrix(&mut rng, d, d, sd),
            w_v: gaussian_matrix(&mut rng, d, d, sd),
            w_o: gaussian_matrix(&mut rng, d, d, sd),
            w1: gaussian_matrix(&mut rng, k, d, sd),
            w2: gaussian_matrix(&mut rng, d, k, 1.0 / (k as f64).sqrt()),
            heads,
            activation,
            causal,
        })
    }
}

/// Named intermediates of one block forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCapture {
    pub a_rms: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Column-stochastic attention matrices, one per head.
    pub p: Vec<Matrix>,
    pub h: Matrix,
    pub x_att: Matrix,
    pub a_rms_mlp: Matrix,
    pub b: Matrix,
    pub x_plus: Matrix,
}

/// Forward pass with columnwise softmax over `d^(-1/2) K_h^T Q_h`.
pub fn attention_block_forward(params: &AttentionParams, x: &Matrix) -> Result<BlockCapture> {
    let (d, _) = x.shape();
    let square = (d, d);
    for (name, w) in [("W_Q", &params.w_q), ("W_K", &params.w_k), ("W_V", &params.w_v), ("W_O", &params.w_o)] {
        if w.shape() != square {
            return Err(shape_mismatch(name, square, w.shape()));
        }
    }
    if params.w1.ncols() != d || params.w2.shape() != (d, params.w1.nrows()) {
        return Err(shape_mismatch("MLP weights", (params.w1.nrows(), d), params.w1.shape()));
    }
    if params.heads == 0 || d % params.heads != 0 {
        return Err(shape_mismatch("attention heads must divide d_model", (d, params.heads), (d, params.heads)));
    }
    let d_head = d / params.heads;
    let a_rms = rms_normalize(x)?;
    let q = &params.w_q * &a_rms;
    let k = &params.w_k * &a_rms;
    let v = &params.w_v * &a_rms;
    let scale = 1.0 / (d as f64).sqrt();
    let mut h = Matrix::zeros(d, x.ncols());
    let mut p = Vec::with_capacity(params.heads);
    for head in 0..params.heads {
        let rows = head * d_head;
        let scores = k.rows(rows, d_head).transpose() * q.rows(rows, d_head) * scale;
        let ph = column_softmax(&scores, params.causal);
        h.rows_mut(rows, d_head).copy_from(&(v.rows(rows, d_head) * &ph));
        p.push(ph);
    }
    let x_att = x + &params.w_o * &h;
    let a_rms_mlp = rms_normalize(&x_att)?;
    let b = params.activation.apply_matrix(&(&params.w1 * &a_rms_mlp));
    let x_plus = &x_att + &params.w2 * &b;
    Ok(BlockCapture { a_rms, q, k, v, p, h, x_att, a_rms_mlp, b, x_plus })
}

/// Criterion quantities of one block at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    /// `nr(G)`, 0 when the gradient vanishes.
    pub nr: f64,
    /// `st(A)` of the incoming features.
    pub st: f64,
    /// `nr / st`.
    pub ratio: f64,
    /// `nr >= st`.
    pub favored: bool,
    /// Whether the step leaving this iterate was spectral.
    pub spectral: bool,
    pub grad_norm: f64,
}

/// State of one training run at one iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub blocks: Vec<BlockTrace>,
    /// Guaranteed decrease of the step leaving this iterate (0 at the last record).
    pub guaranteed_decrease: f64,
}

fn block_trace(g: &Matrix, st: f64, spectral: bool) -> Result<BlockTrace> {
    let grad_norm = g.norm();
    let nr = if grad_norm > 0.0 { nuclear_rank(g)? } else { 0.0 };
    Ok(BlockTrace { nr, st, ratio: nr / st, favored: grad_norm > 0.0 && nr >= st, spectral, grad_norm })
}

/// Single-block optimizer for the random-feature quadratic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RfOptimizer {
    /// `W - G / L_F`.
    Gd,
    /// `W - (||G||_* / L_op) polar(G)`.
    Spec(PolarMode),
}

/// Runs `steps` full-batch steps from `w0` (zero when `None`), returning
/// `steps + 1` records for the iterates `W_0, ..., W_steps`.
pub fn train_rf(inst: &RFInstance, opt: RfOptimizer, steps: usize, w0: Option<Matrix>) -> Result<Vec<TraceRecord>> {
    if steps == 0 {
        return Err(Error::InvalidSpec("steps must be at least 1".into()));
    }
    let mut w = w0.unwrap_or_else(|| Matrix::zeros(inst.m(), inst.k()));
    let st_a = stable_rank(&inst.a)?;
    let spectral = matches!(opt, RfOptimizer::Spec(_));
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, g) = rf_loss_grad(&w, inst)?;
        let block = block_trace(&g, st_a, spectral)?;
        let moving = step < steps && block.grad_norm > 0.0;
        let guaranteed = if !moving {
            0.0
        } else {
            match opt {
                RfOptimizer::Gd => {
                    w = gd_step(&w, &g, inst.l_f)?;
                    gd_guaranteed_decrease(&g, inst.l_f)
                }
                RfOptimizer::Spec(mode) => {
                    let dec = spec_guaranteed_decrease(&g, inst.l_op)?;
                    w = spec_step(&w, &g, inst.l_op, mode)?;
                    dec
                }
            }
        };
        out.push(TraceRecord { step, loss, blocks: vec![block], guaranteed_decrease: guaranteed });
    }
    Ok(out)
}

/// Which layers take spectral steps (1-based layer indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpectralSet {
    /// Every layer except the first and last.
    Internal,
    All,
    None,
    Layers(Vec<usize>),
}

impl SpectralSet {
    fn contains(&self, layer: usize, depth: usize) -> bool {
        match self {
            SpectralSet::Internal => layer > 1 && layer < depth,
            SpectralSet::All => true,
            SpectralSet::None => false,
            SpectralSet::Layers(ls) => ls.contains(&layer),
        }
    }
}

/// Step constants of the layered mixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrainConfig {
    /// `C_F`; `None` means `1/n`.
    pub c_f: Option<f64>,
    pub c_op: f64,
    /// Multiplies every block's step size.
    pub lr_scale: f64,
    pub spectral: SpectralSet,
    pub polar_mode: PolarMode,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self { c_f: None, c_op: 0.0, lr_scale: 1.0, spectral: SpectralSet::Internal, polar_mode: PolarMode::default() }
    }
}

/// Full-batch training of an MLP with the layered mixed step.
///
/// Block `l` sees features `A_{l-1}`; records carry one [`BlockTrace`] per
/// layer. Returns the trace for `W_0, ..., W_steps` and the final weights.
pub fn train_mlp(
    spec: &MlpSpec,
    weights: Vec<Matrix>,
    x: &Matrix,
    y: &Matrix,
    cfg: &MlpTrainConfig,
    steps: usize,
) -> Result<(Vec<TraceRecord>, Vec<Matrix>)> {
    if steps == 0 {
        return Err(Error::InvalidSpec("steps must be at least 1".into()));
    }
    if !(cfg.lr_scale > 0.0) {
        return Err(Error::NonPositiveConstant { name: "lr_scale", value: cfg.lr_scale });
    }
    let depth = spec.depth();
    let c_f = cfg.c_f.unwrap_or(1.0 / x.ncols() as f64) / cfg.lr_scale;
    let c_op = cfg.c_op / cfg.lr_scale;
    let roles: Vec<BlockRole> = (1..=depth)
        .map(|l| match l {
            1 => BlockRole::Input,
            l if l == depth => BlockRole::Output,
            _ => BlockRole::Internal,
        })
        .collect();
    let mut blocks: Vec<BlockState<f64>> = weights
        .into_iter()
        .zip(&roles)
        .enumerate()
        .map(|(l, (w, &role))| BlockState { w, role, spectral: cfg.spectral.contains(l + 1, depth) })
        .collect();
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let ws: Vec<Matrix> = blocks.iter().map(|b| b.w.clone()).collect();
        let cap = mlp_forward_backward(spec, &ws, x, y)?;
        if !cap.loss.is_finite() {
            return Err(Error::NonFinite);
        }
        let traces = cap
            .grads
            .iter()
            .zip(&blocks)
            .enumerate()
            .map(|(l, (g, b))| block_trace(g, stable_rank(&cap.activations[l])?, b.spectral))
            .collect::<Result<Vec<_>>>()?;
        let mut guaranteed = 0.0;
        if step < steps {
            let feats = &cap.activations[..depth];
            let next = mixed_step(&blocks, &cap.grads, feats, c_f, c_op, cfg.polar_mode)?;
            guaranteed = next.predicted_decrease;
            blocks = next.blocks;
        }
        out.push(TraceRecord { step, loss: cap.loss, blocks: traces, guaranteed_decrease: guaranteed });
    }
    Ok((out, blocks.into_iter().map(|b| b.w).collect()))
}

/// Sparse-regression data: `X ~ N(0, 1)` of shape `d x n` and targets `x_1 x_2 x_3`.
pub fn sparse_regression_data(d: usize, n: usize, seed: u64) -> Result<(Matrix, Matrix)> {
    if d < 3 || n == 0 {
        return Err(Error::InvalidSpec("sparse regression needs d >= 3 and n >= 1".into()));
    }
    let x = gaussian_matrix(&mut stream(seed, "sparse/x"), d, n, 1.0);
    let y = Matrix::from_fn(1, n, |_, j| x[(0, j)] * x[(1, j)] * x[(2, j)]);
    Ok((x, y))
}
