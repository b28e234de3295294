//! Stable-rank propagation through network building blocks.
//!
//! Gaussian one-dimensional activation statistics (`m1`, `m2` and the first
//! Hermite coefficient), the atomic transforms (Gaussian linear map,
//! pointwise activation, residual update, RMSNorm, gating, token embedding)
//! and the compound attention, MLP and mixture-of-experts sublayers, each
//! evaluated on fresh Gaussian weights with a spectral summary recorded
//! after every stage.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::{spectral_summary, stable_rank};
use crate::rng::{derive_seed, gaussian_matrix, normal, stream};
use crate::{Matrix, SpectralSummary};

/// Smallest Monte-Carlo sample size accepted by [`gaussian_activation_stats`].
pub const MIN_MC_SAMPLES: usize = 10_000;

/// Sample size used when a statistic has no closed form.
pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;

/// Standard normal density.
pub fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * (1.0 + libm::erf(t * FRAC_1_SQRT_2))
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Scalar activation functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Abs,
    /// `pos * t` for `t > 0`, `neg * t` otherwise.
    LeakyRelu { pos: f64, neg: f64 },
    SquaredRelu,
    Quadratic,
    /// `t * Phi(t)`.
    Gelu,
    /// `t * logistic(t)`.
    Silu,
    Tanh,
    /// `clamp(t, -1, 1)`.
    HardTanh,
    /// `t / (1 + |t|)`.
    Softsign,
    Linear,
}

impl Activation {
    /// Every kind, with `LeakyRelu { pos: 1, neg: 0.1 }` as the leaky representative.
    pub const ALL: [Activation; 11] = [
        Activation::Relu,
        Activation::Abs,
        Activation::LeakyRelu { pos: 1.0, neg: 0.1 },
        Activation::SquaredRelu,
        Activation::Quadratic,
        Activation::Gelu,
        Activation::Silu,
        Activation::Tanh,
        Activation::HardTanh,
        Activation::Softsign,
        Activation::Linear,
    ];

    pub fn apply(self, t: f64) -> f64 {
        match self {
            Activation::Relu => t.max(0.0),
            Activation::Abs => t.abs(),
            Activation::LeakyRelu { pos, neg } => {
                if t > 0.0 {
                    pos * t
                } else {
                    neg * t
                }
            }
            Activation::SquaredRelu => {
                let p = t.max(0.0);
                p * p
            }
            Activation::Quadratic => t * t,
            Activation::Gelu => t * normal_cdf(t),
            Activation::Silu => t * logistic(t),
            Activation::Tanh => t.tanh(),
            Activation::HardTanh => t.clamp(-1.0, 1.0),
            Activation::Softsign => t / (1.0 + t.abs()),
            Activation::Linear => t,
        }
    }

    /// Derivative, with the kinks of ReLU, Abs, LeakyReLU and HardTanh
    /// resolved to the left-hand value (ReLU'(0) = 0).
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Abs => {
                if t > 0.0 {
                    1.0
                } else if t < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { pos, neg } => {
                if t > 0.0 {
                    pos
                } else {
                    neg
                }
            }
            Activation::SquaredRelu => 2.0 * t.max(0.0),
            Activation::Quadratic => 2.0 * t,
            Activation::Gelu => normal_cdf(t) + t * normal_pdf(t),
            Activation::Silu => {
                let s = logistic(t);
                s * (1.0 + t * (1.0 - s))
            }
            Activation::Tanh => 1.0 - t.tanh().powi(2),
            Activation::HardTanh => {
                if t.abs() < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softsign => 1.0 / (1.0 + t.abs()).powi(2),
            Activation::Linear => 1.0,
        }
    }

    /// Entrywise application.
    pub fn apply_matrix(self, m: &Matrix) -> Matrix {
        m.map(|t| self.apply(t))
    }

    /// Entrywise derivative.
    pub fn derivative_matrix(self, m: &Matrix) -> Matrix {
        m.map(|t| self.derivative(t))
    }

    /// `(E sigma(g), E sigma(g)^2)` for `g ~ N(0, 1)`, when known in closed form.
    pub fn closed_form_m1m2(self) -> Option<(f64, f64)> {
        let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
        match self {
            Activation::Relu => Some((inv_sqrt_2pi, 0.5)),
            Activation::Abs => Some(((2.0 / PI).sqrt(), 1.0)),
            Activation::LeakyRelu { pos, neg } => {
                Some(((pos - neg) * inv_sqrt_2pi, 0.5 * (pos * pos + neg * neg)))
            }
            Activation::SquaredRelu => Some((0.5, 1.5)),
            Activation::Quadratic => Some((1.0, 3.0)),
            Activation::Linear => Some((0.0, 1.0)),
            Activation::HardTanh => Some((0.0, 1.0 - 2.0 * normal_pdf(1.0))),
            Activation::Gelu | Activation::Silu | Activation::Tanh | Activation::Softsign => None,
        }
    }

    /// `sigma_1(s) / s` where `sigma_1(s) = E[sigma(s g) g]`, when known in closed form.
    pub fn closed_form_h1(self, s: f64) -> Option<f64> {
        match self {
            Activation::Relu | Activation::Gelu | Activation::Silu => Some(0.5),
            Activation::Abs | Activation::Quadratic => Some(0.0),
            Activation::LeakyRelu { pos, neg } => Some(0.5 * (pos + neg)),
            Activation::SquaredRelu => Some(s * (2.0 / PI).sqrt()),
            Activation::Linear => Some(1.0),
            Activation::HardTanh => Some(2.0 * normal_cdf(1.0 / s) - 1.0),
            Activation::Tanh | Activation::Softsign => None,
        }
    }

    /// Whether `E sigma(g) = 0` for a standard Gaussian `g` (odd activations).
    pub fn is_centered(self) -> bool {
        matches!(
            self,
            Activation::Linear | Activation::Tanh | Activation::HardTanh | Activation::Softsign
        )
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Abs => write!(f, "abs"),
            Activation::LeakyRelu { pos, neg } => write!(f, "leaky_relu({pos},{neg})"),
            Activation::SquaredRelu => write!(f, "squared_relu"),
            Activation::Quadratic => write!(f, "quadratic"),
            Activation::Gelu => write!(f, "gelu"),
            Activation::Silu => write!(f, "silu"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::HardTanh => write!(f, "hardtanh"),
            Activation::Softsign => write!(f, "softsign"),
            Activation::Linear => write!(f, "linear"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    /// Parses the [`fmt::Display`] form; bare `leaky_relu` means slopes `(1, 0.01)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let act = match s.as_str() {
            "relu" => Activation::Relu,
            "abs" => Activation::Abs,
            "leaky_relu" => Activation::LeakyRelu { pos: 1.0, neg: 0.01 },
            "squared_relu" => Activation::SquaredRelu,
            "quadratic" => Activation::Quadratic,
            "gelu" => Activation::Gelu,
            "silu" => Activation::Silu,
            "tanh" => Activation::Tanh,
            "hardtanh" => Activation::HardTanh,
            "softsign" => Activation::Softsign,
            "linear" => Activation::Linear,
            other => {
                let args = other
                    .strip_prefix("leaky_relu(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::InvalidSpec(format!("unknown activation `{other}`")))?;
                let parsed: Vec<f64> = args
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::InvalidSpec(format!("bad leaky_relu slopes `{args}`")))?;
                match parsed.as_slice() {
                    [pos, neg] => Activation::LeakyRelu { pos: *pos, neg: *neg },
                    _ => return Err(Error::InvalidSpec(format!("leaky_relu needs two slopes, got `{args}`"))),
                }
            }
        };
        Ok(act)
    }
}

/// Monte-Carlo estimates at input scale `s` with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationStats {
    /// `E sigma(s g)`.
    pub m1: f64,
    pub m1_se: f64,
    /// `E sigma(s g)^2`.
    pub m2: f64,
    pub m2_se: f64,
    /// `E[sigma(s g) g]`, the first Hermite coefficient `sigma_1(s)`.
    pub h1: f64,
    pub h1_se: f64,
    pub samples: usize,
}

fn mean_and_se(sum: f64, sum_sq: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo estimates of `m1`, `m2` and `sigma_1(s)` from `n_mc` standard normals.
///
/// The Hermite coefficient is estimated as `E[sigma(s g) g]`, which needs no
/// derivative and so covers nonsmooth activations.
pub fn gaussian_activation_stats(act: Activation, s: f64, n_mc: usize, seed: u64) -> Result<ActivationStats> {
    if n_mc < MIN_MC_SAMPLES {
        return Err(Error::InvalidSpec(format!("n_mc must be at least {MIN_MC_SAMPLES}, got {n_mc}")));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::DomainError(s));
    }
    let mut rng = stream(seed, "activation-stats");
    let (mut s1, mut q1, mut s2, mut q2, mut sh, mut qh) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n_mc {
        let g = normal(&mut rng);
        let y = act.apply(s * g);
        let y2 = y * y;
        let h = y * g;
        s1 += y;
        q1 += y2;
        s2 += y2;
        q2 += y2 * y2;
        sh += h;
        qh += h * h;
    }
    let n = n_mc as f64;
    let (m1, m1_se) = mean_and_se(s1, q1, n);
    let (m2, m2_se) = mean_and_se(s2, q2, n);
    let (h1, h1_se) = mean_and_se(sh, qh, n);
    Ok(ActivationStats { m1, m1_se, m2, m2_se, h1, h1_se, samples: n_mc })
}

/// `m2 / m1^2` at unit scale: the closed form when known, otherwise a
/// Monte-Carlo estimate from [`DEFAULT_MC_SAMPLES`] draws.
pub fn msi_ratio(act: Activation) -> Result<f64> {
    if act.is_centered() {
        return Err(Error::CenteredActivation);
    }
    let (m1, m2) = match act.closed_form_m1m2() {
        Some(pair) => pair,
        None => {
            let st = gaussian_activation_stats(act, 1.0, DEFAULT_MC_SAMPLES, 0)?;
            (st.m1, st.m2)
        }
    };
    if m1 == 0.0 {
        return Err(Error::CenteredActivation);
    }
    Ok(m2 / (m1 * m1))
}

/// Rescales every column to squared norm `d` (the row count).
pub fn rms_normalize(x: &Matrix) -> Result<Matrix> {
    let scale = (x.nrows() as f64).sqrt();
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroColumn(j));
        }
        col *= scale / norm;
    }
    Ok(out)
}

/// Smallest and largest squared column norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnEnvelope {
    pub min_sq: f64,
    pub max_sq: f64,
}

impl ColumnEnvelope {
    /// `max_sq / min_sq`.
    pub fn spread(&self) -> f64 {
        self.max_sq / self.min_sq
    }
}

pub fn column_norm_envelope(x: &Matrix) -> ColumnEnvelope {
    let (min_sq, max_sq) = x
        .column_iter()
        .map(|c| c.norm_squared())
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    ColumnEnvelope { min_sq, max_sq }
}

/// Gaussian matrix with entry variance `1 / fan_in`.
fn gaussian_weights(rng: &mut ChaCha8Rng, rows: usize, fan_in: usize) -> Matrix {
    gaussian_matrix(rng, rows, fan_in, 1.0 / (fan_in as f64).sqrt())
}

/// `sigma(V Z) .* (W X)` with fresh `V ~ N(0, 1/d1)` (`k x d1`) and `W ~ N(0, 1/d2)` (`k x d2`).
pub fn gated_block(z: &Matrix, x: &Matrix, act: Activation, k: usize, seed: u64) -> Result<Matrix> {
    if z.ncols() != x.ncols() {
        return Err(shape_mismatch("gated_block", (z.nrows(), x.ncols()), z.shape()));
    }
    let v = gaussian_weights(&mut stream(seed, "gate/v"), k, z.nrows());
    let w = gaussian_weights(&mut stream(seed, "gate/w"), k, x.nrows());
    Ok(act.apply_matrix(&(v * z)).component_mul(&(w * x)))
}

/// `X + W H` with `W ~ N(0, 1/k)` of shape `d x k`.
pub fn residual_update(x: &Matrix, h: &Matrix, seed: u64) -> Result<Matrix> {
    if x.ncols() != h.ncols() {
        return Err(shape_mismatch("residual_update", (h.nrows(), x.ncols()), h.shape()));
    }
    let w = gaussian_weights(&mut stream(seed, "residual/w"), x.nrows(), h.nrows());
    Ok(x + w * h)
}

/// Token embeddings `E H` for a sequence whose token `v` occurs `counts[v]`
/// times, with `E ~ N(0, 1)` of shape `dim x vocab`.
pub fn token_embed(counts: &[u64], dim: usize, seed: u64) -> Result<Matrix> {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let e = gaussian_matrix(&mut stream(seed, "embed/e"), dim, counts.len(), 1.0);
    let mut x = Matrix::zeros(dim, n as usize);
    let mut col = 0;
    for (v, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            x.set_column(col, &e.column(v));
            col += 1;
        }
    }
    Ok(x)
}

/// Columnwise softmax; with `causal`, entry `(s, t)` is masked when `s > t`.
pub fn column_softmax(scores: &Matrix, causal: bool) -> Matrix {
    let mut p = scores.clone();
    for (t, mut col) in p.column_iter_mut().enumerate() {
        let live = if causal { (t + 1).min(col.len()) } else { col.len() };
        let max = col.rows(0, live).max();
        let mut total = 0.0;
        for s in 0..col.len() {
            col[s] = if s < live { (col[s] - max).exp() } else { 0.0 };
            total += col[s];
        }
        col /= total;
    }
    p
}

/// Intermediates of the multi-head value-aggregation sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    /// `RMSNorm(X)`.
    pub a_rms: Matrix,
    /// Column-stochastic mixing matrices, one per head (`n x n`).
    pub mixing: Vec<Matrix>,
    /// `A_rms P_h`, one per head.
    pub mixed: Vec<Matrix>,
    /// Concatenated head outputs `W_V^h Y_h`.
    pub h: Matrix,
    /// `X + W_O H`.
    pub x_att: Matrix,
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(shape_mismatch("attention heads must divide the model width", (d, heads), (d % heads.max(1), heads)));
    }
    Ok(d / heads)
}

/// Value-aggregation sublayer with mixing matrices drawn as softmax of
/// standard Gaussian scores; `W_V^h` (`d/heads x d`) and `W_O` (`d x d`) are `N(0, 1/d)`.
pub fn attention_sublayer(x: &Matrix, heads: usize, causal: bool, seed: u64) -> Result<AttentionCapture> {
    let (d, n) = x.shape();
    let d_head = check_heads(d, heads)?;
    let a_rms = rms_normalize(x)?;
    let mut score_rng = stream(seed, "attn/scores");
    let mut value_rng = stream(seed, "attn/values");
    let mut mixing = Vec::with_capacity(heads);
    let mut mixed = Vec::with_capacity(heads);
    let mut h = Matrix::zeros(d, n);
    for head in 0..heads {
        let p = column_softmax(&gaussian_matrix(&mut score_rng, n, n, 1.0), causal);
        let y = &a_rms * &p;
        let w_v = gaussian_weights(&mut value_rng, d_head, d);
        h.rows_mut(head * d_head, d_head).copy_from(&(w_v * &y));
        mixing.push(p);
        mixed.push(y);
    }
    let w_o = gaussian_weights(&mut stream(seed, "attn/out"), d, d);
    let x_att = x + w_o * &h;
    Ok(AttentionCapture { a_rms, mixing, mixed, h, x_att })
}

/// `X + W2 sigma(W1 RMSNorm(X))` with `W1 ~ N(0, 1/d)` and `W2 ~ N(0, 1/k)`.
pub fn mlp_sublayer(x: &Matrix, act: Activation, k_hidden: usize, seed: u64) -> Result<Matrix> {
    let a = rms_normalize(x)?;
    let w1 = gaussian_weights(&mut stream(seed, "mlp/w1"), k_hidden, x.nrows());
    let w2 = gaussian_weights(&mut stream(seed, "mlp/w2"), x.nrows(), k_hidden);
    Ok(x + w2 * act.apply_matrix(&(w1 * a)))
}

/// How tokens are assigned to experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Each token goes to one uniformly random expert.
    OneHot,
    /// Softmax of standard Gaussian logits per token.
    Soft,
}

/// Routing weights, `experts x n`, each column on the simplex.
pub fn routing_weights(experts: usize, n: usize, routing: Routing, seed: u64) -> Matrix {
    let mut rng = stream(seed, "moe/route");
    match routing {
        Routing::OneHot => {
            let mut r = Matrix::zeros(experts, n);
            for t in 0..n {
                r[(rng.random_range(0..experts), t)] = 1.0;
            }
            r
        }
        Routing::Soft => column_softmax(&gaussian_matrix(&mut rng, experts, n, 1.0), false),
    }
}

/// `X + sum_e W2^e sigma(W1^e RMSNorm(X)) D^e` with `W1^e ~ N(0, 1/d)`,
/// `W2^e ~ N(0, 1/(k experts))` and `D^e` the diagonal of routing row `e`.
pub fn moe_sublayer(
    x: &Matrix,
    act: Activation,
    k_hidden: usize,
    experts: usize,
    routing: Routing,
    seed: u64,
) -> Result<Matrix> {
    if experts == 0 {
        return Err(Error::InvalidSpec("MoE sublayer needs at least one expert".into()));
    }
    let (d, n) = x.shape();
    let a = rms_normalize(x)?;
    let r = routing_weights(experts, n, routing, seed);
    let mut rng = stream(seed, "moe/experts");
    let w2_std = 1.0 / ((k_hidden * experts) as f64).sqrt();
    let mut out = x.clone();
    for e in 0..experts {
        let w1 = gaussian_weights(&mut rng, k_hidden, d);
        let w2 = gaussian_matrix(&mut rng, d, k_hidden, w2_std);
        let mut b = act.apply_matrix(&(w1 * &a));
        for (t, mut col) in b.column_iter_mut().enumerate() {
            col *= r[(e, t)];
        }
        out += w2 * b;
    }
    Ok(out)
}

/// One transform in a propagation chain.
#[derive(Debug, Clone, PartialEq)]
pub enum StageKind {
    /// `W X` with `W ~ N(0, 1/d)` of shape `k_out x d`.
    Linear { k_out: usize },
    /// `sigma(W X)` with `W ~ N(0, 1/d)` of shape `k_out x d`.
    Pointwise { act: Activation, k_out: usize },
    /// `X + W sigma(V X)` with `V ~ N(0, 1/d)` and `W ~ N(0, 1/k_hidden)`.
    Residual { act: Activation, k_hidden: usize },
    RmsNorm,
    /// `sigma(V X) .* (W X)` with `k_out` rows.
    Gating { act: Activation, k_out: usize },
    /// Replaces the input by token embeddings; `counts` must sum to the column count.
    TokenEmbed { dim: usize, counts: Vec<u64> },
    AttentionSublayer { heads: usize, causal: bool },
    MlpSublayer { act: Activation, k_hidden: usize },
    MoeSublayer { act: Activation, k_hidden: usize, experts: usize, routing: Routing },
}

impl StageKind {
    pub fn name(&self) -> String {
        match self {
            StageKind::Linear { k_out } => format!("linear[{k_out}]"),
            StageKind::Pointwise { act, k_out } => format!("pointwise[{act},{k_out}]"),
            StageKind::Residual { act, k_hidden } => format!("residual[{act},{k_hidden}]"),
            StageKind::RmsNorm => "rmsnorm".into(),
            StageKind::Gating { act, k_out } => format!("gating[{act},{k_out}]"),
            StageKind::TokenEmbed { dim, counts } => format!("token_embed[{dim},{}]", counts.len()),
            StageKind::AttentionSublayer { heads, causal } => {
                format!("attention[{heads}{}]", if *causal { ",causal" } else { "" })
            }
            StageKind::MlpSublayer { act, k_hidden } => format!("mlp[{act},{k_hidden}]"),
            StageKind::MoeSublayer { act, k_hidden, experts, routing } => {
                let r = if *routing == Routing::OneHot { "onehot" } else { "soft" };
                format!("moe[{act},{k_hidden},{experts},{r}]")
            }
        }
    }
}

/// A stage and the tag that, with the stage index, selects its weight stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStage {
    pub kind: StageKind,
    pub seed_tag: String,
}

impl ChainStage {
    pub fn new(kind: StageKind) -> Self {
        let seed_tag = kind.name();
        Self { kind, seed_tag }
    }
}

/// Measurements after one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub name: String,
    /// `(rows, cols)` of the stage output.
    pub shape: (usize, usize),
    pub summary: SpectralSummary,
    pub envelope: ColumnEnvelope,
}

fn positive_dim(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidSpec(format!("{name} must be positive")));
    }
    Ok(())
}

/// Applies one stage with weights drawn from `seed`.
pub fn apply_stage(kind: &StageKind, x: &Matrix, seed: u64) -> Result<Matrix> {
    let d = x.nrows();
    match kind {
        StageKind::Linear { k_out } => {
            positive_dim("k_out", *k_out)?;
            Ok(gaussian_weights(&mut stream(seed, "linear/w"), *k_out, d) * x)
        }
        StageKind::Pointwise { act, k_out } => {
            positive_dim("k_out", *k_out)?;
            Ok(act.apply_matrix(&(gaussian_weights(&mut stream(seed, "pointwise/w"), *k_out, d) * x)))
        }
        StageKind::Residual { act, k_hidden } => {
            positive_dim("k_hidden", *k_hidden)?;
            let v = gaussian_weights(&mut stream(seed, "residual/v"), *k_hidden, d);
            residual_update(x, &act.apply_matrix(&(v * x)), seed)
        }
        StageKind::RmsNorm => rms_normalize(x),
        StageKind::Gating { act, k_out } => {
            positive_dim("k_out", *k_out)?;
            gated_block(x, x, *act, *k_out, seed)
        }
        StageKind::TokenEmbed { dim, counts } => {
            positive_dim("dim", *dim)?;
            let n: u64 = counts.iter().sum();
            if n as usize != x.ncols() {
                return Err(shape_mismatch("token_embed counts", (*dim, x.ncols()), (*dim, n as usize)));
            }
            token_embed(counts, *dim, seed)
        }
        StageKind::AttentionSublayer { heads, causal } => Ok(attention_sublayer(x, *heads, *causal, seed)?.x_att),
        StageKind::MlpSublayer { act, k_hidden } => {
            positive_dim("k_hidden", *k_hidden)?;
            mlp_sublayer(x, *act, *k_hidden, seed)
        }
        StageKind::MoeSublayer { act, k_hidden, experts, routing } => {
            positive_dim("k_hidden", *k_hidden)?;
            moe_sublayer(x, *act, *k_hidden, *experts, *routing, seed)
        }
    }
}

/// Runs `stages` in order on `x0`, recording a summary after each stage.
///
/// Stage `i` draws its weights from `derive_seed(seed, i)` and its tag, so
/// the chain is a pure function of its inputs.
pub fn propagate_chain(stages: &[ChainStage], x0: &Matrix, seed: u64) -> Result<Vec<StageRecord>> {
    let mut x = x0.clone();
    let mut records = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        let stage_seed = derive_seed(seed, i as u64) ^ crate::rng::fnv1a(&stage.seed_tag);
        x = apply_stage(&stage.kind, &x, stage_seed)?;
        records.push(StageRecord {
            name: stage.kind.name(),
            shape: x.shape(),
            summary: spectral_summary(&x)?,
            envelope: column_norm_envelope(&x),
        });
    }
    Ok(records)
}

/// Stable ranks of `X_0, ..., X_depth` where `X_0` is `widths[0] x n`
/// standard Gaussian data and `X_l = (W_l X_{l-1})^2` entrywise with
/// `W_l ~ N(0, 1/widths[l-1])` of shape `widths[l] x widths[l-1]`.
pub fn quadratic_depth_experiment(depth: usize, widths: &[usize], n: usize, seed: u64) -> Result<Vec<f64>> {
    if widths.len() != depth + 1 {
        return Err(shape_mismatch("quadratic_depth_experiment widths", (depth + 1, 1), (widths.len(), 1)));
    }
    if n == 0 || widths.contains(&0) {
        return Err(Error::InvalidSpec("widths and n must be positive".into()));
    }
    let mut x = gaussian_matrix(&mut stream(seed, "quad/x0"), widths[0], n, 1.0);
    let mut out = vec![stable_rank(&x)?];
    for l in 1..=depth {
        let w = gaussian_weights(&mut stream(derive_seed(seed, l as u64), "quad/w"), widths[l], widths[l - 1]);
        x = Activation::Quadratic.apply_matrix(&(w * &x));
        out.push(stable_rank(&x)?);
    }
    Ok(out)
}

/// Upper bound of the gating stable-rank estimate,
/// `(U/L)^2 kappa^-2 (1+eps)^2 / (1-eps)^3`, as a multiple of `st(X)`.
pub fn gating_bound_factor(envelope: ColumnEnvelope, kappa: f64, eps: f64) -> f64 {
    envelope.spread().powi(2) / (kappa * kappa) * (1.0 + eps).powi(2) / (1.0 - eps).powi(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const N_MC: usize = 400_000;

    fn within_se(est: f64, se: f64, truth: f64, k: f64) -> bool {
        (est - truth).abs() <= k * se.max(1e-15)
    }

    #[test]
    fn relu_unit_scale_stats() {
        let st = gaussian_activation_stats(Activation::Relu, 1.0, N_MC, 1).unwrap();
        assert!(within_se(st.m1, st.m1_se, 1.0 / (2.0 * PI).sqrt(), 3.0));
        assert!(within_se(st.m2, st.m2_se, 0.5, 3.0));
        let ratio = st.m2 / (st.m1 * st.m1);
        assert!((ratio / PI - 1.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn linear_and_silu_hermite_coefficients() {
        let lin = gaussian_activation_stats(Activation::Linear, 1.0, N_MC, 2).unwrap();
        assert!(within_se(lin.h1, lin.h1_se, 1.0, 3.0));
        let silu = gaussian_activation_stats(Activation::Silu, 1.0, N_MC, 3).unwrap();
        assert!(within_se(silu.h1, silu.h1_se, 0.5, 3.0));
    }

    #[test]
    fn closed_forms_match_monte_carlo() {
        for (i, act) in Activation::ALL.iter().enumerate() {
            if let Some((m1, m2)) = act.closed_form_m1m2() {
                let st = gaussian_activation_stats(*act, 1.0, N_MC, 10 + i as u64).unwrap();
                assert!(within_se(st.m1, st.m1_se, m1, 3.0), "{act} m1 {} vs {m1}", st.m1);
                assert!(within_se(st.m2, st.m2_se, m2, 3.0), "{act} m2 {} vs {m2}", st.m2);
            }
            for (j, s) in [0.5, 1.0, 2.0].into_iter().enumerate() {
                if let Some(h) = act.closed_form_h1(s) {
                    let st = gaussian_activation_stats(*act, s, N_MC, 100 + (3 * i + j) as u64).unwrap();
                    assert!(within_se(st.h1, st.h1_se, h * s, 3.0), "{act} h1 at {s}: {} vs {}", st.h1, h * s);
                }
            }
        }
    }

    #[test]
    fn centered_activations_have_zero_mean() {
        for (i, act) in Activation::ALL.iter().enumerate() {
            let st = gaussian_activation_stats(*act, 1.0, N_MC, 200 + i as u64).unwrap();
            if act.is_centered() {
                assert!(within_se(st.m1, st.m1_se, 0.0, 3.0), "{act}");
            } else {
                assert!(st.m1.abs() > 10.0 * st.m1_se, "{act}");
            }
        }
    }

    #[test]
    fn gelu_stein_identity() {
        // E[sigma(s g) g] = s E[sigma'(s g)] for smooth sigma.
        let s = 1.3;
        let st = gaussian_activation_stats(Activation::Gelu, s, N_MC, 4).unwrap();
        let mut rng = stream(4, "stein");
        let n = 200_000;
        let deriv: f64 = (0..n).map(|_| Activation::Gelu.derivative(s * normal(&mut rng))).sum::<f64>() / n as f64;
        assert!((st.h1 - s * deriv).abs() < 4.0 * st.h1_se + 0.005);
        assert!((deriv - 0.5).abs() < 0.005);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(gaussian_activation_stats(Activation::Relu, 1.0, 100, 0).is_err());
    }

    #[test]
    fn msi_ratio_table() {
        assert!((msi_ratio(Activation::Abs).unwrap() - PI / 2.0).abs() < 1e-12);
        assert!((msi_ratio(Activation::SquaredRelu).unwrap() - 6.0).abs() < 1e-12);
        assert!((msi_ratio(Activation::Quadratic).unwrap() - 3.0).abs() < 1e-12);
        assert!((msi_ratio(Activation::Relu).unwrap() - PI).abs() < 1e-12);
        assert_eq!(msi_ratio(Activation::Linear), Err(Error::CenteredActivation));
        assert_eq!(msi_ratio(Activation::Tanh), Err(Error::CenteredActivation));
        let silu = msi_ratio(Activation::Silu).unwrap();
        assert!(silu > 1.0 && silu.is_finite());
    }

    #[test]
    fn activation_parse_roundtrip() {
        for act in Activation::ALL {
            assert_eq!(act.to_string().parse::<Activation>().unwrap(), act);
        }
        assert_eq!("leaky_relu".parse::<Activation>().unwrap(), Activation::LeakyRelu { pos: 1.0, neg: 0.01 });
        assert!("swish2".parse::<Activation>().is_err());
    }

    #[test]
    fn derivatives_match_central_differences() {
        for act in Activation::ALL {
            for t in [-1.7, -0.4, 0.3, 0.9, 2.2] {
                let h = 1e-6;
                let fd = (act.apply(t + h) - act.apply(t - h)) / (2.0 * h);
                assert!((fd - act.derivative(t)).abs() < 1e-6, "{act} at {t}");
            }
        }
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
    }

    #[test]
    fn rms_normalize_examples() {
        let x = gaussian_matrix(&mut stream(1, "rms"), 5, 4, 1.0);
        let a = rms_normalize(&x).unwrap();
        for c in a.column_iter() {
            assert!((c.norm_squared() - 5.0).abs() < 1e-12);
        }
        assert!((a.norm_squared() - 20.0).abs() < 1e-11);
        let again = rms_normalize(&a).unwrap();
        assert!((again - &a).amax() < 1e-14);
        let scalar = Matrix::from_row_slice(1, 3, &[2.0, -2.0, 2.0]);
        assert_eq!(rms_normalize(&scalar).unwrap(), Matrix::from_row_slice(1, 3, &[1.0, -1.0, 1.0]));
        let mut z = x.clone();
        z.column_mut(2).fill(0.0);
        assert_eq!(rms_normalize(&z), Err(Error::ZeroColumn(2)));
    }

    #[test]
    fn rms_normalize_stable_rank_bound() {
        let mut x = gaussian_matrix(&mut stream(2, "rms-bound"), 40, 60, 1.0);
        let scales = gaussian_matrix(&mut stream(2, "rms-scales"), 1, 60, 1.0);
        for (j, mut c) in x.column_iter_mut().enumerate() {
            c *= 1.0 + scales[(0, j)].abs();
        }
        let env = column_norm_envelope(&x);
        let bound = env.spread() * stable_rank(&x).unwrap();
        assert!(stable_rank(&rms_normalize(&x).unwrap()).unwrap() <= bound);
    }

    #[test]
    fn gated_block_linear_is_product_of_gaussians() {
        let x = Matrix::from_row_slice(1, 4, &[1.0, 1.0, 1.0, 1.0]);
        let q = gated_block(&x, &x, Activation::Linear, 3, 9).unwrap();
        let v = gaussian_weights(&mut stream(9, "gate/v"), 3, 1);
        let w = gaussian_weights(&mut stream(9, "gate/w"), 3, 1);
        for i in 0..3 {
            for j in 0..4 {
                assert!((q[(i, j)] - v[(i, 0)] * w[(i, 0)]).abs() < 1e-15);
            }
        }
        assert!(gated_block(&x, &Matrix::zeros(1, 2), Activation::Relu, 2, 0).is_err());
    }

    fn unit_columns(d: usize, n: usize, seed: u64) -> Matrix {
        let x = gaussian_matrix(&mut stream(seed, "unit"), d, n, 1.0);
        rms_normalize(&x).unwrap() / (d as f64).sqrt()
    }

    #[test]
    fn silu_gating_stable_rank_grows_with_width() {
        // Doubling k stacks k fresh rows, so the growth factor is at most about 2.
        let x = unit_columns(256, 1024, 5);
        let small = stable_rank(&gated_block(&x, &x, Activation::Silu, 256, 6).unwrap()).unwrap();
        let large = stable_rank(&gated_block(&x, &x, Activation::Silu, 512, 6).unwrap()).unwrap();
        let ratio = large / small;
        assert!((1.3..=2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn relu_gating_within_bound() {
        let x = unit_columns(128, 256, 7);
        let q = gated_block(&x, &x, Activation::Relu, 128, 8).unwrap();
        let c = stable_rank(&q).unwrap() / stable_rank(&x).unwrap();
        let kappa = 1.0 / (2.0 * PI).sqrt();
        assert!(c <= 20.0, "measured factor {c}");
        assert!(c <= gating_bound_factor(column_norm_envelope(&x), kappa, 0.1));
    }

    #[test]
    fn token_embedding_stable_rank() {
        let mut counts = vec![64u64];
        counts.extend(std::iter::repeat(32).take(6));
        let x = token_embed(&counts, 512, 3).unwrap();
        let st = stable_rank(&x).unwrap();
        assert!(st <= 1.1 * 4.0, "st {st}");
        assert_eq!(token_embed(&[0, 0], 4, 0), Err(Error::EmptySequence));
    }

    #[test]
    fn residual_stage_bound() {
        let (d, k, n) = (256, 256, 128);
        let x = gaussian_matrix(&mut stream(1, "res-x"), d, n, 1.0);
        let h = gaussian_matrix(&mut stream(1, "res-h"), k, n, 1.0);
        let out = residual_update(&x, &h, 2).unwrap();
        let ratio = h.norm_squared() / x.norm_squared();
        let bound = 1.2 * (1.0 + ratio) * stable_rank(&x).unwrap();
        assert!(stable_rank(&out).unwrap() <= bound);
    }

    #[test]
    fn softmax_columns_are_stochastic() {
        let s = gaussian_matrix(&mut stream(1, "sm"), 6, 5, 3.0);
        for causal in [false, true] {
            let p = column_softmax(&s, causal);
            for (t, c) in p.column_iter().enumerate() {
                assert!((c.sum() - 1.0).abs() < 1e-12);
                assert!(c.iter().all(|&v| v >= 0.0));
                if causal {
                    assert!(c.iter().skip(t + 1).all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn attention_mixed_columns_bounded_by_width() {
        let x = gaussian_matrix(&mut stream(2, "att-x"), 16, 24, 1.5);
        let cap = attention_sublayer(&x, 4, true, 3).unwrap();
        for y in &cap.mixed {
            for c in y.column_iter() {
                assert!(c.norm_squared() <= 16.0 * (1.0 + 1e-12));
            }
        }
        assert_eq!(cap.h.shape(), (16, 24));
        assert!(attention_sublayer(&x, 5, false, 0).is_err());
    }

    #[test]
    fn routing_columns_on_simplex() {
        for routing in [Routing::OneHot, Routing::Soft] {
            let r = routing_weights(4, 30, routing, 5);
            for c in r.column_iter() {
                assert!((c.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_chain_post_activations_low_stable_rank() {
        let x0 = gaussian_matrix(&mut stream(11, "chain-x"), 256, 512, 1.0);
        let stages: Vec<_> = (0..3)
            .map(|_| ChainStage::new(StageKind::Pointwise { act: Activation::Relu, k_out: 1024 }))
            .collect();
        let recs = propagate_chain(&stages, &x0, 12).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert!(r.summary.stable_rank <= 2.0 * PI, "{} st {}", r.name, r.summary.stable_rank);
        }
    }

    #[test]
    fn chain_is_deterministic_and_checks_shapes() {
        let x0 = gaussian_matrix(&mut stream(1, "det"), 16, 32, 1.0);
        let stages = vec![
            ChainStage::new(StageKind::TokenEmbed { dim: 16, counts: vec![8, 8, 16] }),
            ChainStage::new(StageKind::AttentionSublayer { heads: 2, causal: false }),
            ChainStage::new(StageKind::MlpSublayer { act: Activation::Gelu, k_hidden: 32 }),
            ChainStage::new(StageKind::MoeSublayer {
                act: Activation::Relu,
                k_hidden: 16,
                experts: 3,
                routing: Routing::OneHot,
            }),
            ChainStage::new(StageKind::Residual { act: Activation::Tanh, k_hidden: 8 }),
            ChainStage::new(StageKind::Gating { act: Activation::Silu, k_out: 24 }),
            ChainStage::new(StageKind::RmsNorm),
            ChainStage::new(StageKind::Linear { k_out: 10 }),
        ];
        let a = propagate_chain(&stages, &x0, 3).unwrap();
        let b = propagate_chain(&stages, &x0, 3).unwrap();
        assert_eq!(a, b);
        let rms = &a[6];
        assert!((rms.envelope.min_sq - 24.0).abs() < 1e-10 && (rms.envelope.max_sq - 24.0).abs() < 1e-10);
        let bad = vec![ChainStage::new(StageKind::TokenEmbed { dim: 4, counts: vec![1, 2] })];
        assert!(matches!(propagate_chain(&bad, &x0, 0), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn quadratic_depth_examples() {
        let st = quadratic_depth_experiment(1, &[64, 2048], 256, 4).unwrap();
        assert_eq!(st.len(), 2);
        let edge = 64.0 * 256.0 / (8.0f64 + 16.0).powi(2);
        assert!((st[0] / edge - 1.0).abs() < 0.1, "raw Gaussian st {}", st[0]);
        assert!(st[1] <= 9.0, "depth-1 st {}", st[1]);
        assert_eq!(st, quadratic_depth_experiment(1, &[64, 2048], 256, 4).unwrap());
        assert!(quadratic_depth_experiment(2, &[4, 4], 8, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rms_output_columns_exact(d in 1usize..12, n in 1usize..12, seed in any::<u64>()) {
            let x = gaussian_matrix(&mut stream(seed, "rms-prop"), d, n, 3.0);
            let a = rms_normalize(&x).unwrap();
            for c in a.column_iter() {
                prop_assert!((c.norm_squared() - d as f64).abs() <= 1e-12 * d as f64);
            }
        }

        #[test]
        fn activation_growth_bounded_where_lipschitz(t in -10.0f64..10.0) {
            for act in [Activation::Relu, Activation::Tanh, Activation::HardTanh, Activation::Softsign,
                        Activation::Silu, Activation::Gelu, Activation::Linear] {
                prop_assert!(act.apply(t).abs() <= t.abs() + 1e-15);
            }
        }
    }
}
