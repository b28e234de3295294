//! Experiment configuration, deterministic runs and trace emission.
//!
//! A run is a pure function of its [`ExperimentConfig`]: the config is built
//! from per-experiment defaults, a flat JSON file and `key=value` overrides,
//! and every random draw derives from the config seed. Results are tables
//! written as CSV or JSON next to a `<out>.meta.json` sidecar.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error as ThisError;

use crate::error::Error;
use crate::linalg::{nuclear_rank, polar_exact, polar_newton_schulz, spectral_summary, stable_rank};
use crate::models::{
    gen_gated_with, gen_realizable_with, gen_spiked_gram, gen_teacher_student_with, longest_run_at_least,
    nuclear_rank_trace, rf_loss, rf_loss_grad, RFInstance, RfConfig, SpikedSpec, StepRule, WeightScale,
};
use crate::nets::{
    attention_block_forward, sparse_regression_data, train_mlp, train_rf, AttentionParams, MlpSpec, MlpTrainConfig,
    RfOptimizer, SpectralSet, TraceRecord,
};
use crate::optim::{make_partition, partition_stable_rank, shardwise_spec_step, spec_step, PolarMode, ShardScheme};
use crate::propagation::{propagate_chain, token_embed, Activation, ChainStage, Routing, StageKind};
use crate::rng::{derive_seed, gaussian_matrix, stream};
use crate::Matrix;

/// Failures of a harness run.
#[derive(Debug, ThisError)]
pub enum HarnessError {
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no records to emit")]
    EmptyRecords,
    #[error(transparent)]
    Numeric(#[from] Error),
}

impl HarnessError {
    fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::Config { key: key.into(), message: message.into() }
    }

    /// Process exit status: 2 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            _ => 1,
        }
    }
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

/// Experiment kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// GD versus SpecGD on a random-feature quadratic.
    Rf1,
    /// Nuclear rank of the GD gradient along the closed-form recursion.
    Rf2,
    /// GD versus SpecGD on gated features, swept over batch size.
    RfGated,
    /// Layered mixed-step training of an MLP on sparse regression.
    MlpSparse,
    /// Stable rank after each stage of a propagation chain.
    Propagation,
    /// Stable ranks of the intermediates of one attention+MLP block.
    TransformerBlock,
    /// Whole-matrix versus shardwise spectral steps.
    Shardwise,
    /// Newton-Schulz against the exact polar factor.
    PolarBench,
    /// Communication and flop model of distributed orthogonalization.
    CostTable,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Rf1,
        Experiment::Rf2,
        Experiment::RfGated,
        Experiment::MlpSparse,
        Experiment::Propagation,
        Experiment::TransformerBlock,
        Experiment::Shardwise,
        Experiment::PolarBench,
        Experiment::CostTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Rf1 => "rf1",
            Experiment::Rf2 => "rf2",
            Experiment::RfGated => "rf_gated",
            Experiment::MlpSparse => "mlp_sparse",
            Experiment::Propagation => "propagation",
            Experiment::TransformerBlock => "transformer_block",
            Experiment::Shardwise => "shardwise",
            Experiment::PolarBench => "polar_bench",
            Experiment::CostTable => "cost_table",
        }
    }

    /// CSV columns of a single-trial run; `--trials N > 1` prepends `trial,seed`.
    pub fn schema(self) -> &'static str {
        match self {
            Experiment::Rf1 => "step,loss_gd,loss_spec,nr_gd,nr_spec,st_A",
            Experiment::Rf2 => "step,loss,nr",
            Experiment::RfGated => "n,step,loss_gd,loss_spec,nr_gd,nr_spec,st_A",
            Experiment::MlpSparse => {
                "step,loss,guaranteed_decrease, then per layer l: nr_l,st_l,ratio_l,favored_l,spectral_l,grad_norm_l"
            }
            Experiment::Propagation => "stage,name,rows,cols,stable_rank,nuclear_rank,op_norm,frob,min_col_sq,max_col_sq",
            Experiment::TransformerBlock => "name,rows,cols,stable_rank,nuclear_rank,op_norm,frob",
            Experiment::Shardwise => {
                "step,loss_spec,loss_shard,nr_spec,nr_partition,kappa_st_A,guaranteed_shard,realized_shard"
            }
            Experiment::PolarBench => "index,rows,cols,cond,ns_iters,frob_error",
            Experiment::CostTable => {
                "strategy,p,q,shards,collectives,entries_moved,bytes_moved,flops_per_device,flops_reduction"
            }
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = HarnessError;

    fn from_str(s: &str) -> HarnessResult<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| HarnessError::config("experiment", format!("unknown experiment `{s}`")))
    }
}

/// CSV schemas of all experiments, one per line.
pub fn schema_help() -> String {
    Experiment::ALL.iter().map(|e| format!("  {:<18} {}\n", e.name(), e.schema())).collect()
}

/// Target model of a random-feature instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKey {
    Realizable,
    TeacherStudent,
}

/// Entry variance convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKey {
    InvDim,
    Unit,
}

impl From<ScaleKey> for WeightScale {
    fn from(s: ScaleKey) -> Self {
        match s {
            ScaleKey::InvDim => WeightScale::InvDim,
            ScaleKey::Unit => WeightScale::Unit,
        }
    }
}

/// Step-size rule in terms of `||B||_op`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaRuleKey {
    /// `1 / (c + ||B||_op)`.
    MaxPlusC,
    /// `1 / (c ||B||_op)`.
    Fraction,
}

/// Where the Gram matrix of `rf2` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramSource {
    Features,
    Spiked,
}

/// Polar-factor evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarKey {
    Exact,
    NewtonSchulz,
    PureNewtonSchulz,
}

/// Shard layout of the `shardwise` experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKey {
    Row,
    Col,
    Grid,
    Singletons,
    Whole,
}

/// Output file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

/// Full configuration of one experiment run.
///
/// Keys that an experiment does not read are kept so the sidecar records the
/// complete configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    /// Independent repetitions with derived seeds.
    pub trials: usize,
    pub steps: usize,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub variant: VariantKey,
    pub feature_scale: ScaleKey,
    pub truth_scale: ScaleKey,
    pub eta_rule: EtaRuleKey,
    pub eta_c: f64,
    pub gram: GramSource,
    pub spike_rank: usize,
    pub exp_lo: f64,
    pub exp_hi: f64,
    pub bulk_lo: f64,
    pub bulk_hi: f64,
    /// Nuclear-rank level of the window reported by `rf2`.
    pub window_threshold: f64,
    /// Curvature correction of the refined criterion.
    pub alpha: f64,
    pub polar_mode: PolarKey,
    pub ns_iters: usize,
    pub ns_tol: f64,
    pub activation: String,
    /// Hidden widths of the MLP.
    pub widths: Vec<usize>,
    /// `internal`, `all`, `none`, or a comma-separated list of 1-based layers.
    pub spectral_layers: String,
    /// `C_F`; `null` means `1/n`.
    pub c_f: Option<f64>,
    pub c_op: f64,
    pub lr_scale: f64,
    pub batch_sizes: Vec<usize>,
    /// Stage descriptors, e.g. `pointwise:relu:512`, `rmsnorm`, `moe:gelu:256:4:soft`.
    pub chain: Vec<String>,
    pub heads: usize,
    pub causal: bool,
    pub vocab: usize,
    /// Frequency of the most common token.
    pub p_max: f64,
    pub scheme: SchemeKey,
    pub shards: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub p: usize,
    pub q: usize,
    pub s: usize,
    pub bytes_per_entry: f64,
    pub samples: usize,
    pub max_rows: usize,
    pub max_cols: usize,
    pub max_cond: f64,
    pub format: Format,
}

impl ExperimentConfig {
    /// Defaults of `experiment`.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            seed: 0,
            trials: 1,
            steps: 300,
            d: 50,
            k: 100,
            m: 100,
            n: 400,
            variant: VariantKey::Realizable,
            feature_scale: ScaleKey::InvDim,
            truth_scale: ScaleKey::InvDim,
            eta_rule: EtaRuleKey::MaxPlusC,
            eta_c: 1.0,
            gram: GramSource::Features,
            spike_rank: 2,
            exp_lo: 1.0,
            exp_hi: 1.0,
            bulk_lo: 1.0,
            bulk_hi: 2.0,
            window_threshold: 40.0,
            alpha: 0.0,
            polar_mode: PolarKey::NewtonSchulz,
            ns_iters: 100,
            ns_tol: 1e-10,
            activation: "relu".into(),
            widths: vec![128, 128],
            spectral_layers: "internal".into(),
            c_f: None,
            c_op: 0.0,
            lr_scale: 1.0,
            batch_sizes: vec![100, 200, 400, 800],
            chain: vec![
                "pointwise:relu:512".into(),
                "rmsnorm".into(),
                "gating:silu:512".into(),
                "residual:gelu:512".into(),
            ],
            heads: 1,
            causal: false,
            vocab: 16,
            p_max: 0.125,
            scheme: SchemeKey::Row,
            shards: 4,
            grid_rows: 2,
            grid_cols: 2,
            p: 4096,
            q: 16384,
            s: 8,
            bytes_per_entry: 2.0,
            samples: 100,
            max_rows: 64,
            max_cols: 96,
            max_cond: 1e4,
            format: Format::Csv,
        };
        match experiment {
            Experiment::Rf1 | Experiment::Shardwise => {
                Self { steps: if experiment == Experiment::Shardwise { 50 } else { 300 }, ..base }
            }
            Experiment::Rf2 => Self { d: 100, k: 100, m: 100, n: 200, steps: 10, ..base },
            Experiment::RfGated => Self {
                k: 200,
                activation: "silu".into(),
                truth_scale: ScaleKey::Unit,
                ..base
            },
            Experiment::MlpSparse => Self {
                d: 32,
                n: 256,
                steps: 100,
                lr_scale: 0.1,
                activation: "squared_relu".into(),
                ..base
            },
            Experiment::Propagation => Self { d: 256, n: 512, ..base },
            Experiment::TransformerBlock => Self { d: 128, k: 512, n: 256, ..base },
            Experiment::PolarBench => base,
            Experiment::CostTable => Self { ns_iters: 5, ..base },
        }
    }

    /// Builds a config from defaults, an optional flat JSON file and
    /// `key=value` overrides (values parse as JSON, else as strings), in
    /// increasing precedence; `seed` wins over both.
    pub fn load(
        experiment: Experiment,
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> HarnessResult<Self> {
        let mut user: Vec<(String, Value)> = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| HarnessError::config(path.display().to_string(), format!("not valid JSON: {e}")))?;
            let Value::Object(map) = value else {
                return Err(HarnessError::config(path.display().to_string(), "config must be a JSON object"));
            };
            user.extend(map);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| HarnessError::config(item.clone(), "override must have the form key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            user.push((key.trim().to_string(), value));
        }
        if let Some(s) = seed {
            user.push(("seed".into(), Value::from(s)));
        }
        Self::from_pairs(experiment, user)
    }

    /// Merges `(key, value)` pairs over the defaults of `experiment` and validates.
    pub fn from_pairs(experiment: Experiment, pairs: Vec<(String, Value)>) -> HarnessResult<Self> {
        let Value::Object(defaults) = serde_json::to_value(Self::defaults(experiment))? else {
            unreachable!("config serializes to an object");
        };
        let mut merged = defaults.clone();
        for (key, value) in &pairs {
            if !defaults.contains_key(key) {
                return Err(HarnessError::config(key.clone(), "unknown key"));
            }
            if key == "experiment" && value != &Value::from(experiment.name()) {
                return Err(HarnessError::config("experiment", format!("config names {value}, run requested `{experiment}`")));
            }
            merged.insert(key.clone(), value.clone());
        }
        let cfg: Self = match serde_json::from_value(Value::Object(merged)) {
            Ok(cfg) => cfg,
            Err(e) => return Err(Self::blame(&defaults, &pairs, e)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names the first user key whose value alone fails to deserialize.
    fn blame(defaults: &Map<String, Value>, pairs: &[(String, Value)], err: serde_json::Error) -> HarnessError {
        for (key, value) in pairs {
            let mut probe = defaults.clone();
            probe.insert(key.clone(), value.clone());
            if let Err(e) = serde_json::from_value::<Self>(Value::Object(probe)) {
                return HarnessError::config(key.clone(), e.to_string());
            }
        }
        HarnessError::config("config", err.to_string())
    }

    /// Checks ranges and parses the string-valued keys.
    pub fn validate(&self) -> HarnessResult<()> {
        let positive = [
            ("trials", self.trials),
            ("steps", self.steps),
            ("d", self.d),
            ("k", self.k),
            ("m", self.m),
            ("n", self.n),
            ("spike_rank", self.spike_rank),
            ("ns_iters", self.ns_iters),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("shards", self.shards),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("p", self.p),
            ("q", self.q),
            ("s", self.s),
            ("samples", self.samples),
            ("max_rows", self.max_rows),
            ("max_cols", self.max_cols),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(HarnessError::config(key, "must be positive"));
            }
        }
        let positive_real = [
            ("eta_c", self.eta_c),
            ("ns_tol", self.ns_tol),
            ("lr_scale", self.lr_scale),
            ("bytes_per_entry", self.bytes_per_entry),
            ("bulk_lo", self.bulk_lo),
            ("p_max", self.p_max),
        ];
        for (key, v) in positive_real {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HarnessError::config(key, format!("must be positive and finite, got {v}")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(HarnessError::config("alpha", "must be finite and nonnegative"));
        }
        if !(self.c_op >= 0.0 && self.c_op.is_finite()) {
            return Err(HarnessError::config("c_op", "must be finite and nonnegative"));
        }
        if let Some(c) = self.c_f {
            if !(c > 0.0 && c.is_finite()) {
                return Err(HarnessError::config("c_f", "must be positive and finite"));
            }
        }
        if !(self.max_cond >= 1.0 && self.max_cond.is_finite()) {
            return Err(HarnessError::config("max_cond", "must be at least 1"));
        }
        if self.p_max > 1.0 {
            return Err(HarnessError::config("p_max", "must be at most 1"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(HarnessError::config("widths", "need at least one positive hidden width"));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(HarnessError::config("batch_sizes", "need at least one positive batch size"));
        }
        if self.spike_rank > self.k {
            return Err(HarnessError::config("spike_rank", "must not exceed k"));
        }
        if !(self.exp_lo > 0.0 && self.exp_lo <= self.exp_hi && self.exp_hi <= 1.0) {
            return Err(HarnessError::config("exp_lo", "need 0 < exp_lo <= exp_hi <= 1"));
        }
        if !(self.bulk_lo <= self.bulk_hi && self.bulk_hi.is_finite()) {
            return Err(HarnessError::config("bulk_hi", "need bulk_lo <= bulk_hi"));
        }
        self.activation()?;
        self.spectral_set()?;
        self.stages()?;
        if self.d % self.heads != 0 {
            return Err(HarnessError::config("heads", format!("must divide d = {}", self.d)));
        }
        if self.experiment == Experiment::Shardwise {
            self.shard_scheme()?;
        }
        Ok(())
    }

    pub fn activation(&self) -> HarnessResult<Activation> {
        self.activation.parse().map_err(|e: Error| HarnessError::config("activation", e.to_string()))
    }

    pub fn polar(&self) -> PolarMode {
        match self.polar_mode {
            PolarKey::Exact => PolarMode::Exact,
            PolarKey::NewtonSchulz => PolarMode::NewtonSchulz { max_iters: self.ns_iters, tol: self.ns_tol },
            PolarKey::PureNewtonSchulz => PolarMode::PureNewtonSchulz { max_iters: self.ns_iters, tol: self.ns_tol },
        }
    }

    pub fn step_rule(&self) -> StepRule {
        match self.eta_rule {
            EtaRuleKey::MaxPlusC => StepRule::MaxPlusC(self.eta_c),
            EtaRuleKey::Fraction => StepRule::Fraction(self.eta_c),
        }
    }

    pub fn spectral_set(&self) -> HarnessResult<SpectralSet> {
        let bad = |msg: String| HarnessError::config("spectral_layers", msg);
        Ok(match self.spectral_layers.trim() {
            "internal" => SpectralSet::Internal,
            "all" => SpectralSet::All,
            "none" => SpectralSet::None,
            list => SpectralSet::Layers(
                list.split(',')
                    .map(|t| match t.trim().parse::<usize>() {
                        Ok(l) if l >= 1 => Ok(l),
                        _ => Err(bad(format!("bad layer `{t}`"))),
                    })
                    .collect::<HarnessResult<_>>()?,
            ),
        })
    }

    pub fn shard_scheme(&self) -> HarnessResult<ShardScheme> {
        let scheme = match self.scheme {
            SchemeKey::Row => ShardScheme::RowShards(self.shards),
            SchemeKey::Col => ShardScheme::ColShards(self.shards),
            SchemeKey::Grid => ShardScheme::Grid(self.grid_rows, self.grid_cols),
            SchemeKey::Singletons => ShardScheme::Singletons,
            SchemeKey::Whole => ShardScheme::Whole,
        };
        make_partition(self.m, self.k, scheme).map_err(|e| HarnessError::config("scheme", e.to_string()))?;
        Ok(scheme)
    }

    /// Parsed `chain`.
    pub fn stages(&self) -> HarnessResult<Vec<ChainStage>> {
        self.chain
            .iter()
            .map(|s| parse_stage(s, self.n, self.vocab, self.p_max).map(ChainStage::new))
            .collect::<std::result::Result<_, String>>()
            .map_err(|msg| HarnessError::config("chain", msg))
    }

    fn rf_config(&self, n: usize) -> RfConfig {
        RfConfig {
            feature_scale: self.feature_scale.into(),
            truth_scale: self.truth_scale.into(),
            ..RfConfig::new(self.d, self.k, self.m, n)
        }
    }
}

/// Parses one chain stage descriptor.
///
/// Forms: `linear:K`, `pointwise:ACT:K`, `residual:ACT:K`, `rmsnorm`,
/// `gating:ACT:K`, `token_embed:DIM`, `attention:HEADS[:causal]`,
/// `mlp:ACT:K`, `moe:ACT:K:EXPERTS[:soft]`.
fn parse_stage(desc: &str, n: usize, vocab: usize, p_max: f64) -> std::result::Result<StageKind, String> {
    let parts: Vec<&str> = desc.split(':').map(str::trim).collect();
    let num = |i: usize| -> std::result::Result<usize, String> {
        parts
            .get(i)
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| format!("stage `{desc}` needs a positive integer in position {}", i + 1))
    };
    let act = |i: usize| -> std::result::Result<Activation, String> {
        parts
            .get(i)
            .ok_or_else(|| format!("stage `{desc}` needs an activation"))?
            .parse::<Activation>()
            .map_err(|e| format!("stage `{desc}`: {e}"))
    };
    let arity = |lo: usize, hi: usize| -> std::result::Result<(), String> {
        if parts.len() < lo || parts.len() > hi {
            Err(format!("stage `{desc}` has {} fields", parts.len()))
        } else {
            Ok(())
        }
    };
    let kind = match parts[0] {
        "linear" => {
            arity(2, 2)?;
            StageKind::Linear { k_out: num(1)? }
        }
        "pointwise" => {
            arity(3, 3)?;
            StageKind::Pointwise { act: act(1)?, k_out: num(2)? }
        }
        "residual" => {
            arity(3, 3)?;
            StageKind::Residual { act: act(1)?, k_hidden: num(2)? }
        }
        "rmsnorm" => {
            arity(1, 1)?;
            StageKind::RmsNorm
        }
        "gating" => {
            arity(3, 3)?;
            StageKind::Gating { act: act(1)?, k_out: num(2)? }
        }
        "token_embed" => {
            arity(2, 2)?;
            StageKind::TokenEmbed { dim: num(1)?, counts: token_counts(n, vocab, p_max, 0) }
        }
        "attention" => {
            arity(2, 3)?;
            let causal = match parts.get(2) {
                None => false,
                Some(&"causal") => true,
                Some(other) => return Err(format!("stage `{desc}`: unknown flag `{other}`")),
            };
            StageKind::AttentionSublayer { heads: num(1)?, causal }
        }
        "mlp" => {
            arity(3, 3)?;
            StageKind::MlpSublayer { act: act(1)?, k_hidden: num(2)? }
        }
        "moe" => {
            arity(4, 5)?;
            let routing = match parts.get(4) {
                None | Some(&"onehot") => Routing::OneHot,
                Some(&"soft") => Routing::Soft,
                Some(other) => return Err(format!("stage `{desc}`: unknown routing `{other}`")),
            };
            StageKind::MoeSublayer { act: act(1)?, k_hidden: num(2)?, experts: num(3)?, routing }
        }
        other => return Err(format!("unknown stage kind `{other}`")),
    };
    Ok(kind)
}

/// Token counts of a length-`n` sequence: token 0 takes `ceil(p_max n)`
/// positions and the rest are drawn uniformly from the other tokens.
pub fn token_counts(n: usize, vocab: usize, p_max: f64, seed: u64) -> Vec<u64> {
    let mut counts = vec![0u64; vocab];
    let top = ((p_max * n as f64).ceil() as usize).min(n);
    counts[0] = top as u64;
    if vocab == 1 {
        counts[0] = n as u64;
        return counts;
    }
    let mut rng = stream(seed, "harness/tokens");
    for _ in top..n {
        counts[rng.random_range(1..vocab)] += 1;
    }
    counts
}

/// One table entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format!("{v:.16e}"),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(v) => v.clone(),
        }
    }

    fn parse(field: &str) -> Self {
        if let Ok(v) = field.parse::<i64>() {
            Cell::Int(v)
        } else if let Ok(v) = field.parse::<f64>() {
            Cell::Real(v)
        } else if let Ok(v) = field.parse::<bool>() {
            Cell::Bool(v)
        } else {
            Cell::Text(field.to_string())
        }
    }

    fn is_finite(&self) -> bool {
        !matches!(self, Cell::Real(v) if !v.is_finite())
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// Column names and rows of one result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Index of a column by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Real-valued entries of a column (integers widen to `f64`).
    pub fn reals(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column(name)?;
        self.rows
            .iter()
            .map(|r| match r[j] {
                Cell::Real(v) => Some(v),
                Cell::Int(v) => Some(v as f64),
                _ => None,
            })
            .collect()
    }
}

/// Flattens training records into `step, loss, guaranteed_decrease` followed
/// by `nr_l, st_l, ratio_l, favored_l, spectral_l, grad_norm_l` per block.
pub fn trace_table(records: &[TraceRecord]) -> Table {
    let blocks = records.first().map_or(0, |r| r.blocks.len());
    let mut columns: Vec<String> = ["step", "loss", "guaranteed_decrease"].map(String::from).to_vec();
    for l in 1..=blocks {
        for name in ["nr", "st", "ratio", "favored", "spectral", "grad_norm"] {
            columns.push(format!("{name}_{l}"));
        }
    }
    let rows = records
        .iter()
        .map(|r| {
            let mut row = vec![r.step.into(), r.loss.into(), r.guaranteed_decrease.into()];
            for b in &r.blocks {
                row.extend([b.nr.into(), b.st.into(), b.ratio.into(), b.favored.into(), b.spectral.into(), b.grad_norm.into()]);
            }
            row
        })
        .collect();
    Table { columns, rows }
}

/// Writes `table` to `path`.
///
/// CSV has a header row, `'\n'` line endings and reals with 17 significant
/// digits; JSON is `{"columns": [...], "rows": [[...], ...]}`. Both parse back
/// to an equal table.
pub fn emit_records(table: &Table, path: &Path, format: Format) -> HarnessResult<()> {
    if table.rows.is_empty() {
        return Err(HarnessError::EmptyRecords);
    }
    let file = BufWriter::new(fs::File::create(path)?);
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
            w.write_record(&table.columns)?;
            for row in &table.rows {
                w.write_record(row.iter().map(Cell::render))?;
            }
            w.flush()?;
        }
        Format::Json => {
            let mut file = file;
            serde_json::to_writer(&mut file, table)?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
    }
    Ok(())
}

/// Reads a table written by [`emit_records`].
pub fn read_records(path: &Path, format: Format) -> HarnessResult<Table> {
    match format {
        Format::Csv => {
            let mut r = csv::ReaderBuilder::new().from_path(path)?;
            let columns = r.headers()?.iter().map(String::from).collect();
            let rows = r
                .records()
                .map(|rec| rec.map(|rec| rec.iter().map(Cell::parse).collect()))
                .collect::<std::result::Result<_, _>>()?;
            Ok(Table { columns, rows })
        }
        Format::Json => Ok(serde_json::from_str(&fs::read_to_string(path)?)?),
    }
}

/// What a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub table: Table,
    pub summary: Value,
    pub output: PathBuf,
    pub sidecar: PathBuf,
}

/// Path of the JSON sidecar of an output file.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

/// Runs the experiment, writes the table to `out` and the sidecar next to it.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> HarnessResult<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let (table, summary) = compute(cfg)?;
    if let Some((i, _)) = table.rows.iter().enumerate().find(|(_, r)| !r.iter().all(Cell::is_finite)) {
        return Err(HarnessError::Numeric(Error::InvalidSpec(format!("non-finite value in output row {i}"))));
    }
    emit_records(&table, out, cfg.format)?;
    let meta = json!({
        "config": cfg,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_seconds": start.elapsed().as_secs_f64(),
        "rows": table.rows.len(),
        "summary": summary,
    });
    let sidecar = sidecar_path(out);
    fs::write(&sidecar, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(RunReport { table, summary, output: out.to_path_buf(), sidecar })
}

/// Table and summary of a run, without touching the filesystem.
///
/// With `trials > 1`, trial `i` uses seed `derive_seed(seed, i)`; trials run
/// in parallel and rows are concatenated in trial order behind `trial, seed`
/// columns.
pub fn compute(cfg: &ExperimentConfig) -> HarnessResult<(Table, Value)> {
    if cfg.trials == 1 {
        return compute_single(cfg, cfg.seed);
    }
    let results: Vec<HarnessResult<(Table, Value)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| compute_single(cfg, derive_seed(cfg.seed, i as u64)))
        .collect();
    let mut columns = vec!["trial".to_string(), "seed".to_string()];
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        let (table, summary) = res?;
        if i == 0 {
            columns.extend(table.columns);
        }
        let seed = derive_seed(cfg.seed, i as u64);
        rows.extend(table.rows.into_iter().map(|r| {
            let mut row = vec![Cell::from(i), Cell::from(seed)];
            row.extend(r);
            row
        }));
        summaries.push(json!({ "trial": i, "seed": seed, "summary": summary }));
    }
    Ok((Table { columns, rows }, Value::Array(summaries)))
}

fn compute_single(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<(Table, Value)> {
    match cfg.experiment {
        Experiment::Rf1 => run_rf1(cfg, seed),
        Experiment::Rf2 => run_rf2(cfg, seed),
        Experiment::RfGated => run_rf_gated(cfg, seed),
        Experiment::MlpSparse => run_mlp_sparse(cfg, seed),
        Experiment::Propagation => run_propagation(cfg, seed),
        Experiment::TransformerBlock => run_transformer_block(cfg, seed),
        Experiment::Shardwise => run_shardwise(cfg, seed),
        Experiment::PolarBench => run_polar_bench(cfg, seed),
        Experiment::CostTable => Ok(run_cost_table(cfg)),
    }
}

fn rf_instance(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<RFInstance> {
    let rc = cfg.rf_config(cfg.n);
    Ok(match cfg.variant {
        VariantKey::Realizable => gen_realizable_with(&rc, seed)?,
        VariantKey::TeacherStudent => gen_teacher_student_with(&rc, seed)?,
    })
}

/// GD and SpecGD traces side by side.
fn paired_rows(table: &mut Table, prefix: &[Cell], inst: &RFInstance, cfg: &ExperimentConfig) -> HarnessResult<Value> {
    let gd = train_rf(inst, RfOptimizer::Gd, cfg.steps, None)?;
    let spec = train_rf(inst, RfOptimizer::Spec(cfg.polar()), cfg.steps, None)?;
    let st_a = gd[0].blocks[0].st;
    for (g, s) in gd.iter().zip(&spec) {
        let mut row = prefix.to_vec();
        row.extend([
            g.step.into(),
            g.loss.into(),
            s.loss.into(),
            g.blocks[0].nr.into(),
            s.blocks[0].nr.into(),
            st_a.into(),
        ]);
        table.push(row);
    }
    let favored = |trace: &[TraceRecord]| -> HarnessResult<usize> {
        let mut count = 0;
        for r in &trace[1..] {
            let b = &r.blocks[0];
            if b.grad_norm > 0.0 && crate::diagnostics::criterion_from_ranks(b.nr, b.st, cfg.alpha)?.spectral_favored {
                count += 1;
            }
        }
        Ok(count)
    };
    let (loss_gd, loss_spec) = (gd[cfg.steps].loss, spec[cfg.steps].loss);
    Ok(json!({
        "n": inst.n,
        "st_A": st_a,
        "final_loss_gd": loss_gd,
        "final_loss_spec": loss_spec,
        "spec_over_gd": loss_spec / loss_gd,
        "favored_steps_gd": favored(&gd)?,
        "favored_steps_spec": favored(&spec)?,
    }))
}

const RF_PAIR_COLUMNS: [&str; 6] = ["step", "loss_gd", "loss_spec", "nr_gd", "nr_spec", "st_A"];

fn run_rf1(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<(Table, Value)> {
    let inst = rf_instance(cfg, seed)?;
    let mut table = Table::new(&RF_PAIR_COLUMNS);
    let summary = paired_rows(&mut table, &[], &inst, cfg)?;
    Ok((table, summary))
}

fn run_rf2(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<(Table, Value)> {
    let inst = match cfg.gram {
        GramSource::Features => rf_instance(cfg, seed)?,
        GramSource::Spiked => {
            let spec = SpikedSpec {
                d: cfg.d,
                k: cfg.k,
                spike_rank: cfg.spike_rank,
                exp_lo: cfg.exp_lo,
                exp_hi: cfg.exp_hi,
                bulk_lo: cfg.bulk_lo,
                bulk_hi: cfg.bulk_hi,
            };
            let b = gen_spiked_gram(&spec, seed)?;
            let std = match cfg.truth_scale {
                ScaleKey::InvDim => 1.0 / (cfg.m as f64).sqrt(),
                ScaleKey::Unit => 1.0,
            };
            let w = gaussian_matrix(&mut stream(seed, "harness/spiked-truth"), cfg.m, cfg.k, std);
            RFInstance::from_gram(&b, w, seed)?
        }
    };
    let rule = cfg.step_rule();
    let trace = nuclear_rank_trace(&inst, rule, cfg.steps)?;
    let mut table = Table::new(&["step", "loss", "nr"]);
    for p in &trace {
        table.push(vec![p.t.into(), p.loss.into(), p.nr.into()]);
    }
    let after: Vec<f64> = trace[1..].iter().map(|p| p.nr).collect();
    let (start, len) = longest_run_at_least(&after, cfg.window_threshold);
    let summary = json!({
        "eta": rule.eta(inst.l_f),
        "st_A": stable_rank(&inst.a)?,
        "nr_initial": trace[0].nr,
        "nr_after_one_step": trace[1].nr,
        "window_threshold": cfg.window_threshold,
        "window_start": if len > 0 { Value::from(start + 1) } else { Value::Null },
        "window_length": len,
    });
    Ok((table, summary))
}

fn run_rf_gated(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<(Table, Value)> {
    let act = cfg.activation()?;
    let mut columns = vec!["n"];
    columns.extend(RF_PAIR_COLUMNS);
    let mut table = Table::new(&columns);
    let mut per_n = Vec::new();
    for &n in &cfg.batch_sizes {
        let inst = gen_gated_with(&cfg.rf_config(n), act, seed)?;
        per_n.push(paired_rows(&mut table, &[n.into()], &inst, cfg)?);
    }
    let crossover = per_n
        .iter()
        .find(|s| s["final_loss_gd"].as_f64() <= s["final_loss_spec"].as_f64())
        .map(|s| s["n"].clone())
        .unwrap_or(Value::Null);
    Ok((table, json!({ "per_batch_size": per_n, "first_n_gd_not_worse": crossover })))
}

fn run_mlp_sparse(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<(Table, Value)> {
    let (x, y) = sparse_regression_data(cfg.d, cfg.n, seed)?;
    let mut widths = vec![cfg.d];
    widths.extend(&cfg.widths);
    widths.push(1);
    let spec = MlpSpec::new(widths, cfg.activation()?)?;
    let weights = spec.init_weights(derive_seed(seed, 1));
    let train = MlpTrainConfig {
        c_f: cfg.c_f,
        c_op: cfg.c_op,
        lr_scale: cfg.lr_scale,
        spectral: cfg.spectral_set()?,
        polar_mode: cfg.polar(),
    };
    let (trace, _) = train_mlp(&spec, weights, &x, &y, &train, cfg.steps)?;
    let hidden_st_max: Vec<f64> = (1..spec.depth())
        .map(|l| trace.iter().map(|r| r.blocks[l].st).fold(0.0, f64::max))
        .collect();
    let summary = json!({
        "initial_loss": trace[0].loss,
        "final_loss": trace[cfg.steps].loss,
        "max_hidden_stable_rank": hidden_st_max,
    });
    Ok((trace_table(&trace), summary))
}

fn summary_row(table: &mut Table, prefix: Vec<Cell>, m: &Matrix, with_envelope: bool) -> HarnessResult<()> {
    let s = spectral_summary(m)?;
    let mut row = prefix;
    row.extend([
        m.nrows().into(),
        m.ncols().into(),
        s.stable_rank.into(),
        s.nuclear_rank.into(),
        s.op_norm.into(),
        s.frob.into(),
    ]);
    if with_envelope {
        let env = crate::propagation::column_norm_envelope(m);
        row.extend([env.min_sq.into(), env.max_sq.into()]);
    }
    table.push(row);
    Ok(())
}

fn run_propagation(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<(Table, Value)> {
    let stages = cfg.stages()?;
    let x0 = gaussian_matrix(&mut stream(seed, "harness/x0"), cfg.d, cfg.n, 1.0);
    let records = propagate_chain(&stages, &x0, seed)?;
    let mut table = Table::new(&[
        "stage", "name", "rows", "cols", "stable_rank", "nuclear_rank", "op_norm", "frob", "min_col_sq", "max_col_sq",
    ]);
    summary_row(&mut table, vec![0usize.into(), "input".into()], &x0, true)?;
    for (i, rec) in records.iter().enumerate() {
        let s = &rec.summary;
        table.push(vec![
            (i + 1).into(),
            rec.name.clone().into(),
            rec.shape.0.into(),
            rec.shape.1.into(),
            s.stable_rank.into(),
            s.nuclear_rank.into(),
            s.op_norm.into(),
            s.frob.into(),
            rec.envelope.min_sq.into(),
            rec.envelope.max_sq.into(),
        ]);
    }
    let st: Vec<f64> = records.iter().map(|r| r.summary.stable_rank).collect();
    Ok((table, json!({ "stable_ranks": st })))
}

fn run_transformer_block(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<(Table, Value)> {
    let counts = token_counts(cfg.n, cfg.vocab, cfg.p_max, seed);
    let x = token_embed(&counts, cfg.d, seed)?;
    let params = AttentionParams::init(cfg.d, cfg.k, cfg.heads, cfg.activation()?, cfg.causal, derive_seed(seed, 1))?;
    let cap = attention_block_forward(&params, &x)?;
    let mut named: Vec<(String, &Matrix)> = vec![
        ("x".into(), &x),
        ("a_rms".into(), &cap.a_rms),
        ("q".into(), &cap.q),
        ("k".into(), &cap.k),
        ("v".into(), &cap.v),
    ];
    for (h, p) in cap.p.iter().enumerate() {
        let name = if cap.p.len() == 1 { "p".to_string() } else { format!("p_{}", h + 1) };
        named.push((name, p));
    }
    named.extend([
        ("h".into(), &cap.h),
        ("x_att".into(), &cap.x_att),
        ("a_rms_mlp".into(), &cap.a_rms_mlp),
        ("b".into(), &cap.b),
        ("x_plus".into(), &cap.x_plus),
    ]);
    let mut table = Table::new(&["name", "rows", "cols", "stable_rank", "nuclear_rank", "op_norm", "frob"]);
    for (name, m) in named {
        summary_row(&mut table, vec![name.into()], m, false)?;
    }
    let p_max = *counts.iter().max().unwrap_or(&0) as f64 / cfg.n as f64;
    Ok((table, json!({ "token_counts": counts, "p_max_realized": p_max })))
}

fn run_shardwise(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<(Table, Value)> {
    let inst = rf_instance(cfg, seed)?;
    let part = make_partition(inst.m(), inst.k(), cfg.shard_scheme()?)?;
    let kappa_st = partition_stable_rank(&inst.a, &part)?;
    let mode = cfg.polar();
    let mut table = Table::new(&[
        "step", "loss_spec", "loss_shard", "nr_spec", "nr_partition", "kappa_st_A", "guaranteed_shard", "realized_shard",
    ]);
    let mut w_spec = Matrix::zeros(inst.m(), inst.k());
    let mut w_shard = w_spec.clone();
    let mut violations = 0usize;
    for step in 0..=cfg.steps {
        let (loss_spec, g_spec) = rf_loss_grad(&w_spec, &inst)?;
        let (loss_shard, g_shard) = rf_loss_grad(&w_shard, &inst)?;
        let nr_spec = if g_spec.norm() > 0.0 { nuclear_rank(&g_spec)? } else { 0.0 };
        let (mut nr_part, mut guaranteed, mut realized) = (0.0, 0.0, 0.0);
        if step < cfg.steps && g_shard.norm() > 0.0 {
            let next = shardwise_spec_step(&w_shard, &g_shard, &part, &inst.a, inst.n, mode)?;
            nr_part = next.nr_partition;
            guaranteed = next.guaranteed_decrease;
            realized = loss_shard - rf_loss(&next.w, &inst);
            if realized < guaranteed * (1.0 - 1e-9) - 1e-14 {
                violations += 1;
            }
            w_shard = next.w;
        }
        if step < cfg.steps && g_spec.norm() > 0.0 {
            w_spec = spec_step(&w_spec, &g_spec, inst.l_op, mode)?;
        }
        table.push(vec![
            step.into(),
            loss_spec.into(),
            loss_shard.into(),
            nr_spec.into(),
            nr_part.into(),
            kappa_st.into(),
            guaranteed.into(),
            realized.into(),
        ]);
    }
    let summary = json!({
        "kappa": part.kappa,
        "shards": part.blocks.len(),
        "kappa_st_A": kappa_st,
        "guarantee_violations": violations,
    });
    Ok((table, summary))
}

/// Random `rows x cols` matrix with singular values geometric from 1 to `1/cond`.
fn conditioned_matrix(rows: usize, cols: usize, cond: f64, seed: u64) -> Matrix {
    let r = rows.min(cols);
    let u = gaussian_matrix(&mut stream(seed, "bench/u"), rows, r, 1.0).qr().q();
    let v = gaussian_matrix(&mut stream(seed, "bench/v"), cols, r, 1.0).qr().q();
    let s = Matrix::from_diagonal(&nalgebra::DVector::from_fn(r, |i, _| {
        if r == 1 {
            1.0
        } else {
            cond.powf(-(i as f64) / (r - 1) as f64)
        }
    }));
    u * s * v.transpose()
}

fn run_polar_bench(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<(Table, Value)> {
    let mut table = Table::new(&["index", "rows", "cols", "cond", "ns_iters", "frob_error"]);
    let mut rng = stream(seed, "bench/shapes");
    let mut worst = 0.0f64;
    for i in 0..cfg.samples {
        let rows = rng.random_range(1..=cfg.max_rows);
        let cols = rng.random_range(1..=cfg.max_cols);
        let cond = if cfg.max_cond > 1.0 { rng.random_range(0.0..cfg.max_cond.ln()).exp() } else { 1.0 };
        let m = conditioned_matrix(rows, cols, cond, derive_seed(seed, i as u64));
        let (ns, iters) = polar_newton_schulz(&m, cfg.ns_iters, cfg.ns_tol)?;
        let err = (ns - polar_exact(&m)?).norm();
        worst = worst.max(err);
        table.push(vec![i.into(), rows.into(), cols.into(), cond.into(), iters.into(), err.into()]);
    }
    Ok((table, json!({ "max_frob_error": worst })))
}

/// One strategy of the distributed orthogonalization cost model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub strategy: &'static str,
    pub collectives: u64,
    pub entries_moved: u64,
    pub bytes_moved: f64,
    pub flops_per_device: f64,
    /// `P^2 Q / flops_per_device`.
    pub flops_reduction: f64,
}

/// Unit-constant cost model for orthogonalizing a `P x Q` gradient (`P <= Q`)
/// held as `S` shards.
///
/// All-gather moves the whole gradient once and orthogonalizes it on every
/// device; distributed Newton-Schulz moves it once per iteration and splits
/// the work `S` ways; resharding moves it twice; the shardwise step moves
/// nothing and orthogonalizes one `P/S x Q/S` block per device.
pub fn cost_table(p: u64, q: u64, s: u64, ns_iters: u64, bytes_per_entry: f64) -> Vec<CostRow> {
    let (small, large) = (p.min(q) as f64, p.max(q) as f64);
    let global = small * small * large;
    let entries = p * q;
    let s = s as f64;
    let row = |strategy, collectives: u64, moved: u64, flops: f64| CostRow {
        strategy,
        collectives,
        entries_moved: moved,
        bytes_moved: moved as f64 * bytes_per_entry,
        flops_per_device: flops,
        flops_reduction: global / flops,
    };
    vec![
        row("all_gather", 1, entries, global),
        row("distributed_ns", ns_iters, entries * ns_iters, global / s),
        row("reshard", 2, 2 * entries, global / s),
        row("shardwise", 0, 0, global / (s * s)),
    ]
}

fn run_cost_table(cfg: &ExperimentConfig) -> (Table, Value) {
    let rows = cost_table(cfg.p as u64, cfg.q as u64, cfg.s as u64, cfg.ns_iters as u64, cfg.bytes_per_entry);
    let mut table = Table::new(&[
        "strategy", "p", "q", "shards", "collectives", "entries_moved", "bytes_moved", "flops_per_device", "flops_reduction",
    ]);
    for r in &rows {
        table.push(vec![
            r.strategy.into(),
            cfg.p.into(),
            cfg.q.into(),
            cfg.s.into(),
            r.collectives.into(),
            r.entries_moved.into(),
            r.bytes_moved.into(),
            r.flops_per_device.into(),
            r.flops_reduction.into(),
        ]);
    }
    (table, json!({ "global_flops": (cfg.p.min(cfg.q) as f64).powi(2) * cfg.p.max(cfg.q) as f64 }))
}
