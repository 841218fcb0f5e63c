//! Batch, layer, instance and batch-instance normalization.
//!
//! Each scheme standardizes activations over its own axes and then applies a
//! learnable per-channel affine `gamma · x̂ + beta`:
//!
//! | scheme   | statistics pooled over | groups        |
//! |----------|------------------------|---------------|
//! | batch    | `(n, h, w)`            | one per `c`   |
//! | layer    | `(c, h, w)`            | one per `n`   |
//! | instance | `(h, w)`               | one per `(n,c)` |
//!
//! Batch-instance normalization blends the batch- and instance-standardized
//! activations per channel with a learnable gate `rho ∈ [0, 1]` before the
//! shared affine. Batch statistics are biased (population) variances, and the
//! running averages use the same biased estimate.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Dims, StatAxes, Tape, Tensor4D, Var};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_RHO: f64 = 0.5;

/// Whether batch statistics are measured (and running averages updated) or
/// the stored running averages are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Batch,
    Layer,
    Instance,
    BatchInstance,
}

impl NormKind {
    pub fn has_running_stats(self) -> bool {
        matches!(self, NormKind::Batch | NormKind::BatchInstance)
    }

    pub fn has_gate(self) -> bool {
        self == NormKind::BatchInstance
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
            NormKind::Instance => "instance",
            NormKind::BatchInstance => "batch_instance",
        })
    }
}

impl FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            "instance" => Ok(NormKind::Instance),
            "batch_instance" => Ok(NormKind::BatchInstance),
            other => Err(format!("unknown normalization `{other}`")),
        }
    }
}

/// Learnable per-channel scale and shift plus the variance stabilizer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

impl NormParams {
    /// Unit scale, zero shift.
    pub fn identity(channels: usize) -> Self {
        NormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        if self.gamma.len() != self.beta.len() {
            return Err(Error::shape(format!(
                "gamma has {} channels but beta has {}",
                self.gamma.len(),
                self.beta.len()
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Contract(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Registers gamma and beta on `tape` as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        self.validate()?;
        let c = self.channels();
        let gamma = tape.param(Tensor4D::new(Dims::vector(c), self.gamma.clone())?);
        let beta = tape.param(Tensor4D::new(Dims::vector(c), self.beta.clone())?);
        Ok((gamma, beta))
    }
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `running ← (1 − m)·running + m·batch` for mean and variance.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Per-channel interpolation weight between batch (`rho = 1`) and instance
/// (`rho = 0`) standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct BinGate {
    pub rho: Vec<f64>,
}

impl BinGate {
    pub fn new(channels: usize) -> Self {
        BinGate {
            rho: vec![DEFAULT_RHO; channels],
        }
    }

    pub fn register(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.param(Tensor4D::new(Dims::vector(self.rho.len()), self.rho.clone())?))
    }
}

/// Projects every gate element into `[0, 1]`.
pub fn clamp_gate(mut gate: BinGate) -> BinGate {
    clamp_unit(&mut gate.rho);
    gate
}

pub(crate) fn clamp_unit(values: &mut [f64]) {
    for r in values {
        *r = r.clamp(0.0, 1.0);
    }
}

fn check_members(x: Dims, axes: StatAxes, what: &str) -> Result<()> {
    let members = match axes {
        StatAxes::Batch => x.n * x.h * x.w,
        StatAxes::Layer => x.c * x.h * x.w,
        StatAxes::Instance => x.h * x.w,
    };
    if members < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "{what} needs at least 2 values per statistics group, input {x} has {members}"
        )));
    }
    Ok(())
}

/// Batch-standardized activations before the affine. Updates `stats` in
/// training mode.
fn batch_standardize(tape: &mut Tape, x: Var, eps: f64, stats: &mut RunningStats, mode: Mode) -> Result<Var> {
    let d = tape.dims(x);
    if stats.channels() != d.c {
        return Err(Error::shape(format!(
            "running statistics cover {} channels, input {d} has {}",
            stats.channels(),
            d.c
        )));
    }
    match mode {
        Mode::Train => {
            check_members(d, StatAxes::Batch, "batch_norm")?;
            let (xhat, measured) = tape.standardize(x, StatAxes::Batch, eps)?;
            stats.update(&measured.mean, &measured.var);
            Ok(xhat)
        }
        Mode::Eval => tape.standardize_fixed(x, &stats.mean, &stats.var, eps),
    }
}

/// Batch normalization with per-channel statistics over `(n, h, w)`.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Var> {
    let xhat = batch_standardize(tape, x, eps, stats, mode)?;
    tape.channel_affine(xhat, gamma, beta)
}

/// Layer normalization with per-sample statistics over `(c, h, w)`; the
/// affine is per channel. Identical in training and inference.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    check_members(tape.dims(x), StatAxes::Layer, "layer_norm")?;
    let (xhat, _) = tape.standardize(x, StatAxes::Layer, eps)?;
    tape.channel_affine(xhat, gamma, beta)
}

/// Instance normalization with statistics over `(h, w)` for every `(n, c)`.
pub fn instance_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    check_members(tape.dims(x), StatAxes::Instance, "instance_norm")?;
    let (xhat, _) = tape.standardize(x, StatAxes::Instance, eps)?;
    tape.channel_affine(xhat, gamma, beta)
}

/// `gamma · (rho ⊙ x̂_batch + (1 − rho) ⊙ x̂_instance) + beta`, with `rho`
/// broadcast per channel and trainable.
#[allow(clippy::too_many_arguments)]
pub fn batch_instance_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    rho: Var,
    eps: f64,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Var> {
    check_members(tape.dims(x), StatAxes::Instance, "batch_instance_norm")?;
    let xb = batch_standardize(tape, x, eps, stats, mode)?;
    let (xi, _) = tape.standardize(x, StatAxes::Instance, eps)?;
    let mixed = tape.gate_mix(xb, xi, rho)?;
    tape.channel_affine(mixed, gamma, beta)
}

/// A self-contained normalization layer owning its parameters and state.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub kind: NormKind,
    pub params: NormParams,
    pub stats: Option<RunningStats>,
    pub gate: Option<BinGate>,
}

/// Tape handles of a [`NormLayer`] forward pass, for reading gradients.
#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub output: Var,
    pub gamma: Var,
    pub beta: Var,
    pub rho: Option<Var>,
}

impl NormLayer {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        NormLayer {
            kind,
            params: NormParams::identity(channels),
            stats: kind.has_running_stats().then(|| RunningStats::new(channels)),
            gate: kind.has_gate().then(|| BinGate::new(channels)),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<NormVars> {
        let (gamma, beta) = self.params.register(tape)?;
        let eps = self.params.epsilon;
        let mut rho = None;
        let output = match self.kind {
            NormKind::Batch => batch_norm(tape, x, gamma, beta, eps, self.stats_mut()?, mode)?,
            NormKind::Layer => layer_norm(tape, x, gamma, beta, eps)?,
            NormKind::Instance => instance_norm(tape, x, gamma, beta, eps)?,
            NormKind::BatchInstance => {
                let gate = self
                    .gate
                    .as_ref()
                    .ok_or_else(|| Error::State("batch-instance layer without a gate".into()))?;
                let r = gate.register(tape)?;
                rho = Some(r);
                batch_instance_norm(tape, x, gamma, beta, r, eps, self.stats_mut()?, mode)?
            }
        };
        Ok(NormVars {
            output,
            gamma,
            beta,
            rho,
        })
    }

    fn stats_mut(&mut self) -> Result<&mut RunningStats> {
        self.stats
            .as_mut()
            .ok_or_else(|| Error::State(format!("{} layer without running statistics", self.kind)))
    }
}
