//! The U-shaped encoder/decoder family.
//!
//! A network is a contraction path of `depth` conv blocks separated by 2×2
//! max pooling, a bottleneck block, and an expansion path that upsamples,
//! applies an up-convolution halving the channel count, concatenates the
//! (center-cropped) encoder feature of the same level, and runs another
//! conv block. A final 1×1 convolution produces logits.
//!
//! Every convolution except the final projection is followed by
//! `norm → activation`; the [`NormScheme`] decides which normalization sits
//! in each slot:
//!
//! * `none`: no normalization (plain U-Net)
//! * `batch`: batch norm everywhere (BNU-Net)
//! * `layer`: layer norm everywhere (LNU-Net)
//! * `instance_batch_first`: batch-instance norm in the first encoder block,
//!   batch norm everywhere else (IBU-Net)

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::normalization::{self, clamp_unit, Mode, NormKind, RunningStats, DEFAULT_EPSILON, DEFAULT_RHO};
use crate::tensor::{Dims, Padding, Tape, Tensor4D, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormScheme {
    None,
    Batch,
    Layer,
    InstanceBatchFirst,
}

impl fmt::Display for NormScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormScheme::None => "none",
            NormScheme::Batch => "batch",
            NormScheme::Layer => "layer",
            NormScheme::InstanceBatchFirst => "instance_batch_first",
        })
    }
}

impl FromStr for NormScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(NormScheme::None),
            "batch" => Ok(NormScheme::Batch),
            "layer" => Ok(NormScheme::Layer),
            "instance_batch_first" => Ok(NormScheme::InstanceBatchFirst),
            other => Err(format!(
                "unknown norm scheme `{other}` (expected none|batch|layer|instance_batch_first)"
            )),
        }
    }
}

/// Which convolutions of the first encoder block get batch-instance
/// normalization under [`NormScheme::InstanceBatchFirst`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinScope {
    /// Both convolutions of the first block.
    Block,
    /// Only the very first convolution; its sibling gets batch norm.
    FirstConv,
}

impl fmt::Display for BinScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinScope::Block => "block",
            BinScope::FirstConv => "first_conv",
        })
    }
}

impl FromStr for BinScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "block" => Ok(BinScope::Block),
            "first_conv" => Ok(BinScope::FirstConv),
            other => Err(format!("unknown bin scope `{other}` (expected block|first_conv)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Elu,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Elu => "elu",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation `{other}` (expected elu|relu)")),
        }
    }
}

/// The four named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    UNet,
    BnuNet,
    LnuNet,
    IbuNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::UNet, Variant::BnuNet, Variant::LnuNet, Variant::IbuNet];

    pub fn norm_scheme(self) -> NormScheme {
        match self {
            Variant::UNet => NormScheme::None,
            Variant::BnuNet => NormScheme::Batch,
            Variant::LnuNet => NormScheme::Layer,
            Variant::IbuNet => NormScheme::InstanceBatchFirst,
        }
    }

    /// Short identifier used on the command line.
    pub fn key(self) -> &'static str {
        match self {
            Variant::UNet => "unet",
            Variant::BnuNet => "bnu",
            Variant::LnuNet => "lnu",
            Variant::IbuNet => "ibu",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::UNet => "U-Net",
            Variant::BnuNet => "BNU-Net",
            Variant::LnuNet => "LNU-Net",
            Variant::IbuNet => "IBU-Net",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "unet" | "u-net" => Ok(Variant::UNet),
            "bnu" | "bnu-net" => Ok(Variant::BnuNet),
            "lnu" | "lnu-net" => Ok(Variant::LnuNet),
            "ibu" | "ibu-net" => Ok(Variant::IbuNet),
            other => Err(format!("unknown variant `{other}` (expected unet|bnu|lnu|ibu)")),
        }
    }
}

/// Declarative description of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub padding: Padding,
    pub norm_scheme: NormScheme,
    pub bin_scope: BinScope,
    pub activation: Activation,
    pub dropconnect_rate: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for NetworkConfig {
    /// Full-size profile: depth 4, 64 base channels, 3×3 same convolutions.
    fn default() -> Self {
        NetworkConfig {
            depth: 4,
            base_channels: 64,
            kernel_size: 3,
            padding: Padding::Same,
            norm_scheme: NormScheme::None,
            bin_scope: BinScope::Block,
            activation: Activation::Elu,
            dropconnect_rate: 0.0,
            in_channels: 1,
            out_channels: 1,
            input_height: 128,
            input_width: 128,
        }
    }
}

impl NetworkConfig {
    /// Small profile that trains on a CPU in minutes: depth 2, 8 base channels.
    pub fn desk() -> Self {
        NetworkConfig {
            depth: 2,
            base_channels: 8,
            input_height: 32,
            input_width: 32,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.norm_scheme = variant.norm_scheme();
        self
    }

    /// Field names and rendered values in a stable order. Used for config
    /// echoes and for naming the first differing field on mismatch.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("depth", self.depth.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("padding", self.padding.to_string()),
            ("norm", self.norm_scheme.to_string()),
            ("bin_scope", self.bin_scope.to_string()),
            ("activation", self.activation.to_string()),
            ("dropconnect_rate", format!("{:?}", self.dropconnect_rate)),
            ("in_channels", self.in_channels.to_string()),
            ("out_channels", self.out_channels.to_string()),
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
        ]
    }

    /// Sets one field from its textual form (the names used by [`fields`](Self::fields)).
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e: T::Err| Error::config(key, format!("invalid value `{value}`: {e}")))
        }
        match key {
            "depth" => self.depth = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "padding" => self.padding = parse(key, value)?,
            "norm" => self.norm_scheme = parse(key, value)?,
            "variant" => self.norm_scheme = parse::<Variant>(key, value)?.norm_scheme(),
            "bin_scope" => self.bin_scope = parse(key, value)?,
            "activation" => self.activation = parse(key, value)?,
            "dropconnect_rate" => self.dropconnect_rate = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "out_channels" => self.out_channels = parse(key, value)?,
            "input_height" => self.input_height = parse(key, value)?,
            "input_width" => self.input_width = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown network field")),
        }
        Ok(())
    }

    /// `key = value` lines for every field.
    pub fn to_text(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Inverse of [`to_text`](Self::to_text); unspecified fields keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config("network", format!("expected `key = value`, got `{line}`")))?;
            cfg.set_field(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Name of the first field whose value differs from `other`.
    pub fn first_difference(&self, other: &NetworkConfig) -> Option<&'static str> {
        self.fields()
            .into_iter()
            .zip(other.fields())
            .find(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("depth", "must be at least 1"));
        }
        if self.base_channels < 1 {
            return Err(Error::config("base_channels", "must be at least 1"));
        }
        if !(2..=3).contains(&self.kernel_size) {
            return Err(Error::config(
                "kernel_size",
                format!("must be 2 or 3, got {}", self.kernel_size),
            ));
        }
        if !(0.0..1.0).contains(&self.dropconnect_rate) {
            return Err(Error::config(
                "dropconnect_rate",
                format!("must lie in [0, 1), got {}", self.dropconnect_rate),
            ));
        }
        if self.in_channels < 1 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.out_channels < 1 {
            return Err(Error::config("out_channels", "must be at least 1"));
        }
        self.output_size(self.input_height, self.input_width)?;
        Ok(())
    }

    /// Logit map size for an `h × w` input, tracing every convolution, pool,
    /// upsample and crop. Fails with a config error when the input cannot
    /// pass through the architecture.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.trace_axis(h, "input_height")?, self.trace_axis(w, "input_width")?))
    }

    fn trace_axis(&self, extent: usize, field: &'static str) -> Result<usize> {
        let k = self.kernel_size;
        let conv = |s: usize, stage: &str| {
            self.padding
                .output_extent(s, k)
                .ok_or_else(|| Error::config(field, format!("extent {s} too small for a {k}x{k} conv at {stage}")))
        };
        if extent == 0 {
            return Err(Error::config(field, "must be positive"));
        }
        let mut s = extent;
        let mut skips = Vec::with_capacity(self.depth);
        for level in 0..self.depth {
            s = conv(conv(s, "encoder")?, "encoder")?;
            skips.push(s);
            if !s.is_multiple_of(2) {
                return Err(Error::config(
                    field,
                    format!(
                        "extent {extent} reaches odd size {s} before pooling at level {level} (depth {})",
                        self.depth
                    ),
                ));
            }
            s /= 2;
        }
        s = conv(conv(s, "bottleneck")?, "bottleneck")?;
        for level in (0..self.depth).rev() {
            s = conv(s * 2, "up-convolution")?;
            if skips[level] < s {
                return Err(Error::config(
                    field,
                    format!(
                        "skip at level {level} ({}) smaller than decoder map ({s})",
                        skips[level]
                    ),
                ));
            }
            s = conv(conv(s, "decoder")?, "decoder")?;
        }
        Ok(s)
    }
}

/// What a parameter tensor is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    Gate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor4D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedStats {
    pub name: String,
    pub stats: RunningStats,
}

#[derive(Clone, Debug)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct NormSlot {
    kind: NormKind,
    gamma: usize,
    beta: usize,
    rho: Option<usize>,
    stats: Option<usize>,
}

#[derive(Clone, Debug)]
struct Unit {
    conv: ConvSlot,
    norm: Option<NormSlot>,
}

#[derive(Clone, Debug)]
struct Block {
    units: [Unit; 2],
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    level: usize,
    up: Unit,
    block: Block,
}

/// An instantiated network: parameters, running statistics and wiring.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
    stats: Vec<NamedStats>,
    encoder: Vec<Block>,
    bottleneck: Block,
    decoder: Vec<DecoderLevel>,
    head: ConvSlot,
}

/// Tape handles produced by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// One handle per parameter, in [`Network::parameters`] order.
    pub params: Vec<Var>,
}

struct Builder {
    params: Vec<Param>,
    stats: Vec<NamedStats>,
    rng: ChaCha8Rng,
    k: usize,
}

impl Builder {
    fn push(&mut self, name: String, role: ParamRole, value: Tensor4D) -> usize {
        self.params.push(Param { name, role, value });
        self.params.len() - 1
    }

    /// He-uniform weights, zero biases.
    fn conv(&mut self, prefix: &str, ci: usize, co: usize, k: usize) -> ConvSlot {
        let limit = (6.0 / (ci * k * k) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor4D::from_fn(Dims::new(co, ci, k, k), |_, _, _, _| rng.gen_range(-limit..limit));
        ConvSlot {
            weight: self.push(format!("{prefix}.weight"), ParamRole::Weight, w),
            bias: self.push(
                format!("{prefix}.bias"),
                ParamRole::Bias,
                Tensor4D::zeros(Dims::vector(co)),
            ),
        }
    }

    fn norm(&mut self, prefix: &str, kind: NormKind, c: usize) -> NormSlot {
        let gamma = self.push(
            format!("{prefix}.gamma"),
            ParamRole::Gamma,
            Tensor4D::full(Dims::vector(c), 1.0),
        );
        let beta = self.push(
            format!("{prefix}.beta"),
            ParamRole::Beta,
            Tensor4D::zeros(Dims::vector(c)),
        );
        let rho = kind.has_gate().then(|| {
            self.push(
                format!("{prefix}.rho"),
                ParamRole::Gate,
                Tensor4D::full(Dims::vector(c), DEFAULT_RHO),
            )
        });
        let stats = kind.has_running_stats().then(|| {
            self.stats.push(NamedStats {
                name: format!("{prefix}.running"),
                stats: RunningStats::new(c),
            });
            self.stats.len() - 1
        });
        NormSlot {
            kind,
            gamma,
            beta,
            rho,
            stats,
        }
    }

    fn unit(&mut self, prefix: &str, ci: usize, co: usize, norm: Option<NormKind>) -> Unit {
        let k = self.k;
        let conv = self.conv(&format!("{prefix}.conv"), ci, co, k);
        let norm = norm.map(|kind| self.norm(&format!("{prefix}.norm"), kind, co));
        Unit { conv, norm }
    }

    fn block(&mut self, prefix: &str, ci: usize, co: usize, norms: [Option<NormKind>; 2]) -> Block {
        Block {
            units: [
                self.unit(&format!("{prefix}.0"), ci, co, norms[0]),
                self.unit(&format!("{prefix}.1"), co, co, norms[1]),
            ],
        }
    }
}

impl Network {
    /// Instantiates `config` with weights drawn from `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let default_norm = match config.norm_scheme {
            NormScheme::None => None,
            NormScheme::Batch | NormScheme::InstanceBatchFirst => Some(NormKind::Batch),
            NormScheme::Layer => Some(NormKind::Layer),
        };
        let first_block_norms = match (config.norm_scheme, config.bin_scope) {
            (NormScheme::InstanceBatchFirst, BinScope::Block) => {
                [Some(NormKind::BatchInstance), Some(NormKind::BatchInstance)]
            }
            (NormScheme::InstanceBatchFirst, BinScope::FirstConv) => [Some(NormKind::BatchInstance), default_norm],
            _ => [default_norm, default_norm],
        };

        let mut b = Builder {
            params: Vec::new(),
            stats: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            k: config.kernel_size,
        };
        let width = |level: usize| config.base_channels << level;

        let mut encoder = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let ci = if level == 0 {
                config.in_channels
            } else {
                width(level - 1)
            };
            let norms = if level == 0 {
                first_block_norms
            } else {
                [default_norm; 2]
            };
            encoder.push(b.block(&format!("enc{level}"), ci, width(level), norms));
        }
        let bottleneck = b.block("mid", width(config.depth - 1), width(config.depth), [default_norm; 2]);
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let up = b.unit(&format!("dec{level}.up"), width(level + 1), width(level), default_norm);
            let block = b.block(
                &format!("dec{level}"),
                2 * width(level),
                width(level),
                [default_norm; 2],
            );
            decoder.push(DecoderLevel { level, up, block });
        }
        let head = b.conv("head", width(0), config.out_channels, 1);

        Ok(Network {
            config,
            params: b.params,
            stats: b.stats,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// All parameter tensors in a stable order: per layer in forward order,
    /// weight then bias, then gamma, beta and rho where present.
    pub fn parameters(&self) -> &[Param] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn running_stats(&self) -> &[NamedStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [NamedStats] {
        &mut self.stats
    }

    /// Number of normalization layers of each kind, in build order.
    pub fn norm_layers(&self) -> Vec<NormKind> {
        self.units().filter_map(|u| u.norm.as_ref().map(|n| n.kind)).collect()
    }

    /// Convolutions excluding the final 1×1 projection.
    pub fn conv_count(&self) -> usize {
        self.units().count()
    }

    fn units(&self) -> impl Iterator<Item = &Unit> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .flat_map(|b| b.units.iter())
            .chain(
                self.decoder
                    .iter()
                    .flat_map(|d| std::iter::once(&d.up).chain(d.block.units.iter())),
            )
    }

    /// Projects every batch-instance gate into `[0, 1]`.
    pub fn clamp_gates(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.role == ParamRole::Gate) {
            clamp_unit(p.value.data_mut());
        }
    }

    /// Runs the network on `x` (`[n, in_channels, h, w]`) and returns logits.
    /// In training mode batch statistics are measured and running averages
    /// updated; drop-connect on the skip paths draws from `seed`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode, seed: u64) -> Result<ForwardPass> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let logits = self.forward_with(tape, x, &params, mode, seed)?;
        Ok(ForwardPass { logits, params })
    }

    /// Like [`forward`](Self::forward) but reads parameters from handles the
    /// caller already placed on the tape (one per [`parameters`](Self::parameters) entry).
    pub fn forward_with(&mut self, tape: &mut Tape, x: Var, vars: &[Var], mode: Mode, seed: u64) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        for (p, &v) in self.params.iter().zip(vars) {
            if tape.dims(v) != p.value.dims() {
                return Err(Error::shape(format!(
                    "parameter {} expects {}, got {}",
                    p.name,
                    p.value.dims(),
                    tape.dims(v)
                )));
            }
        }
        let d = tape.dims(x);
        if d.c != self.config.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {d}",
                self.config.in_channels
            )));
        }
        self.config
            .output_size(d.h, d.w)
            .map_err(|e| Error::shape(format!("input {d} does not fit the architecture: {e}")))?;

        let cfg = &self.config;
        let stats = &mut self.stats;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut h = x;
        let mut skips = Vec::with_capacity(cfg.depth);
        for block in &self.encoder {
            h = apply_block(tape, block, vars, stats, h, cfg, mode)?;
            skips.push(h);
            h = tape.maxpool2(h)?;
        }
        h = apply_block(tape, &self.bottleneck, vars, stats, h, cfg, mode)?;
        for dec in &self.decoder {
            let up = tape.upsample2(h);
            let up = apply_unit(tape, &dec.up, vars, stats, up, cfg, mode)?;
            let ud = tape.dims(up);
            let skip = tape.crop_center(skips[dec.level], ud.h, ud.w)?;
            let skip = drop_connect(tape, skip, cfg.dropconnect_rate, mode, &mut rng)?;
            let sd = tape.dims(skip);
            if (sd.h, sd.w) != (ud.h, ud.w) {
                return Err(Error::shape(format!(
                    "skip {sd} and decoder map {ud} disagree at level {}",
                    dec.level
                )));
            }
            let cat = tape.concat_channels(skip, up)?;
            h = apply_block(tape, &dec.block, vars, stats, cat, cfg, mode)?;
        }
        tape.conv2d(h, vars[self.head.weight], vars[self.head.bias], Padding::Same)
    }

    /// Inference-mode logits for a batch.
    pub fn predict(&mut self, x: &Tensor4D) -> Result<Tensor4D> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let pass = self.forward(&mut tape, input, Mode::Eval, 0)?;
        Ok(tape.value(pass.logits).clone())
    }
}

fn apply_block(
    tape: &mut Tape,
    block: &Block,
    vars: &[Var],
    stats: &mut [NamedStats],
    x: Var,
    cfg: &NetworkConfig,
    mode: Mode,
) -> Result<Var> {
    let h = apply_unit(tape, &block.units[0], vars, stats, x, cfg, mode)?;
    apply_unit(tape, &block.units[1], vars, stats, h, cfg, mode)
}

/// conv → norm → activation
fn apply_unit(
    tape: &mut Tape,
    unit: &Unit,
    vars: &[Var],
    stats: &mut [NamedStats],
    x: Var,
    cfg: &NetworkConfig,
    mode: Mode,
) -> Result<Var> {
    let mut y = tape.conv2d(x, vars[unit.conv.weight], vars[unit.conv.bias], cfg.padding)?;
    if let Some(norm) = &unit.norm {
        let (gamma, beta) = (vars[norm.gamma], vars[norm.beta]);
        let running = || -> Result<usize> {
            norm.stats
                .ok_or_else(|| Error::State(format!("{} layer without running statistics", norm.kind)))
        };
        y = match norm.kind {
            NormKind::Batch => {
                let s = running()?;
                normalization::batch_norm(tape, y, gamma, beta, DEFAULT_EPSILON, &mut stats[s].stats, mode)?
            }
            NormKind::Layer => normalization::layer_norm(tape, y, gamma, beta, DEFAULT_EPSILON)?,
            NormKind::Instance => normalization::instance_norm(tape, y, gamma, beta, DEFAULT_EPSILON)?,
            NormKind::BatchInstance => {
                let s = running()?;
                let rho = norm
                    .rho
                    .ok_or_else(|| Error::State("batch-instance layer without a gate".into()))?;
                normalization::batch_instance_norm(
                    tape,
                    y,
                    gamma,
                    beta,
                    vars[rho],
                    DEFAULT_EPSILON,
                    &mut stats[s].stats,
                    mode,
                )?
            }
        };
    }
    Ok(match cfg.activation {
        Activation::Elu => tape.elu(y, 1.0),
        Activation::Relu => tape.relu(y),
    })
}

/// Element-wise drop-connect on a skip connection. In training mode each
/// element is zeroed with probability `rate` and survivors are scaled by
/// `1 / (1 − rate)`; in inference mode (or at rate 0) it is the identity.
pub fn drop_connect(tape: &mut Tape, skip: Var, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!(
            "drop-connect rate must lie in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(skip);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(skip).len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mask_mul(skip, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_keys_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.key().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn first_difference_names_field() {
        let a = NetworkConfig::desk();
        let mut b = a.clone();
        b.depth = 3;
        assert_eq!(a.first_difference(&b), Some("depth"));
        assert_eq!(a.first_difference(&a), None);
    }
}
