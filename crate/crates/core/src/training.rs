//! Losses, optimizers, and the training / evaluation loops.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{augment_batch, AugPolicy};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, masks_to_tensor, Grayscale2D, MaskImage, Spacing};
use crate::metrics::{evaluate, EvalReport};
use crate::network::{Network, Param};
use crate::normalization::Mode;
use crate::seed;
use crate::tensor::{sigmoid, Tape, Tensor4D, Var};

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd_momentum|adam)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SoftDice,
    Bce,
    DicePlusBce,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::SoftDice => "soft_dice",
            LossKind::Bce => "bce",
            LossKind::DicePlusBce => "dice_plus_bce",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "soft_dice" => Ok(LossKind::SoftDice),
            "bce" => Ok(LossKind::Bce),
            "dice_plus_bce" => Ok(LossKind::DicePlusBce),
            other => Err(format!("unknown loss `{other}` (expected soft_dice|bce|dice_plus_bce)")),
        }
    }
}

/// Scalar training loss of `logits` against a 0/1 `target` of the same dims.
pub fn loss(tape: &mut Tape, logits: Var, target: &Tensor4D, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::SoftDice => tape.soft_dice_loss(logits, target, DICE_SMOOTH),
        LossKind::Bce => tape.bce_with_logits(logits, target),
        LossKind::DicePlusBce => {
            let d = tape.soft_dice_loss(logits, target, DICE_SMOOTH)?;
            let b = tape.bce_with_logits(logits, target)?;
            tape.add(d, b)
        }
    }
}

/// Heavy-ball SGD on one parameter: `v ← μv + g`, `x ← x − lr·v`.
pub fn sgd_step(x: &mut [f64], grad: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) {
    for ((x, &g), v) in x.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *x -= lr * *v;
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam on one parameter; `t` is the 1-based step count.
pub fn adam_step(x: &mut [f64], grad: &[f64], lr: f64, t: u32, m: &mut [f64], v: &mut [f64]) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..x.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        x[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPSILON);
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    t: u32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Optimizer {
            kind,
            lr,
            momentum,
            t: 0,
            first: zeros(),
            second: match kind {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::SgdMomentum => Vec::new(),
            },
        }
    }

    /// Applies one update. A non-finite gradient aborts before anything is
    /// modified, naming the offending parameter.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.value.len() {
                return Err(Error::shape(format!(
                    "{}: gradient has {} values, expected {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in {}[{i}]",
                    g[i], p.name
                )));
            }
        }
        self.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    sgd_step(p.value.data_mut(), g, self.lr, self.momentum, &mut self.first[i])
                }
                OptimizerKind::Adam => adam_step(
                    p.value.data_mut(),
                    g,
                    self.lr,
                    self.t,
                    &mut self.first[i],
                    &mut self.second[i],
                ),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Momentum coefficient for `sgd_momentum`.
    pub momentum: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub augmentation: AugPolicy,
    /// Probability threshold for binarizing predictions.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            max_steps: None,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            loss: LossKind::SoftDice,
            seed: 0,
            augmentation: AugPolicy::none(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(
                "threshold",
                format!("must lie in (0, 1), got {}", self.threshold),
            ));
        }
        self.augmentation.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the samples seen this epoch.
    pub loss: f64,
    /// Validation Dice at the configured threshold; NaN without a validation set.
    pub val_dice: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const CSV_HEADER: [&'static str; 4] = ["epoch", "loss", "val_dice", "seconds"];

    pub fn to_csv(&self) -> String {
        let mut out = Self::CSV_HEADER.join(",");
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.8},{:.6},{:.3}\n",
                e.epoch, e.loss, e.val_dice, e.seconds
            ));
        }
        out
    }

    /// Log with wall times zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochLog {
                    seconds: 0.0,
                    ..e.clone()
                })
                .collect(),
        }
    }
}

/// Image/mask pairs for training and (optional) validation.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<(Grayscale2D, MaskImage)>,
    pub val: Vec<(Grayscale2D, MaskImage)>,
}

/// Training stopped early; `network` holds the last finite state.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub network: Option<Network>,
    pub log: TrainLog,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted after {} epochs: {}",
            self.log.epochs.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure {
            error,
            network: None,
            log: TrainLog::default(),
        }
    }
}

/// Anything that maps an `[n, 1, h, w]` batch to logits.
pub trait Segmenter {
    fn logits(&mut self, x: &Tensor4D) -> Result<Tensor4D>;
}

impl Segmenter for Network {
    fn logits(&mut self, x: &Tensor4D) -> Result<Tensor4D> {
        self.predict(x)
    }
}

/// Masks cropped to the model's output window.
fn targets_for(masks: &[MaskImage], out_h: usize, out_w: usize) -> Result<Vec<MaskImage>> {
    masks
        .iter()
        .map(|m| {
            if (m.height(), m.width()) == (out_h, out_w) {
                Ok(m.clone())
            } else {
                m.crop_center(out_h, out_w)
            }
        })
        .collect()
}

/// Thresholded predictions for every image, evaluated `batch_size` at a time.
pub fn predict_masks(
    model: &mut impl Segmenter,
    images: &[Grayscale2D],
    threshold: f64,
    batch_size: usize,
) -> Result<Vec<MaskImage>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let logits = model.logits(&images_to_tensor(chunk)?)?;
        let d = logits.dims();
        if d.c != 1 || d.n != chunk.len() {
            return Err(Error::shape(format!("expected one logit map per image, got {d}")));
        }
        for i in 0..d.n {
            let probs: Vec<f64> = logits.plane(i, 0).iter().map(|&l| sigmoid(l)).collect();
            out.push(MaskImage::threshold(d.h, d.w, &probs, threshold)?);
        }
    }
    Ok(out)
}

/// Inference-mode evaluation: sigmoid, threshold, then [`evaluate`].
pub fn evaluate_model(
    model: &mut impl Segmenter,
    pairs: &[(Grayscale2D, MaskImage)],
    threshold: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty split".into()));
    }
    let images: Vec<Grayscale2D> = pairs.iter().map(|p| p.0.clone()).collect();
    let preds = predict_masks(model, &images, threshold, batch_size)?;
    let (h, w) = (preds[0].height(), preds[0].width());
    let truths: Vec<MaskImage> = targets_for(&pairs.iter().map(|p| p.1.clone()).collect::<Vec<_>>(), h, w)?;
    let spacing = pairs.first().map_or(Spacing::default(), |p| p.0.spacing());
    evaluate(&preds, &truths, spacing)
}

/// Trains `net` in place and returns it with the per-epoch log.
///
/// The run is a pure function of `(net, data, config)`: the training set is
/// augmented once up front with sub-seeds of `config.seed`, each epoch
/// visits it in an order shuffled by `derive(seed, 1, epoch)`, and step `s`
/// uses drop-connect seed `derive(seed, 2, s)`.
#[allow(clippy::result_large_err)]
pub fn train(
    mut net: Network,
    data: &TrainData,
    config: &TrainConfig,
) -> std::result::Result<(Network, TrainLog), TrainFailure> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()).into());
    }
    let train_set = augment_batch(&data.train, &config.augmentation, seed::derive(config.seed, 0, 0))?;
    let images: Vec<Grayscale2D> = train_set.iter().map(|p| p.0.clone()).collect();
    let x_all = images_to_tensor(&images)?;
    let (h, w) = (x_all.dims().h, x_all.dims().w);
    let (oh, ow) = net.config().output_size(h, w)?;
    let masks: Vec<MaskImage> = train_set.iter().map(|p| p.1.clone()).collect();
    let y_all = masks_to_tensor(&targets_for(&masks, oh, ow)?)?;

    let n = images.len();
    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        config.momentum,
        net.parameters(),
    );
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let step_cap = config.max_steps.unwrap_or(usize::MAX);

    for epoch in 0..config.epochs {
        if step >= step_cap {
            break;
        }
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
            config.seed,
            1,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            if step >= step_cap {
                break;
            }
            let fail = |error: Error, net: Network, log: &TrainLog| TrainFailure {
                error,
                network: Some(net),
                log: log.clone(),
            };
            let stats_before = net.running_stats().to_vec();
            let x = x_all.select_batch(batch).map_err(|e| fail(e, net.clone(), &log))?;
            let y = y_all.select_batch(batch).map_err(|e| fail(e, net.clone(), &log))?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let outcome = net
                .forward(&mut tape, xv, Mode::Train, seed::derive(config.seed, 2, step as u64))
                .and_then(|pass| {
                    let l = loss(&mut tape, pass.logits, &y, config.loss)?;
                    Ok((pass, l))
                });
            let (pass, l) = match outcome {
                Ok(v) => v,
                Err(e) => return Err(fail(e, net, &log)),
            };
            let value = tape.value(l).data()[0];
            if !value.is_finite() {
                net.running_stats_mut().clone_from_slice(&stats_before);
                let e = Error::Numeric(format!("loss became {value} at epoch {epoch}, step {step}"));
                return Err(fail(e, net, &log));
            }
            if let Err(e) = tape.backward(l) {
                return Err(fail(e, net, &log));
            }
            let grads: Vec<Vec<f64>> = pass.params.iter().map(|&v| tape.grad_or_zeros(v)).collect();
            drop(tape);
            if let Err(e) = optimizer.step(net.parameters_mut(), &grads) {
                net.running_stats_mut().clone_from_slice(&stats_before);
                return Err(fail(e, net, &log));
            }
            net.clamp_gates();
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let val_dice = if data.val.is_empty() {
            f64::NAN
        } else {
            match evaluate_model(&mut net, &data.val, config.threshold, config.batch_size) {
                Ok(r) => r.dice_mean,
                Err(e) => {
                    return Err(TrainFailure {
                        error: e,
                        network: Some(net),
                        log,
                    })
                }
            }
        };
        log.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            val_dice,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((net, log))
}
