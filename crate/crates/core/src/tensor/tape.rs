use super::kernels::{conv_backward, conv_forward, ConvGeom};
use super::{Dims, Padding, Tensor4D};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axes over which standardization statistics are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatAxes {
    /// One group per channel, pooled over `(n, h, w)`.
    Batch,
    /// One group per sample, pooled over `(c, h, w)`.
    Layer,
    /// One group per `(n, c)` pair, pooled over `(h, w)`.
    Instance,
}

impl StatAxes {
    pub fn groups(self, dims: Dims) -> usize {
        match self {
            StatAxes::Batch => dims.c,
            StatAxes::Layer => dims.n,
            StatAxes::Instance => dims.n * dims.c,
        }
    }

    #[inline]
    fn group_of_plane(self, plane: usize, channels: usize) -> usize {
        match self {
            StatAxes::Batch => plane % channels,
            StatAxes::Layer => plane / channels,
            StatAxes::Instance => plane,
        }
    }
}

/// Per-group mean and biased variance measured by [`Tape::standardize`].
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Elu {
        input: Var,
        alpha: f64,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    MaskMul {
        input: Var,
        mask: Vec<f64>,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Standardize {
        input: Var,
        axes: StatAxes,
        inv_std: Vec<f64>,
    },
    FixedStandardize {
        input: Var,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    GateMix {
        a: Var,
        b: Var,
        rho: Var,
    },
    SoftDice {
        logits: Var,
        target: Vec<f64>,
        smooth: f64,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor4D,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node follows its inputs.
/// [`Tape::backward`] walks them once in reverse, adding gradient
/// contributions into every input that requires a gradient.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor4D, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor4D) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor4D) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor4D {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; `None` if no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, materialising zeros where nothing flowed.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    /// Clears all gradients so [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor4D, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<Dims> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(format!("{what}: operand dims {da} and {db} differ")));
        }
        Ok(da)
    }

    fn channel_vector(&self, v: Var, channels: usize, what: &str) -> Result<()> {
        let len = self.value(v).len();
        if len != channels {
            return Err(Error::shape(format!(
                "{what}: expected {channels} per-channel values, got {len}"
            )));
        }
        Ok(())
    }

    /// 2-D cross-correlation of `input [n,ci,h,w]` with `weight [co,ci,k,k]`
    /// plus a per-output-channel `bias`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        let d = self.dims(input);
        let wd = self.dims(weight);
        if wd.h != wd.w || wd.h == 0 {
            return Err(Error::shape(format!(
                "conv2d: kernel must be square and non-empty, got {wd}"
            )));
        }
        if wd.c != d.c {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels but weight {wd} expects {}",
                d.c, wd.c
            )));
        }
        self.channel_vector(bias, wd.n, "conv2d bias")?;
        let k = wd.h;
        let (Some(oh), Some(ow)) = (padding.output_extent(d.h, k), padding.output_extent(d.w, k)) else {
            return Err(Error::shape(format!(
                "conv2d: {k}x{k} valid kernel does not fit input {d}"
            )));
        };
        let geom = ConvGeom {
            ci: d.c,
            h: d.h,
            w: d.w,
            co: wd.n,
            k,
            pad_top: padding.leading(k),
            pad_left: padding.leading(k),
            oh,
            ow,
        };
        let out = conv_forward(
            &geom,
            d.n,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor4D::new(Dims::new(d.n, wd.n, oh, ow), out)?;
        Ok(self.push(
            value,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn elu(&mut self, input: Var, alpha: f64) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v.exp_m1() })
            .collect();
        let value = Tensor4D::new(x.dims(), data).expect("same length");
        self.push(value, &[input], Op::Elu { input, alpha })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor4D::new(x.dims(), data).expect("same length");
        self.push(value, &[input], Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor4D::new(x.dims(), data).expect("same length");
        self.push(value, &[input], Op::Sigmoid { input })
    }

    /// 2×2 non-overlapping max pooling. Ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input);
        if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
            return Err(Error::shape(format!("maxpool2: spatial dims of {d} must be even")));
        }
        let (oh, ow) = (d.h / 2, d.w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(d.planes() * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for p in 0..d.planes() {
            let base = p * d.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * d.w + 2 * ox;
                    for idx in [best + 1, best + d.w, best + d.w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor4D::new(Dims::new(d.n, d.c, oh, ow), out)?;
        Ok(self.push(value, &[input], Op::MaxPool2 { input, argmax }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let d = self.dims(input);
        let (oh, ow) = (d.h * 2, d.w * 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(d.planes() * oh * ow);
        for p in 0..d.planes() {
            let src = &x[p * d.plane()..(p + 1) * d.plane()];
            for oy in 0..oh {
                let row = &src[(oy / 2) * d.w..(oy / 2 + 1) * d.w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let value = Tensor4D::new(Dims::new(d.n, d.c, oh, ow), out).expect("consistent dims");
        self.push(value, &[input], Op::Upsample2 { input })
    }

    /// Central crop to `target_h × target_w`. An odd margin leaves the extra
    /// row (column) at the bottom (right).
    pub fn crop_center(&mut self, input: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let d = self.dims(input);
        if target_h > d.h || target_w > d.w {
            return Err(Error::shape(format!(
                "crop_center: target {target_h}x{target_w} exceeds source {d}"
            )));
        }
        let (top, left) = ((d.h - target_h) / 2, (d.w - target_w) / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(d.planes() * target_h * target_w);
        for p in 0..d.planes() {
            for y in top..top + target_h {
                let start = p * d.plane() + y * d.w + left;
                out.extend_from_slice(&x[start..start + target_w]);
            }
        }
        let value = Tensor4D::new(Dims::new(d.n, d.c, target_h, target_w), out)?;
        Ok(self.push(value, &[input], Op::Crop { input, top, left }))
    }

    /// Channel concatenation; channels of `a` precede those of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.n != db.n || da.h != db.h || da.w != db.w {
            return Err(Error::shape(format!(
                "concat_channels: {da} and {db} differ outside the channel axis"
            )));
        }
        let (pa, pb) = (da.c * da.plane(), db.c * db.plane());
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.n * (pa + pb));
        for n in 0..da.n {
            out.extend_from_slice(&xa[n * pa..(n + 1) * pa]);
            out.extend_from_slice(&xb[n * pb..(n + 1) * pb]);
        }
        let value = Tensor4D::new(Dims::new(da.n, da.c + db.c, da.h, da.w), out)?;
        Ok(self.push(value, &[a, b], Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.same_dims(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor4D::new(d, data)?, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.same_dims(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor4D::new(d, data)?, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let value = Tensor4D::new(x.dims(), x.data().iter().map(|v| v * factor).collect()).expect("same length");
        self.push(value, &[input], Op::Scale { input, factor })
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.len() {
            return Err(Error::shape(format!(
                "mask_mul: mask of {} values for {}",
                mask.len(),
                x.dims()
            )));
        }
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor4D::new(x.dims(), data)?;
        Ok(self.push(value, &[input], Op::MaskMul { input, mask }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor4D::scalar(s), &[input], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor4D::scalar(m), &[input], Op::Mean { input })
    }

    /// Standardizes `input` to zero mean and unit (biased) variance within
    /// each statistics group: `(x − μ) / √(σ² + ε)`. Returns the measured
    /// group statistics alongside the output.
    pub fn standardize(&mut self, input: Var, axes: StatAxes, eps: f64) -> Result<(Var, GroupStats)> {
        let d = self.dims(input);
        let groups = axes.groups(d);
        if groups == 0 || d.is_empty() {
            return Err(Error::DegenerateStatistics(format!("standardize: empty input {d}")));
        }
        let members = d.len() / groups;
        let x = self.value(input).data();
        let plane = d.plane();

        let mut mean = vec![0.0; groups];
        for (p, chunk) in x.chunks_exact(plane).enumerate() {
            mean[axes.group_of_plane(p, d.c)] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= members as f64);
        // Second pass corrects the rounding error of the first mean.
        let mut correction = vec![0.0; groups];
        let mut var = vec![0.0; groups];
        for (p, chunk) in x.chunks_exact(plane).enumerate() {
            let g = axes.group_of_plane(p, d.c);
            for &v in chunk {
                let dv = v - mean[g];
                correction[g] += dv;
                var[g] += dv * dv;
            }
        }
        for g in 0..groups {
            let delta = correction[g] / members as f64;
            mean[g] += delta;
            var[g] = (var[g] / members as f64 - delta * delta).max(0.0);
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(d.len());
        for (p, chunk) in x.chunks_exact(plane).enumerate() {
            let g = axes.group_of_plane(p, d.c);
            out.extend(chunk.iter().map(|&v| (v - mean[g]) * inv_std[g]));
        }
        let value = Tensor4D::new(d, out)?;
        let var_out = self.push(value, &[input], Op::Standardize { input, axes, inv_std });
        Ok((var_out, GroupStats { mean, var }))
    }

    /// Per-channel standardization with externally supplied statistics
    /// (inference-mode batch normalization).
    pub fn standardize_fixed(&mut self, input: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let d = self.dims(input);
        if mean.len() != d.c || var.len() != d.c {
            return Err(Error::shape(format!(
                "standardize_fixed: {} channels but statistics of length {}/{}",
                d.c,
                mean.len(),
                var.len()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(d.len());
        for (p, chunk) in x.chunks_exact(d.plane()).enumerate() {
            let c = p % d.c;
            out.extend(chunk.iter().map(|&v| (v - mean[c]) * inv_std[c]));
        }
        let value = Tensor4D::new(d, out)?;
        Ok(self.push(value, &[input], Op::FixedStandardize { input, inv_std }))
    }

    /// `gamma[c] · x + beta[c]`.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.dims(input);
        self.channel_vector(gamma, d.c, "channel_affine gamma")?;
        self.channel_vector(beta, d.c, "channel_affine beta")?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(d.len());
        for (p, chunk) in self.value(input).data().chunks_exact(d.plane()).enumerate() {
            let c = p % d.c;
            out.extend(chunk.iter().map(|&v| g[c] * v + b[c]));
        }
        let value = Tensor4D::new(d, out)?;
        Ok(self.push(value, &[input, gamma, beta], Op::ChannelAffine { input, gamma, beta }))
    }

    /// Per-channel convex blend `rho[c] · a + (1 − rho[c]) · b`.
    pub fn gate_mix(&mut self, a: Var, b: Var, rho: Var) -> Result<Var> {
        let d = self.same_dims(a, b, "gate_mix")?;
        self.channel_vector(rho, d.c, "gate_mix rho")?;
        let r = self.value(rho).data();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(d.len());
        for (p, (ca, cb)) in xa.chunks_exact(d.plane()).zip(xb.chunks_exact(d.plane())).enumerate() {
            let rc = r[p % d.c];
            out.extend(ca.iter().zip(cb).map(|(u, v)| rc * u + (1.0 - rc) * v));
        }
        let value = Tensor4D::new(d, out)?;
        Ok(self.push(value, &[a, b, rho], Op::GateMix { a, b, rho }))
    }

    /// Batch-mean soft Dice loss on sigmoid probabilities:
    /// `1 − (2Σp·t + s) / (Σp + Σt + s)` per sample.
    pub fn soft_dice_loss(&mut self, logits: Var, target: &Tensor4D, smooth: f64) -> Result<Var> {
        let d = self.dims(logits);
        if target.dims() != d {
            return Err(Error::shape(format!(
                "soft_dice_loss: logits {d} vs target {}",
                target.dims()
            )));
        }
        let per = d.len() / d.n.max(1);
        let x = self.value(logits).data();
        let mut total = 0.0;
        for n in 0..d.n {
            let (inter, psum, tsum) = dice_sums(&x[n * per..(n + 1) * per], &target.data()[n * per..(n + 1) * per]);
            total += 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
        }
        let value = Tensor4D::scalar(total / d.n as f64);
        Ok(self.push(
            value,
            &[logits],
            Op::SoftDice {
                logits,
                target: target.data().to_vec(),
                smooth,
            },
        ))
    }

    /// Mean binary cross-entropy on logits, computed in the overflow-safe form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor4D) -> Result<Var> {
        let d = self.dims(logits);
        if target.dims() != d {
            return Err(Error::shape(format!(
                "bce_with_logits: logits {d} vs target {}",
                target.dims()
            )));
        }
        let x = self.value(logits).data();
        let total: f64 = x
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        let value = Tensor4D::scalar(total / d.len() as f64);
        Ok(self.push(
            value,
            &[logits],
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Back-propagates from a scalar `loss`, accumulating into every node
    /// that requires a gradient. Gradients add across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".into()));
        }
        if self.dims(loss) != Dims::SCALAR {
            return Err(Error::shape(format!(
                "backward needs a (1,1,1,1) loss, got {}",
                self.dims(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.as_deref() else { continue };
            propagate(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

#[inline]
/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dice_sums(logits: &[f64], target: &[f64]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&l, &t) in logits.iter().zip(target) {
        let p = sigmoid(l);
        inter += p * t;
        psum += p;
        tsum += t;
    }
    (inter, psum, tsum)
}

/// Adds `contribution` into the gradient of `nodes[v]` if it wants one.
fn accumulate(nodes: &mut [Node], v: Var, contribution: Vec<f64>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Applies the backward rule of `op` given the output gradient `g`.
fn propagate(nodes: &mut [Node], op: &Op, out: &Tensor4D, g: &[f64]) {
    let d = out.dims();
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let want_input = wants(nodes, *input);
            let (gi, gw, gb) = conv_backward(
                geom,
                d.n,
                nodes[input.0].value.data(),
                nodes[weight.0].value.data(),
                g,
                want_input,
            );
            if want_input {
                accumulate(nodes, *input, gi);
            }
            accumulate(nodes, *weight, gw);
            accumulate(nodes, *bias, gb);
        }
        Op::Elu { input, alpha } => {
            let x = nodes[input.0].value.data();
            let gi = x
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { gv * alpha * v.exp() })
                .collect();
            accumulate(nodes, *input, gi);
        }
        Op::Relu { input } => {
            let x = nodes[input.0].value.data();
            let gi = x
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            accumulate(nodes, *input, gi);
        }
        Op::Sigmoid { input } => {
            let gi = out.data().iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
            accumulate(nodes, *input, gi);
        }
        Op::MaxPool2 { input, argmax } => {
            let mut gi = vec![0.0; nodes[input.0].value.len()];
            for (&idx, &gv) in argmax.iter().zip(g) {
                gi[idx] += gv;
            }
            accumulate(nodes, *input, gi);
        }
        Op::Upsample2 { input } => {
            let id = nodes[input.0].value.dims();
            let mut gi = vec![0.0; id.len()];
            for p in 0..id.planes() {
                let src = &g[p * d.plane()..(p + 1) * d.plane()];
                let dst = &mut gi[p * id.plane()..(p + 1) * id.plane()];
                for oy in 0..d.h {
                    for ox in 0..d.w {
                        dst[(oy / 2) * id.w + ox / 2] += src[oy * d.w + ox];
                    }
                }
            }
            accumulate(nodes, *input, gi);
        }
        Op::Crop { input, top, left } => {
            let id = nodes[input.0].value.dims();
            let mut gi = vec![0.0; id.len()];
            for p in 0..id.planes() {
                for y in 0..d.h {
                    let dst = p * id.plane() + (y + top) * id.w + left;
                    let src = p * d.plane() + y * d.w;
                    gi[dst..dst + d.w].copy_from_slice(&g[src..src + d.w]);
                }
            }
            accumulate(nodes, *input, gi);
        }
        Op::Concat { a, b } => {
            let (ca, cb) = (nodes[a.0].value.dims().c, nodes[b.0].value.dims().c);
            let (pa, pb) = (ca * d.plane(), cb * d.plane());
            let mut ga = Vec::with_capacity(d.n * pa);
            let mut gb = Vec::with_capacity(d.n * pb);
            for n in 0..d.n {
                let base = n * (pa + pb);
                ga.extend_from_slice(&g[base..base + pa]);
                gb.extend_from_slice(&g[base + pa..base + pa + pb]);
            }
            accumulate(nodes, *a, ga);
            accumulate(nodes, *b, gb);
        }
        Op::Add { a, b } => {
            accumulate(nodes, *a, g.to_vec());
            accumulate(nodes, *b, g.to_vec());
        }
        Op::Mul { a, b } => {
            let ga = g.iter().zip(nodes[b.0].value.data()).map(|(x, y)| x * y).collect();
            let gb = g.iter().zip(nodes[a.0].value.data()).map(|(x, y)| x * y).collect();
            accumulate(nodes, *a, ga);
            accumulate(nodes, *b, gb);
        }
        Op::Scale { input, factor } => {
            accumulate(nodes, *input, g.iter().map(|v| v * factor).collect());
        }
        Op::MaskMul { input, mask } => {
            accumulate(nodes, *input, g.iter().zip(mask).map(|(v, m)| v * m).collect());
        }
        Op::Sum { input } => {
            let len = nodes[input.0].value.len();
            accumulate(nodes, *input, vec![g[0]; len]);
        }
        Op::Mean { input } => {
            let len = nodes[input.0].value.len();
            accumulate(nodes, *input, vec![g[0] / len as f64; len]);
        }
        Op::Standardize { input, axes, inv_std } => {
            let groups = inv_std.len();
            let members = (d.len() / groups) as f64;
            let xhat = out.data();
            let mut sum_g = vec![0.0; groups];
            let mut sum_gx = vec![0.0; groups];
            for (p, (gc, xc)) in g.chunks_exact(d.plane()).zip(xhat.chunks_exact(d.plane())).enumerate() {
                let k = axes.group_of_plane(p, d.c);
                for (gv, xv) in gc.iter().zip(xc) {
                    sum_g[k] += gv;
                    sum_gx[k] += gv * xv;
                }
            }
            let mut gi = Vec::with_capacity(d.len());
            for (p, (gc, xc)) in g.chunks_exact(d.plane()).zip(xhat.chunks_exact(d.plane())).enumerate() {
                let k = axes.group_of_plane(p, d.c);
                let (mg, mgx) = (sum_g[k] / members, sum_gx[k] / members);
                gi.extend(gc.iter().zip(xc).map(|(gv, xv)| inv_std[k] * (gv - mg - xv * mgx)));
            }
            accumulate(nodes, *input, gi);
        }
        Op::FixedStandardize { input, inv_std } => {
            let mut gi = Vec::with_capacity(d.len());
            for (p, gc) in g.chunks_exact(d.plane()).enumerate() {
                let s = inv_std[p % d.c];
                gi.extend(gc.iter().map(|v| v * s));
            }
            accumulate(nodes, *input, gi);
        }
        Op::ChannelAffine { input, gamma, beta } => {
            let x = nodes[input.0].value.data();
            let gam = nodes[gamma.0].value.data();
            let mut gx = Vec::with_capacity(d.len());
            let mut gg = vec![0.0; d.c];
            let mut gb = vec![0.0; d.c];
            for (p, (gc, xc)) in g.chunks_exact(d.plane()).zip(x.chunks_exact(d.plane())).enumerate() {
                let c = p % d.c;
                for (gv, xv) in gc.iter().zip(xc) {
                    gg[c] += gv * xv;
                    gb[c] += gv;
                }
                gx.extend(gc.iter().map(|gv| gv * gam[c]));
            }
            accumulate(nodes, *input, gx);
            accumulate(nodes, *gamma, gg);
            accumulate(nodes, *beta, gb);
        }
        Op::GateMix { a, b, rho } => {
            let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let r = nodes[rho.0].value.data();
            let mut ga = Vec::with_capacity(d.len());
            let mut gb = Vec::with_capacity(d.len());
            let mut gr = vec![0.0; d.c];
            for (p, gc) in g.chunks_exact(d.plane()).enumerate() {
                let c = p % d.c;
                let base = p * d.plane();
                for (j, gv) in gc.iter().enumerate() {
                    gr[c] += gv * (xa[base + j] - xb[base + j]);
                }
                ga.extend(gc.iter().map(|gv| gv * r[c]));
                gb.extend(gc.iter().map(|gv| gv * (1.0 - r[c])));
            }
            accumulate(nodes, *a, ga);
            accumulate(nodes, *b, gb);
            accumulate(nodes, *rho, gr);
        }
        Op::SoftDice { logits, target, smooth } => {
            let ld = nodes[logits.0].value.dims();
            let x = nodes[logits.0].value.data();
            let per = ld.len() / ld.n;
            let mut gi = Vec::with_capacity(ld.len());
            for n in 0..ld.n {
                let (xs, ts) = (&x[n * per..(n + 1) * per], &target[n * per..(n + 1) * per]);
                let (inter, psum, tsum) = dice_sums(xs, ts);
                let num = 2.0 * inter + smooth;
                let den = psum + tsum + smooth;
                let scale = g[0] / ld.n as f64;
                gi.extend(xs.iter().zip(ts).map(|(&l, &t)| {
                    let p = sigmoid(l);
                    let dl_dp = -(2.0 * t * den - num) / (den * den);
                    scale * dl_dp * p * (1.0 - p)
                }));
            }
            accumulate(nodes, *logits, gi);
        }
        Op::BceWithLogits { logits, target } => {
            let x = nodes[logits.0].value.data();
            let scale = g[0] / x.len() as f64;
            let gi = x.iter().zip(target).map(|(&l, &t)| scale * (sigmoid(l) - t)).collect();
            accumulate(nodes, *logits, gi);
        }
    }
}
