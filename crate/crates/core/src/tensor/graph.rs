use super::kernels::{self, ConvGeometry, ConvTransposeGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvTransposeGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    ConcatChannels(Var, Var),
    SliceColumns {
        input: Var,
        start: usize,
    },
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    DiceLoss {
        pred: Var,
        target: Vec<f64>,
        smooth: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::MaxPool2d { input, .. } => vec![*input],
            Op::ChannelAffine { input, gamma, beta } => vec![*input, *gamma, *beta],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Sum(x) | Op::Scale(x, _) => vec![*x],
            Op::SliceColumns { input, .. } => vec![*input],
            Op::ConcatChannels(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::DiceLoss { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only tape of operations. Node order is creation order, so every
/// node's inputs precede it and a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn expect_rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        other => Err(Error::InvalidArgument(format!(
            "{op} expects a rank-4 NCHW tensor, got shape {other:?}"
        ))),
    }
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf tensor. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clears all accumulated gradients.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = self.any_grad(&op.inputs());
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, requires_grad, op)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let [n, cin, h, wd] = expect_rank4("conv2d", x)?;
        let [cout, wcin, kh, kw] = expect_rank4("conv2d weight", w)?;
        if wcin != cin {
            return Err(mismatch("conv2d", x, w));
        }
        if b.shape() != [cout] {
            return Err(mismatch("conv2d bias", w, b));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(mismatch("conv2d kernel larger than padded input", x, w));
        }
        let geometry = ConvGeometry {
            batch: n,
            in_channels: cin,
            height: h,
            width: wd,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            padding,
            stride,
        };
        let out = kernels::conv2d_forward(&geometry, x.data(), w.data(), b.data());
        Ok(self.push_op(
            geometry.output_shape().to_vec(),
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
        ))
    }

    /// Transposed convolution with weight layout `[cin, cout, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv_transpose2d stride must be positive".into(),
            ));
        }
        let (x, w) = (self.value(input), self.value(weight));
        let [n, cin, h, wd] = expect_rank4("conv_transpose2d", x)?;
        let [wcin, cout, kh, kw] = expect_rank4("conv_transpose2d weight", w)?;
        if wcin != cin {
            return Err(mismatch("conv_transpose2d", x, w));
        }
        let bias_data: &[f64] = match bias {
            Some(b) => {
                let b = self.value(b);
                if b.shape() != [cout] {
                    return Err(mismatch("conv_transpose2d bias", w, b));
                }
                b.data()
            }
            None => &[],
        };
        let geometry = ConvTransposeGeometry {
            batch: n,
            in_channels: cin,
            height: h,
            width: wd,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
        };
        let out = kernels::conv_transpose2d_forward(&geometry, x.data(), w.data(), bias_data);
        Ok(self.push_op(
            geometry.output_shape().to_vec(),
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geometry,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = expect_rank4("maxpool2d", x)?;
        if k == 0 {
            return Err(Error::InvalidArgument("pool size must be positive".into()));
        }
        if h % k != 0 {
            return Err(Error::NotDivisible {
                what: "pooled height",
                value: h,
                multiple: k,
            });
        }
        if w % k != 0 {
            return Err(Error::NotDivisible {
                what: "pooled width",
                value: w,
                multiple: k,
            });
        }
        let (out, argmax) = kernels::maxpool2d_forward([n, c, h, w], x.data(), k);
        Ok(self.push_op(vec![n, c, h / k, w / k], out, Op::MaxPool2d { input, argmax }))
    }

    /// `out[n,c,h,w] = gamma[n,c] * input[n,c,h,w] + beta[n,c]`.
    pub fn per_channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (x, g, b) = (self.value(input), self.value(gamma), self.value(beta));
        let [n, c, h, w] = expect_rank4("per_channel_affine", x)?;
        if g.shape() != [n, c] {
            return Err(mismatch("per_channel_affine gamma", x, g));
        }
        if b.shape() != [n, c] {
            return Err(mismatch("per_channel_affine beta", x, b));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(x.numel());
        for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
            let (gv, bv) = (g.data()[i], b.data()[i]);
            out.extend(chunk.iter().map(|v| gv * v + bv));
        }
        Ok(self.push_op(
            x.shape().to_vec(),
            out,
            Op::ChannelAffine { input, gamma, beta },
        ))
    }

    /// `input [n, din] x weight [dout, din]^T + bias [dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, din) = match x.shape() {
            &[n, d] => (n, d),
            _ => return Err(mismatch("linear", x, w)),
        };
        let dout = match w.shape() {
            &[o, d] if d == din => o,
            _ => return Err(mismatch("linear", x, w)),
        };
        if b.shape() != [dout] {
            return Err(mismatch("linear bias", w, b));
        }
        let mut out = Vec::with_capacity(n * dout);
        for row in x.data().chunks_exact(din) {
            for (o, wrow) in w.data().chunks_exact(din).enumerate() {
                let dot: f64 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
                out.push(dot + b.data()[o]);
            }
        }
        Ok(self.push_op(vec![n, dout], out, Op::Linear { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        self.push_op(x.shape().to_vec(), out, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        self.push_op(x.shape().to_vec(), out, Op::Sigmoid(input))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = expect_rank4("concat_channels", ta)?;
        let [nb, cb, hb, wb] = expect_rank4("concat_channels", tb)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(mismatch("concat_channels", ta, tb));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for i in 0..n {
            out.extend_from_slice(&ta.data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&tb.data()[i * lb..(i + 1) * lb]);
        }
        Ok(self.push_op(vec![n, ca + cb, h, w], out, Op::ConcatChannels(a, b)))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_columns(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, d) = match x.shape() {
            &[n, d] => (n, d),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "slice_columns expects a rank-2 tensor, got {other:?}"
                )))
            }
        };
        if len == 0 || start + len > d {
            return Err(Error::InvalidArgument(format!(
                "column range {start}..{} out of bounds for width {d}",
                start + len
            )));
        }
        let out = x
            .data()
            .chunks_exact(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push_op(vec![n, len], out, Op::SliceColumns { input, start }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push_op(vec![1], vec![total], Op::Sum(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        Ok(self.push_op(ta.shape().to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        Ok(self.push_op(ta.shape().to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|v| v * factor).collect();
        self.push_op(x.shape().to_vec(), out, Op::Scale(input, factor))
    }

    /// Smoothed soft Dice loss over all elements jointly:
    /// `1 - (2 sum(p t) + s) / (sum p + sum t + s)`.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor, smooth: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(mismatch("dice_loss", p, target));
        }
        let (inter, denom) = dice_sums(p.data(), target.data());
        let loss = 1.0 - (2.0 * inter + smooth) / (denom + smooth);
        Ok(self.push_op(
            vec![1],
            vec![loss],
            Op::DiceLoss {
                pred,
                target: target.data().to_vec(),
                smooth,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// node that requires them; call [`Graph::zero_grad`] between sweeps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads[loss.0], &[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.grads[i].take() else { continue };
            self.propagate(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn send(&mut self, target: Var, contribution: &[f64]) {
        if self.nodes[target.0].requires_grad {
            accumulate(&mut self.grads[target.0], contribution);
        }
    }

    fn propagate(&mut self, index: usize, grad: &[f64]) {
        let nodes = &self.nodes;
        let node = &nodes[index];
        let val = |v: Var| &nodes[v.0].value;
        let mut sends: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let (gi, gw, gb) = kernels::conv2d_backward(
                    geometry,
                    val(*input).data(),
                    val(*weight).data(),
                    grad,
                );
                sends.extend([(*input, gi), (*weight, gw), (*bias, gb)]);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let (gi, gw, gb) = kernels::conv_transpose2d_backward(
                    geometry,
                    val(*input).data(),
                    val(*weight).data(),
                    grad,
                );
                sends.extend([(*input, gi), (*weight, gw)]);
                if let Some(b) = bias {
                    sends.push((*b, gb));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; val(*input).numel()];
                for (&idx, &g) in argmax.iter().zip(grad) {
                    gi[idx] += g;
                }
                sends.push((*input, gi));
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let x = val(*input);
                let g = val(*gamma);
                let [_, _, h, w] = expect_rank4("per_channel_affine", x).unwrap();
                let plane = h * w;
                let mut gx = Vec::with_capacity(x.numel());
                let mut gg = Vec::with_capacity(g.numel());
                let mut gb = Vec::with_capacity(g.numel());
                for (i, (xc, gc)) in x
                    .data()
                    .chunks_exact(plane)
                    .zip(grad.chunks_exact(plane))
                    .enumerate()
                {
                    let gamma_v = g.data()[i];
                    gx.extend(gc.iter().map(|u| u * gamma_v));
                    gg.push(xc.iter().zip(gc).map(|(a, b)| a * b).sum());
                    gb.push(gc.iter().sum());
                }
                sends.extend([(*input, gx), (*gamma, gg), (*beta, gb)]);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let din = x.shape()[1];
                let dout = w.shape()[0];
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; w.numel()];
                let mut gb = vec![0.0; dout];
                for (r, (xrow, grow)) in x
                    .data()
                    .chunks_exact(din)
                    .zip(grad.chunks_exact(dout))
                    .enumerate()
                {
                    for (o, &g) in grow.iter().enumerate() {
                        gb[o] += g;
                        let wrow = &w.data()[o * din..(o + 1) * din];
                        for k in 0..din {
                            gx[r * din + k] += g * wrow[k];
                            gw[o * din + k] += g * xrow[k];
                        }
                    }
                }
                sends.extend([(*input, gx), (*weight, gw), (*bias, gb)]);
            }
            Op::Relu(x) => {
                let gi = val(*x)
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                sends.push((*x, gi));
            }
            Op::Sigmoid(x) => {
                let gi = node
                    .value
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                sends.push((*x, gi));
            }
            Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = expect_rank4("concat", val(*a)).unwrap();
                let cb = val(*b).shape()[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for chunk in grad.chunks_exact(la + lb) {
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                sends.extend([(*a, ga), (*b, gb)]);
            }
            Op::SliceColumns { input, start } => {
                let x = val(*input);
                let d = x.shape()[1];
                let len = node.value.shape()[1];
                let mut gi = vec![0.0; x.numel()];
                for (row, grow) in gi.chunks_exact_mut(d).zip(grad.chunks_exact(len)) {
                    row[*start..*start + len].copy_from_slice(grow);
                }
                sends.push((*input, gi));
            }
            Op::Sum(x) => {
                sends.push((*x, vec![grad[0]; val(*x).numel()]));
            }
            Op::Add(a, b) => {
                sends.extend([(*a, grad.to_vec()), (*b, grad.to_vec())]);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let ga = grad.iter().zip(tb).map(|(g, y)| g * y).collect();
                let gb = grad.iter().zip(ta).map(|(g, x)| g * x).collect();
                sends.extend([(*a, ga), (*b, gb)]);
            }
            Op::Scale(x, factor) => {
                sends.push((*x, grad.iter().map(|g| g * factor).collect()));
            }
            Op::DiceLoss {
                pred,
                target,
                smooth,
            } => {
                let p = val(*pred).data();
                let (inter, denom) = dice_sums(p, target);
                let num = 2.0 * inter + smooth;
                let den = denom + smooth;
                let g = grad[0];
                let gi = target
                    .iter()
                    .map(|&t| -g * (2.0 * t * den - num) / (den * den))
                    .collect();
                sends.push((*pred, gi));
            }
        }
        for (target, contribution) in sends {
            self.send(target, &contribution);
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution.to_vec()),
    }
}

/// `(sum(p t), sum(p) + sum(t))`.
pub(crate) fn dice_sums(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        denom += p + t;
    }
    (inter, denom)
}
