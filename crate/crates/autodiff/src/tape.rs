//! Reverse-mode gradient tape.
//!
//! Every primitive appends one record holding its output value, its input
//! variables and whatever attributes the backward pass needs. Records are
//! only ever appended, so each record's inputs precede it and a reverse
//! sweep over the list is a valid topological order.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry, DeconvGeometry, PoolGeometry};
use crate::tensor::{neumaier_sum, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sqrt(Var),
    Relu(Var),
    Sum(Var),
    SumLastAxis(Var),
    Reshape(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    TransposedConv2d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    MaxPool {
        input: Var,
        window: usize,
        stride: usize,
        padding: usize,
        argmax: Arc<[usize]>,
    },
    FullyConnected {
        input: Var,
        weights: Var,
        bias: Var,
    },
    NllLoss {
        probs: Var,
        labels: Arc<[usize]>,
        eps: f64,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::SumLastAxis(..) => "sum_last_axis",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::Crop { .. } => "crop",
            Op::Conv2d { .. } => "conv2d",
            Op::TransposedConv2d { .. } => "transposed_conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::FullyConnected { .. } => "fully_connected",
            Op::NllLoss { .. } => "nll_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::SumLastAxis(a)
            | Op::Reshape(a)
            | Op::Softmax(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Crop { input, .. } => vec![*input],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::TransposedConv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::MaxPool { input, .. } => vec![*input],
            Op::FullyConnected {
                input,
                weights,
                bias,
            } => vec![*input, *weights, *bias],
            Op::NllLoss { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Read-only view of one tape record.
#[derive(Debug, Clone)]
pub struct Record<'a> {
    pub output: Var,
    pub kind: &'static str,
    pub inputs: Vec<Var>,
    pub value: &'a Tensor,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    clamped_log_terms: usize,
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

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Number of target probabilities that fell below the log clamp in
    /// `nll_loss` calls so far.
    pub fn clamped_log_terms(&self) -> usize {
        self.clamped_log_terms
    }

    pub fn records(&self) -> impl Iterator<Item = Record<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| Record {
            output: Var(i),
            kind: n.op.kind(),
            inputs: n.op.inputs(),
            value: &n.value,
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(var.0))
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.any_grad(&op.inputs());
        self.push(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.record(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.record(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.record(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * factor);
        Ok(self.record(v, Op::Scale(a, factor)))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x + offset);
        Ok(self.record(v, Op::AddScalar(a, offset)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f64::sqrt);
        Ok(self.record(v, Op::Sqrt(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| if x.is_nan() { x } else { x.max(0.0) });
        Ok(self.record(v, Op::Relu(a)))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum());
        Ok(self.record(v, Op::Sum(a)))
    }

    /// Sums out the last axis: `[.., n] -> [..]`.
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let Some((&n, lead)) = t.shape().split_last() else {
            return Err(TensorError::Rank {
                expected: 1,
                shape: Vec::new(),
            });
        };
        let data: Vec<f64> = if n == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            t.data().chunks_exact(n).map(|c| neumaier_sum(c.iter().copied())).collect()
        };
        let v = Tensor::new(lead.to_vec(), data)?;
        Ok(self.record(v, Op::SumLastAxis(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(a)))
    }

    /// Softmax over the last (channel) axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let classes = *t.shape().last().ok_or(TensorError::Rank {
            expected: 1,
            shape: Vec::new(),
        })?;
        if classes == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: "zero classes".into(),
            });
        }
        let v = Tensor::new(t.shape().to_vec(), kernels::softmax_last_axis(t.data(), classes))?;
        Ok(self.record(v, Op::Softmax(a)))
    }

    /// Concatenates `[h, w, c_i]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        for &p in parts {
            self.check(p)?;
        }
        let (h, w, _) = self.value(first).hwc()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = self.value(p).hwc()?;
            if (ph, pw) != (h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[px * c..(px + 1) * c]);
            }
        }
        let v = Tensor::new([h, w, total], data)?;
        Ok(self.record(v, Op::Concat(parts.to_vec())))
    }

    /// Spatial window `[top..top+height, left..left+width]` of an `[h, w, c]` map.
    pub fn crop(&mut self, a: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let (h, w, c) = t.hwc()?;
        if top + height > h || left + width > w {
            return Err(TensorError::InvalidArgument {
                op: "crop",
                reason: format!("window {height}x{width} at ({top},{left}) exceeds {h}x{w}"),
            });
        }
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let row = (y * w + left) * c;
            data.extend_from_slice(&t.data()[row..row + width * c]);
        }
        let v = Tensor::new([height, width, c], data)?;
        Ok(self.record(v, Op::Crop { input: a, top, left }))
    }

    /// Cross-correlation of an `[h, w, c_in]` map with a `[k, k, c_in, c_out]`
    /// kernel plus a `[c_out]` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let (g, co) = self.conv_geometry(input, kernel, bias, stride, padding)?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &g,
            co,
        );
        let v = Tensor::new([g.out_height(), g.out_width(), co], out)?;
        Ok(self.record(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    fn conv_geometry(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<(ConvGeometry, usize)> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (h, w, ci) = x.hwc()?;
        let &[kh, kw, kci, co] = k.shape() else {
            return Err(TensorError::Rank {
                expected: 4,
                shape: k.shape().to_vec(),
            });
        };
        if kh != kw {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel must be square, got {kh}x{kw}"),
            });
        }
        if kci != ci {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if self.value(bias).shape() != [co] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: k.shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        if kh == 0 || kh > h + 2 * padding || kh > w + 2 * padding {
            return Err(TensorError::Window {
                op: "conv2d",
                window: kh,
                height: h + 2 * padding,
                width: w + 2 * padding,
            });
        }
        Ok((
            ConvGeometry {
                height: h,
                width: w,
                in_channels: ci,
                kernel: kh,
                stride,
                padding,
            },
            co,
        ))
    }

    /// Scatter-form transposed convolution (the adjoint of a strided
    /// `conv2d` with zero padding): output side is `(n - 1) * stride + k`.
    pub fn transposed_conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let g = self.deconv_geometry(input, kernel, stride)?;
        let out = kernels::transposed_conv2d_forward(self.value(input).data(), self.value(kernel).data(), &g);
        let v = Tensor::new([g.out_height(), g.out_width(), g.out_channels], out)?;
        Ok(self.record(v, Op::TransposedConv2d { input, kernel, stride }))
    }

    fn deconv_geometry(&self, input: Var, kernel: Var, stride: usize) -> Result<DeconvGeometry> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (h, w, ci) = x.hwc()?;
        let &[kh, kw, kci, co] = k.shape() else {
            return Err(TensorError::Rank {
                expected: 4,
                shape: k.shape().to_vec(),
            });
        };
        if kh != kw || kh == 0 {
            return Err(TensorError::InvalidArgument {
                op: "transposed_conv2d",
                reason: format!("kernel must be square and nonempty, got {kh}x{kw}"),
            });
        }
        if kci != ci {
            return Err(TensorError::ShapeMismatch {
                op: "transposed_conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if h == 0 || w == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "transposed_conv2d",
                reason: "input must be nonempty and stride positive".into(),
            });
        }
        Ok(DeconvGeometry {
            height: h,
            width: w,
            in_channels: ci,
            out_channels: co,
            kernel: kh,
            stride,
        })
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        self.check(input)?;
        let (h, w, c) = self.value(input).hwc()?;
        if window == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2d",
                reason: "window and stride must be positive".into(),
            });
        }
        if window > h + 2 * padding || window > w + 2 * padding {
            return Err(TensorError::Window {
                op: "maxpool2d",
                window,
                height: h + 2 * padding,
                width: w + 2 * padding,
            });
        }
        if padding >= window {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2d",
                reason: format!("padding {padding} must be smaller than window {window}"),
            });
        }
        let g = PoolGeometry {
            height: h,
            width: w,
            channels: c,
            window,
            stride,
            padding,
        };
        let (out, argmax) = kernels::maxpool_forward(self.value(input).data(), &g);
        let v = Tensor::new([g.out_height(), g.out_width(), c], out)?;
        Ok(self.record(
            v,
            Op::MaxPool {
                input,
                window,
                stride,
                padding,
                argmax: argmax.into(),
            },
        ))
    }

    /// Affine map `W x + b` with `W: [out, in]`, `x` flattened to `in`.
    pub fn fully_connected(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        for v in [input, weights, bias] {
            self.check(v)?;
        }
        let x = self.value(input);
        let wt = self.value(weights);
        let &[out, inner] = wt.shape() else {
            return Err(TensorError::Rank {
                expected: 2,
                shape: wt.shape().to_vec(),
            });
        };
        if inner != x.len() {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        if self.value(bias).shape() != [out] {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected bias",
                lhs: wt.shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let mut y = self.value(bias).to_vec();
        kernels::gemm(out, inner, 1, wt.data(), false, x.data(), false, &mut y, 1.0);
        let v = Tensor::new([out], y)?;
        Ok(self.record(
            v,
            Op::FullyConnected {
                input,
                weights,
                bias,
            },
        ))
    }

    /// Mean negative log-likelihood `-(1/|Z|) sum_z log p(z, label_z)` of a
    /// `[.., classes]` probability map. Probabilities under `eps` are clamped
    /// to `eps`; the clamp is counted in [`Tape::clamped_log_terms`] and
    /// passes no gradient.
    pub fn nll_loss(&mut self, probs: Var, labels: &[usize], eps: f64) -> Result<Var> {
        self.check(probs)?;
        let p = self.value(probs);
        let classes = *p.shape().last().unwrap_or(&0);
        if classes == 0 || p.len() != labels.len() * classes {
            return Err(TensorError::ShapeMismatch {
                op: "nll_loss",
                lhs: p.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::InvalidArgument {
                op: "nll_loss",
                reason: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let mut total = 0.0;
        let mut clamped = 0;
        for (z, &l) in labels.iter().enumerate() {
            let q = p.data()[z * classes + l];
            if q < eps {
                clamped += 1;
            }
            total -= if q.is_nan() { q } else { q.max(eps).ln() };
        }
        self.clamped_log_terms += clamped;
        let v = Tensor::scalar(total / labels.len() as f64);
        Ok(self.record(
            v,
            Op::NllLoss {
                probs,
                labels: labels.into(),
                eps,
            },
        ))
    }

    /// Recomputes every record from the recorded leaves and attributes.
    pub fn replay(&self) -> Result<Tape> {
        let mut out = Tape::new();
        for node in &self.nodes {
            match &node.op {
                Op::Leaf => {
                    out.leaf(node.value.clone());
                }
                Op::Constant => {
                    out.constant(node.value.clone());
                }
                Op::Add(a, b) => {
                    out.add(*a, *b)?;
                }
                Op::Sub(a, b) => {
                    out.sub(*a, *b)?;
                }
                Op::Mul(a, b) => {
                    out.mul(*a, *b)?;
                }
                Op::Scale(a, f) => {
                    out.scale(*a, *f)?;
                }
                Op::AddScalar(a, f) => {
                    out.add_scalar(*a, *f)?;
                }
                Op::Sqrt(a) => {
                    out.sqrt(*a)?;
                }
                Op::Relu(a) => {
                    out.relu(*a)?;
                }
                Op::Sum(a) => {
                    out.sum(*a)?;
                }
                Op::SumLastAxis(a) => {
                    out.sum_last_axis(*a)?;
                }
                Op::Reshape(a) => {
                    out.reshape(*a, node.value.shape().to_vec())?;
                }
                Op::Softmax(a) => {
                    out.softmax(*a)?;
                }
                Op::Concat(parts) => {
                    out.concat_channels(parts)?;
                }
                Op::Crop { input, top, left } => {
                    let (h, w, _) = node.value.hwc()?;
                    out.crop(*input, *top, *left, h, w)?;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    out.conv2d(*input, *kernel, *bias, *stride, *padding)?;
                }
                Op::TransposedConv2d { input, kernel, stride } => {
                    out.transposed_conv2d(*input, *kernel, *stride)?;
                }
                Op::MaxPool {
                    input,
                    window,
                    stride,
                    padding,
                    ..
                } => {
                    out.maxpool2d(*input, *window, *stride, *padding)?;
                }
                Op::FullyConnected {
                    input,
                    weights,
                    bias,
                } => {
                    out.fully_connected(*input, *weights, *bias)?;
                }
                Op::NllLoss { probs, labels, eps } => {
                    out.nll_loss(*probs, labels, *eps)?;
                }
            }
        }
        Ok(out)
    }

    /// Backpropagates from a scalar `loss`, returning `d loss / d v` for every
    /// recorded value that requires a gradient and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let values = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { values })
    }

    fn propagate(&self, index: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[index];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut accumulate = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(*a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(*a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    accumulate(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    accumulate(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => accumulate(*a, g.iter().map(|v| v * f).collect()),
            Op::AddScalar(a, _) => accumulate(*a, g.to_vec()),
            Op::Sqrt(a) => {
                let y = node.value.data();
                accumulate(*a, g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                accumulate(*a, g.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect());
            }
            Op::Sum(a) => accumulate(*a, vec![g[0]; self.value(*a).len()]),
            Op::SumLastAxis(a) => {
                let n = *self.value(*a).shape().last().unwrap();
                let mut d = Vec::with_capacity(self.value(*a).len());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv, n));
                }
                accumulate(*a, d);
            }
            Op::Reshape(a) => accumulate(*a, g.to_vec()),
            Op::Softmax(a) => {
                let y = node.value.data();
                let classes = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((yc, gc), dc) in y
                    .chunks_exact(classes)
                    .zip(g.chunks_exact(classes))
                    .zip(d.chunks_exact_mut(classes))
                {
                    let dot: f64 = yc.iter().zip(gc).map(|(y, g)| y * g).sum();
                    for ((dv, &yv), &gv) in dc.iter_mut().zip(yc).zip(gc) {
                        *dv = yv * (gv - dot);
                    }
                }
                accumulate(*a, d);
            }
            Op::Concat(parts) => {
                let (h, w, total) = node.value.hwc().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).hwc().unwrap().2;
                    if needs(p) {
                        let mut d = Vec::with_capacity(h * w * c);
                        for px in 0..h * w {
                            d.extend_from_slice(&g[px * total + offset..px * total + offset + c]);
                        }
                        accumulate(p, d);
                    }
                    offset += c;
                }
            }
            Op::Crop { input, top, left } => {
                let (h, w, c) = self.value(*input).hwc().unwrap();
                let (ch, cw, _) = node.value.hwc().unwrap();
                let mut d = vec![0.0; h * w * c];
                for y in 0..ch {
                    let dst = ((y + top) * w + left) * c;
                    d[dst..dst + cw * c].copy_from_slice(&g[y * cw * c..(y + 1) * cw * c]);
                }
                accumulate(*input, d);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (geom, co) = self
                    .conv_geometry(*input, *kernel, *bias, *stride, *padding)
                    .expect("validated at record time");
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    &geom,
                    co,
                    [needs(*input), needs(*kernel), needs(*bias)],
                );
                if let Some(d) = cg.input {
                    accumulate(*input, d);
                }
                if let Some(d) = cg.kernel {
                    accumulate(*kernel, d);
                }
                if let Some(d) = cg.bias {
                    accumulate(*bias, d);
                }
            }
            Op::TransposedConv2d { input, kernel, stride } => {
                let geom = self
                    .deconv_geometry(*input, *kernel, *stride)
                    .expect("validated at record time");
                let (dx, dk) = kernels::transposed_conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    &geom,
                    [needs(*input), needs(*kernel)],
                );
                if let Some(d) = dx {
                    accumulate(*input, d);
                }
                if let Some(d) = dk {
                    accumulate(*kernel, d);
                }
            }
            Op::MaxPool { input, argmax, .. } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                accumulate(*input, d);
            }
            Op::FullyConnected {
                input,
                weights,
                bias,
            } => {
                let x = self.value(*input).data();
                let wt = self.value(*weights);
                let (out, inner) = (wt.shape()[0], wt.shape()[1]);
                if needs(*input) {
                    let mut dx = vec![0.0; inner];
                    kernels::gemm(inner, out, 1, wt.data(), true, g, false, &mut dx, 0.0);
                    accumulate(*input, dx);
                }
                if needs(*weights) {
                    let mut dw = vec![0.0; out * inner];
                    kernels::gemm(out, 1, inner, g, false, x, false, &mut dw, 0.0);
                    accumulate(*weights, dw);
                }
                if needs(*bias) {
                    accumulate(*bias, g.to_vec());
                }
            }
            Op::NllLoss { probs, labels, eps } => {
                let p = self.value(*probs);
                let classes = *p.shape().last().unwrap();
                let scale = g[0] / labels.len() as f64;
                let mut d = vec![0.0; p.len()];
                for (z, &l) in labels.iter().enumerate() {
                    let q = p.data()[z * classes + l];
                    if q >= *eps {
                        d[z * classes + l] = -scale / q;
                    }
                }
                accumulate(*probs, d);
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    values: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.values.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, materializing zeros when unreachable.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}
