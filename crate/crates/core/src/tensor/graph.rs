use crate::error::{Error, Result};

use super::kernels;
use super::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside the graph module.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in input order. `None` means
    /// the input receives nothing.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv2d { input: Var, kernel: Var, pad: (usize, usize) },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    LeakyRelu { input: Var, slope: T },
    Add(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, weight: Var },
    ConcatChannels { inputs: Vec<Var> },
    Sum { input: Var },
    Mean { input: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::MaxPool2d { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::Sum { input }
            | Op::Mean { input } => vec![*input],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { input, weight } => vec![*input, *weight],
            Op::ConcatChannels { inputs } | Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// A tape of recorded operations. Nodes are appended in evaluation order,
/// which is a topological order, and [`Graph::backward`] walks it in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`]. Gradients of
    /// interior nodes are released as the backward sweep passes them.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name(), pass: "forward" });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: (usize, usize)) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(kernel), pad)?;
        self.push(out, Op::Conv2d { input, kernel, pad })
    }

    /// Convolution with "same" padding; kernel extents must be odd.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let ks = self.value(kernel).shape();
        if ks.len() != 4 || ks[2].is_multiple_of(2) || ks[3].is_multiple_of(2) {
            return Err(Error::Shape(format!("same-padded conv2d needs odd kernel extents, got {ks:?}")));
        }
        let pad = (ks[2] / 2, ks[3] / 2);
        self.conv2d(input, kernel, pad)
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d(self.value(input), window)?;
        self.push(out, Op::MaxPool2d { input, argmax })
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { slope * v }).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::LeakyRelu { input, slope })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Matrix product over the last axis; no bias.
    pub fn affine(&mut self, input: Var, weight: Var) -> Result<Var> {
        let out = kernels::affine(self.value(input), self.value(weight))?;
        self.push(out, Op::Affine { input, weight })
    }

    /// Concatenate `[n, c_i, ...]` tensors along axis 1.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.len() < 2 {
            return Err(Error::Shape(format!("concat_channels needs >=2 axes, got {s0:?}")));
        }
        let outer = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut channels = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != s0.len() || s[0] != outer || s[2..] != s0[2..] {
                return Err(Error::Shape(format!("concat_channels: {s:?} incompatible with {s0:?}")));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(outer * channels * inner);
        for n in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[n * block..(n + 1) * block]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::ConcatChannels { inputs: inputs.to_vec() })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: T = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s: T = x.data().iter().copied().sum();
        let m = s / T::of(x.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean { input })
    }

    /// Record an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Reverse sweep from a scalar `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else { continue };
            let contributions = self.node_backward(idx, &grad)?;
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: self.nodes[idx].op.name(), pass: "backward" });
                }
                match &mut self.nodes[var.0].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, grad: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, pad } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                if wants(*input) {
                    out.push((*input, kernels::conv2d_grad_input(x.shape(), k, *pad, grad)?));
                }
                if wants(*kernel) {
                    out.push((*kernel, kernels::conv2d_grad_kernel(x, k.shape(), *pad, grad)?));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&src, &g) in argmax.iter().zip(grad) {
                    dx[src] += g;
                }
                out.push((*input, dx));
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let dx = x.iter().zip(grad).map(|(&v, &g)| if v > T::zero() { g } else { *slope * g }).collect();
                out.push((*input, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, grad.to_vec()));
                out.push((*b, grad.to_vec()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    out.push((*a, grad.iter().zip(y).map(|(&g, &q)| g * q).collect()));
                }
                if wants(*b) {
                    out.push((*b, grad.iter().zip(x).map(|(&g, &p)| g * p).collect()));
                }
            }
            Op::Affine { input, weight } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
                let rows = x.numel() / d_in;
                if wants(*input) {
                    let mut dx = vec![T::zero(); x.numel()];
                    kernels::gemm(rows, d_out, d_in, T::one(), grad, false, w.data(), true, T::zero(), &mut dx);
                    out.push((*input, dx));
                }
                if wants(*weight) {
                    let mut dw = vec![T::zero(); w.numel()];
                    kernels::gemm(d_in, rows, d_out, T::one(), x.data(), true, grad, false, T::zero(), &mut dw);
                    out.push((*weight, dw));
                }
            }
            Op::ConcatChannels { inputs } => {
                let s = node.value.shape();
                let outer = s[0];
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                for v in inputs {
                    let block = self.value(*v).shape()[1] * inner;
                    if wants(*v) {
                        let mut dx = Vec::with_capacity(outer * block);
                        for n in 0..outer {
                            dx.extend_from_slice(&grad[n * total + offset..n * total + offset + block]);
                        }
                        out.push((*v, dx));
                    }
                    offset += block;
                }
            }
            Op::Sum { input } => {
                out.push((*input, vec![grad[0]; self.value(*input).numel()]));
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                out.push((*input, vec![grad[0] / T::of(n as f64); n]));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, &node.value, grad)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Shape(format!("{} returned {} gradients for {} inputs", op.name(), grads.len(), inputs.len())));
                }
                for (v, g) in inputs.iter().zip(grads) {
                    if let Some(g) = g {
                        if g.len() != self.value(*v).numel() {
                            return Err(Error::Shape(format!("{} gradient has wrong length", op.name())));
                        }
                        out.push((*v, g));
                    }
                }
            }
        }
        Ok(out)
    }
}
