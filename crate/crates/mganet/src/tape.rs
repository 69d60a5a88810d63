//! Reverse-mode autodiff over the operation set in [`crate::ops`].
//!
//! A [`Tape`] is a per-forward-pass Wengert list: values are computed
//! eagerly by the pure ops, the op descriptor is recorded, and
//! [`Tape::backward`] replays the list once in reverse. Construction order
//! is topological by definition (an op can only reference already-inserted
//! nodes), and tapes are confined to one logical thread and dropped after
//! use.

use crate::error::{Error, Result};
use crate::ops::{self, Activation, Padding};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        padding: Padding,
        /// Activation fused onto the conv output (one node instead of two).
        act: Activation,
    },
    TConv2d { x: NodeId, w: NodeId, stride: (usize, usize) },
    PoolAvg { x: NodeId, window: (usize, usize) },
    PoolGlobal { x: NodeId },
    Activation { x: NodeId, kind: Activation },
    Softmax { x: NodeId, axis: usize },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MaskMul { x: NodeId, mask: NodeId },
    Concat { xs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Reshape { x: NodeId },
    Sum { x: NodeId },
    Scale { x: NodeId, c: T },
    CrossEntropyLogits { logits: NodeId, class: usize },
    BceLogits { z: NodeId, targets: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-forward-pass recording of operations, in topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Inserts a leaf tensor. Only leaves with `requires_grad` (and nodes
    /// derived from them) participate in backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never needs a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<NodeId> {
        self.conv2d_act(x, w, b, stride, padding, Activation::Identity)
    }

    /// Convolution with a fused elementwise activation on the output.
    pub fn conv2d_act(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        padding: Padding,
        act: Activation,
    ) -> Result<NodeId> {
        let mut value = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        if act != Activation::Identity {
            value = ops::activation(&value, act);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, padding, act }, rg))
    }

    pub fn transposed_conv2d(&mut self, x: NodeId, w: NodeId, stride: (usize, usize)) -> Result<NodeId> {
        let value = ops::transposed_conv2d(self.value(x), self.value(w), stride)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::TConv2d { x, w, stride }, rg))
    }

    pub fn pool_avg(&mut self, x: NodeId, window: (usize, usize)) -> Result<NodeId> {
        let value = ops::pool_avg(self.value(x), window)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::PoolAvg { x, window }, rg))
    }

    pub fn pool_global_avg(&mut self, x: NodeId) -> Result<NodeId> {
        let value = ops::pool_global_avg(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::PoolGlobal { x }, rg))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let value = ops::activation(self.value(x), kind);
        let rg = self.rg(x);
        self.push(value, Op::Activation { x, kind }, rg)
    }

    pub fn softmax_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = ops::softmax_axis(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Adds a bias vector over the last axis of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("bias {:?} vs last axis of {:?}", self.shape(b), self.shape(x)),
            });
        }
        let bd = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bd[i % c];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddBias { x, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn mask_mul(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let value = ops::mask_mul(self.value(x), self.value(mask))?;
        let rg = self.rg(x) || self.rg(mask);
        Ok(self.push(value, Op::MaskMul { x, mask }, rg))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|&id| self.value(id)).collect();
        let value = ops::concat(&tensors, axis)?;
        let rg = xs.iter().any(|&id| self.rg(id));
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let value = ops::slice(self.value(x), axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let value = self.value(x).reshaped(shape);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Sum of all elements, as a `[1]` scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Affine layer on a flat vector: reshape → matmul → bias.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let m = match self.shape(w) {
            [wn, m] if *wn == n => *m,
            s => {
                return Err(Error::Shape {
                    op: "dense",
                    detail: format!("x {:?} vs w {s:?}", self.shape(x)),
                })
            }
        };
        let row = self.reshape(x, &[1, n])?;
        let prod = self.matmul(row, w)?;
        let biased = self.add_bias(prod, b)?;
        self.reshape(biased, &[m])
    }

    /// Stable fused cross-entropy against a single class index.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, class: usize) -> Result<NodeId> {
        let value = Tensor::scalar(ops::cross_entropy_from_logits(self.value(logits), class)?);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropyLogits { logits, class }, rg))
    }

    /// Stable fused mean binary cross-entropy of sigmoid logits against soft
    /// targets.
    pub fn bce_logits(&mut self, z: NodeId, targets: Vec<T>) -> Result<NodeId> {
        let value = Tensor::scalar(ops::bce_from_logits(self.value(z), &targets)?);
        let rg = self.rg(z);
        Ok(self.push(value, Op::BceLogits { z, targets }, rg))
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients;
    /// nodes that do not reach the loss report zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(T::ONE).reshaped(self.shape(loss)));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            self.step_backward(id, &grad_out, &mut grads);
            grads[id] = Some(grad_out);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn step_backward(&self, id: NodeId, grad_out: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, padding, act } => {
                // the fused activation backpropagates off the stored output
                let grad_conv;
                let grad_out = if *act == Activation::Identity {
                    grad_out
                } else {
                    grad_conv = ops::activation_backward(&self.nodes[id].value, *act, grad_out);
                    &grad_conv
                };
                let (gx, gw, gb) = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    *padding,
                    grad_out,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(gx) = gx {
                    Self::accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    Self::accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        Self::accumulate(grads, *b, gb);
                    }
                }
            }
            Op::TConv2d { x, w, stride } => {
                let (gx, gw) =
                    ops::transposed_conv2d_backward(self.value(*x), self.value(*w), *stride, grad_out);
                if self.rg(*x) {
                    Self::accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    Self::accumulate(grads, *w, gw);
                }
            }
            Op::PoolAvg { x, window } => {
                if self.rg(*x) {
                    let gx = ops::pool_avg_backward(self.value(*x).shape(), *window, grad_out);
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::PoolGlobal { x } => {
                if self.rg(*x) {
                    let gx = ops::pool_global_avg_backward(self.value(*x).shape(), grad_out);
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::Activation { x, kind } => {
                if self.rg(*x) {
                    let gx = ops::activation_backward(&self.nodes[id].value, *kind, grad_out);
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let gx = ops::softmax_axis_backward(&self.nodes[id].value, *axis, grad_out);
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::Matmul { a, b } => {
                let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), grad_out);
                if self.rg(*a) {
                    Self::accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    Self::accumulate(grads, *a, grad_out.clone());
                }
                if self.rg(*b) {
                    Self::accumulate(grads, *b, grad_out.clone());
                }
            }
            Op::AddBias { x, b } => {
                if self.rg(*x) {
                    Self::accumulate(grads, *x, grad_out.clone());
                }
                if self.rg(*b) {
                    let c = self.value(*b).numel();
                    let mut gb = vec![T::ZERO; c];
                    for (i, &g) in grad_out.data().iter().enumerate() {
                        gb[i % c] += g;
                    }
                    Self::accumulate(grads, *b, Tensor::new(vec![c], gb));
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let ga = Tensor::new(
                        grad_out.shape().to_vec(),
                        grad_out
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(&g, &v)| g * v)
                            .collect(),
                    );
                    Self::accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = Tensor::new(
                        grad_out.shape().to_vec(),
                        grad_out
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(&g, &v)| g * v)
                            .collect(),
                    );
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::MaskMul { x, mask } => {
                let (gx, gm) = ops::mask_mul_backward(self.value(*x), self.value(*mask), grad_out);
                if self.rg(*x) {
                    Self::accumulate(grads, *x, gx);
                }
                if self.rg(*mask) {
                    Self::accumulate(grads, *mask, gm);
                }
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0;
                for &xid in xs {
                    let len = self.value(xid).shape()[*axis];
                    if self.rg(xid) {
                        let gx = ops::slice(grad_out, *axis, offset, len)
                            .expect("concat grad slice within bounds");
                        Self::accumulate(grads, xid, gx);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.rg(*x) {
                    let gx = ops::slice_backward(self.value(*x).shape(), *axis, *start, grad_out);
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    Self::accumulate(grads, *x, grad_out.reshaped(self.value(*x).shape()));
                }
            }
            Op::Sum { x } => {
                if self.rg(*x) {
                    let g = grad_out.item();
                    Self::accumulate(grads, *x, Tensor::filled(self.value(*x).shape(), g));
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    Self::accumulate(grads, *x, grad_out.map(|g| g * *c));
                }
            }
            Op::CrossEntropyLogits { logits, class } => {
                if self.rg(*logits) {
                    let gx = ops::cross_entropy_from_logits_backward(
                        self.value(*logits),
                        *class,
                        grad_out.item(),
                    );
                    Self::accumulate(grads, *logits, gx);
                }
            }
            Op::BceLogits { z, targets } => {
                if self.rg(*z) {
                    let gx = ops::bce_from_logits_backward(self.value(*z), targets, grad_out.item());
                    Self::accumulate(grads, *z, gx);
                }
            }
        }
    }
}

/// Result of one reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a node, or `None` if it never reached the loss.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a node, densified to zeros when disconnected.
    pub fn wrt_or_zeros(&self, id: NodeId, tape: &Tape<T>) -> Tensor<T> {
        match self.wrt(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(id)),
        }
    }

    /// Moves a node's gradient out (avoids a copy when the tape is done).
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Maximum relative error between the tape gradient and central finite
/// differences of a scalar-valued function of `x`.
///
/// `build` constructs the forward graph from the leaf node it is given and
/// returns the scalar output node. The error metric per coordinate is
/// `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(build: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    let eval = |pt: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.leaf(pt.clone(), false);
        let out = build(&mut tape, xid)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok(tape.value(out).item())
    };
    // analytic gradient
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true);
    let out = build(&mut tape, xid)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.wrt_or_zeros(xid, &tape);

    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
