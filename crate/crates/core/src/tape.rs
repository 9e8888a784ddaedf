//! Reverse-mode differentiation over a recorded tape of operations.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order. [`Tape::backward`] walks them in reverse exactly once
//! and only computes gradients along paths that reach a requested node.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: NodeId,
        size: usize,
        stride: usize,
    },
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    Mean(NodeId),
    SampleNorms(NodeId),
    L2Norm(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias(..) => "add_bias",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SampleNorms(_) => "sample_norms",
            Op::L2Norm(_) => "l2_norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![a, b]
            }
            Op::Conv2d { x, w, bias, .. } => vec![x, w, bias],
            Op::Relu(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SampleNorms(a)
            | Op::L2Norm(a)
            | Op::MaxPool { x: a, .. }
            | Op::AvgPool { x: a, .. }
            | Op::SoftmaxCrossEntropy { logits: a, .. } => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation. One tape per forward/backward round; not shared
/// across threads while being extended.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Tape::backward`], keyed by node.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

fn add_grad(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shapes agree"),
        None => *slot = Some(g),
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Name of the operation that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Ids of the operands of `id`.
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = kernels::conv2d(self.value(x), self.value(w), self.value(bias), stride, pad)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            v,
        ))
    }

    /// Add a per-channel bias: `[N, F]` or `[N, F, ...]` plus `[F]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() < 2 || bv.shape() != [xv.shape()[1]] {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[(i / inner) % bv.len()];
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), v)
    }

    pub fn maxpool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let (v, argmax) = kernels::maxpool2d(self.value(x), size, stride)?;
        Ok(self.push(Op::MaxPool { x, argmax }, v))
    }

    pub fn avgpool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let v = kernels::avgpool2d(self.value(x), size, stride)?;
        Ok(self.push(Op::AvgPool { x, size, stride }, v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// Collapse everything after the batch dimension.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let shape = [v.batch(), v.sample_len()];
        self.reshape(x, shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum_f64() as f32);
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar((t.sum_f64() / t.len() as f64) as f32);
        self.push(Op::Mean(a), v)
    }

    /// Per-sample Euclidean norms, shape `[N]`.
    pub fn sample_norms(&mut self, a: NodeId) -> NodeId {
        let v = kernels::sample_norms(self.value(a));
        self.push(Op::SampleNorms(a), v)
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).norm_f64() as f32);
        self.push(Op::L2Norm(a), v)
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Gradients of the scalar `loss` with respect to each node in `wrt`.
    ///
    /// Nodes in `wrt` that do not influence `loss` get a zero gradient.
    pub fn backward(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("loss node {} is not on the tape", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if let Some(bad) = wrt.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Usage(format!("node {} is not on the tape", bad.0)));
        }

        // A node needs a gradient if it is requested or depends on one that is.
        let mut needs = vec![false; loss.0 + 1];
        for id in wrt.iter().filter(|id| id.0 <= loss.0) {
            needs[id.0] = true;
        }
        for i in 0..=loss.0 {
            if !needs[i] {
                needs[i] = self.nodes[i].op.inputs().iter().any(|p| needs[p.0]);
            }
        }

        let mut out = Gradients::default();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));

        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if wrt.contains(&NodeId(i)) {
                out.grads.insert(NodeId(i), g.clone());
            }
            let node = &self.nodes[i];
            let need = |id: NodeId| needs[id.0];
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul(a, b) => {
                    let (ga, gb) =
                        kernels::matmul_backward(self.value(a), self.value(b), &g, need(a), need(b));
                    if let Some(ga) = ga {
                        add_grad(&mut grads[a.0], ga);
                    }
                    if let Some(gb) = gb {
                        add_grad(&mut grads[b.0], gb);
                    }
                }
                &Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    pad,
                } => {
                    let cg = kernels::conv2d_backward(
                        self.value(x),
                        self.value(w),
                        &g,
                        stride,
                        pad,
                        [need(x), need(w), need(bias)],
                    )?;
                    if let Some(t) = cg.x {
                        add_grad(&mut grads[x.0], t);
                    }
                    if let Some(t) = cg.w {
                        add_grad(&mut grads[w.0], t);
                    }
                    if let Some(t) = cg.bias {
                        add_grad(&mut grads[bias.0], t);
                    }
                }
                &Op::AddBias(x, bias) => {
                    if need(bias) {
                        let f = self.value(bias).len();
                        let inner: usize = g.shape()[2..].iter().product();
                        let mut gb = vec![0.0f32; f];
                        for (j, &v) in g.data().iter().enumerate() {
                            gb[(j / inner) % f] += v;
                        }
                        add_grad(&mut grads[bias.0], Tensor::new([f], gb)?);
                    }
                    if need(x) {
                        add_grad(&mut grads[x.0], g);
                    }
                }
                &Op::Relu(x) => {
                    let gx = g.zip_map(self.value(x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    add_grad(&mut grads[x.0], gx);
                }
                Op::MaxPool { x, argmax } => {
                    let gx = kernels::maxpool2d_backward(self.value(*x).shape(), argmax, &g);
                    add_grad(&mut grads[x.0], gx);
                }
                &Op::AvgPool { x, size, stride } => {
                    let gx = kernels::avgpool2d_backward(self.value(x).shape(), size, stride, &g)?;
                    add_grad(&mut grads[x.0], gx);
                }
                &Op::Reshape(x) => {
                    let gx = g.reshape(self.value(x).shape().to_vec())?;
                    add_grad(&mut grads[x.0], gx);
                }
                &Op::Add(a, b) => {
                    if need(b) {
                        add_grad(&mut grads[b.0], g.clone());
                    }
                    if need(a) {
                        add_grad(&mut grads[a.0], g);
                    }
                }
                &Op::Sub(a, b) => {
                    if need(b) {
                        add_grad(&mut grads[b.0], g.scale(-1.0));
                    }
                    if need(a) {
                        add_grad(&mut grads[a.0], g);
                    }
                }
                &Op::Mul(a, b) => {
                    if need(a) {
                        add_grad(&mut grads[a.0], g.zip_map(self.value(b), "mul", |x, y| x * y)?);
                    }
                    if need(b) {
                        add_grad(&mut grads[b.0], g.zip_map(self.value(a), "mul", |x, y| x * y)?);
                    }
                }
                &Op::Scale(a, c) => add_grad(&mut grads[a.0], g.scale(c)),
                &Op::Sum(a) => {
                    let gv = g.data()[0];
                    add_grad(&mut grads[a.0], Tensor::full(self.value(a).shape().to_vec(), gv));
                }
                &Op::Mean(a) => {
                    let av = self.value(a);
                    let gv = g.data()[0] / av.len() as f32;
                    add_grad(&mut grads[a.0], Tensor::full(av.shape().to_vec(), gv));
                }
                &Op::SampleNorms(a) => {
                    let av = self.value(a);
                    let len = av.sample_len();
                    let norms = node.value.data();
                    let mut gx = av.clone();
                    for (n, chunk) in gx.data_mut().chunks_mut(len).enumerate() {
                        let scale = if norms[n] > 0.0 { g.data()[n] / norms[n] } else { 0.0 };
                        chunk.iter_mut().for_each(|v| *v *= scale);
                    }
                    add_grad(&mut grads[a.0], gx);
                }
                &Op::L2Norm(a) => {
                    let norm = node.value.data()[0];
                    let scale = if norm > 0.0 { g.data()[0] / norm } else { 0.0 };
                    add_grad(&mut grads[a.0], self.value(a).scale(scale));
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let (n, k) = (shape[0], shape[1]);
                    let scale = g.data()[0] / n as f32;
                    let mut gl = probs.clone();
                    for (row, &label) in labels.iter().enumerate() {
                        gl[row * k + label] -= 1.0;
                    }
                    gl.iter_mut().for_each(|v| *v *= scale);
                    add_grad(&mut grads[logits.0], Tensor::new(shape, gl)?);
                }
            }
        }

        for &id in wrt {
            out.grads
                .entry(id)
                .or_insert_with(|| Tensor::zeros(self.value(id).shape().to_vec()));
        }
        Ok(out)
    }
}
