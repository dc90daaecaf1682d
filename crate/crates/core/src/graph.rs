//! A minimal define-by-run reverse-mode graph covering the layers the
//! networks need.
//!
//! Nodes are appended in execution order, which is a topological order, so
//! the backward pass is a single sweep from the root towards index zero. Each
//! node is visited once; gradients arriving over several consumers are summed.

use crate::binarize::{binarize_weights, weight_backward, BinarizeOptions, WeightMode};
use crate::error::{dim_err, Result};
use crate::layers::{self, Activation, BnCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache<T> },
    Act { x: NodeId, act: Activation },
    Add { a: NodeId, b: NodeId },
    AvgPool { x: NodeId, kernel: usize, stride: usize },
    GlobalAvgPool { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Binarize { w: NodeId, mode: WeightMode, opts: BinarizeOptions, scales: Vec<T> },
    SoftmaxCe { logits: NodeId, labels: Vec<usize>, probs: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

/// Gradients of a root node with respect to every node that influences it.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like it if it does not affect the root.
    pub fn get_or_zeros(&self, id: NodeId, g: &Graph<T>) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(g.value(id).shape().to_vec()))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
    match &mut grads[id.0] {
        slot @ None => *slot = Some(g),
        Some(acc) => {
            acc.expect_shape(g.shape())?;
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf: an input batch or a parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Number of element-wise addition nodes (shortcut merges).
    pub fn count_additions(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Add { .. })).count()
    }

    pub fn count_convolutions(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Conv2d { .. })).count()
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let y = layers::conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, stride, pad }))
    }

    /// Batch norm. `running = None` normalizes with batch statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<NodeId> {
        let (y, cache) = layers::batchnorm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            running,
        )?;
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, cache }))
    }

    /// Batch mean and variance computed by a training-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { cache: BnCache { batch_stats: Some((m, v)), .. }, .. } => Some((m, v)),
            _ => None,
        }
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> NodeId {
        if act == Activation::Identity {
            return x;
        }
        let y = layers::activation_forward(self.value(x), act);
        self.push(y, Op::Act { x, act })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn avg_pool(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let y = layers::avg_pool2d_forward(self.value(x), kernel, stride)?;
        Ok(self.push(y, Op::AvgPool { x, kernel, stride }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = layers::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = layers::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    /// Weight transform for a convolution; [`WeightMode::Real`] is a no-op.
    pub fn binarize(&mut self, w: NodeId, mode: WeightMode, opts: BinarizeOptions) -> Result<NodeId> {
        if mode == WeightMode::Real {
            return Ok(w);
        }
        let (wb, scales) = binarize_weights(self.value(w), mode, &opts)?;
        Ok(self.push(wb, Op::Binarize { w, mode, opts, scales }))
    }

    /// Per-filter scales used by a binarize node.
    pub fn scales(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Binarize { scales, .. } => Some(scales),
            _ => None,
        }
    }

    /// Mean cross-entropy; the node holds a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = layers::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }))
    }

    /// Backward pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(dim_err!("backward from a non-scalar root of shape {:?}", self.value(root).shape()));
        }
        let seed = Tensor::full(self.value(root).shape().to_vec(), T::one());
        self.backward_with(root, seed)
    }

    /// Backward pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        seed.expect_shape(self.value(root).shape())?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, stride, pad } => {
                    let (gx, gw) =
                        layers::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (gx, dg, db) = layers::batchnorm_backward(&g, self.value(*gamma).data(), cache)?;
                    let c = dg.len();
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dg)?)?;
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], db)?)?;
                }
                Op::Act { x, act } => {
                    let gx = layers::activation_backward(&g, self.value(*x), *act)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *b, g.clone())?;
                    accumulate(&mut grads, *a, g.clone())?;
                }
                Op::AvgPool { x, kernel, stride } => {
                    let gx = layers::avg_pool2d_backward(self.value(*x).shape(), &g, *kernel, *stride)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::GlobalAvgPool { x } => {
                    let gx = layers::global_avg_pool_backward(self.value(*x).shape(), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = layers::linear_backward(self.value(*x), self.value(*w), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Binarize { w, mode, opts, scales } => {
                    let gw = weight_backward(&g, self.value(*w), scales, *mode, opts)?;
                    accumulate(&mut grads, *w, gw)?;
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let gl = layers::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                    accumulate(&mut grads, *logits, gl)?;
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
