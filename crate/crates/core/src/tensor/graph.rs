use super::conv::ConvSaved;
use super::elementwise::{BinaryKind, UnaryKind};
use super::norm::BnSaved;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[T]) -> Vec<T>>;

/// What a node remembers for the backward pass.
pub(crate) enum Op<T> {
    Leaf,
    Conv2d(ConvSaved),
    BatchNorm(BnSaved<T>),
    Unary {
        input: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Softmax {
        input: Var,
    },
    Resize {
        input: Var,
    },
    AvgPool3 {
        input: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<u32>,
    },
    Narrow {
        input: Var,
        start: usize,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    /// Scalar function of one input whose local gradient was computed during
    /// the forward pass (used by the fused loss kernels).
    ScalarFn {
        input: Var,
        local_grad: Vec<T>,
    },
    /// Unary op with a caller supplied backward rule: `(input, output, grad_out) -> grad_in`.
    Custom {
        input: Var,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d(_) => "conv2d",
            Op::BatchNorm(_) => "batch_norm",
            Op::Unary {
                kind: UnaryKind::Relu, ..
            } => "relu",
            Op::Unary {
                kind: UnaryKind::Sigmoid,
                ..
            } => "sigmoid",
            Op::Unary {
                kind: UnaryKind::Abs, ..
            } => "abs",
            Op::Binary {
                kind: BinaryKind::Add, ..
            } => "add",
            Op::Binary {
                kind: BinaryKind::Sub, ..
            } => "sub",
            Op::Binary {
                kind: BinaryKind::Mul, ..
            } => "mul",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax_channels",
            Op::Resize { .. } => "bilinear_resize",
            Op::AvgPool3 { .. } => "avg_pool_3x3_same",
            Op::Concat { .. } => "concat_channels",
            Op::Gather { .. } => "gather_channels",
            Op::ChannelMax { .. } => "channel_max",
            Op::Narrow { .. } => "narrow_batch",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::ScalarFn { .. } => "scalar_fn",
            Op::Custom { .. } => "custom",
        }
    }
}

/// Deliberate backward-rule corruption, used to prove the gradient checks can fail.
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static SIGN_FLIP: Cell<Option<&'static str>> = const { Cell::new(None) };
    }

    /// Negate the incoming gradient of every node of op `name` (on this thread)
    /// until cleared with `None`.
    pub fn set_sign_flip(name: Option<&'static str>) {
        SIGN_FLIP.with(|f| f.set(name));
    }

    pub(crate) fn sign_flip() -> Option<&'static str> {
        SIGN_FLIP.with(|f| f.get())
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, so every op's inputs precede it and
/// reverse iteration is a valid reverse-topological order.
pub struct Graph<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only. Nothing built on it requires grad.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Unary op with a hand-written backward rule.
    pub fn custom_unary(
        &mut self,
        input: Var,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &[T]) -> Vec<T> + 'static,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                input,
                backward: Box::new(backward),
            },
            &[input],
        )
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Gradients of every node that requires grad are stored on the graph and
    /// read back with [`Graph::grad`]. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "loss",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let flip = fault::sign_flip();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            {
                let mut sink = GradSink {
                    grads: &mut grads[..i],
                    nodes: &self.nodes,
                };
                if flip == Some(node.op.name()) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    backward_node(node, &self.nodes, &neg, &mut sink);
                } else {
                    backward_node(node, &self.nodes, &g, &mut sink);
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    })
                }
            }
        }
        Ok(())
    }
}

/// Accumulates gradients into the slots of nodes that precede the one being
/// differentiated.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first use.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [T] {
        let len = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub(crate) fn add(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn backward_node<T: Scalar>(node: &Node<T>, nodes: &[Node<T>], g: &[T], sink: &mut GradSink<'_, T>) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d(saved) => super::conv::backward(saved, nodes, g, sink),
        Op::BatchNorm(saved) => super::norm::backward(saved, nodes, g, sink),
        Op::Unary { input, kind } => super::elementwise::unary_backward(*kind, *input, val(*input), out, g, sink),
        Op::Binary { a, b, kind } => super::elementwise::binary_backward(*kind, *a, *b, val(*a), val(*b), g, sink),
        Op::Scale { input, factor } => {
            if sink.wants(*input) {
                sink.add(*input, g.iter().map(|&x| x * *factor).collect());
            }
        }
        Op::Softmax { input } => super::spatial::softmax_backward(*input, out, g, sink),
        Op::Resize { input } => super::spatial::resize_backward(*input, val(*input), out, g, sink),
        Op::AvgPool3 { input } => super::spatial::avg_pool3_backward(*input, val(*input), g, sink),
        Op::Concat { parts } => super::shape_ops::concat_backward(parts, nodes, out, g, sink),
        Op::Gather { input, index } => super::shape_ops::gather_backward(*input, val(*input), index, g, sink),
        Op::ChannelMax { input, argmax } => {
            super::shape_ops::channel_max_backward(*input, val(*input), argmax, g, sink)
        }
        Op::Narrow { input, start } => super::shape_ops::narrow_backward(*input, val(*input), *start, g, sink),
        Op::Sum { input } => {
            if sink.wants(*input) {
                let n = val(*input).numel();
                sink.add(*input, vec![g[0]; n]);
            }
        }
        Op::Mean { input } => {
            if sink.wants(*input) {
                let n = val(*input).numel();
                let v = g[0] / T::of(n as f64);
                sink.add(*input, vec![v; n]);
            }
        }
        Op::ScalarFn { input, local_grad } => {
            if sink.wants(*input) {
                sink.add(*input, local_grad.iter().map(|&x| x * g[0]).collect());
            }
        }
        Op::Custom { input, backward } => {
            if sink.wants(*input) {
                let gi = backward(val(*input), out, g);
                sink.add(*input, gi);
            }
        }
    }
}
