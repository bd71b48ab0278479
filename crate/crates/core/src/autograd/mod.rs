//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so an op's inputs always have smaller
//! indices than the op itself; walking the tape backwards from the loss is a
//! reverse topological traversal that visits each node once.

mod conv;
mod elementwise;
mod linear;
mod loss;
mod norm;
mod reduce;
mod shape;

use std::collections::BTreeSet;

pub use conv::ConvSpec;
pub use elementwise::{
    phi1, phi1_derivative, phi1_taylor, sigmoid, softplus, BinaryKind, UnaryKind, PHI1_TAYLOR_THRESHOLD,
};
pub use loss::smooth_l1_elem;
pub use norm::DEFAULT_EPS;
pub use reduce::PoolKind;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable primitive the graph can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Exp,
    Sigmoid,
    Relu,
    Silu,
    Softplus,
    Phi1,
    Scale,
    Linear,
    Conv2d,
    LayerNorm,
    AvgPool,
    MaxPool,
    Sum,
    Mean,
    Reshape,
    Permute,
    Concat,
    Slice,
    Reverse,
    Gather,
    SelectiveScan,
    CrossEntropy,
    BceWithLogits,
    SmoothL1,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Exp,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Silu,
        OpKind::Softplus,
        OpKind::Phi1,
        OpKind::Scale,
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::LayerNorm,
        OpKind::AvgPool,
        OpKind::MaxPool,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Reverse,
        OpKind::Gather,
        OpKind::SelectiveScan,
        OpKind::CrossEntropy,
        OpKind::BceWithLogits,
        OpKind::SmoothL1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Exp => "exp",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Silu => "silu",
            OpKind::Softplus => "softplus",
            OpKind::Phi1 => "phi1",
            OpKind::Scale => "scale",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::LayerNorm => "layernorm",
            OpKind::AvgPool => "avg_pool",
            OpKind::MaxPool => "max_pool",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reverse => "reverse",
            OpKind::Gather => "gather",
            OpKind::SelectiveScan => "selective_scan",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::SmoothL1 => "smooth_l1",
        }
    }
}

/// A recorded operation: its inputs plus whatever the backward rule needs.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        /// For each input element, the output element it reduces into.
        target: Vec<usize>,
        /// Max pooling: the winning input element of each output.
        argmax: Vec<usize>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reverse {
        x: Var,
        axis: usize,
    },
    Gather {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    SelectiveScan {
        x: Var,
        abar: Var,
        bbar: Var,
        c: Var,
        d_skip: Option<Var>,
        states: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Unary { kind, .. } => return kind.op_kind(),
            Op::Binary { kind, .. } => kind.op_kind(),
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Pool {
                kind: PoolKind::Avg, ..
            } => OpKind::AvgPool,
            Op::Pool {
                kind: PoolKind::Max, ..
            } => OpKind::MaxPool,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reverse { .. } => OpKind::Reverse,
            Op::Gather { .. } => OpKind::Gather,
            Op::SelectiveScan { .. } => OpKind::SelectiveScan,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
        })
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Unary { x, .. }
            | Op::Pool { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Reverse { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::SelectiveScan {
                x,
                abar,
                bbar,
                c,
                d_skip,
                ..
            } => {
                let mut v = vec![*x, *abar, *bbar, *c];
                v.extend(d_skip);
                v
            }
            Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients flowing into an op's inputs during the backward sweep.
type InputGrads = Vec<(Var, Vec<f64>)>;

/// One forward pass worth of recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// A trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// The set of differentiable primitives recorded on this tape.
    pub fn kinds_used(&self) -> BTreeSet<OpKind> {
        self.nodes.iter().filter_map(|n| n.op.kind()).collect()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`, storing `d loss / d leaf` on
    /// every leaf that requires a gradient. Accumulation follows the fixed
    /// tape order, so repeated runs are bit-identical.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        for n in &mut self.nodes {
            n.value.clear_grad();
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, grad));
                continue;
            }
            for (input, g) in self.input_grads(i, &grad) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, grad) in leaf_grads {
            self.nodes[i].value.set_grad(grad);
        }
        Ok(())
    }

    fn input_grads(&self, node: usize, grad: &[f64]) -> InputGrads {
        let out = &self.nodes[node].value;
        match &self.nodes[node].op {
            Op::Leaf => vec![],
            Op::Unary { x, kind } => self.unary_backward(*x, *kind, out, grad),
            Op::Binary { a, b, kind } => self.binary_backward(*a, *b, *kind, out, grad),
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, grad),
            Op::Conv2d { x, w, b, spec } => self.conv2d_backward(*x, *w, *b, spec, out, grad),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => self.layernorm_backward(*x, *gamma, *beta, *axis, xhat, rstd, grad),
            Op::Pool {
                x,
                kind,
                target,
                argmax,
                count,
            } => self.pool_backward(*x, *kind, target, argmax, *count, grad),
            Op::Sum { x } => vec![(*x, vec![grad[0]; self.value(*x).numel()])],
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                vec![(*x, vec![grad[0] / n as f64; n])]
            }
            Op::Reshape { x } => vec![(*x, grad.to_vec())],
            Op::Permute { x, perm } => self.permute_backward(*x, perm, grad),
            Op::Concat { inputs, axis } => self.concat_backward(inputs, *axis, out, grad),
            Op::Slice { x, axis, start } => self.slice_backward(*x, *axis, *start, out, grad),
            Op::Reverse { x, axis } => self.reverse_backward(*x, *axis, grad),
            Op::Gather { x, axis, index } => self.gather_backward(*x, *axis, index, grad),
            Op::SelectiveScan {
                x,
                abar,
                bbar,
                c,
                d_skip,
                states,
            } => crate::ssm::scan_backward(self, [*x, *abar, *bbar, *c], *d_skip, states, grad),
            Op::CrossEntropy { logits, labels, probs } => self.cross_entropy_backward(*logits, labels, probs, grad),
            Op::BceWithLogits { logits, targets } => self.bce_backward(*logits, targets, grad),
            Op::SmoothL1 { pred, target } => self.smooth_l1_backward(*pred, *target, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_twice_x() {
        let mut g = Graph::new();
        let data = vec![0.5, -1.5, 2.0, 3.25];
        let x = g.param(Tensor::from_vec(&[2, 2], data.clone()).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));

        let c = g.constant(Tensor::ones(&[2]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Detached)));
    }

    #[test]
    fn frozen_leaf_gets_no_grad_but_passes_it_through() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2], 3.0));
        let w = g.constant(Tensor::full(&[2], 2.0));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1], 1000.0));
        assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
    }
}
