//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and the
//! data its gradient rule needs. Parents always precede children, so a single
//! reverse sweep over the node list is a valid topological backward pass.
//! A graph supports exactly one backward pass; build a new graph for the next
//! forward.

pub mod gradcheck;
pub(crate) mod kernels;
mod ops;

pub use kernels::Taps;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
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
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: kernels::ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    IndexSelect {
        input: Var,
        indices: Vec<usize>,
    },
    SpatialGather {
        input: Var,
        taps: Taps,
        groups: usize,
        channels: usize,
    },
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        input: Var,
        targets: Vec<f64>,
    },
    SmoothL1 {
        input: Var,
        targets: Vec<f64>,
        normalizer: f64,
    },
    SquaredError {
        a: Var,
        b: Var,
        normalizer: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// The operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`: the new leaf carries `v`'s value but no
    /// gradient ever flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    /// Gradient of the last backward pass w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a scalar loss, populating `grad` on every node
    /// that requires it and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::StaleTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Input("loss does not belong to this graph".into()));
        }
        let value = &self.nodes[loss.0].value;
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            ops::propagate(&node.op, &node.value, grad, before);
        }
        for node in &self.nodes[..=loss.0] {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("gradient".into()));
                }
            }
        }
        Ok(())
    }
}

/// Gradient accumulation buffer for a parent node, allocated on first use.
fn grad_buf(node: &mut Node) -> Option<&mut [f64]> {
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![0.0; n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_against_zero_gradient() {
        let data = vec![1.0, -2.0, 0.5, 4.0];
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![4], data.clone()).unwrap());
        let z = g.constant(Tensor::zeros(&[4]));
        let l = g.mse(x, z).unwrap();
        g.backward(l).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v / 4.0).collect();
        assert_eq!(g.grad(x).unwrap(), want.as_slice());
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::StaleTape)));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2], 3.0));
        let y = g.scale(x, 2.0);
        let d = g.detach(y);
        let z = g.add(d, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn backward_is_linear_in_loss() {
        let x0 = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.7, -0.1, 1.5]).unwrap();
        let grad_of = |a: f64, b: f64| {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let r = g.relu(x);
            let l1 = g.sum(r);
            let z = g.constant(Tensor::zeros(&[2, 3]));
            let l2 = g.mse(x, z).unwrap();
            let l1 = g.scale(l1, a);
            let l2 = g.scale(l2, b);
            let l = g.add(l1, l2).unwrap();
            g.backward(l).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        let gc = grad_of(2.5, -0.75);
        for i in 0..6 {
            assert!((gc[i] - (2.5 * g1[i] - 0.75 * g2[i])).abs() < 1e-14);
        }
    }
}
