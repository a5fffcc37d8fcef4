//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is the computation record for one forward pass: every op
//! appends a node whose inputs were recorded earlier, so the node order is
//! already topological. [`Graph::backward`] walks the nodes once, in reverse.

mod conv;
mod elementwise;
mod gemm;
mod loss;
mod norm;
pub mod oracle;
mod resize;
mod shape_ops;

pub use norm::{Mode, RunningStats};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Exp(Var),
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScalarMul {
        input: Var,
        scale: f64,
    },
    Sum(Var),
    GlobalAvgPool(Var),
    Resize {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: LabelMap,
        count: usize,
    },
}

pub struct Graph<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Inserts a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros if none reached `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.values[v.0].shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad mirrors value shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value from {op:?}");
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    /// Backpropagates from a scalar node. Gradients from any earlier call are
    /// discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NotScalar("backward"));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        let Graph {
            values,
            grads,
            requires,
            ops,
        } = self;
        for i in (0..=loss.0).rev() {
            if !requires[i] {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            debug_assert!(
                gout.iter().all(|v| v.is_finite()),
                "non-finite gradient at node {i} ({:?})",
                ops[i]
            );
            let mut sink = GradSink {
                grads: &mut grads[..i],
                requires,
                values,
            };
            match &ops[i] {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => conv::conv2d_backward(*input, *weight, *bias, *stride, *pad, &gout, &mut sink),
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => conv::conv_transpose2d_backward(
                    *input, *weight, *bias, *stride, *pad, &gout, &mut sink,
                ),
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => norm::batchnorm_backward(
                    *input,
                    *gamma,
                    *beta,
                    xhat,
                    inv_std,
                    *batch_stats,
                    &gout,
                    &mut sink,
                ),
                Op::Relu(x) => elementwise::relu_backward(*x, &gout, &mut sink),
                Op::Clamp { input, lo, hi } => {
                    elementwise::clamp_backward(*input, *lo, *hi, &gout, &mut sink)
                }
                Op::Exp(x) => elementwise::exp_backward(*x, &values[i], &gout, &mut sink),
                Op::Add { a, b } => {
                    elementwise::add_backward(*a, *b, values[i].shape(), &gout, &mut sink)
                }
                Op::Mul { a, b } => {
                    elementwise::mul_backward(*a, *b, values[i].shape(), &gout, &mut sink)
                }
                Op::ScalarMul { input, scale } => {
                    elementwise::scalar_mul_backward(*input, *scale, &gout, &mut sink)
                }
                Op::Sum(x) => elementwise::sum_backward(*x, &gout, &mut sink),
                Op::GlobalAvgPool(x) => elementwise::gap_backward(*x, &gout, &mut sink),
                Op::Resize { input } => {
                    resize::resize_backward(*input, values[i].shape(), &gout, &mut sink)
                }
                Op::Concat { inputs } => shape_ops::concat_backward(inputs, &gout, &mut sink),
                Op::Gather { input, index } => {
                    shape_ops::gather_backward(*input, index, &gout, &mut sink)
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    count,
                } => loss::cross_entropy_backward(*logits, probs, labels, *count, &gout, &mut sink),
            }
            grads[i] = Some(gout);
        }
        Ok(())
    }
}

/// Write access to the gradients of nodes recorded before the one being
/// differentiated.
pub(crate) struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Vec<T>>],
    requires: &'a [bool],
    values: &'a [Tensor<T>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub(crate) fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient buffer of `v`, allocated on first use.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [T] {
        let numel = self.values[v.0].numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel])
    }

    /// Value of `a` together with the gradient buffer of `b`.
    pub(crate) fn value_and_slot(&mut self, a: Var, b: Var) -> (&Tensor<T>, &mut [T]) {
        let numel = self.values[b.0].numel();
        let slot = self.grads[b.0].get_or_insert_with(|| vec![T::zero(); numel]);
        (&self.values[a.0], slot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 5.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([3], 2.0));
        let c = g.constant(Tensor::full([3], 4.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[4.0; 3]);
    }

    #[test]
    fn second_backward_starts_fresh() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1], 1.0));
        let y = g.scalar_mul(x, 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
    }
}
