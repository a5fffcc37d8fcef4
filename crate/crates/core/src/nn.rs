//! Parameterized layers and the naming/binding glue between stored `f32`
//! parameters and a [`Graph`] of any precision.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Graph, Mode, RunningStats, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    /// Trainable parameter.
    Param,
    /// Persistent non-trainable state (batch-norm running statistics).
    Buffer,
}

/// A collection of named tensors.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &Tensor<f32>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<f32>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, role, t| {
            if role == TensorRole::Param {
                n += t.numel();
            }
        });
        n
    }

    /// Per-tensor trainable counts, in visiting order.
    fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, role, t| {
            if role == TensorRole::Param {
                out.push((name.to_string(), t.numel()));
            }
        });
        out
    }

    /// Raw little-endian bytes of every tensor, for immutability checks.
    fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, t| {
            out.extend_from_slice(name.as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }
}

/// Inserts stored parameters into a graph, remembering which node holds
/// which name so gradients can be collected after `backward`.
pub struct Binder {
    trainable: bool,
    bound: Vec<(String, Var)>,
    /// Added in graph precision to one element of one named tensor.
    nudge: Option<(String, usize, f64)>,
}

impl Binder {
    pub fn trainable() -> Self {
        Self {
            trainable: true,
            bound: Vec::new(),
            nudge: None,
        }
    }

    pub fn frozen() -> Self {
        Self {
            trainable: false,
            bound: Vec::new(),
            nudge: None,
        }
    }

    /// A frozen binder that offsets element `index` of tensor `name` by
    /// `delta` after conversion to the graph's scalar type, so finite
    /// differences are not limited by `f32` storage.
    pub fn nudged(name: &str, index: usize, delta: f64) -> Self {
        Self {
            nudge: Some((name.to_string(), index, delta)),
            ..Self::frozen()
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn bind<T: Scalar>(&mut self, g: &mut Graph<T>, name: &str, t: &Tensor<f32>) -> Var {
        let mut value: Tensor<T> = t.cast();
        if let Some((target, index, delta)) = &self.nudge {
            if target == name {
                let x = &mut value.data_mut()[*index];
                *x = T::from_f64(x.as_f64() + delta);
            }
        }
        let v = g.leaf(value, self.trainable);
        if self.trainable {
            self.bound.push((name.to_string(), v));
        }
        v
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// Full-precision gradients keyed by parameter name.
    pub fn grads_f64<T: Scalar>(&self, g: &Graph<T>) -> HashMap<String, Vec<f64>> {
        self.bound
            .iter()
            .map(|(name, v)| {
                (
                    name.clone(),
                    g.grad_tensor(*v)
                        .data()
                        .iter()
                        .map(|x| x.as_f64())
                        .collect(),
                )
            })
            .collect()
    }

    /// Gradients keyed by parameter name; zeros where backward did not reach.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> HashMap<String, Vec<f32>> {
        self.bound
            .iter()
            .map(|(name, v)| {
                let grad = g
                    .grad_tensor(*v)
                    .data()
                    .iter()
                    .map(|x| x.as_f64() as f32)
                    .collect();
                (name.clone(), grad)
            })
            .collect()
    }
}

fn kaiming_uniform(shape: [usize; 4], fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square kernel, Kaiming-uniform (fan-in) weights, zero bias.
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            name: name.into(),
            weight: kaiming_uniform([cout, cin, kernel, kernel], cin * kernel * kernel, rng),
            bias: Tensor::zeros([cout]),
            stride,
            padding,
        }
    }

    pub fn zeroed(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            name: name.into(),
            weight: Tensor::zeros([cout, cin, kernel, kernel]),
            bias: Tensor::zeros([cout]),
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, binder: &mut Binder) -> Result<Var> {
        let w = binder.bind(g, &format!("{}.weight", self.name), &self.weight);
        let b = binder.bind(g, &format!("{}.bias", self.name), &self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &Tensor<f32>)) {
        f(
            &format!("{}.weight", self.name),
            TensorRole::Param,
            &self.weight,
        );
        f(
            &format!("{}.bias", self.name),
            TensorRole::Param,
            &self.bias,
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<f32>)) {
        f(
            &format!("{}.weight", self.name),
            TensorRole::Param,
            &mut self.weight,
        );
        f(
            &format!("{}.bias", self.name),
            TensorRole::Param,
            &mut self.bias,
        );
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    /// Laid out in×out×k×k.
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            name: name.into(),
            weight: kaiming_uniform([cin, cout, kernel, kernel], cin * kernel * kernel, rng),
            bias: Tensor::zeros([cout]),
            stride,
            padding: 0,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, binder: &mut Binder) -> Result<Var> {
        let w = binder.bind(g, &format!("{}.weight", self.name), &self.weight);
        let b = binder.bind(g, &format!("{}.bias", self.name), &self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.padding)
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &Tensor<f32>)) {
        f(
            &format!("{}.weight", self.name),
            TensorRole::Param,
            &self.weight,
        );
        f(
            &format!("{}.bias", self.name),
            TensorRole::Param,
            &self.bias,
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<f32>)) {
        f(
            &format!("{}.weight", self.name),
            TensorRole::Param,
            &mut self.weight,
        );
        f(
            &format!("{}.bias", self.name),
            TensorRole::Param,
            &mut self.bias,
        );
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
    pub stats: RunningStats,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Tensor::full([channels], 1.0),
            beta: Tensor::zeros([channels]),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        binder: &mut Binder,
    ) -> Result<Var> {
        let gamma = binder.bind(g, &format!("{}.gamma", self.name), &self.gamma);
        let beta = binder.bind(g, &format!("{}.beta", self.name), &self.beta);
        g.batchnorm2d(
            x,
            gamma,
            beta,
            &mut self.stats,
            mode,
            BN_EPS,
            BN_MOMENTUM,
            &self.name,
        )
    }

    /// Eval-mode forward that leaves the layer untouched.
    pub fn forward_eval<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        binder: &mut Binder,
    ) -> Result<Var> {
        let gamma = binder.bind(g, &format!("{}.gamma", self.name), &self.gamma);
        let beta = binder.bind(g, &format!("{}.beta", self.name), &self.beta);
        let mut stats = self.stats.clone();
        g.batchnorm2d(
            x,
            gamma,
            beta,
            &mut stats,
            Mode::Eval,
            BN_EPS,
            BN_MOMENTUM,
            &self.name,
        )
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &Tensor<f32>)) {
        f(
            &format!("{}.gamma", self.name),
            TensorRole::Param,
            &self.gamma,
        );
        f(
            &format!("{}.beta", self.name),
            TensorRole::Param,
            &self.beta,
        );
        f(
            &format!("{}.running_mean", self.name),
            TensorRole::Buffer,
            &self.stats.mean,
        );
        f(
            &format!("{}.running_var", self.name),
            TensorRole::Buffer,
            &self.stats.var,
        );
        f(
            &format!("{}.num_batches_tracked", self.name),
            TensorRole::Buffer,
            &self.stats.tracked,
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<f32>)) {
        f(
            &format!("{}.gamma", self.name),
            TensorRole::Param,
            &mut self.gamma,
        );
        f(
            &format!("{}.beta", self.name),
            TensorRole::Param,
            &mut self.beta,
        );
        f(
            &format!("{}.running_mean", self.name),
            TensorRole::Buffer,
            &mut self.stats.mean,
        );
        f(
            &format!("{}.running_var", self.name),
            TensorRole::Buffer,
            &mut self.stats.var,
        );
        f(
            &format!("{}.num_batches_tracked", self.name),
            TensorRole::Buffer,
            &mut self.stats.tracked,
        );
    }
}

/// Conv → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), cin, cout, 3, stride, 1, rng),
            bn: BatchNorm2d::new(format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        binder: &mut Binder,
    ) -> Result<Var> {
        let y = self.conv.forward(g, x, binder)?;
        let y = self.bn.forward(g, y, mode, binder)?;
        Ok(g.relu(y))
    }

    pub fn forward_eval<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        binder: &mut Binder,
    ) -> Result<Var> {
        let y = self.conv.forward(g, x, binder)?;
        let y = self.bn.forward_eval(g, y, binder)?;
        Ok(g.relu(y))
    }
}

impl Module for ConvBnRelu {
    fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &Tensor<f32>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<f32>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new("c", 3, 16, 3, 1, 1, &mut rng);
        assert_eq!(conv.param_count(), 3 * 16 * 9 + 16);
        assert_eq!(conv.param_count(), 448);
    }

    #[test]
    fn buffers_are_not_params() {
        let bn = BatchNorm2d::new("bn", 8);
        assert_eq!(bn.param_count(), 16);
        let mut names = Vec::new();
        bn.visit(&mut |n, _, _| names.push(n.to_string()));
        assert_eq!(names.len(), 5);
    }

    #[test]
    fn frozen_binder_records_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new("c", 1, 1, 1, 1, 0, &mut rng);
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full([1, 1, 2, 2], 1.0));
        let mut binder = Binder::frozen();
        let y = conv.forward(&mut g, x, &mut binder).unwrap();
        assert!(binder.bound().is_empty());
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_some());
    }
}
