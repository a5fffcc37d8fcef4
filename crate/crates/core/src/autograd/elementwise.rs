use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index mapping from an output element to the elements of two broadcast
/// operands. Operands share the output rank (dims equal or 1) or hold a
/// single value.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    if numel == 1 {
        return vec![0; out.len()];
    }
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..out.len()).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self {
                out_shape: a.to_vec(),
                a_strides: Vec::new(),
                b_strides: Vec::new(),
                same: true,
            });
        }
        let a_n: usize = a.iter().product();
        let b_n: usize = b.iter().product();
        let out_shape = if b_n == 1 && a.len() >= b.len() {
            a.to_vec()
        } else if a_n == 1 && b.len() >= a.len() {
            b.to_vec()
        } else if a.len() == b.len() {
            let mut out = Vec::with_capacity(a.len());
            for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
                if x != y && x != 1 && y != 1 {
                    return Err(Error::shape(
                        op,
                        format!("cannot broadcast {a:?} with {b:?}: axis {axis} has {x} vs {y}"),
                    ));
                }
                out.push(x.max(y));
            }
            out
        } else {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {a:?} with {b:?}: ranks differ"),
            ));
        };
        Ok(Self {
            a_strides: strides_for(a, &out_shape),
            b_strides: strides_for(b, &out_shape),
            out_shape,
            same: false,
        })
    }

    /// Calls `f(out, a, b)` for every output element, in order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let numel: usize = self.out_shape.iter().product();
        if self.same {
            for i in 0..numel {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..numel {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn unary(&mut self, input: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let requires = self.requires_grad(input);
        self.push(out, op, requires)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let plan = Broadcast::new(op_name, self.value(a).shape(), self.value(b).shape())?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(plan.out_shape.iter().product());
        plan.for_each(|_, i, j| data.push(f(xa[i], xb[j])));
        let out = Tensor::new(plan.out_shape, data)?;
        let requires = self.any_requires(&[a, b]);
        Ok(self.push(out, op, requires))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Op::Relu(input), |v| v.max(T::zero()))
    }

    /// Clamps to `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(input, Op::Clamp { input, lo, hi }, |v| v.max(l).min(h))
    }

    pub fn clamp01(&mut self, input: Var) -> Var {
        self.clamp(input, 0.0, 1.0)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, Op::Exp(input), |v| v.exp())
    }

    pub fn scalar_mul(&mut self, input: Var, scale: f64) -> Var {
        let s = T::from_f64(scale);
        self.unary(input, Op::ScalarMul { input, scale }, |v| v * s)
    }

    /// Broadcasting addition (scalar, or size-1 axes of equal rank).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add { a, b }, |x, y| x + y)
    }

    /// Broadcasting product (scalar, or size-1 axes of equal rank).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|v| v.as_f64()).sum();
        let requires = self.requires_grad(input);
        self.push(Tensor::scalar(T::from_f64(total)), Op::Sum(input), requires)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        let s = self.sum(input);
        self.scalar_mul(s, 1.0 / n as f64)
    }

    /// Spatial mean per channel: N×C×H×W → N×C×1×1.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("global_avg_pool")?;
        let plane = h * w;
        let data = x
            .data()
            .chunks(plane)
            .map(|ch| T::from_f64(ch.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let out = Tensor::new([n, c, 1, 1], data)?;
        let requires = self.requires_grad(input);
        Ok(self.push(out, Op::GlobalAvgPool(input), requires))
    }
}

pub(crate) fn relu_backward<T: Scalar>(x: Var, gout: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let (xv, slot) = sink.value_and_slot(x, x);
    for ((d, &v), &g) in slot.iter_mut().zip(xv.data()).zip(gout) {
        if v > T::zero() {
            *d = *d + g;
        }
    }
}

pub(crate) fn clamp_backward<T: Scalar>(
    x: Var,
    lo: f64,
    hi: f64,
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(x) {
        return;
    }
    let (l, h) = (T::from_f64(lo), T::from_f64(hi));
    let (xv, slot) = sink.value_and_slot(x, x);
    for ((d, &v), &g) in slot.iter_mut().zip(xv.data()).zip(gout) {
        if v > l && v < h {
            *d = *d + g;
        }
    }
}

pub(crate) fn exp_backward<T: Scalar>(
    x: Var,
    out: &Tensor<T>,
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(x) {
        return;
    }
    for ((d, &y), &g) in sink.slot(x).iter_mut().zip(out.data()).zip(gout) {
        *d = *d + g * y;
    }
}

pub(crate) fn scalar_mul_backward<T: Scalar>(
    x: Var,
    scale: f64,
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(x) {
        return;
    }
    let s = T::from_f64(scale);
    for (d, &g) in sink.slot(x).iter_mut().zip(gout) {
        *d = *d + g * s;
    }
}

pub(crate) fn add_backward<T: Scalar>(
    a: Var,
    b: Var,
    out_shape: &[usize],
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let plan = Broadcast::new("add", sink.value(a).shape(), sink.value(b).shape())
        .expect("validated in forward");
    debug_assert_eq!(plan.out_shape, out_shape);
    for (v, pick_a) in [(a, true), (b, false)] {
        if !sink.wants(v) {
            continue;
        }
        let slot = sink.slot(v);
        plan.for_each(|o, i, j| {
            let k = if pick_a { i } else { j };
            slot[k] = slot[k] + gout[o];
        });
    }
}

pub(crate) fn mul_backward<T: Scalar>(
    a: Var,
    b: Var,
    out_shape: &[usize],
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let plan = Broadcast::new("mul", sink.value(a).shape(), sink.value(b).shape())
        .expect("validated in forward");
    debug_assert_eq!(plan.out_shape, out_shape);
    if sink.wants(a) {
        let other = sink.value(b).data().to_vec();
        let slot = sink.slot(a);
        plan.for_each(|o, i, j| slot[i] = slot[i] + gout[o] * other[j]);
    }
    if sink.wants(b) {
        let other = sink.value(a).data().to_vec();
        let slot = sink.slot(b);
        plan.for_each(|o, i, j| slot[j] = slot[j] + gout[o] * other[i]);
    }
}

pub(crate) fn sum_backward<T: Scalar>(x: Var, gout: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let g = gout[0];
    for d in sink.slot(x) {
        *d = *d + g;
    }
}

pub(crate) fn gap_backward<T: Scalar>(x: Var, gout: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let [_, _, h, w] = sink.value(x).dims4("global_avg_pool").unwrap();
    let plane = h * w;
    let scale = T::from_f64(1.0 / plane as f64);
    for (chunk, &g) in sink.slot(x).chunks_mut(plane).zip(gout) {
        for d in chunk {
            *d = *d + g * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([4], -0.5));
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 1, 2], &[0.1, 0.2, 0.3, 0.4]));
        let z = g.constant(Tensor::scalar(0.0));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn per_channel_product() {
        let mut g = Graph::<f64>::new();
        let px = g.constant(t(&[1, 3, 1, 1], &[0.2, 0.4, 0.1]));
        let a = g.constant(t(&[1, 3, 1, 1], &[2.0, 1.0, 3.0]));
        let y = g.mul(px, a).unwrap();
        let want = [0.4, 0.4, 0.3];
        for (v, w) in g.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_broadcast_gradient_reduces() {
        let mut g = Graph::<f64>::new();
        let img = g.param(Tensor::from_fn([2, 3, 2, 2], |i| i as f64));
        let a = g.param(t(&[2, 3, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.mul(img, a).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        // d/da[n,c] = sum of that channel's pixels
        let ga = g.grad(a).unwrap();
        assert_eq!(ga[0], 0.0 + 1.0 + 2.0 + 3.0);
        assert_eq!(ga[5], 20.0 + 21.0 + 22.0 + 23.0);
        assert_eq!(g.grad(img).unwrap()[4], 2.0);
    }

    #[test]
    fn incompatible_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 3, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 2, 1, 1]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }

    #[test]
    fn clamp01_saturates_with_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.8, 0.5, -0.2]));
        let y = g.clamp01(x);
        assert_eq!(g.value(y).data(), &[1.0, 0.5, 0.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.7, 0.7, 0.7, 0.7]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 1, 1]);
        assert_eq!(g.value(y).data()[0], 2.5);
        assert!((g.value(y).data()[1] - 0.7).abs() < 1e-15);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.25));
    }
}
