use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Reflects `i` into `[0, len)` without repeating the edge sample
/// (…, 2, 1, 0, 1, 2, …); folds repeatedly when the pad exceeds `len`.
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let [n, _, h, w] = self.value(*first).dims4("concat_channels")?;
        let mut channels = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("axes 0,2,3 must agree: {n}x_x{h}x{w} vs {vn}x_x{vh}x{vw}"),
                ));
            }
            channels += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new([n, channels, h, w], data)?;
        let requires = self.any_requires(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            requires,
        ))
    }

    fn gather(&mut self, input: Var, shape: [usize; 4], index: Vec<usize>) -> Result<Var> {
        let xs = self.value(input).data();
        let data = index.iter().map(|&i| xs[i]).collect();
        let out = Tensor::new(shape, data)?;
        let requires = self.requires_grad(input);
        Ok(self.push(out, Op::Gather { input, index }, requires))
    }

    /// Reflection-pads the bottom and right edges by `pad_h` rows and
    /// `pad_w` columns.
    pub fn pad_reflect(&mut self, input: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("pad_reflect")?;
        if pad_h == 0 && pad_w == 0 {
            return Ok(input);
        }
        let (oh, ow) = (h + pad_h, w + pad_w);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for y in 0..oh {
                let sy = reflect(y, h);
                for x in 0..ow {
                    index.push((plane * h + sy) * w + reflect(x, w));
                }
            }
        }
        self.gather(input, [n, c, oh, ow], index)
    }

    /// Keeps the top-left `out_h × out_w` window.
    pub fn crop(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("crop")?;
        if out_h > h || out_w > w {
            return Err(Error::shape(
                "crop",
                format!("window {out_h}x{out_w} exceeds input {h}x{w} (axes 2,3)"),
            ));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(input);
        }
        let mut index = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            for y in 0..out_h {
                for x in 0..out_w {
                    index.push((plane * h + y) * w + x);
                }
            }
        }
        self.gather(input, [n, c, out_h, out_w], index)
    }
}

pub(crate) fn concat_backward<T: Scalar>(inputs: &[Var], gout: &[T], sink: &mut GradSink<'_, T>) {
    let [n, _, h, w] = sink.value(inputs[0]).dims4("concat_channels").unwrap();
    let plane = h * w;
    let widths: Vec<usize> = inputs.iter().map(|&v| sink.value(v).shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut offset = 0;
    for (&v, &c) in inputs.iter().zip(&widths) {
        if sink.wants(v) {
            let slot = sink.slot(v);
            for b in 0..n {
                let src = &gout[(b * total + offset) * plane..][..c * plane];
                let dst = &mut slot[b * c * plane..][..c * plane];
                for (d, &g) in dst.iter_mut().zip(src) {
                    *d = *d + g;
                }
            }
        }
        offset += c;
    }
}

pub(crate) fn gather_backward<T: Scalar>(
    input: Var,
    index: &[usize],
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let slot = sink.slot(input);
    for (&i, &g) in index.iter().zip(gout) {
        slot[i] = slot[i] + g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds() {
        let got: Vec<usize> = (0..9).map(|i| reflect(i, 3)).collect();
        assert_eq!(got, [0, 1, 2, 1, 0, 1, 2, 1, 0]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_roundtrips() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([1, 2, 3, 5], |i| i as f64));
        let p = g.pad_reflect(x, 13, 11).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 2, 16, 16]);
        let c = g.crop(p, 3, 5).unwrap();
        assert_eq!(g.value(c), g.value(x));
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_orders_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full([2, 1, 1, 2], 1.0));
        let b = g.param(Tensor::full([2, 2, 1, 2], 2.0));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 1, 2]);
        assert_eq!(g.value(c).data()[..6], [1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let mismatched = g.constant(Tensor::zeros([2, 1, 2, 2]));
        assert!(g.concat_channels(&[a, mismatched]).is_err());
    }
}
