use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interpolation taps along one axis: `(lower index, upper index, upper weight)`.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            // half-pixel centers, clamped to the edge
            let src = (scale * (d as f64 + 0.5) - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Bilinear resize of an NCHW tensor with half-pixel centers.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("target size {out_h}x{out_w} must be at least 1x1"),
            ));
        }
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("bilinear_resize")?;
        let ty = axis_taps(h, out_h);
        let tx = axis_taps(w, out_w);
        let xs = x.data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in xs.chunks(h * w) {
            for &(y0, y1, fy) in &ty {
                let (r0, r1) = (&plane[y0 * w..][..w], &plane[y1 * w..][..w]);
                for &(x0, x1, fx) in &tx {
                    let top = (1.0 - fx) * r0[x0].as_f64() + fx * r0[x1].as_f64();
                    let bot = (1.0 - fx) * r1[x0].as_f64() + fx * r1[x1].as_f64();
                    out.push(T::from_f64((1.0 - fy) * top + fy * bot));
                }
            }
        }
        let out = Tensor::new([n, c, out_h, out_w], out)?;
        let requires = self.requires_grad(input);
        Ok(self.push(out, Op::Resize { input }, requires))
    }
}

pub(crate) fn resize_backward<T: Scalar>(
    input: Var,
    out_shape: &[usize],
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let [_, _, h, w] = sink.value(input).dims4("bilinear_resize").unwrap();
    let (out_h, out_w) = (out_shape[2], out_shape[3]);
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let slot = sink.slot(input);
    for (plane_in, plane_out) in slot.chunks_mut(h * w).zip(gout.chunks(out_h * out_w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = plane_out[oy * out_w + ox].as_f64();
                let mut add = |y: usize, x: usize, wgt: f64| {
                    let d = &mut plane_in[y * w + x];
                    *d = *d + T::from_f64(g * wgt);
                };
                add(y0, x0, (1.0 - fy) * (1.0 - fx));
                add(y0, x1, (1.0 - fy) * fx);
                add(y1, x0, fy * (1.0 - fx));
                add(y1, x1, fy * fx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::oracle::naive_bilinear;
    use super::*;

    fn resize(x: Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
        let mut g = Graph::<f64>::new();
        let v = g.constant(x);
        let y = g.bilinear_resize(v, h, w).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn constant_stays_constant() {
        for (h, w) in [(1, 1), (7, 3), (32, 32), (40, 9)] {
            let y = resize(Tensor::full([1, 3, 11, 5], 0.5), h, w);
            assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_fn([2, 3, 6, 5], |i| (i as f64 * 0.731).sin());
        let y = resize(x.clone(), 6, 5);
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn upsample_matches_sampling_formula() {
        let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = resize(x.clone(), 4, 4);
        let want = naive_bilinear(&x, 4, 4).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-6);
        // each row is 0, 0.25, 0.75, 1
        assert!((y.data()[1] - 0.25).abs() < 1e-12);
        assert!((y.data()[2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_target_rejected() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.bilinear_resize(v, 0, 3).is_err());
    }
}
