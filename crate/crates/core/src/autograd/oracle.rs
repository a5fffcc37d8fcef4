//! Reference implementations used as ground truth by the test suites.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Direct nested-loop cross-correlation with 64-bit accumulation.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<f64>> {
    let [n, c, h, wd] = x.dims4("naive_conv2d")?;
    let [o, wc, kh, kw] = w.dims4("naive_conv2d")?;
    if c != wc {
        return Err(Error::shape(
            "naive_conv2d",
            format!("input channels (axis 1) = {c} but weight input channels (axis 1) = {wc}"),
        ));
    }
    if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::shape(
            "naive_conv2d",
            "kernel does not fit the padded input",
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xs = x.data();
    let ws = w.data();
    let mut out = Tensor::zeros([n, o, oh, ow]);
    let ys = out.data_mut();
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xs[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = ws[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    ys[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Half-pixel-center bilinear sample position: source index pair and the
/// weight on the second one.
pub fn bilinear_source(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == in_len - 1 {
        0.0
    } else {
        src - i0 as f64
    };
    (i0, i1, frac)
}

/// Pointwise bilinear resize that evaluates the sampling formula directly.
pub fn naive_bilinear(x: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let [n, c, h, w] = x.dims4("naive_bilinear")?;
    let xs = x.data();
    Ok(Tensor::from_fn([n, c, out_h, out_w], |i| {
        let ox = i % out_w;
        let oy = (i / out_w) % out_h;
        let plane = i / (out_w * out_h);
        let (y0, y1, fy) = bilinear_source(oy, h, out_h);
        let (x0, x1, fx) = bilinear_source(ox, w, out_w);
        let at = |y: usize, xx: usize| xs[(plane * h + y) * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    }))
}

/// Per-pixel softmax cross-entropy evaluated straight from the definition.
pub fn naive_cross_entropy(logits: &Tensor<f64>, labels: &[u8], ignore: u8) -> f64 {
    let [n, k, h, w] = logits.dims4("naive_cross_entropy").expect("NCHW logits");
    let ls = logits.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        for p in 0..h * w {
            let label = labels[b * h * w + p];
            if label == ignore {
                continue;
            }
            let z: Vec<f64> = (0..k).map(|c| ls[(b * k + c) * h * w + p]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            total -= (z[label as usize].exp() / denom).ln();
            count += 1;
        }
    }
    total / count as f64
}
