use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Mean per-pixel softmax cross-entropy over pixels whose label is not
    /// [`LabelMap::IGNORE`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &LabelMap) -> Result<Var> {
        let z = self.value(logits);
        let [n, k, h, w] = z.dims4("softmax_cross_entropy")?;
        if (labels.n, labels.h, labels.w) != (n, h, w) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!(
                    "labels {}x{}x{} do not match logits axes 0,2,3 ({n}x{h}x{w})",
                    labels.n, labels.h, labels.w
                ),
            ));
        }
        let plane = h * w;
        let zs = z.data();
        let mut probs = vec![0.0; zs.len()];
        let mut total = 0.0;
        let mut count = 0;
        let mut row = vec![0.0; k];
        for b in 0..n {
            for p in 0..plane {
                let label = labels.data[b * plane + p];
                if label != LabelMap::IGNORE && label as usize >= k {
                    return Err(Error::LabelOutOfRange {
                        index: b * plane + p,
                        value: label,
                        classes: k,
                    });
                }
                for (c, r) in row.iter_mut().enumerate() {
                    *r = zs[(b * k + c) * plane + p].as_f64();
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for (c, r) in row.iter().enumerate() {
                    probs[(b * k + c) * plane + p] = (r - max).exp() / denom;
                }
                if label != LabelMap::IGNORE {
                    total += denom.ln() - (row[label as usize] - max);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::NoLabeledPixels);
        }
        let out = Tensor::scalar(T::from_f64(total / count as f64));
        let requires = self.requires_grad(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.clone(),
                count,
            },
            requires,
        ))
    }
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    logits: Var,
    probs: &[f64],
    labels: &LabelMap,
    count: usize,
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(logits) {
        return;
    }
    let [n, k, h, w] = sink.value(logits).dims4("softmax_cross_entropy").unwrap();
    let plane = h * w;
    let scale = gout[0].as_f64() / count as f64;
    let slot = sink.slot(logits);
    for b in 0..n {
        for p in 0..plane {
            let label = labels.data[b * plane + p];
            if label == LabelMap::IGNORE {
                continue;
            }
            for c in 0..k {
                let i = (b * k + c) * plane + p;
                let onehot = if c == label as usize { 1.0 } else { 0.0 };
                slot[i] = slot[i] + T::from_f64(scale * (probs[i] - onehot));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::oracle::naive_cross_entropy;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss(z: Tensor<f64>, labels: &LabelMap) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let v = g.constant(z);
        let l = g.softmax_cross_entropy(v, labels)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let l = loss(Tensor::full([1, 4, 2, 2], 0.3), &labels).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let labels = LabelMap::new(1, 1, 1, vec![2]).unwrap();
        let z = Tensor::new([1, 3, 1, 1], vec![0.0, 0.0, 60.0]).unwrap();
        assert!(loss(z, &labels).unwrap() < 1e-20);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::from_fn([1, 3, 2, 2], |_| rng.gen_range(-3.0..3.0));
        let labels = LabelMap::new(1, 2, 2, vec![0, 2, 1, 2]).unwrap();
        let want = naive_cross_entropy(&z, &labels.data, LabelMap::IGNORE);
        assert!((loss(z, &labels).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn ignored_pixels_are_skipped() {
        let z = Tensor::from_fn([1, 2, 1, 2], |i| i as f64);
        let labels = LabelMap::new(1, 1, 2, vec![1, LabelMap::IGNORE]).unwrap();
        let want = naive_cross_entropy(&z, &labels.data, LabelMap::IGNORE);
        assert!((loss(z.clone(), &labels).unwrap() - want).abs() < 1e-12);
        let all = LabelMap::new(1, 1, 2, vec![LabelMap::IGNORE; 2]).unwrap();
        assert!(matches!(loss(z, &all), Err(Error::NoLabeledPixels)));
    }

    #[test]
    fn out_of_range_label_names_pixel() {
        let labels = LabelMap::new(1, 1, 3, vec![0, 1, 7]).unwrap();
        match loss(Tensor::zeros([1, 4, 1, 3]), &labels) {
            Err(Error::LabelOutOfRange { index, value, .. }) => assert_eq!((index, value), (2, 7)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
