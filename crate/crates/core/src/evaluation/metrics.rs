use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Scalar, Tensor};

/// Dataset-level `K×K` confusion counts, `counts[truth * K + pred]`.
/// Pixels whose truth is [`LabelMap::IGNORE`] are skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (truth.n, truth.h, truth.w) {
            return Err(Error::shape(
                "miou",
                format!(
                    "prediction {}x{}x{} vs truth {}x{}x{}",
                    pred.n, pred.h, pred.w, truth.n, truth.h, truth.w
                ),
            ));
        }
        let k = self.classes;
        for (index, (&p, &t)) in pred.data.iter().zip(&truth.data).enumerate() {
            if t == LabelMap::IGNORE {
                continue;
            }
            for value in [p, t] {
                if value as usize >= k {
                    return Err(Error::LabelOutOfRange {
                        index,
                        value,
                        classes: k,
                    });
                }
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Shards accumulated separately combine by addition.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn report(&self) -> Result<MiouReport> {
        let k = self.classes;
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let truth_total: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            let pred_total: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            let union = truth_total + pred_total - tp;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::NoValidClass);
        }
        Ok(MiouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Intersection-over-union per class accumulated over the whole set, and
/// their mean over classes that occur in either map.
pub fn miou(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, truth)?;
    cm.report()
}

/// Mean over all pixels and channels, on the 0–255 scale.
pub fn mean_pixel_intensity<T: Scalar>(images: &Tensor<T>) -> f64 {
    let n = images.numel().max(1) as f64;
    images.data().iter().map(|v| v.as_f64()).sum::<f64>() / n * 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(data: Vec<u8>) -> LabelMap {
        LabelMap::new(1, 1, data.len(), data).unwrap()
    }

    #[test]
    fn binary_example() {
        let r = miou(&lm(vec![0, 1, 1, 1]), &lm(vec![0, 0, 1, 1]), 2).unwrap();
        assert!((r.per_class[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_flipped() {
        let t = lm(vec![0, 1, 2, 2, 0]);
        let r = miou(&t, &t, 4).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.per_class[3], None);
        let flipped = miou(&lm(vec![1, 0, 1]), &lm(vec![0, 1, 0]), 2).unwrap();
        assert_eq!(flipped.miou, 0.0);
    }

    #[test]
    fn errors() {
        let empty = LabelMap::new(1, 1, 1, vec![LabelMap::IGNORE]).unwrap();
        assert!(matches!(miou(&empty, &empty, 2), Err(Error::NoValidClass)));
        assert!(miou(&lm(vec![0, 5]), &lm(vec![0, 1]), 2).is_err());
        assert!(miou(&lm(vec![0]), &lm(vec![0, 1]), 2).is_err());
    }

    #[test]
    fn merged_shards_equal_whole() {
        let (p, t) = (lm(vec![0, 1, 2, 1, 0, 2]), lm(vec![0, 1, 1, 1, 2, 2]));
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&p.batch_slice(0, 1), &t.batch_slice(0, 1))
            .unwrap();
        let whole = a.clone();
        let mut b = ConfusionMatrix::new(3);
        let mut c = ConfusionMatrix::new(3);
        let p2 = LabelMap::new(2, 1, 3, p.data.clone()).unwrap();
        let t2 = LabelMap::new(2, 1, 3, t.data.clone()).unwrap();
        b.accumulate(&p2.batch_slice(0, 1), &t2.batch_slice(0, 1))
            .unwrap();
        c.accumulate(&p2.batch_slice(1, 2), &t2.batch_slice(1, 2))
            .unwrap();
        b.merge(&c);
        assert_eq!(b, whole);
    }

    #[test]
    fn intensity_endpoints() {
        assert_eq!(
            mean_pixel_intensity(&Tensor::<f32>::zeros([1, 3, 2, 2])),
            0.0
        );
        assert_eq!(
            mean_pixel_intensity(&Tensor::<f32>::full([1, 3, 2, 2], 1.0)),
            255.0
        );
        assert_eq!(
            mean_pixel_intensity(&Tensor::<f64>::full([1, 3, 2, 2], 0.5)),
            127.5
        );
    }
}
