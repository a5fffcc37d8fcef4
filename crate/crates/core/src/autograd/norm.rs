use serde::{Deserialize, Serialize};

use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor<f32>,
    pub var: Tensor<f32>,
    /// Number of train-mode batches folded in, stored as a 1-element tensor
    /// so it travels with the other checkpoint tensors.
    pub tracked: Tensor<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::full([channels], 1.0),
            tracked: Tensor::zeros([1]),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.tracked.item() > 0.0
    }

    fn update(&mut self, mean: &[f64], unbiased_var: &[f64], momentum: f64) {
        for (r, m) in self.mean.data_mut().iter_mut().zip(mean) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * m) as f32;
        }
        for (r, v) in self.var.data_mut().iter_mut().zip(unbiased_var) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * v) as f32;
        }
        self.tracked.data_mut()[0] += 1.0;
    }
}

impl<T: Scalar> Graph<T> {
    /// Per-channel normalization over (N, H, W).
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats`; eval mode reads `stats` and errors if none were recorded.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        eps: f64,
        momentum: f64,
        layer: &str,
    ) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("batchnorm2d")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!(
                        "{name} shape {:?} but input channels (axis 1) = {c}",
                        self.value(v).shape()
                    ),
                ));
            }
        }
        if stats.mean.shape() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "running stats cover {:?} channels but input has {c}",
                    stats.mean.shape()
                ),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let xs = x.data();
        let channel_values = |ch: usize| {
            (0..n).flat_map(move |b| {
                xs[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| v.as_f64())
            })
        };
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::shape(
                        "batchnorm2d",
                        format!("train mode needs N·H·W >= 2 values per channel, got {count}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let m = channel_values(ch).sum::<f64>() / count as f64;
                    let v =
                        channel_values(ch).map(|x| (x - m) * (x - m)).sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var)
            }
            Mode::Eval => {
                if !stats.is_initialized() {
                    return Err(Error::UninitializedStatistics {
                        layer: layer.to_string(),
                    });
                }
                (
                    stats.mean.data().iter().map(|&v| v as f64).collect(),
                    stats.var.data().iter().map(|&v| v as f64).collect(),
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = Vec::with_capacity(xs.len());
        for b in 0..n {
            for ch in 0..c {
                let (g, be) = (gs[ch].as_f64(), bs[ch].as_f64());
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xs[i].as_f64() - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out.push(T::from_f64(g * xh + be));
                }
            }
        }
        if mode == Mode::Train {
            let unbiased: Vec<f64> = var
                .iter()
                .map(|v| v * count as f64 / (count - 1) as f64)
                .collect();
            stats.update(&mean, &unbiased, momentum);
        }
        let out = Tensor::new([n, c, h, w], out)?;
        let requires = self.any_requires(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            requires,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Scalar>(
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    gout: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let [n, c, h, w] = sink.value(input).dims4("batchnorm2d").unwrap();
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let dy = gout[i].as_f64();
                sum_dy[ch] += dy;
                sum_dy_xhat[ch] += dy * xhat[i];
            }
        }
    }
    if sink.wants(input) {
        let gs: Vec<f64> = sink
            .value(gamma)
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let dx = sink.slot(input);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let k = gs[ch] * inv_std[ch];
                for i in base..base + plane {
                    let dy = gout[i].as_f64();
                    let d = if batch_stats {
                        k * (dy - sum_dy[ch] / count - xhat[i] * sum_dy_xhat[ch] / count)
                    } else {
                        k * dy
                    };
                    dx[i] = dx[i] + T::from_f64(d);
                }
            }
        }
    }
    if sink.wants(gamma) {
        for (d, s) in sink.slot(gamma).iter_mut().zip(&sum_dy_xhat) {
            *d = *d + T::from_f64(*s);
        }
    }
    if sink.wants(beta) {
        for (d, s) in sink.slot(beta).iter_mut().zip(&sum_dy) {
            *d = *d + T::from_f64(*s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(
        x: Tensor<f64>,
        gamma: f64,
        beta: f64,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Tensor<f64>> {
        let c = x.shape()[1];
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let gv = g.constant(Tensor::full([c], gamma));
        let bv = g.constant(Tensor::full([c], beta));
        let y = g.batchnorm2d(xv, gv, bv, stats, mode, 1e-5, 0.1, "bn")?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn normalizes_known_values() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = run(x, 1.0, 0.0, &mut RunningStats::new(1), Mode::Train).unwrap();
        // mean 2.5, biased variance 1.25
        let want: Vec<f64> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|v: &f64| (v - 2.5) / (1.25f64 + 1e-5).sqrt())
            .collect();
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in y.data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let y = run(
            Tensor::full([2, 1, 3, 3], 0.7),
            1.0,
            0.0,
            &mut RunningStats::new(1),
            Mode::Train,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let x = Tensor::from_fn([2, 3, 2, 2], |i| i as f64 * 0.37);
        let y = run(x, 0.0, 0.25, &mut RunningStats::new(3), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn eval_before_training_is_an_error() {
        let x = Tensor::full([1, 2, 2, 2], 1.0);
        let err = run(x, 1.0, 0.0, &mut RunningStats::new(2), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::UninitializedStatistics { .. }));
    }

    #[test]
    fn train_mode_needs_two_values() {
        let x = Tensor::full([1, 1, 1, 1], 1.0);
        assert!(run(x, 1.0, 0.0, &mut RunningStats::new(1), Mode::Train).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut stats = RunningStats::new(1);
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        run(x.clone(), 1.0, 0.0, &mut stats, Mode::Train).unwrap();
        // unbiased variance of {1,2,3,4} is 5/3
        assert!((stats.mean.item() as f64 - 0.25).abs() < 1e-6);
        assert!((stats.var.item() as f64 - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
        let y = run(x, 1.0, 0.0, &mut stats, Mode::Eval).unwrap();
        let want = (1.0 - 0.25) / ((0.9 + 0.1 * 5.0 / 3.0f64) + 1e-5).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-6);
    }

    #[test]
    fn train_output_is_standardized() {
        let x = Tensor::from_fn([4, 2, 3, 5], |i| ((i * 7919) % 101) as f64 / 13.0);
        let y = run(x, 1.0, 0.0, &mut RunningStats::new(2), Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 2 + ch) * 15..][..15].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
