//! Frozen downstream segmentation network and its bright-data pretraining.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Var};
use crate::data::class_hue;
use crate::error::{Error, Result};
use crate::evaluation::{ConfusionMatrix, MiouReport};
use crate::nn::{Binder, Conv2d, ConvBnRelu, Module, TensorRole};
use crate::tensor::{LabelMap, Scalar, Tensor};
use crate::training::{Adam, AdamConfig, Checkpoint, CheckpointMeta};

const WIDTHS: [usize; 5] = [3, 24, 48, 48, 24];
/// Images per eval-mode forward when labelling a whole split.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct RecognizerNetwork {
    pub blocks: Vec<ConvBnRelu>,
    pub head: Conv2d,
    pub classes: usize,
    frozen: bool,
}

impl RecognizerNetwork {
    pub fn new(classes: usize, rng: &mut impl rand::Rng) -> Self {
        let blocks = (0..4)
            .map(|i| {
                ConvBnRelu::new(
                    &format!("rec.block{}", i + 1),
                    WIDTHS[i],
                    WIDTHS[i + 1],
                    1,
                    rng,
                )
            })
            .collect();
        Self {
            blocks,
            head: Conv2d::new("rec.head", WIDTHS[4], classes, 3, 1, 1, rng),
            classes,
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Logits `N×K×H×W`. A frozen network always runs in eval mode and
    /// enters the graph as constants, whatever `mode` and `binder` say.
    pub fn forward<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        binder: &mut Binder,
    ) -> Result<Var> {
        if self.frozen {
            return self.forward_eval(g, x);
        }
        let mut y = x;
        for b in &mut self.blocks {
            y = b.forward(g, y, mode, binder)?;
        }
        self.head.forward(g, y, binder)
    }

    /// Eval-mode logits with the parameters as graph constants; gradients
    /// reach `x` but never the weights.
    pub fn forward_eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut binder = Binder::frozen();
        let mut y = x;
        for b in &self.blocks {
            y = b.forward_eval(g, y, &mut binder)?;
        }
        self.head.forward(g, y, &mut binder)
    }

    /// Records batch-norm running statistics from one train-mode pass over
    /// `images`; weights are untouched. Refused once frozen.
    pub fn prime_statistics(&mut self, images: &Tensor<f32>) -> Result<()> {
        if self.frozen {
            return Err(Error::Config(
                "a frozen recognizer keeps its statistics".into(),
            ));
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone());
        self.forward(&mut g, x, Mode::Train, &mut Binder::frozen())
            .map(drop)
    }

    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone());
        let z = self.forward_eval(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    /// Argmax labels for every image, evaluated in bounded chunks.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<LabelMap> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut parts = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = images.batch_slice(start, (start + EVAL_CHUNK).min(n));
            parts.push(predict_labels(&self.logits(&chunk)?)?);
        }
        LabelMap::stack(&parts)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut meta = CheckpointMeta {
            kind: "recognizer".into(),
            config_hash: config_hash.into(),
            ..Default::default()
        };
        meta.extra.insert("classes".into(), self.classes.into());
        let mut c = Checkpoint::new(meta);
        c.push_module(self);
        c
    }

    /// Rebuilds a frozen network from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let classes = ckpt
            .meta
            .extra
            .get("classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| {
                Error::Config("checkpoint is not a recognizer (no class count)".into())
            })? as usize;
        let mut net = Self::new(classes, &mut ChaCha8Rng::seed_from_u64(0));
        ckpt.restore_module(&mut net)?;
        net.freeze();
        Ok(net)
    }
}

impl Module for RecognizerNetwork {
    fn visit(&self, f: &mut dyn FnMut(&str, TensorRole, &Tensor<f32>)) {
        for b in &self.blocks {
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Tensor<f32>)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Per-pixel softmax cross-entropy.
pub fn model_specific_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &LabelMap,
) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// Per-pixel argmax; ties resolve to the lowest class index.
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMap> {
    let [n, k, h, w] = logits.dims4("predict_labels")?;
    let plane = h * w;
    let z = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if z[(b * k + c) * plane + p] > z[(b * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap::new(n, h, w, out)
}

/// Labels from color alone: unsaturated pixels are background, the rest
/// take the class with the nearest base hue.
pub fn color_threshold_labels(images: &Tensor<f32>, classes: usize) -> Result<LabelMap> {
    let [n, _, h, w] = images.dims4("color_threshold_labels")?;
    let plane = h * w;
    let d = images.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let rgb = [0, 1, 2].map(|c| d[(b * 3 + c) * plane + p] as f64);
            let max = rgb.iter().cloned().fold(f64::MIN, f64::max);
            let min = rgb.iter().cloned().fold(f64::MAX, f64::min);
            let sat = if max > 0.0 { (max - min) / max } else { 0.0 };
            if sat < 0.4 {
                out.push(0);
                continue;
            }
            let delta = max - min;
            let hue = if max == rgb[0] {
                60.0 * ((rgb[1] - rgb[2]) / delta).rem_euclid(6.0)
            } else if max == rgb[1] {
                60.0 * ((rgb[2] - rgb[0]) / delta + 2.0)
            } else {
                60.0 * ((rgb[0] - rgb[1]) / delta + 4.0)
            };
            let dist = |k: usize| {
                let d = (hue - class_hue(k, classes)).rem_euclid(360.0);
                d.min(360.0 - d)
            };
            let best = (1..classes)
                .min_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap())
                .unwrap_or(0);
            out.push(best as u8);
        }
    }
    LabelMap::new(n, h, w, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out bright mIoU required for success.
    pub min_miou: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            min_miou: 0.90,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub val: MiouReport,
}

/// Labelled bright images for [`pretrain_recognizer`].
pub struct LabeledImages<'a> {
    pub images: &'a Tensor<f32>,
    pub labels: &'a LabelMap,
}

pub fn evaluate_recognizer(
    net: &RecognizerNetwork,
    data: &LabeledImages<'_>,
) -> Result<MiouReport> {
    let pred = net.predict(data.images)?;
    let mut cm = ConfusionMatrix::new(net.classes);
    cm.accumulate(&pred, data.labels)?;
    cm.report()
}

/// Trains `net` with Adam on random batches of `train`, then freezes it and
/// checks held-out mIoU on `val`. Falling short of `cfg.min_miou` is an
/// error; `net` keeps the trained weights either way.
pub fn pretrain_recognizer(
    net: &mut RecognizerNetwork,
    train: &LabeledImages<'_>,
    val: &LabeledImages<'_>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let n = train.images.shape()[0];
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if net.is_frozen() {
        return Err(Error::Config("cannot pretrain a frozen recognizer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sample(&mut rng, n, cfg.batch_size.min(n)).into_vec();
        let mut g = Graph::<f32>::new();
        let x = g.constant(train.images.gather_batch(&idx));
        let mut binder = Binder::trainable();
        let z = net.forward(&mut g, x, Mode::Train, &mut binder)?;
        let loss = model_specific_loss(&mut g, z, &train.labels.gather(&idx))?;
        let l = g.value(loss).item() as f64;
        if !l.is_finite() {
            return Err(Error::PretrainFailed(format!(
                "loss became {l} at step {step}"
            )));
        }
        losses.push(l);
        g.backward(loss)?;
        adam.step(net, &binder.grads(&g))?;
    }
    net.freeze();
    let report = evaluate_recognizer(net, val)?;
    if report.miou < cfg.min_miou {
        return Err(Error::PretrainFailed(format!(
            "held-out bright mIoU {:.4} below {:.2} after {} steps",
            report.miou, cfg.min_miou, cfg.steps
        )));
    }
    Ok(PretrainReport {
        losses,
        val: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn argmax_ties_and_one_hot() {
        let z = Tensor::new(
            [1, 3, 1, 3],
            vec![1.0f32, 0.0, 2.0, 0.0, 1.0, 2.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        assert_eq!(predict_labels(&z).unwrap().data, vec![0, 1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::from_fn([2, 4, 3, 3], |_| rng.gen_range(-1.0f64..1.0));
        let got = predict_labels(&z).unwrap();
        for b in 0..2 {
            for p in 0..9 {
                let vals: Vec<f64> = (0..4).map(|c| z.data()[(b * 4 + c) * 9 + p]).collect();
                let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                let want = vals.iter().position(|&v| v == max).unwrap();
                assert_eq!(got.data[b * 9 + p] as usize, want);
            }
        }
    }

    #[test]
    fn frozen_forward_is_pure_and_binds_nothing() {
        let mut net = RecognizerNetwork::new(5, &mut ChaCha8Rng::seed_from_u64(1));
        for b in &mut net.blocks {
            b.bn.stats.tracked.data_mut()[0] = 1.0;
        }
        net.freeze();
        let before = net.state_bytes();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::from_fn([1, 3, 8, 8], |_| rng.gen::<f32>());
        let mut g = Graph::<f32>::new();
        let x = g.param(img.clone());
        let mut binder = Binder::trainable();
        let z = net.forward(&mut g, x, Mode::Train, &mut binder).unwrap();
        assert!(binder.bound().is_empty());
        assert_eq!(g.value(z).shape(), &[1, 5, 8, 8]);
        assert_eq!(g.value(z), &net.logits(&img).unwrap());
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().any(|&v| v != 0.0));
        assert_eq!(net.state_bytes(), before);
    }

    #[test]
    fn unfrozen_eval_without_stats_errors() {
        let net = RecognizerNetwork::new(5, &mut ChaCha8Rng::seed_from_u64(1));
        let err = net.logits(&Tensor::zeros([1, 3, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::UninitializedStatistics { .. }));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut net = RecognizerNetwork::new(5, &mut ChaCha8Rng::seed_from_u64(3));
        net.freeze();
        let back = RecognizerNetwork::from_checkpoint(&net.to_checkpoint("h")).unwrap();
        assert_eq!(back.state_bytes(), net.state_bytes());
        assert!(back.is_frozen());
    }
}
