use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode};
use crate::error::Result;
use crate::nn::Binder;
use crate::pam::{Enhancer, Variant};
use crate::recognizer::RecognizerNetwork;
use crate::tensor::Tensor;

/// Per-image wall-clock latency in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub iters: usize,
}

impl LatencyStats {
    pub fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
        Self {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: pick(0.5),
            p95_ms: pick(0.95),
            iters: ms.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub enhancer: LatencyStats,
    pub recognizer: LatencyStats,
    pub combined: LatencyStats,
}

fn time(warmup: usize, iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_samples(samples))
}

/// Eval-mode single-image latency of the enhancer, the recognizer and the
/// two chained, after at least 5 warmup runs and over at least 50 timed
/// runs each.
pub fn benchmark_latency(
    enhancer: &Enhancer,
    recognizer: &RecognizerNetwork,
    height: usize,
    width: usize,
    warmup: usize,
    iters: usize,
) -> Result<LatencyReport> {
    let (warmup, iters) = (warmup.max(5), iters.max(50));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Tensor::from_fn([1, 3, height, width], |_| rng.gen::<f32>() * 0.05);
    let mut enh = enhancer.clone();
    let mut run_enhancer = |x: &Tensor<f32>| -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let v = g.constant(x.clone());
        let nodes = enh.enhance(&mut g, v, Mode::Eval, Variant::Full, &mut Binder::frozen())?;
        Ok(g.value(nodes.output).clone())
    };
    let enhancer_stats = time(warmup, iters, || run_enhancer(&img).map(drop))?;
    let recognizer_stats = time(warmup, iters, || recognizer.logits(&img).map(drop))?;
    let combined = time(warmup, iters, || {
        let out = run_enhancer(&img)?;
        recognizer.logits(&out).map(drop)
    })?;
    Ok(LatencyReport {
        height,
        width,
        warmup,
        enhancer: enhancer_stats,
        recognizer: recognizer_stats,
        combined,
    })
}
