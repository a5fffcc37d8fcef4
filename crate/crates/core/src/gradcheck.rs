//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Mode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::gem::gem_apply;
use crate::nn::{Binder, Module};
use crate::pam::{Enhancer, Variant};
use crate::recognizer::{model_specific_loss, RecognizerNetwork};
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Elements probed across all inputs; every element when the inputs
    /// hold fewer.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            max_probes: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub tolerance: f64,
    pub worst: Option<Probe>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &mut F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::NotScalar("grad_check"));
    }
    Ok(value.item())
}

/// Compares the analytic gradient of the scalar `f(inputs)` against central
/// differences on a random subset of input elements. Every input is a
/// differentiable leaf; capture constants in the closure.
pub fn grad_check<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NotScalar("grad_check"));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();
    drop(g);

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.numel();
            Some(start)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<usize> = if total <= cfg.max_probes {
        (0..total).collect()
    } else {
        sample(&mut rng, total, cfg.max_probes).into_vec()
    };
    picks.sort_unstable();

    let mut work = inputs.to_vec();
    let mut worst: Option<Probe> = None;
    for flat in &picks {
        let input = offsets.partition_point(|&o| o <= *flat) - 1;
        let element = flat - offsets[input];
        let orig = work[input].data()[element];
        work[input].data_mut()[element] = orig + cfg.step;
        let plus = evaluate(&mut f, &work)?;
        work[input].data_mut()[element] = orig - cfg.step;
        let minus = evaluate(&mut f, &work)?;
        work[input].data_mut()[element] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[input].data()[element];
        let rel = relative_error(a, numeric);
        if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
            worst = Some(Probe {
                input,
                element,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        probes: picks.len(),
        tolerance: cfg.tolerance,
        worst,
    })
}

fn worst_of(probes: impl IntoIterator<Item = Probe>, tolerance: f64) -> GradCheckReport {
    let mut worst: Option<Probe> = None;
    let mut count = 0;
    for p in probes {
        count += 1;
        if worst.as_ref().is_none_or(|w| p.rel_error > w.rel_error) {
            worst = Some(p);
        }
    }
    GradCheckReport {
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        probes: count,
        tolerance,
        worst,
    }
}

/// Like [`grad_check`], but probes the named parameters of `model`, which
/// `f` binds through the supplied [`Binder`]. Perturbations are applied in
/// `f64` after the stored `f32` values are converted.
///
/// Deep compositions are piecewise smooth, so a central difference can
/// straddle a ReLU or clamp kink, and tiny partials drown in roundoff. A
/// candidate element is kept only when its numeric derivatives at `step`
/// and `step / 2` agree to a tenth of the tolerance; this never consults the
/// analytic value. Candidates are drawn until `max_probes` are kept or
/// twenty times that many have been tried.
pub fn grad_check_params<M, F>(
    model: &mut M,
    mut f: F,
    cfg: GradCheckConfig,
) -> Result<ParamCheckReport>
where
    M: Module,
    F: FnMut(&mut M, &mut Graph<f64>, &mut Binder) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut binder = Binder::trainable();
    let out = f(model, &mut g, &mut binder)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NotScalar("grad_check_params"));
    }
    g.backward(out)?;
    let grads = binder.grads_f64(&g);
    drop(g);

    let params = model.param_breakdown();
    let mut ends = Vec::with_capacity(params.len());
    let mut total = 0;
    for (_, n) in &params {
        total += n;
        ends.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let candidates = sample(&mut rng, total, total.min(cfg.max_probes * 20)).into_vec();

    let mut eval = |name: &str, element: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let mut binder = Binder::nudged(name, element, delta);
        let out = f(model, &mut g, &mut binder)?;
        Ok(g.value(out).item())
    };
    let mut probes = Vec::with_capacity(cfg.max_probes);
    let mut rejected = 0;
    for flat in candidates {
        if probes.len() == cfg.max_probes {
            break;
        }
        let tensor = ends.partition_point(|&e| e <= flat);
        let element = flat - (ends[tensor] - params[tensor].1);
        let name = &params[tensor].0;
        let mut central = |h: f64| -> Result<f64> {
            Ok((eval(name, element, h)? - eval(name, element, -h)?) / (2.0 * h))
        };
        let coarse = central(cfg.step)?;
        let fine = central(cfg.step / 2.0)?;
        if relative_error(coarse, fine) > cfg.tolerance / 10.0 {
            rejected += 1;
            continue;
        }
        let analytic = grads.get(name).map_or(0.0, |g| g[element]);
        probes.push(Probe {
            input: tensor,
            element,
            analytic,
            numeric: fine,
            rel_error: relative_error(analytic, fine),
        });
    }
    Ok(ParamCheckReport {
        report: worst_of(probes, cfg.tolerance),
        rejected,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheckReport {
    pub report: GradCheckReport,
    /// Candidates whose numeric derivative was not self-consistent.
    pub rejected: usize,
}

/// Result of one entry of [`run_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradCheckReport,
    /// Probes discarded as numerically unreliable (composite check only).
    pub rejected: usize,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `sum(w ⊙ x)` with fixed random weights, so every output element
/// contributes a distinct amount.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, g.value(x).shape(), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, k: usize) -> LabelMap {
    let data = (0..n * h * w)
        .map(|_| {
            if rng.gen_bool(0.1) {
                LabelMap::IGNORE
            } else {
                rng.gen_range(0..k as u8)
            }
        })
        .collect();
    LabelMap::new(n, h, w, data).expect("sized")
}

/// Randomizes the zero-initialized output layers and gives every
/// batch-norm layer plausible running statistics, so gradients are generic.
fn perturb_for_check(enhancer: &mut Enhancer, rng: &mut ChaCha8Rng) {
    let last = enhancer.gem.layers.last_mut().expect("gem layers");
    for t in [
        &mut last.weight,
        &mut last.bias,
        &mut enhancer.pam.head.weight,
        &mut enhancer.pam.head.bias,
    ] {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
}

fn seeded_stats(stats: &mut RunningStats, rng: &mut ChaCha8Rng) {
    for v in stats.mean.data_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    for v in stats.var.data_mut() {
        *v = rng.gen_range(0.5..2.0);
    }
    stats.tracked.data_mut()[0] = 1.0;
}

/// Finite-difference checks of every differentiable operation in 64-bit
/// mode, each with at least `cfg.max_probes` probes where the operands are
/// that large.
pub fn run_suite(cfg: GradCheckConfig) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sd = cfg.seed;
    let mut out = Vec::new();
    let mut push = |op: &'static str, report: GradCheckReport| {
        out.push(OpCheck {
            op,
            report,
            rejected: 0,
        })
    };

    let x = uniform(&mut rng, &[2, 3, 7, 6], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[4], -0.5, 0.5);
    push(
        "conv2d",
        grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted_sum(g, y, sd)
            },
            &[x, w, b],
            cfg,
        )?,
    );

    let x = uniform(&mut rng, &[2, 4, 4, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[3], -0.5, 0.5);
    push(
        "conv_transpose2d",
        grad_check(
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
                weighted_sum(g, y, sd + 1)
            },
            &[x, w, b],
            cfg,
        )?,
    );

    let x = uniform(&mut rng, &[3, 4, 5, 5], -2.0, 2.0);
    let gamma = uniform(&mut rng, &[4], 0.5, 1.5);
    let beta = uniform(&mut rng, &[4], -0.5, 0.5);
    push(
        "batchnorm2d",
        grad_check(
            |g, v| {
                let mut stats = RunningStats::new(4);
                let y = g.batchnorm2d(
                    v[0],
                    v[1],
                    v[2],
                    &mut stats,
                    Mode::Train,
                    1e-5,
                    0.1,
                    "check",
                )?;
                weighted_sum(g, y, sd + 2)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            cfg,
        )?,
    );
    let mut eval_stats = RunningStats::new(4);
    seeded_stats(&mut eval_stats, &mut rng);
    push(
        "batchnorm2d_eval",
        grad_check(
            |g, v| {
                let mut stats = eval_stats.clone();
                let y =
                    g.batchnorm2d(v[0], v[1], v[2], &mut stats, Mode::Eval, 1e-5, 0.1, "check")?;
                weighted_sum(g, y, sd + 3)
            },
            &[x, gamma, beta],
            cfg,
        )?,
    );

    let x = uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    push(
        "relu",
        grad_check(
            |g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, sd + 4)
            },
            &[x],
            cfg,
        )?,
    );

    for (op, shape, (oh, ow)) in [
        ("bilinear_resize_up", [1, 3, 5, 7], (32, 32)),
        ("bilinear_resize_down", [1, 3, 40, 36], (32, 32)),
    ] {
        let x = uniform(&mut rng, &shape, 0.0, 1.0);
        push(
            op,
            grad_check(
                |g, v| {
                    let y = g.bilinear_resize(v[0], oh, ow)?;
                    weighted_sum(g, y, sd + 5)
                },
                &[x],
                cfg,
            )?,
        );
    }

    let x = uniform(&mut rng, &[2, 3, 5, 5], -1.5, 1.5);
    let y = uniform(&mut rng, &[1, 3, 1, 1], -1.0, 1.0);
    push(
        "elementwise",
        grad_check(
            |g, v| {
                let c = g.clamp(v[0], -1.0, 1.0);
                let e = g.exp(c);
                let m = g.mul(v[0], v[1])?;
                let s = g.add(e, m)?;
                let t = g.scalar_mul(s, 0.7);
                let u = g.add(t, v[1])?;
                let c01 = g.clamp01(u);
                let z = g.add(u, c01)?;
                weighted_sum(g, z, sd + 6)
            },
            &[x, y],
            cfg,
        )?,
    );

    let x = uniform(&mut rng, &[2, 5, 4, 6], -1.0, 1.0);
    push(
        "global_avg_pool",
        grad_check(
            |g, v| {
                let y = g.global_avg_pool(v[0])?;
                weighted_sum(g, y, sd + 7)
            },
            &[x],
            cfg,
        )?,
    );

    let z = uniform(&mut rng, &[2, 5, 4, 4], -3.0, 3.0);
    let labels = random_labels(&mut rng, 2, 4, 4, 5);
    push(
        "cross_entropy",
        grad_check(|g, v| g.softmax_cross_entropy(v[0], &labels), &[z], cfg)?,
    );

    let img = uniform(&mut rng, &[2, 3, 6, 6], 0.0, 1.0);
    let a = uniform(&mut rng, &[2, 3, 1, 1], 0.2, 3.0);
    push(
        "gem_apply",
        grad_check(
            |g, v| {
                let y = gem_apply(g, v[0], v[1])?;
                weighted_sum(g, y, sd + 8)
            },
            &[img, a],
            cfg,
        )?,
    );

    let mut enhancer = Enhancer::new(&mut rng);
    perturb_for_check(&mut enhancer, &mut rng);
    let mut recognizer = RecognizerNetwork::new(5, &mut rng);
    for b in &mut recognizer.blocks {
        seeded_stats(&mut b.bn.stats, &mut rng);
    }
    recognizer.freeze();
    let images = Tensor::from_fn([2, 3, 32, 32], |_| rng.gen_range(0.3..0.7));
    let labels = random_labels(&mut rng, 2, 32, 32, 5);
    let composite = GradCheckConfig { step: 1e-4, ..cfg };
    let checked = grad_check_params(
        &mut enhancer,
        |e, g, binder| {
            let x = g.constant(images.clone());
            let nodes = e.enhance(g, x, Mode::Train, Variant::Full, binder)?;
            let z = recognizer.forward_eval(g, nodes.output)?;
            model_specific_loss(g, z, &labels)
        },
        composite,
    )?;
    out.push(OpCheck {
        op: "enhance_through_recognizer",
        report: checked.report,
        rejected: checked.rejected,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let x = Tensor::from_fn([5], |i| i as f64 - 2.0);
        let report = grad_check(
            |g, v| {
                let y = g.scalar_mul(v[0], 2.0);
                Ok(g.sum(y))
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.probes, 5);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::zeros([3]);
        let err =
            grad_check(|g, v| Ok(g.relu(v[0])), &[x], GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NotScalar(_)));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_fn([4], |i| i as f64 * 0.1);
        let mut calls = 0;
        let report = grad_check(
            |g, v| {
                calls += 1;
                // the analytic pass sees 1x, the perturbed passes 3x
                let scale = if calls == 1 { 1.0 } else { 3.0 };
                let y = g.scalar_mul(v[0], scale);
                Ok(g.sum(y))
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn samples_at_most_max_probes() {
        let x = Tensor::from_fn([1000], |i| (i as f64).sin());
        let cfg = GradCheckConfig {
            max_probes: 100,
            ..Default::default()
        };
        let report = grad_check(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            },
            &[x],
            cfg,
        )
        .unwrap();
        assert_eq!(report.probes, 100);
        assert!(report.passed());
    }
}
