//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! reports one line, and exits non-zero if any of them fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use luxforge::autograd::oracle::naive_conv2d;
use luxforge::autograd::{Graph, Mode};
use luxforge::data::{build_corpus, Corpus, CorpusConfig, SubsetTag};
use luxforge::evaluation::{
    benchmark_latency, mean_pixel_intensity, miou, run_ablation, AblationConfig,
};
use luxforge::gradcheck::{run_suite, GradCheckConfig};
use luxforge::nn::{Binder, Module};
use luxforge::pam::{Enhancer, Variant};
use luxforge::recognizer::{
    evaluate_recognizer, pretrain_recognizer, LabeledImages, PretrainConfig, RecognizerNetwork,
};
use luxforge::tensor::{LabelMap, Tensor};
use luxforge::training::{hex_sha256, Checkpoint, EnhancerTrainer, TrainConfig, TrainData};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Default corpus and the recognizer pretrained on its bright images.
struct Shared {
    corpus: Corpus,
    recognizer: RecognizerNetwork,
    bright_val_miou: f64,
}

fn shared() -> Shared {
    let corpus = build_corpus(&CorpusConfig::default()).expect("default corpus");
    let mut recognizer = RecognizerNetwork::new(
        corpus.info.config.classes,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let report = pretrain_recognizer(
        &mut recognizer,
        &LabeledImages {
            images: &corpus.train.bright,
            labels: &corpus.train.labels,
        },
        &LabeledImages {
            images: &corpus.val.bright,
            labels: &corpus.val.labels,
        },
        &PretrainConfig {
            min_miou: 0.0,
            ..Default::default()
        },
    )
    .expect("pretraining runs");
    Shared {
        corpus,
        recognizer,
        bright_val_miou: report.val.miou,
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let checks = run_suite(GradCheckConfig {
        max_probes: 100,
        ..Default::default()
    })
    .expect("suite runs");
    let elapsed = t0.elapsed();
    let worst = checks
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let all_pass = checks
        .iter()
        .all(|c| c.report.max_rel_error < 1e-4 && c.report.probes >= 100);
    let mut detail = format!(
        "{} ops, min probes {}, worst {} at {:.2e}, {:.0} s",
        checks.len(),
        checks.iter().map(|c| c.report.probes).min().unwrap(),
        worst.op,
        worst.report.max_rel_error,
        elapsed.as_secs_f64()
    );
    for c in checks.iter().filter(|c| !c.report.passed()) {
        detail += &format!("; {} failed at {:.2e}", c.op, c.report.max_rel_error);
    }
    outcome(all_pass && elapsed < Duration::from_secs(120), detail)
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Brute-force mIoU straight from the definition.
fn brute_miou(pred: &[u8], truth: &[u8], classes: usize) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &t) in pred.iter().zip(truth) {
            if t == LabelMap::IGNORE {
                continue;
            }
            inter += (p == c && t == c) as u64;
            union += (p == c || t == c) as u64;
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

fn oracle_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conv_err = 0f64;
    for _ in 0..20 {
        let (n, c, o) = (
            rng.gen_range(1..3),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let k = [1, 2, 3, 5][rng.gen_range(0..4)];
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..=k / 2));
        let (h, w) = (rng.gen_range(k..k + 9), rng.gen_range(k..k + 9));
        let x = uniform(&mut rng, [n, c, h, w]);
        let wt = uniform(&mut rng, [o, c, k, k]);
        let b = Tensor::from_fn([o], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(wt.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let oracle = naive_conv2d(&x, &wt, Some(&b), stride, pad).unwrap();
        for (a, r) in g.value(y).data().iter().zip(oracle.data()) {
            conv_err = conv_err.max((a - r).abs());
        }
    }

    // <conv(x), y> == <x, conv_transpose(y)> with the shared kernel.
    let mut adjoint_err = 0f64;
    for _ in 0..20 {
        let (n, c, o) = (
            rng.gen_range(1..3),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let (k, stride) = ([2, 3, 4][rng.gen_range(0..3)], rng.gen_range(1..3));
        let pad = rng.gen_range(0..=k / 2);
        let oh = rng.gen_range(2..7);
        let ow = rng.gen_range(2..7);
        let (h, w) = (
            (oh - 1) * stride + k - 2 * pad,
            (ow - 1) * stride + k - 2 * pad,
        );
        let x = uniform(&mut rng, [n, c, h, w]);
        let wt = uniform(&mut rng, [o, c, k, k]);
        let yv = uniform(&mut rng, [n, o, oh, ow]);
        let mut g = Graph::<f64>::new();
        let (xn, wn, yn) = (
            g.constant(x.clone()),
            g.constant(wt),
            g.constant(yv.clone()),
        );
        let ax = g.conv2d(xn, wn, None, stride, pad).unwrap();
        let aty = g.conv_transpose2d(yn, wn, None, stride, pad).unwrap();
        let (lhs, rhs) = (dot(g.value(ax), &yv), dot(&x, g.value(aty)));
        adjoint_err = adjoint_err.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12));
    }

    let mut miou_mismatch = 0;
    for _ in 0..100 {
        let classes = rng.gen_range(2..6);
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let label = |rng: &mut ChaCha8Rng, ignore: bool| -> u8 {
            if ignore && rng.gen_bool(0.1) {
                LabelMap::IGNORE
            } else {
                rng.gen_range(0..classes as u8)
            }
        };
        let truth: Vec<u8> = (0..h * w).map(|_| label(&mut rng, true)).collect();
        let pred: Vec<u8> = (0..h * w).map(|_| label(&mut rng, false)).collect();
        let got = miou(
            &LabelMap::new(1, h, w, pred.clone()).unwrap(),
            &LabelMap::new(1, h, w, truth.clone()).unwrap(),
            classes,
        )
        .ok()
        .map(|r| r.miou);
        if got != brute_miou(&pred, &truth, classes) {
            miou_mismatch += 1;
        }
    }
    outcome(
        conv_err < 1e-6 && adjoint_err < 1e-5 && miou_mismatch == 0,
        format!(
            "conv2d max abs {conv_err:.1e} over 20 shapes, adjoint rel {adjoint_err:.1e}, mIoU mismatches {miou_mismatch}/100"
        ),
    )
}

fn identity_at_init() -> Outcome {
    let mut worst = 0f32;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut enhancer = Enhancer::new(&mut rng);
        let (h, w) = (rng.gen_range(8..41), rng.gen_range(8..41));
        let img = Tensor::from_fn([1, 3, h, w], |_| rng.gen::<f32>());
        let mut g = Graph::<f32>::new();
        let x = g.constant(img.clone());
        let out = enhancer
            .enhance(
                &mut g,
                x,
                Mode::Train,
                Variant::Full,
                &mut Binder::trainable(),
            )
            .unwrap();
        for (a, b) in g.value(out.output).data().iter().zip(img.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst < 1e-6,
        format!("max |I_out - I_input| = {worst:.1e} over 10 images"),
    )
}

fn freeze_contract(s: &Shared) -> Outcome {
    let before = hex_sha256(&s.recognizer.state_bytes());
    let mut trainer = EnhancerTrainer::new(TrainConfig {
        seed: 11,
        ..Default::default()
    });
    let data = TrainData {
        images: &s.corpus.train.dark,
        labels: &s.corpus.train.labels,
    };
    for _ in 0..500 {
        trainer.train_step(&s.recognizer, &data).unwrap();
    }
    let after = hex_sha256(&s.recognizer.state_bytes());
    outcome(
        before == after && s.recognizer.is_frozen(),
        format!(
            "recognizer sha256 {} before and after 500 steps",
            &after[..16]
        ),
    )
}

fn parameter_budget() -> Outcome {
    let e = Enhancer::new(&mut ChaCha8Rng::seed_from_u64(0));
    let n = e.param_count();
    outcome(
        (450_000..=700_000).contains(&n),
        format!(
            "GEM {} + PAM {} = {n} trainable parameters",
            e.gem.param_count(),
            e.pam.param_count()
        ),
    )
}

fn ablation_structure(s: &Shared) -> Outcome {
    let t0 = Instant::now();
    let report = run_ablation(
        &s.corpus,
        &s.recognizer,
        &AblationConfig::default(),
        |_, _, _, _| {},
    )
    .expect("ablation runs");
    let elapsed = t0.elapsed();
    print!("{}", report.to_table());
    let ratio = report.full_over_none();
    let medians: Vec<String> = Variant::ALL
        .iter()
        .map(|&v| format!("{} {:.4}", v.name(), report.median_all(v)))
        .collect();
    outcome(
        report.ordering_holds() && ratio >= 1.2 && elapsed < Duration::from_secs(3600),
        format!(
            "median LL-A {}; full/none {ratio:.2}; {:.1} min",
            medians.join(" < "),
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn subset_calibration(s: &Shared) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for tag in SubsetTag::SEVERITIES {
        let means: Vec<f64> = [&s.corpus.train, &s.corpus.val, &s.corpus.test]
            .iter()
            .flat_map(|split| {
                split
                    .records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.severity == tag)
                    .map(|(i, _)| mean_pixel_intensity(&split.dark.batch_slice(i, i + 1)))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        pass &= (mean - tag.target_mean()).abs() <= 0.5;
        parts.push(format!(
            "{} {mean:.2} (target {:.1})",
            tag.name(),
            tag.target_mean()
        ));
    }
    outcome(pass, parts.join(", "))
}

fn recognizer_precondition(s: &Shared) -> Outcome {
    let test = &s.corpus.test;
    let idx = test.subset_indices(SubsetTag::Extreme);
    let (labels, bright, dark) = (
        test.labels.gather(&idx),
        test.bright.gather_batch(&idx),
        test.dark.gather_batch(&idx),
    );
    let on = |images: &Tensor<f32>| {
        evaluate_recognizer(
            &s.recognizer,
            &LabeledImages {
                images,
                labels: &labels,
            },
        )
        .unwrap()
        .miou
    };
    let (b, d) = (on(&bright), on(&dark));
    let drop = 1.0 - d / b;
    outcome(
        s.bright_val_miou >= 0.90 && drop >= 0.30,
        format!(
            "bright val mIoU {:.4}; LL-E test bright {b:.4} vs dark {d:.4} ({:.0}% drop)",
            s.bright_val_miou,
            drop * 100.0
        ),
    )
}

fn latency_property(s: &Shared) -> Outcome {
    let mut enhancer = Enhancer::new(&mut ChaCha8Rng::seed_from_u64(0));
    enhancer
        .prime_statistics(&s.corpus.train.dark.batch_slice(0, 8))
        .unwrap();
    let r = benchmark_latency(&enhancer, &s.recognizer, 256, 256, 5, 50).unwrap();
    let ratio = r.enhancer.p50_ms / r.recognizer.p50_ms;
    outcome(
        ratio < 2.0,
        format!(
            "256x256 p50: enhancer {:.1} ms, recognizer {:.1} ms, combined {:.1} ms (ratio {ratio:.2})",
            r.enhancer.p50_ms, r.recognizer.p50_ms, r.combined.p50_ms
        ),
    )
}

fn determinism_and_persistence(s: &Shared) -> Outcome {
    let data = TrainData {
        images: &s.corpus.train.dark,
        labels: &s.corpus.train.labels,
    };
    let cfg = TrainConfig {
        seed: 21,
        total_steps: 40,
        ..Default::default()
    };
    let run = |trainer: &mut EnhancerTrainer, steps: u64| -> Vec<f64> {
        (0..steps)
            .map(|_| trainer.train_step(&s.recognizer, &data).unwrap().loss)
            .collect()
    };
    let first = run(&mut EnhancerTrainer::new(cfg.clone()), 40);
    let second = run(&mut EnhancerTrainer::new(cfg.clone()), 40);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.lxf");
    let mut interrupted = EnhancerTrainer::new(cfg.clone());
    let mut resumed_losses = run(&mut interrupted, 20);
    let ckpt = interrupted.to_checkpoint();
    ckpt.save(&path).unwrap();
    drop(interrupted);
    let loaded = Checkpoint::load(&path).unwrap();
    let mut resumed = EnhancerTrainer::resume(cfg, &loaded).unwrap();
    resumed_losses.extend(run(&mut resumed, 20));

    let bytes = ckpt.to_bytes().unwrap();
    let byte_exact = std::fs::read(&path).unwrap() == bytes
        && Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap() == bytes;
    outcome(
        first == second && first == resumed_losses && byte_exact,
        format!(
            "repeat run identical: {}; resume identical: {}; checkpoint round-trip byte-exact: {byte_exact}",
            first == second,
            first == resumed_losses
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "oracle equivalences", oracle_equivalences());
    report(3, "identity at init", identity_at_init());
    report(5, "parameter budget", parameter_budget());
    let s = shared();
    report(4, "freeze contract", freeze_contract(&s));
    report(7, "subset calibration", subset_calibration(&s));
    report(8, "recognizer precondition", recognizer_precondition(&s));
    report(9, "latency property", latency_property(&s));
    report(
        10,
        "determinism and persistence",
        determinism_and_persistence(&s),
    );
    report(6, "ablation structure", ablation_structure(&s));

    results.sort_by_key(|(n, _, _)| *n);
    println!("\nsummary");
    for (n, name, o) in &results {
        println!(
            "criterion {n:>2} {} {name}",
            if o.pass { "PASS" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
