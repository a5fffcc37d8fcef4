use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use luxforge::data::{
    build_corpus, file_name, load_corpus, load_image, load_labels, load_split, read_corpus_info,
    save_image, write_corpus, Split, SplitName, SubsetTag,
};
use luxforge::evaluation::{
    benchmark_latency, mean_pixel_intensity, predict_through, run_ablation, score_split,
    MetricsReport, ParamCounts,
};
use luxforge::gradcheck::{run_suite, GradCheckConfig};
use luxforge::pam::{Enhancer, Variant};
use luxforge::recognizer::{
    evaluate_recognizer, pretrain_recognizer, LabeledImages, RecognizerNetwork,
};
use luxforge::tensor::{LabelMap, Tensor};
use luxforge::training::{hex_sha256, train_enhancer, Checkpoint, EnhancerTrainer, TrainData};

use crate::config::{FileConfig, RunInfo};
use crate::{
    Ablate, AblationArgs, BenchArgs, EnhanceArgs, EvalArgs, GradcheckArgs, PretrainArgs, SynthArgs,
    TrainArgs, UsageError,
};

const RECOGNIZER_FILE: &str = "recognizer.lxf";
const FINAL_FILE: &str = "final.lxf";

fn record(file: &mut FileConfig, command: &str, inputs: &[&Path]) {
    file.run = RunInfo {
        command: command.into(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
    };
}

fn require_dir(path: &Path) -> anyhow::Result<()> {
    if !path.is_dir() {
        bail!("data directory {} does not exist", path.display());
    }
    Ok(())
}

/// Short content hash identifying a checkpoint file.
fn file_id(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex_sha256(&bytes)[..16].to_string())
}

fn load_recognizer(path: &Path) -> anyhow::Result<RecognizerNetwork> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(RecognizerNetwork::from_checkpoint(&ckpt)?)
}

/// Enhancer weights and the stages it was trained with.
fn load_enhancer(path: &Path) -> anyhow::Result<(Enhancer, Variant)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ckpt.meta.kind != "enhancer" {
        bail!(
            "{} holds a {:?} checkpoint, not an enhancer",
            path.display(),
            ckpt.meta.kind
        );
    }
    let variant = match ckpt.meta.extra.get("variant").and_then(|v| v.as_str()) {
        Some(name) => name.parse()?,
        None => Variant::Full,
    };
    let mut enhancer = Enhancer::new(&mut ChaCha8Rng::seed_from_u64(0));
    ckpt.restore_module(&mut enhancer)?;
    Ok((enhancer, variant))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn random_dark(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
    Tensor::from_fn([n, 3, 32, 32], |_| rng.gen::<f32>() * 0.05)
}

pub fn synth(mut file: FileConfig, a: SynthArgs) -> anyhow::Result<()> {
    let cfg = &mut file.synth;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.train {
        cfg.train = v;
    }
    if let Some(v) = a.val {
        cfg.val = v;
    }
    if let Some(v) = a.test {
        cfg.test = v;
    }
    if let Some(v) = a.severity {
        cfg.severity = v;
    }
    record(&mut file, "synth", &[]);
    let corpus = build_corpus(&file.synth)?;
    write_corpus(&corpus, &a.out, a.force)?;
    file.write_resolved(&a.out)?;

    println!("corpus written to {}", a.out.display());
    for p in &corpus.info.presets {
        println!(
            "preset {} exposure_scale {:.6} (target mean {:.1})",
            p.preset.tag.name(),
            p.exposure_scale,
            p.preset.tag.target_mean()
        );
    }
    println!(
        "{:<6} {:>6} {:>6} {:>6} {:>6} {:>10}",
        "split", "images", "LL-N", "LL-H", "LL-E", "mean"
    );
    for split in [&corpus.train, &corpus.val, &corpus.test] {
        let per = |t: SubsetTag| split.subset_indices(t).len();
        println!(
            "{:<6} {:>6} {:>6} {:>6} {:>6} {:>10.3}",
            split.name.as_str(),
            split.len(),
            per(SubsetTag::Normal),
            per(SubsetTag::Hard),
            per(SubsetTag::Extreme),
            mean_pixel_intensity(&split.dark)
        );
    }
    Ok(())
}

pub fn pretrain(mut file: FileConfig, a: PretrainArgs) -> anyhow::Result<()> {
    let cfg = &mut file.pretrain;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    record(&mut file, "pretrain", &[&a.data]);
    require_dir(&a.data)?;
    let target = a.out.join(RECOGNIZER_FILE);
    if target.exists() && !a.force {
        bail!(
            "{} already exists (pass --force to overwrite)",
            target.display()
        );
    }
    let info = read_corpus_info(&a.data)?;
    let train = load_split(&a.data, SplitName::Train)?;
    let val = load_split(&a.data, SplitName::Val)?;
    file.write_resolved(&a.out)?;

    let mut init = ChaCha8Rng::seed_from_u64(file.pretrain.seed);
    init.set_stream(1);
    let mut net = RecognizerNetwork::new(info.config.classes, &mut init);
    let report = pretrain_recognizer(
        &mut net,
        &LabeledImages {
            images: &train.bright,
            labels: &train.labels,
        },
        &LabeledImages {
            images: &val.bright,
            labels: &val.labels,
        },
        &file.pretrain,
    )?;
    net.to_checkpoint(&file.hash()).save(&target)?;

    let log_path = a.out.join("pretrain_log.jsonl");
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("writing {}", log_path.display()))?;
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(log, "{}", serde_json::json!({ "step": i + 1, "loss": l }))?;
    }
    let dark = evaluate_recognizer(
        &net,
        &LabeledImages {
            images: &val.dark,
            labels: &val.labels,
        },
    )?;
    let drop = 1.0 - dark.miou / report.val.miou;
    write_json(
        &a.out.join("pretrain_report.json"),
        &serde_json::json!({
            "bright_val": report.val,
            "dark_val": dark,
            "relative_drop": drop,
        }),
    )?;
    println!("recognizer written to {}", target.display());
    println!("bright val mIoU {:.4}", report.val.miou);
    println!(
        "dark val mIoU   {:.4} ({:.1}% lower)",
        dark.miou,
        drop * 100.0
    );
    Ok(())
}

fn has_checkpoints(dir: &Path) -> anyhow::Result<bool> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(false);
    };
    for e in entries {
        let name = e?.file_name();
        let name = name.to_string_lossy();
        if name.ends_with(".lxf") {
            return Ok(true);
        }
    }
    Ok(false)
}

pub fn train(mut file: FileConfig, a: TrainArgs) -> anyhow::Result<()> {
    let cfg = &mut file.train;
    if let Some(v) = a.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.checkpoint_interval {
        cfg.checkpoint_interval = v;
    }
    if let Some(ablate) = a.ablate {
        cfg.gem_enabled = ablate != Ablate::Gem;
        cfg.pam_enabled = ablate != Ablate::Pam;
    }
    let mut inputs = vec![a.data.as_path(), a.recognizer.as_path()];
    inputs.extend(a.resume.as_deref());
    record(&mut file, "train", &inputs);
    require_dir(&a.data)?;
    if a.resume.is_none() && !a.force && has_checkpoints(&a.out)? {
        bail!(
            "{} already holds checkpoints (pass --resume to continue or --force to overwrite)",
            a.out.display()
        );
    }
    let recognizer = load_recognizer(&a.recognizer)?;
    let split = load_split(&a.data, SplitName::Train)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            EnhancerTrainer::resume(file.train.clone(), &ckpt)?
        }
        None => EnhancerTrainer::new(file.train.clone()),
    };
    file.write_resolved(&a.out)?;

    let total = file.train.total_steps;
    let every = (total / 20).max(1);
    let report = train_enhancer(
        &mut trainer,
        &recognizer,
        &TrainData {
            images: &split.dark,
            labels: &split.labels,
        },
        Some(&a.out),
        |r| {
            if r.step % every == 0 || r.step == total {
                println!(
                    "step {:>6}/{total} loss {:.5} smoothed {:.5} a [{:.3}, {:.3}, {:.3}] f_local rms {:.4}",
                    r.step, r.loss, r.smoothed_loss, r.coeff_mean[0], r.coeff_mean[1], r.coeff_mean[2], r.f_local_rms
                );
            }
        },
    )?;
    println!(
        "variant {}; {} steps run; final smoothed loss {:.5}; checkpoint {}",
        trainer.variant().label(),
        report.records.len(),
        trainer.smoothed_loss(),
        a.out.join(FINAL_FILE).display()
    );
    Ok(())
}

fn png_inputs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).with_context(|| format!("reading {}", input.display()))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Serialize)]
struct EnhanceLine {
    file: String,
    width: usize,
    height: usize,
    coeffs: [f64; 3],
    f_local_rms: f64,
    mean_before: f64,
    mean_after: f64,
}

pub fn enhance(mut file: FileConfig, a: EnhanceArgs) -> anyhow::Result<()> {
    record(&mut file, "enhance", &[&a.ckpt, &a.input]);
    let (mut enhancer, variant) = load_enhancer(&a.ckpt)?;
    let files = png_inputs(&a.input)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let out_dir = a.out.canonicalize()?;
    if files
        .iter()
        .any(|f| f.parent().and_then(|p| p.canonicalize().ok()) == Some(out_dir.clone()))
    {
        return Err(UsageError("--out must differ from the input directory".into()).into());
    }
    file.write_resolved(&a.out)?;

    let diag_path = a.out.join("diagnostics.jsonl");
    let mut diag =
        fs::File::create(&diag_path).with_context(|| format!("writing {}", diag_path.display()))?;
    let mut done = 0;
    for path in &files {
        let name = path
            .file_name()
            .expect("listed file")
            .to_string_lossy()
            .to_string();
        let image = match load_image(path) {
            Ok(i) => i,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                continue;
            }
        };
        let (out, d) = enhancer.enhance_eval(&image, variant)?;
        save_image(&a.out.join(&name), &out)?;
        let line = EnhanceLine {
            file: name,
            width: image.shape()[3],
            height: image.shape()[2],
            coeffs: d.coeff_mean,
            f_local_rms: d.f_local_rms,
            mean_before: mean_pixel_intensity(&image),
            mean_after: mean_pixel_intensity(&out),
        };
        let text = serde_json::to_string(&line)?;
        println!("{text}");
        writeln!(diag, "{text}")?;
        done += 1;
    }
    if done == 0 {
        bail!("no readable PNG among {} input(s)", files.len());
    }
    Ok(())
}

fn predictions_from(dir: &Path, split: &Split, classes: usize) -> anyhow::Result<LabelMap> {
    let maps = split
        .records
        .iter()
        .map(|r| load_labels(&dir.join(file_name(r.index)), classes))
        .collect::<luxforge::Result<Vec<_>>>()?;
    Ok(LabelMap::stack(&maps)?)
}

pub fn eval(mut file: FileConfig, a: EvalArgs) -> anyhow::Result<()> {
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.recognizer.as_deref());
    inputs.extend(a.ckpt.as_deref());
    inputs.extend(a.predictions.as_deref());
    record(&mut file, "eval", &inputs);
    require_dir(&a.data)?;
    let info = read_corpus_info(&a.data)?;
    let classes = info.config.classes;
    let split = load_split(&a.data, a.split)?;

    let (pred, variant, params, checkpoint_id, latency) = if let Some(dir) = &a.predictions {
        let pred = predictions_from(dir, &split, classes)?;
        (
            pred,
            Variant::None,
            ParamCounts::default(),
            format!("predictions:{}", dir.display()),
            None,
        )
    } else {
        let rec_path = a.recognizer.as_deref().ok_or_else(|| {
            UsageError("--recognizer is required unless --predictions is given".into())
        })?;
        let recognizer = load_recognizer(rec_path)?;
        let (mut enhancer, trained, id) = match &a.ckpt {
            Some(p) => {
                let (e, v) = load_enhancer(p)?;
                (e, v, file_id(p)?)
            }
            None => (
                Enhancer::new(&mut ChaCha8Rng::seed_from_u64(0)),
                Variant::None,
                "none".into(),
            ),
        };
        let variant = a.variant.unwrap_or(trained);
        if a.ckpt.is_none() && variant != Variant::None {
            return Err(UsageError(format!("variant {} needs --ckpt", variant.name())).into());
        }
        let pred = predict_through(&mut enhancer, variant, &recognizer, &split.dark)?;
        let latency = if a.bench {
            if a.ckpt.is_none() {
                enhancer.prime_statistics(&random_dark(&mut ChaCha8Rng::seed_from_u64(0), 2))?;
            }
            let b = &file.bench;
            Some(benchmark_latency(
                &enhancer,
                &recognizer,
                b.height,
                b.width,
                b.warmup,
                b.iters,
            )?)
        } else {
            None
        };
        (
            pred,
            variant,
            ParamCounts::of(&enhancer, Some(&recognizer)),
            id,
            latency,
        )
    };
    let (subsets, whole) = score_split(&pred, &split, classes)?;
    file.write_resolved(&a.out)?;
    let report = MetricsReport {
        variant,
        subsets,
        per_class_iou: whole.per_class,
        miou: whole.miou,
        params,
        latency,
        config_hash: file.hash(),
        checkpoint_id,
    };
    write_json(&a.out.join("metrics.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn bench(mut file: FileConfig, a: BenchArgs) -> anyhow::Result<()> {
    let cfg = &mut file.bench;
    if let Some(v) = a.height {
        cfg.height = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    if let Some(v) = a.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = a.iters {
        cfg.iters = v;
    }
    let mut inputs = Vec::new();
    inputs.extend(a.recognizer.as_deref());
    inputs.extend(a.ckpt.as_deref());
    record(&mut file, "bench", &inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let recognizer = match &a.recognizer {
        Some(p) => load_recognizer(p)?,
        None => {
            let mut r = RecognizerNetwork::new(luxforge::data::DEFAULT_CLASSES, &mut rng);
            r.prime_statistics(&random_dark(&mut rng, 2))?;
            r.freeze();
            r
        }
    };
    let enhancer = match &a.ckpt {
        Some(p) => load_enhancer(p)?.0,
        None => {
            let mut e = Enhancer::new(&mut rng);
            e.prime_statistics(&random_dark(&mut rng, 2))?;
            e
        }
    };
    file.write_resolved(&a.out)?;
    let b = &file.bench;
    let report = benchmark_latency(&enhancer, &recognizer, b.height, b.width, b.warmup, b.iters)?;
    write_json(&a.out.join("latency.json"), &report)?;
    print!("{}", report.to_table());
    println!(
        "enhancer/recognizer p50 ratio {:.3}",
        report.enhancer.p50_ms / report.recognizer.p50_ms
    );
    Ok(())
}

pub fn gradcheck(mut file: FileConfig, a: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = &mut file.gradcheck;
    if let Some(v) = a.probes {
        cfg.probes = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    record(&mut file, "gradcheck", &[]);
    let g = &file.gradcheck;
    let checks = run_suite(GradCheckConfig {
        step: g.step,
        tolerance: g.tolerance,
        max_probes: g.probes,
        seed: g.seed,
    })?;
    println!(
        "{:<28} {:>6} {:>8} {:>12}  result",
        "op", "probes", "rejected", "max rel err"
    );
    for c in &checks {
        println!(
            "{:<28} {:>6} {:>8} {:>12.3e}  {}",
            c.op,
            c.report.probes,
            c.rejected,
            c.report.max_rel_error,
            if c.report.passed() { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        file.write_resolved(out)?;
        write_json(&out.join("gradcheck.json"), &checks)?;
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.report.passed())
        .map(|c| c.op)
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

pub fn ablation(mut file: FileConfig, a: AblationArgs) -> anyhow::Result<()> {
    let cfg = &mut file.ablation;
    if let Some(v) = a.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = a.steps {
        cfg.train.total_steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch_size = v;
    }
    if file.ablation.seeds.is_empty() {
        return Err(UsageError("at least one seed is required".into()).into());
    }
    record(&mut file, "ablation", &[&a.data, &a.recognizer]);
    require_dir(&a.data)?;
    let corpus = load_corpus(&a.data)?;
    let recognizer = load_recognizer(&a.recognizer)?;
    file.write_resolved(&a.out)?;
    let total = file.ablation.train.total_steps;
    let every = (total / 6).max(1);
    let report = run_ablation(
        &corpus,
        &recognizer,
        &file.ablation,
        |v, seed, step, loss| {
            if step % every == 0 {
                eprintln!(
                    "{:<5} seed {seed} step {step:>6}/{total} smoothed loss {loss:.5}",
                    v.name()
                );
            }
        },
    )?;
    write_json(&a.out.join("ablation.json"), &report)?;
    print!("{}", report.to_table());
    if !report.ordering_holds() {
        return Err(anyhow!(
            "variant ordering none < GEM < PAM < full does not hold"
        ));
    }
    if report.full_over_none() < 1.2 {
        bail!(
            "full/none ratio {:.3} is below 1.2",
            report.full_over_none()
        );
    }
    Ok(())
}
