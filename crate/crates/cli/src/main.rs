//! `luxforge`: corpus synthesis, recognizer pretraining, enhancer training,
//! enhancement, evaluation, benchmarking, gradient checking and ablation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use luxforge::data::{SplitName, SubsetTag};
use luxforge::pam::Variant;

/// Invalid invocation or configuration; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "luxforge",
    version,
    about = "Low-light enhancement trained through a frozen recognizer"
)]
pub struct Cli {
    /// Sectioned TOML settings; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic bright/dark corpus.
    Synth(SynthArgs),
    /// Train the recognizer on bright images and freeze it.
    Pretrain(PretrainArgs),
    /// Train the enhancer against the frozen recognizer.
    Train(TrainArgs),
    /// Enhance PNG files with a trained enhancer.
    Enhance(EnhanceArgs),
    /// Score a variant (or saved predictions) on a corpus split.
    Eval(EvalArgs),
    /// Measure single-image latency.
    Bench(BenchArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and score the four-variant ablation.
    Ablation(AblationArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// normal, hard, extreme, or all (cycle through the three).
    #[arg(long, value_parser = parse_severity)]
    pub severity: Option<SubsetTag>,
    /// Replace an existing corpus in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving `recognizer.lxf` and the logs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablate {
    /// Train without the global stage.
    Gem,
    /// Train without the pixelwise stage.
    Pam,
    /// Train both stages.
    None,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub recognizer: PathBuf,
    /// Run directory receiving checkpoints and `train_log.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablate>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Continue from this enhancer checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Overwrite checkpoints already in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A PNG file or a directory of them.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub recognizer: Option<PathBuf>,
    /// Enhancer checkpoint; without it the dark images go straight to the
    /// recognizer.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Stages to run; defaults to those the checkpoint was trained with.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: SplitName,
    /// Score label PNGs from this directory instead of running models.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["ckpt", "variant"])]
    pub predictions: Option<PathBuf>,
    /// Also measure latency at the `[bench]` size.
    #[arg(long)]
    pub bench: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Recognizer checkpoint; a freshly initialized one when absent.
    #[arg(long)]
    pub recognizer: Option<PathBuf>,
    /// Enhancer checkpoint; a freshly initialized one when absent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub recognizer: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

fn parse_severity(s: &str) -> Result<SubsetTag, String> {
    s.parse().map_err(|e: luxforge::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: luxforge::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    s.parse().map_err(|e: luxforge::Error| e.to_string())
}

/// Sizes the global worker pool from `LUXFORGE_THREADS`.
fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("LUXFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        UsageError(format!(
            "LUXFORGE_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let file = config::FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(file, a),
        Command::Pretrain(a) => commands::pretrain(file, a),
        Command::Train(a) => commands::train(file, a),
        Command::Enhance(a) => commands::enhance(file, a),
        Command::Eval(a) => commands::eval(file, a),
        Command::Bench(a) => commands::bench(file, a),
        Command::Gradcheck(a) => commands::gradcheck(file, a),
        Command::Ablation(a) => commands::ablation(file, a),
    }
}

/// Parses arguments; every parse error is reported with a usage line and
/// exit code 2.
fn parse() -> Result<Cli, ExitCode> {
    Cli::try_parse().map_err(|e| {
        if !e.use_stderr() {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        let text = e.render().to_string();
        eprint!("{text}");
        if !text.contains("Usage:") {
            eprintln!("\n{}", Cli::command().render_usage());
        }
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
