//! End-to-end enhancer training against a frozen recognizer, the Adam
//! optimizer and the checkpoint container.

mod adam;
mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{adam_update, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, MAGIC, VERSION};

use crate::autograd::{Graph, Mode};
use crate::error::{Error, Result};
use crate::nn::{Binder, Module};
use crate::pam::{EnhanceDiagnostics, Enhancer, Variant};
use crate::recognizer::{model_specific_loss, RecognizerNetwork};
use crate::tensor::{LabelMap, Tensor};

/// Window of the moving average reported as `smoothed_loss`.
pub const SMOOTHING_WINDOW: usize = 100;
const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Validation mIoU every this many steps; 0 disables.
    pub eval_interval: u64,
    /// Checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub gem_enabled: bool,
    pub pam_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 8,
            total_steps: 6000,
            seed: 0,
            eval_interval: 0,
            checkpoint_interval: 1000,
            gem_enabled: true,
            pam_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.gem_enabled, self.pam_enabled)
    }

    /// Hash of every field that affects the trajectory (not its length or
    /// bookkeeping intervals), so a resumed run can verify compatibility.
    pub fn trajectory_hash(&self) -> String {
        let key = serde_json::json!({
            "lr": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "gem_enabled": self.gem_enabled,
            "pam_enabled": self.pam_enabled,
        });
        hex_sha256(key.to_string().as_bytes())
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub loss: f64,
    pub smoothed_loss: f64,
    pub coeff_mean: [f64; 3],
    pub f_local_rms: f64,
}

/// Dark training images with their labels.
pub struct TrainData<'a> {
    pub images: &'a Tensor<f32>,
    pub labels: &'a LabelMap,
}

impl TrainData<'_> {
    fn len(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Mutable training state: enhancer weights, optimizer moments, the batch
/// sampler and the recent losses.
pub struct EnhancerTrainer {
    pub cfg: TrainConfig,
    pub enhancer: Enhancer,
    pub adam: Adam,
    pub step: u64,
    rng: ChaCha8Rng,
    recent: Vec<f64>,
}

const INIT_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;

impl EnhancerTrainer {
    /// Fresh enhancer initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Self {
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        init.set_stream(INIT_STREAM);
        let enhancer = Enhancer::new(&mut init);
        Self::with_enhancer(cfg, enhancer)
    }

    pub fn with_enhancer(cfg: TrainConfig, enhancer: Enhancer) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLER_STREAM);
        Self {
            adam: Adam::new(AdamConfig::with_lr(cfg.lr)),
            cfg,
            enhancer,
            step: 0,
            rng,
            recent: Vec::new(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant()
    }

    pub fn smoothed_loss(&self) -> f64 {
        if self.recent.is_empty() {
            return f64::NAN;
        }
        self.recent.iter().sum::<f64>() / self.recent.len() as f64
    }

    /// One optimizer step on a random batch. The recognizer must be frozen.
    pub fn train_step(
        &mut self,
        recognizer: &RecognizerNetwork,
        data: &TrainData<'_>,
    ) -> Result<StepRecord> {
        if !recognizer.is_frozen() {
            return Err(Error::Config(
                "enhancer training needs a frozen recognizer".into(),
            ));
        }
        let n = data.len();
        if n == 0 {
            return Err(Error::EmptyCorpus);
        }
        let next = self.step + 1;
        let idx = sample(&mut self.rng, n, self.cfg.batch_size.min(n)).into_vec();
        let mut g = Graph::<f32>::new();
        let x = g.constant(data.images.gather_batch(&idx));
        let mut binder = Binder::trainable();
        let variant = self.variant();
        let nodes = self
            .enhancer
            .enhance(&mut g, x, Mode::Train, variant, &mut binder)?;
        let logits = recognizer.forward_eval(&mut g, nodes.output)?;
        let loss = model_specific_loss(&mut g, logits, &data.labels.gather(&idx))?;
        let l = g.value(loss).item() as f64;
        if !l.is_finite() {
            return Err(Error::Diverged {
                step: next,
                detail: format!("loss is {l}"),
            });
        }
        if !binder.bound().is_empty() {
            g.backward(loss)?;
            self.adam
                .step(&mut self.enhancer, &binder.grads(&g))
                .map_err(|e| Error::Diverged {
                    step: next,
                    detail: e.to_string(),
                })?;
        }
        self.step = next;
        self.recent.push(l);
        if self.recent.len() > SMOOTHING_WINDOW {
            self.recent.remove(0);
        }
        let EnhanceDiagnostics {
            coeff_mean,
            f_local_rms,
            ..
        } = nodes.diagnostics(&g);
        Ok(StepRecord {
            step: next,
            loss: l,
            smoothed_loss: self.smoothed_loss(),
            coeff_mean,
            f_local_rms,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMeta {
            kind: "enhancer".into(),
            step: self.step,
            config_hash: self.cfg.trajectory_hash(),
            rng: Some(RngState::capture(&self.rng)),
            extra: Default::default(),
        };
        meta.extra
            .insert("variant".into(), self.variant().name().into());
        meta.extra.insert("adam_t".into(), self.adam.t.into());
        meta.extra.insert(
            "recent_losses".into(),
            serde_json::to_value(&self.recent).expect("f64 list"),
        );
        let mut c = Checkpoint::new(meta);
        c.push_module(&self.enhancer);
        for (name, t) in &self.adam.m {
            c.push(format!("adam.m.{name}"), t.clone());
        }
        for (name, t) in &self.adam.v {
            c.push(format!("adam.v.{name}"), t.clone());
        }
        c
    }

    /// Continues exactly where `ckpt` stopped. The trajectory-relevant part
    /// of `cfg` must match the run that wrote it.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != "enhancer" {
            return Err(Error::Config(format!(
                "checkpoint holds a {:?}, not an enhancer",
                ckpt.meta.kind
            )));
        }
        if ckpt.meta.config_hash != cfg.trajectory_hash() {
            return Err(Error::Config(
                "checkpoint was written with a different lr/batch/seed/variant".into(),
            ));
        }
        let mut t = Self::new(cfg);
        ckpt.restore_module(&mut t.enhancer)?;
        t.step = ckpt.meta.step;
        t.adam.t = ckpt
            .meta
            .extra
            .get("adam_t")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        for (name, tensor) in &ckpt.tensors {
            if let Some(p) = name.strip_prefix("adam.m.") {
                t.adam.m.insert(p.to_string(), tensor.clone());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                t.adam.v.insert(p.to_string(), tensor.clone());
            }
        }
        if let Some(r) = ckpt.meta.extra.get("recent_losses") {
            t.recent =
                serde_json::from_value(r.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        let rng = ckpt
            .meta
            .rng
            .as_ref()
            .ok_or_else(|| Error::Config("enhancer checkpoint lacks sampler state".into()))?;
        t.rng = rng.restore()?;
        Ok(t)
    }
}

/// Enhancer checkpoint written at `step` inside a run directory.
pub fn checkpoint_path(dir: &Path, step: u64) -> std::path::PathBuf {
    dir.join(format!("step_{step:06}.lxf"))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Runs `trainer` up to `cfg.total_steps`. With `out_dir`, every step is
/// appended to `train_log.jsonl`, checkpoints land at the configured
/// interval and `final.lxf` at the end. A diverging step halts training,
/// saving the last good checkpoint as `last_good.lxf` when writing output.
pub fn train_enhancer(
    trainer: &mut EnhancerTrainer,
    recognizer: &RecognizerNetwork,
    data: &TrainData<'_>,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    let before = recognizer.state_bytes();
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = OpenOptions::new()
                .create(true)
                .append(trainer.step > 0)
                .write(true)
                .truncate(trainer.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };
    let mut last_good = trainer.to_checkpoint();
    let mut report = TrainReport::default();
    while trainer.step < trainer.cfg.total_steps {
        let rec = match trainer.train_step(recognizer, data) {
            Ok(r) => r,
            Err(e @ Error::Diverged { .. }) => {
                if let Some(dir) = out_dir {
                    last_good.save(&dir.join("last_good.lxf"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some((path, w)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        }
        on_step(&rec);
        report.records.push(rec);
        let interval = trainer.cfg.checkpoint_interval;
        if interval > 0 && trainer.step.is_multiple_of(interval) {
            last_good = trainer.to_checkpoint();
            if let Some(dir) = out_dir {
                last_good.save(&checkpoint_path(dir, trainer.step))?;
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        trainer.to_checkpoint().save(&dir.join("final.lxf"))?;
    }
    debug_assert_eq!(recognizer.state_bytes(), before);
    Ok(report)
}
