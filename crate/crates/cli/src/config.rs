use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use luxforge::data::CorpusConfig;
use luxforge::evaluation::AblationConfig;
use luxforge::recognizer::PretrainConfig;
use luxforge::training::{hex_sha256, TrainConfig};

use crate::UsageError;

/// Name of the snapshot every subcommand writes next to its outputs.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            warmup: 5,
            iters: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub probes: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            probes: 100,
            seed: 0,
            step: 1e-3,
            tolerance: 1e-4,
        }
    }
}

/// What produced a snapshot. Informational; ignored when read back.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunInfo {
    pub command: String,
    pub inputs: Vec<String>,
}

/// One section per subcommand; absent sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub run: RunInfo,
    pub synth: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckSection,
    pub ablation: AblationConfig,
}

impl FileConfig {
    /// Defaults, or the contents of `path`. A malformed file is a usage error.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Hash of the snapshot text, recorded in reports.
    pub fn hash(&self) -> String {
        hex_sha256(self.to_toml().as_bytes())[..16].to_string()
    }

    /// Writes the snapshot into `dir`, creating it if needed.
    pub fn write_resolved(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut c = FileConfig::default();
        c.train.lr = 1e-3;
        c.ablation.seeds = vec![4, 5];
        let back: FileConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn default_lr_prints_plainly() {
        assert!(FileConfig::default().to_toml().contains("lr = 0.0005"));
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c: FileConfig = toml::from_str("[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.synth.train, 512);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nlearning_rate = 1\n").is_err());
    }
}
