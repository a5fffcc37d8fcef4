use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::mean_pixel_intensity;
use crate::tensor::{LabelMap, Tensor};

use super::darken::{calibrate_exposure, darken, DarkeningParams, SeverityPreset, SubsetTag};
use super::io::{load_image, load_labels, quantize, save_image, save_labels};
use super::scene::{generate_scene, DEFAULT_CLASSES};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_FILE: &str = "corpus.json";
const CALIBRATION_SCENES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    /// Scenes used only to solve preset exposures; never written.
    Calibration,
}

impl SplitName {
    pub const WRITTEN: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
            SplitName::Calibration => "calibration",
        }
    }

    fn id(self) -> u64 {
        match self {
            SplitName::Train => 1,
            SplitName::Val => 2,
            SplitName::Test => 3,
            SplitName::Calibration => 4,
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::WRITTEN
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown split {s:?}; expected train, val or test"))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    /// One severity for every image, or `All` to cycle through the three.
    pub severity: SubsetTag,
    pub gamma: f64,
    pub read_noise_sigma: f64,
    pub shot_noise_scale: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let p = SeverityPreset::default_for(SubsetTag::Normal);
        Self {
            seed: 0,
            train: 512,
            val: 64,
            test: 128,
            width: 16,
            height: 16,
            classes: DEFAULT_CLASSES,
            severity: SubsetTag::All,
            gamma: p.gamma,
            read_noise_sigma: p.read_noise_sigma,
            shot_noise_scale: p.shot_noise_scale,
        }
    }
}

impl CorpusConfig {
    pub fn preset(&self, tag: SubsetTag) -> SeverityPreset {
        SeverityPreset {
            tag,
            gamma: self.gamma,
            read_noise_sigma: self.read_noise_sigma,
            shot_noise_scale: self.shot_noise_scale,
        }
    }

    pub fn count(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train,
            SplitName::Val => self.val,
            SplitName::Test => self.test,
            SplitName::Calibration => CALIBRATION_SCENES,
        }
    }

    /// Severity used to darken image `index`.
    pub fn severity_of(&self, index: usize) -> SubsetTag {
        match self.severity {
            SubsetTag::All => SubsetTag::SEVERITIES[index % 3],
            tag => tag,
        }
    }
}

/// Seed of scene `index` in `split`; distinct per (master, split, index).
pub fn scene_seed(master: u64, split: SplitName, index: usize) -> u64 {
    let mut z = master ^ (split.id() << 56) ^ index as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn noise_seed(scene: u64) -> u64 {
    scene ^ 0xD1B5_4A32_D192_ED03
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPreset {
    pub preset: SeverityPreset,
    pub exposure_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub split: SplitName,
    pub index: usize,
    pub seed: u64,
    pub severity: SubsetTag,
    pub darkening: DarkeningParams,
    /// Of the stored 8-bit dark image, 0–255 scale.
    pub mean_intensity: f64,
    /// Nearest-target subset of `mean_intensity`.
    pub subset: SubsetTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: SplitName,
    /// 8-bit-quantized bright images, `N×3×H×W`.
    pub bright: Tensor<f32>,
    /// 8-bit-quantized darkened images.
    pub dark: Tensor<f32>,
    pub labels: LabelMap,
    pub records: Vec<ManifestRecord>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of the images in `subset` (`LL-A` selects everything).
    pub fn subset_indices(&self, subset: SubsetTag) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| subset == SubsetTag::All || r.subset == subset)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub config: CorpusConfig,
    pub presets: Vec<CalibratedPreset>,
}

impl CorpusInfo {
    pub fn exposure(&self, tag: SubsetTag) -> Option<&CalibratedPreset> {
        self.presets.iter().find(|p| p.preset.tag == tag)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub info: CorpusInfo,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Corpus {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test | SplitName::Calibration => &self.test,
        }
    }
}

fn scenes(cfg: &CorpusConfig, split: SplitName) -> Result<Vec<(u64, Tensor<f32>, LabelMap)>> {
    (0..cfg.count(split))
        .into_par_iter()
        .map(|i| {
            let seed = scene_seed(cfg.seed, split, i);
            let s = generate_scene(seed, cfg.width, cfg.height, cfg.classes)?;
            Ok((seed, quantize(&s.image), s.labels))
        })
        .collect()
}

/// Solves each severity's exposure on a dedicated set of calibration scenes.
pub fn calibrate_presets(cfg: &CorpusConfig) -> Result<Vec<CalibratedPreset>> {
    let calib = scenes(cfg, SplitName::Calibration)?;
    let images: Vec<Tensor<f32>> = calib.iter().map(|(_, img, _)| img.clone()).collect();
    let seeds: Vec<u64> = calib.iter().map(|(s, _, _)| noise_seed(*s)).collect();
    SubsetTag::SEVERITIES
        .par_iter()
        .map(|&tag| {
            let preset = cfg.preset(tag);
            Ok(CalibratedPreset {
                preset,
                exposure_scale: calibrate_exposure(&images, &seeds, &preset)?,
            })
        })
        .collect()
}

fn build_split(
    cfg: &CorpusConfig,
    presets: &[CalibratedPreset],
    split: SplitName,
) -> Result<Split> {
    let items = scenes(cfg, split)?;
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let darkened: Vec<(Tensor<f32>, ManifestRecord)> = items
        .par_iter()
        .enumerate()
        .map(|(index, (seed, bright, _))| {
            let severity = cfg.severity_of(index);
            let cp = presets
                .iter()
                .find(|p| p.preset.tag == severity)
                .expect("every severity is calibrated");
            let params = cp.preset.params(cp.exposure_scale, noise_seed(*seed));
            let dark = quantize(&darken(bright, &params));
            let mean = mean_pixel_intensity(&dark);
            let record = ManifestRecord {
                split,
                index,
                seed: *seed,
                severity,
                darkening: params,
                mean_intensity: mean,
                subset: SubsetTag::nearest(mean),
            };
            (dark, record)
        })
        .collect();
    let bright: Vec<Tensor<f32>> = items.iter().map(|(_, b, _)| b.clone()).collect();
    let labels: Vec<LabelMap> = items.into_iter().map(|(_, _, l)| l).collect();
    let (dark, records): (Vec<_>, Vec<_>) = darkened.into_iter().unzip();
    Ok(Split {
        name: split,
        bright: Tensor::stack_batch(&bright)?,
        dark: Tensor::stack_batch(&dark)?,
        labels: LabelMap::stack(&labels)?,
        records,
    })
}

/// Generates, calibrates and darkens the whole corpus in memory.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.train == 0 || cfg.val == 0 || cfg.test == 0 {
        return Err(Error::EmptyCorpus);
    }
    let presets = calibrate_presets(cfg)?;
    Ok(Corpus {
        train: build_split(cfg, &presets, SplitName::Train)?,
        val: build_split(cfg, &presets, SplitName::Val)?,
        test: build_split(cfg, &presets, SplitName::Test)?,
        info: CorpusInfo {
            config: cfg.clone(),
            presets,
        },
    })
}

/// File name of image `index` inside every per-split directory.
pub fn file_name(index: usize) -> String {
    format!("{index:06}.png")
}

fn is_nonempty_dir(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Writes `<root>/{train,val,test}/{bright,dark,labels}/NNNNNN.png`, the
/// per-image manifest and the corpus description. A non-empty `root` is
/// refused unless `force`, in which case only corpus entries are replaced.
pub fn write_corpus(corpus: &Corpus, root: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(root)? {
        if !force {
            return Err(Error::NonEmptyOutput(root.to_path_buf()));
        }
        for split in SplitName::WRITTEN {
            let dir = root.join(split.as_str());
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
        }
        for f in [MANIFEST_FILE, CORPUS_FILE] {
            let p = root.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    for split in SplitName::WRITTEN {
        let s = corpus.split(split);
        for kind in ["bright", "dark", "labels"] {
            let dir = root.join(split.as_str()).join(kind);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        (0..s.len()).into_par_iter().try_for_each(|i| {
            let base = root.join(split.as_str());
            let name = file_name(i);
            save_image(
                &base.join("bright").join(&name),
                &s.bright.batch_slice(i, i + 1),
            )?;
            save_image(
                &base.join("dark").join(&name),
                &s.dark.batch_slice(i, i + 1),
            )?;
            save_labels(
                &base.join("labels").join(&name),
                &s.labels.batch_slice(i, i + 1),
            )
        })?;
    }
    let path = root.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for split in SplitName::WRITTEN {
        for r in &corpus.split(split).records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let info_path = root.join(CORPUS_FILE);
    let text = serde_json::to_string_pretty(&corpus.info)?;
    fs::write(&info_path, text + "\n").map_err(|e| Error::io(&info_path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let path = root.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_corpus_info(root: &Path) -> Result<CorpusInfo> {
    let path = root.join(CORPUS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads one split back from disk.
pub fn load_split(root: &Path, split: SplitName) -> Result<Split> {
    let info = read_corpus_info(root)?;
    let mut records: Vec<ManifestRecord> = read_manifest(root)?
        .into_iter()
        .filter(|r| r.split == split)
        .collect();
    records.sort_by_key(|r| r.index);
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let base: PathBuf = root.join(split.as_str());
    let loaded: Vec<(Tensor<f32>, Tensor<f32>, LabelMap)> = records
        .par_iter()
        .map(|r| {
            let name = file_name(r.index);
            Ok((
                load_image(&base.join("bright").join(&name))?,
                load_image(&base.join("dark").join(&name))?,
                load_labels(&base.join("labels").join(&name), info.config.classes)?,
            ))
        })
        .collect::<Result<_>>()?;
    let bright: Vec<_> = loaded.iter().map(|(b, _, _)| b.clone()).collect();
    let dark: Vec<_> = loaded.iter().map(|(_, d, _)| d.clone()).collect();
    let labels: Vec<_> = loaded.into_iter().map(|(_, _, l)| l).collect();
    Ok(Split {
        name: split,
        bright: Tensor::stack_batch(&bright)?,
        dark: Tensor::stack_batch(&dark)?,
        labels: LabelMap::stack(&labels)?,
        records,
    })
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    Ok(Corpus {
        info: read_corpus_info(root)?,
        train: load_split(root, SplitName::Train)?,
        val: load_split(root, SplitName::Val)?,
        test: load_split(root, SplitName::Test)?,
    })
}
