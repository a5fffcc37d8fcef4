use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::mean_pixel_intensity;
use crate::tensor::Tensor;

use super::io::quantize;

/// `clamp01((exposure_scale · I)^gamma + shot + read)` with
/// `shot ~ N(0, shot_noise_scale · sqrt(signal))` and
/// `read ~ N(0, read_noise_sigma)` per pixel and channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarkeningParams {
    pub exposure_scale: f64,
    pub gamma: f64,
    pub read_noise_sigma: f64,
    pub shot_noise_scale: f64,
    pub seed: u64,
}

impl DarkeningParams {
    pub const IDENTITY: DarkeningParams = DarkeningParams {
        exposure_scale: 1.0,
        gamma: 1.0,
        read_noise_sigma: 0.0,
        shot_noise_scale: 0.0,
        seed: 0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.exposure_scale > 0.0 && self.exposure_scale <= 1.0) {
            return Err(Error::Config(format!(
                "exposure_scale {} not in (0, 1]",
                self.exposure_scale
            )));
        }
        if self.gamma.is_nan()
            || self.gamma < 1.0
            || self.read_noise_sigma < 0.0
            || self.shot_noise_scale < 0.0
        {
            return Err(Error::Config(format!(
                "invalid darkening parameters {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn darken(image: &Tensor<f32>, p: &DarkeningParams) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noisy = p.read_noise_sigma > 0.0 || p.shot_noise_scale > 0.0;
    let data = image
        .data()
        .iter()
        .map(|&v| {
            let signal = (p.exposure_scale * v as f64).powf(p.gamma);
            let mut out = signal;
            if noisy {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                out += p.shot_noise_scale * signal.sqrt() * z1 + p.read_noise_sigma * z2;
            }
            out.clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

/// Low-light subset, keyed by its target mean pixel intensity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetTag {
    #[serde(rename = "LL-N")]
    Normal,
    #[serde(rename = "LL-H")]
    Hard,
    #[serde(rename = "LL-E")]
    Extreme,
    #[serde(rename = "LL-A")]
    All,
}

impl SubsetTag {
    pub const SEVERITIES: [SubsetTag; 3] = [SubsetTag::Normal, SubsetTag::Hard, SubsetTag::Extreme];
    pub const ALL: [SubsetTag; 4] = [
        SubsetTag::Normal,
        SubsetTag::Hard,
        SubsetTag::Extreme,
        SubsetTag::All,
    ];

    /// On the 0–255 scale.
    pub fn target_mean(self) -> f64 {
        match self {
            SubsetTag::Normal => 3.2,
            SubsetTag::Hard => 1.4,
            SubsetTag::Extreme => 0.9,
            SubsetTag::All => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubsetTag::Normal => "LL-N",
            SubsetTag::Hard => "LL-H",
            SubsetTag::Extreme => "LL-E",
            SubsetTag::All => "LL-A",
        }
    }

    /// Severity subset whose target is nearest to `mean` (ties go to the
    /// brighter subset).
    pub fn nearest(mean: f64) -> SubsetTag {
        let mut best = SubsetTag::Normal;
        for tag in SubsetTag::SEVERITIES {
            if (mean - tag.target_mean()).abs() < (mean - best.target_mean()).abs() {
                best = tag;
            }
        }
        best
    }
}

impl std::str::FromStr for SubsetTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        match key.as_str() {
            "ll-n" | "normal" | "n" => Ok(SubsetTag::Normal),
            "ll-h" | "hard" | "h" => Ok(SubsetTag::Hard),
            "ll-e" | "extreme" | "e" => Ok(SubsetTag::Extreme),
            "ll-a" | "all" | "a" | "mixed" => Ok(SubsetTag::All),
            _ => Err(Error::Config(format!(
                "unknown severity {s:?}; expected normal, hard, extreme or all"
            ))),
        }
    }
}

/// Fixed noise and contrast settings of a severity; the exposure is
/// solved for by [`calibrate_exposure`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityPreset {
    pub tag: SubsetTag,
    pub gamma: f64,
    pub read_noise_sigma: f64,
    pub shot_noise_scale: f64,
}

impl SeverityPreset {
    pub fn default_for(tag: SubsetTag) -> Self {
        Self {
            tag,
            gamma: 1.1,
            read_noise_sigma: 0.4 / 255.0,
            shot_noise_scale: 0.01,
        }
    }

    pub fn params(&self, exposure_scale: f64, seed: u64) -> DarkeningParams {
        DarkeningParams {
            exposure_scale,
            gamma: self.gamma,
            read_noise_sigma: self.read_noise_sigma,
            shot_noise_scale: self.shot_noise_scale,
            seed,
        }
    }
}

/// Mean 0–255 intensity of the 8-bit darkened images.
fn darkened_mean(
    images: &[Tensor<f32>],
    seeds: &[u64],
    preset: &SeverityPreset,
    exposure: f64,
) -> f64 {
    let total: f64 = images
        .iter()
        .zip(seeds)
        .map(|(img, &seed)| {
            mean_pixel_intensity(&quantize(&darken(img, &preset.params(exposure, seed))))
        })
        .sum();
    total / images.len() as f64
}

/// Bisects the exposure scale so that the 8-bit darkened `images` (noise
/// seeded per image by `seeds`) average to the preset's target intensity.
pub fn calibrate_exposure(
    images: &[Tensor<f32>],
    seeds: &[u64],
    preset: &SeverityPreset,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let target = preset.tag.target_mean();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if darkened_mean(images, seeds, preset, hi) < target {
        return Err(Error::Config(format!(
            "{}: full exposure stays below the target mean {target}",
            preset.tag.name()
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let m = darkened_mean(images, seeds, preset, mid);
        if (m - target).abs() < 1e-3 {
            return Ok(mid);
        }
        if m < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Assigns each image to the severity subset nearest to its own mean
/// intensity. `LL-A` implicitly holds every index.
pub fn partition_by_intensity(means: &[f64]) -> Result<Vec<SubsetTag>> {
    if means.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(means.iter().map(|&m| SubsetTag::nearest(m)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_params_are_identity() {
        let img = Tensor::from_fn([1, 3, 4, 4], |i| (i as f32 / 48.0).min(1.0));
        assert_eq!(darken(&img, &DarkeningParams::IDENTITY), img);
    }

    #[test]
    fn scale_only_arithmetic() {
        let img = Tensor::full([1, 3, 2, 2], 0.8f32);
        let p = DarkeningParams {
            exposure_scale: 0.1,
            ..DarkeningParams::IDENTITY
        };
        assert!(darken(&img, &p)
            .data()
            .iter()
            .all(|v| (v - 0.08).abs() < 1e-7));
    }

    #[test]
    fn noise_is_seeded() {
        let img = Tensor::full([1, 3, 4, 4], 0.5f32);
        let p = SeverityPreset::default_for(SubsetTag::Normal).params(0.05, 3);
        assert_eq!(darken(&img, &p), darken(&img, &p));
        assert_ne!(
            darken(&img, &p),
            darken(&img, &DarkeningParams { seed: 4, ..p })
        );
    }

    #[test]
    fn nearest_target() {
        assert_eq!(SubsetTag::nearest(0.9), SubsetTag::Extreme);
        assert_eq!(SubsetTag::nearest(3.2), SubsetTag::Normal);
        assert_eq!(SubsetTag::nearest(1.4), SubsetTag::Hard);
        assert_eq!(SubsetTag::nearest(0.0), SubsetTag::Extreme);
        assert_eq!(SubsetTag::nearest(40.0), SubsetTag::Normal);
        assert!(partition_by_intensity(&[]).is_err());
    }

    #[test]
    fn tag_parsing() {
        assert_eq!("LL-E".parse::<SubsetTag>().unwrap(), SubsetTag::Extreme);
        assert_eq!("hard".parse::<SubsetTag>().unwrap(), SubsetTag::Hard);
        assert!("pitch-black".parse::<SubsetTag>().is_err());
    }
}
