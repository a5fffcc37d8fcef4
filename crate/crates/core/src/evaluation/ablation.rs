use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split, SubsetTag};
use crate::error::Result;
use crate::pam::{Enhancer, Variant};
use crate::recognizer::RecognizerNetwork;
use crate::tensor::{LabelMap, Tensor};
use crate::training::{train_enhancer, EnhancerTrainer, TrainConfig, TrainData};

use super::metrics::{ConfusionMatrix, MiouReport};

const EVAL_CHUNK: usize = 64;

/// mIoU per low-light subset; subsets without images are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetScores(pub BTreeMap<SubsetTag, f64>);

impl SubsetScores {
    pub fn get(&self, tag: SubsetTag) -> Option<f64> {
        self.0.get(&tag).copied()
    }

    pub fn all(&self) -> f64 {
        self.get(SubsetTag::All).unwrap_or(f64::NAN)
    }
}

/// Enhanced-then-recognized labels for every image of `images`.
pub fn predict_through(
    enhancer: &mut Enhancer,
    variant: Variant,
    recognizer: &RecognizerNetwork,
    images: &Tensor<f32>,
) -> Result<LabelMap> {
    if variant == Variant::None {
        return recognizer.predict(images);
    }
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let chunk = images.batch_slice(start, (start + EVAL_CHUNK).min(n));
        let (out, _) = enhancer.enhance_eval(&chunk, variant)?;
        parts.push(recognizer.predict(&out)?);
    }
    LabelMap::stack(&parts)
}

/// Dataset-level mIoU of `variant` on the dark images of `split`, per
/// subset.
pub fn evaluate_variant(
    enhancer: &mut Enhancer,
    variant: Variant,
    recognizer: &RecognizerNetwork,
    split: &Split,
) -> Result<SubsetScores> {
    let pred = predict_through(enhancer, variant, recognizer, &split.dark)?;
    Ok(score_split(&pred, split, recognizer.classes)?.0)
}

/// Per-subset mIoU of predictions for every image of `split`, plus the
/// whole-split report.
pub fn score_split(
    pred: &LabelMap,
    split: &Split,
    classes: usize,
) -> Result<(SubsetScores, MiouReport)> {
    let mut scores = BTreeMap::new();
    for tag in SubsetTag::SEVERITIES {
        let idx = split.subset_indices(tag);
        if idx.is_empty() {
            continue;
        }
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred.gather(&idx), &split.labels.gather(&idx))?;
        scores.insert(tag, cm.report()?.miou);
    }
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, &split.labels)?;
    let whole = cm.report()?;
    scores.insert(SubsetTag::All, whole.miou);
    Ok((SubsetScores(scores), whole))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Template for every trained variant; its seed and stage flags are
    /// overridden per run.
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                checkpoint_interval: 0,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub per_seed: Vec<SubsetScores>,
    /// Per-subset median over seeds.
    pub median: SubsetScores,
    pub final_smoothed_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Median `LL-A` mIoU of a variant.
    pub fn median_all(&self, v: Variant) -> f64 {
        self.row(v).map_or(f64::NAN, |r| r.median.all())
    }

    /// none < GEM < PAM < full on the median `LL-A` mIoU.
    pub fn ordering_holds(&self) -> bool {
        let m: Vec<f64> = Variant::ALL.iter().map(|&v| self.median_all(v)).collect();
        m.windows(2).all(|w| w[0] < w[1])
    }

    pub fn full_over_none(&self) -> f64 {
        self.median_all(Variant::Full) / self.median_all(Variant::None)
    }
}

/// Trains GEM-only, PAM-only and full enhancers for each seed with identical
/// settings, and scores them with the untouched baseline on the dark test
/// split.
pub fn run_ablation(
    corpus: &Corpus,
    recognizer: &RecognizerNetwork,
    cfg: &AblationConfig,
    mut progress: impl FnMut(Variant, u64, u64, f64),
) -> Result<AblationReport> {
    let data = TrainData {
        images: &corpus.train.dark,
        labels: &corpus.train.labels,
    };
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut per_seed = Vec::new();
        let mut final_loss = Vec::new();
        for &seed in &cfg.seeds {
            let tc = TrainConfig {
                seed,
                gem_enabled: variant.gem_enabled(),
                pam_enabled: variant.pam_enabled(),
                ..cfg.train.clone()
            };
            let mut trainer = EnhancerTrainer::new(tc);
            if variant != Variant::None {
                let report = train_enhancer(&mut trainer, recognizer, &data, None, |r| {
                    progress(variant, seed, r.step, r.smoothed_loss)
                })?;
                final_loss.push(report.records.last().map_or(f64::NAN, |r| r.smoothed_loss));
            }
            per_seed.push(evaluate_variant(
                &mut trainer.enhancer,
                variant,
                recognizer,
                &corpus.test,
            )?);
        }
        let mut med = BTreeMap::new();
        for tag in SubsetTag::ALL {
            let vals: Vec<f64> = per_seed.iter().filter_map(|s| s.get(tag)).collect();
            if !vals.is_empty() {
                med.insert(tag, median(vals));
            }
        }
        rows.push(AblationRow {
            variant,
            per_seed,
            median: SubsetScores(med),
            final_smoothed_loss: final_loss,
        });
    }
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        steps: cfg.train.total_steps,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
