//! Segmentation metrics, parameter accounting, latency benchmarks and the
//! four-variant ablation.

mod ablation;
mod bench;
mod metrics;
mod report;

pub use ablation::{
    evaluate_variant, predict_through, run_ablation, score_split, AblationConfig, AblationReport,
    AblationRow, SubsetScores,
};
pub use bench::{benchmark_latency, LatencyReport, LatencyStats};
pub use metrics::{mean_pixel_intensity, miou, ConfusionMatrix, MiouReport};
pub use report::{MetricsReport, ParamCounts};

use crate::nn::Module;

/// Trainable parameter count per tensor and in total.
pub fn count_params(module: &dyn Module) -> (usize, Vec<(String, usize)>) {
    let per = module.param_breakdown();
    (per.iter().map(|(_, n)| n).sum(), per)
}
