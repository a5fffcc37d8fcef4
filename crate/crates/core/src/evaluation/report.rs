use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::SubsetTag;
use crate::nn::Module;
use crate::pam::{Enhancer, Variant};
use crate::recognizer::RecognizerNetwork;

use super::ablation::{AblationReport, SubsetScores};
use super::bench::LatencyReport;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub gem: usize,
    pub pam: usize,
    pub recognizer: usize,
    pub enhancer_total: usize,
    pub per_tensor: Vec<(String, usize)>,
}

impl ParamCounts {
    pub fn of(enhancer: &Enhancer, recognizer: Option<&RecognizerNetwork>) -> Self {
        let mut per_tensor = enhancer.param_breakdown();
        let recognizer = recognizer.map_or(0, |r| {
            per_tensor.extend(r.param_breakdown());
            r.param_count()
        });
        Self {
            gem: enhancer.gem.param_count(),
            pam: enhancer.pam.param_count(),
            recognizer,
            enhancer_total: enhancer.param_count(),
            per_tensor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub subsets: SubsetScores,
    /// Per-class IoU over the whole split, `None` for absent classes.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub params: ParamCounts,
    pub latency: Option<LatencyReport>,
    pub config_hash: String,
    pub checkpoint_id: String,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "variant        {}", self.variant.label()).unwrap();
        writeln!(s, "checkpoint     {}", self.checkpoint_id).unwrap();
        writeln!(s, "{:<8} {:>8}", "subset", "mIoU").unwrap();
        for tag in SubsetTag::ALL {
            if let Some(v) = self.subsets.get(tag) {
                writeln!(s, "{:<8} {:>8.4}", tag.name(), v).unwrap();
            }
        }
        writeln!(s, "{:<8} {:>8}", "class", "IoU").unwrap();
        for (k, v) in self.per_class_iou.iter().enumerate() {
            match v {
                Some(v) => writeln!(s, "{k:<8} {v:>8.4}").unwrap(),
                None => writeln!(s, "{k:<8} {:>8}", "-").unwrap(),
            }
        }
        writeln!(
            s,
            "params         gem {} + pam {} = {} (recognizer {})",
            self.params.gem, self.params.pam, self.params.enhancer_total, self.params.recognizer
        )
        .unwrap();
        if let Some(l) = &self.latency {
            write_latency(&mut s, l);
        }
        s
    }
}

pub(crate) fn write_latency(s: &mut String, l: &LatencyReport) {
    writeln!(s, "latency at {}x{} (ms/image)", l.height, l.width).unwrap();
    writeln!(s, "{:<12} {:>9} {:>9} {:>9}", "stage", "mean", "p50", "p95").unwrap();
    for (name, st) in [
        ("enhancer", &l.enhancer),
        ("recognizer", &l.recognizer),
        ("combined", &l.combined),
    ] {
        writeln!(
            s,
            "{name:<12} {:>9.3} {:>9.3} {:>9.3}",
            st.mean_ms, st.p50_ms, st.p95_ms
        )
        .unwrap();
    }
}

impl LatencyReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        write_latency(&mut s, self);
        s
    }
}

impl AblationReport {
    /// One row per variant with stage marks and median subset mIoU (×100).
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<16} {:^5} {:^5} {:>7} {:>7} {:>7} {:>7}",
            "variant", "GEM", "PAM", "LL-N", "LL-H", "LL-E", "LL-A"
        )
        .unwrap();
        for row in &self.rows {
            let mark = |b: bool| if b { "x" } else { "" };
            write!(
                s,
                "{:<16} {:^5} {:^5}",
                row.variant.label(),
                mark(row.variant.gem_enabled()),
                mark(row.variant.pam_enabled())
            )
            .unwrap();
            for tag in SubsetTag::ALL {
                match row.median.get(tag) {
                    Some(v) => write!(s, " {:>7.2}", v * 100.0).unwrap(),
                    None => write!(s, " {:>7}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        writeln!(
            s,
            "median over seeds {:?}, {} steps; ordering {}; full/none = {:.3}",
            self.seeds,
            self.steps,
            if self.ordering_holds() {
                "holds"
            } else {
                "violated"
            },
            self.full_over_none()
        )
        .unwrap();
        s
    }
}
