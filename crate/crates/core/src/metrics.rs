//! Three-tier metric report: plain grounding over all samples, grounding
//! conditioned on a correct phase, and hardcore metrics where a wrong phase
//! voids the grounding.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BoundingBox, PerSampleEvaluation, GRID_MAX};
use crate::rewards::{center_distance, reward_iou};

/// IoU threshold of the headline accuracy metrics.
pub const ACC_IOU_THRESHOLD: f64 = 0.25;

/// Thresholds averaged by the mean-accuracy metric: 0.25 to 0.50 in steps of
/// 0.05, inclusive.
pub const MEAN_ACC_IOU_THRESHOLDS: [f64; 6] = [0.25, 0.30, 0.35, 0.40, 0.45, 0.50];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty result set")]
    EmptyInput,
}

/// Diagonal of the canonical grid.
pub fn grid_diagonal() -> f64 {
    f64::from(GRID_MAX) * std::f64::consts::SQRT_2
}

/// IoU and center distance (percent of the grid diagonal) for one sample.
/// A missing prediction scores `(0, 100)`.
pub fn per_sample_geometry(pred: Option<&BoundingBox>, truth: &BoundingBox) -> (f64, f64) {
    match pred {
        Some(p) => (
            reward_iou(p, truth),
            100.0 * center_distance(p, truth) / grid_diagonal(),
        ),
        None => (0.0, 100.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub acc_at_25: f64,
    #[serde(rename = "mA_25_50")]
    pub ma_25_50: f64,
    pub delta_cen: f64,
    pub miou: f64,
}

/// Metrics over the phase-correct subset. `None` means undefined because the
/// subset is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionedMetrics {
    pub ca_25: Option<f64>,
    pub ca_25_50: Option<f64>,
    pub c_delta_cen: Option<f64>,
    pub c_miou: Option<f64>,
    pub n_conditioned: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardcoreMetrics {
    pub ha_25: f64,
    pub h_miou: f64,
}

/// Raw counts behind the percentages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub n_phase_correct: usize,
    pub n_hit_25: usize,
    pub n_correct_and_hit_25: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub phase_acc: f64,
    pub grounding: GroundingMetrics,
    pub conditioned: ConditionedMetrics,
    pub hardcore: HardcoreMetrics,
    pub counts: ReportCounts,
}

/// Order-independent sum: values are sorted before adding.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

fn pct(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

struct Block {
    acc_25: f64,
    ma: f64,
    delta: f64,
    miou: f64,
}

fn grounding_block(rows: &[&PerSampleEvaluation]) -> Option<Block> {
    let n = rows.len();
    if n == 0 {
        return None;
    }
    let hits = |t: f64| rows.iter().filter(|r| r.iou >= t).count();
    let ma = MEAN_ACC_IOU_THRESHOLDS
        .iter()
        .map(|&t| pct(hits(t), n))
        .sum::<f64>()
        / MEAN_ACC_IOU_THRESHOLDS.len() as f64;
    Some(Block {
        acc_25: pct(hits(ACC_IOU_THRESHOLD), n),
        ma,
        delta: stable_sum(rows.iter().map(|r| r.center_distance_pct).collect()) / n as f64,
        miou: 100.0 * stable_sum(rows.iter().map(|r| r.iou).collect()) / n as f64,
    })
}

/// Aggregate per-sample records into an [`EvalReport`].
///
/// The result does not depend on input order.
pub fn aggregate(results: &[PerSampleEvaluation]) -> Result<EvalReport, MetricsError> {
    let n = results.len();
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let all: Vec<&PerSampleEvaluation> = results.iter().collect();
    let correct: Vec<&PerSampleEvaluation> = results.iter().filter(|r| r.phase_correct).collect();

    let g = grounding_block(&all).expect("non-empty");
    let c = grounding_block(&correct);

    let n_hit_25 = all.iter().filter(|r| r.iou >= ACC_IOU_THRESHOLD).count();
    let n_correct_and_hit_25 = correct.iter().filter(|r| r.iou >= ACC_IOU_THRESHOLD).count();
    let h_miou = 100.0 * stable_sum(correct.iter().map(|r| r.iou).collect()) / n as f64;

    Ok(EvalReport {
        n_samples: n,
        phase_acc: pct(correct.len(), n),
        grounding: GroundingMetrics {
            acc_at_25: g.acc_25,
            ma_25_50: g.ma,
            delta_cen: g.delta,
            miou: g.miou,
        },
        conditioned: ConditionedMetrics {
            ca_25: c.as_ref().map(|b| b.acc_25),
            ca_25_50: c.as_ref().map(|b| b.ma),
            c_delta_cen: c.as_ref().map(|b| b.delta),
            c_miou: c.as_ref().map(|b| b.miou),
            n_conditioned: correct.len(),
        },
        hardcore: HardcoreMetrics {
            ha_25: pct(n_correct_and_hit_25, n),
            h_miou,
        },
        counts: ReportCounts {
            n_phase_correct: correct.len(),
            n_hit_25,
            n_correct_and_hit_25,
        },
    })
}

/// Format with three significant figures, e.g. `76.6`, `4.11`, `0.270`.
pub fn format_sig3(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let decimals = |x: f64| (2 - x.abs().log10().floor() as i32).max(0) as usize;
    let d = decimals(v);
    let s = format!("{v:.d$}");
    // rounding may carry into a new digit (99.96 -> 100.0)
    let rounded: f64 = s.parse().unwrap_or(v);
    let d2 = decimals(rounded);
    if d2 < d {
        format!("{rounded:.d2$}")
    } else {
        s
    }
}

fn opt_sig3(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), format_sig3)
}

impl EvalReport {
    /// Column headers and display values in table order.
    pub fn columns(&self) -> Vec<(&'static str, String)> {
        vec![
            ("Phase Acc", format_sig3(self.phase_acc)),
            ("Acc@0.25", format_sig3(self.grounding.acc_at_25)),
            ("mA@0.25:0.5", format_sig3(self.grounding.ma_25_50)),
            ("Δcen↓", format_sig3(self.grounding.delta_cen)),
            ("mIoU", format_sig3(self.grounding.miou)),
            ("CA@0.25", opt_sig3(self.conditioned.ca_25)),
            ("CA@0.25:0.5", opt_sig3(self.conditioned.ca_25_50)),
            ("CΔcen↓", opt_sig3(self.conditioned.c_delta_cen)),
            ("CmIoU", opt_sig3(self.conditioned.c_miou)),
            ("HA@0.25", format_sig3(self.hardcore.ha_25)),
            ("HmIoU", format_sig3(self.hardcore.h_miou)),
        ]
    }

    /// Human-readable aligned table with group headers.
    pub fn to_table(&self, label: &str) -> String {
        let cols = self.columns();
        let widths: Vec<usize> = cols
            .iter()
            .map(|(h, v)| h.chars().count().max(v.chars().count()))
            .collect();
        let label_w = label.chars().count().max("Method".len());
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));

        let span = |range: std::ops::Range<usize>| -> usize {
            widths[range.clone()].iter().sum::<usize>() + 3 * (range.len() - 1)
        };
        let mut out = String::new();
        let groups = [
            ("Phase", 0..1),
            ("Grounding", 1..5),
            ("Conditioned", 5..9),
            ("Hardcore", 9..11),
        ];
        let _ = write!(out, "{} ", pad("", label_w));
        for (name, range) in groups {
            let _ = write!(out, "| {} ", pad(name, span(range)));
        }
        out.push('\n');
        let _ = write!(out, "{} ", pad("Method", label_w));
        for ((h, _), w) in cols.iter().zip(&widths) {
            let _ = write!(out, "| {} ", pad(h, *w));
        }
        out.push('\n');
        let _ = write!(out, "{} ", pad(label, label_w));
        for ((_, v), w) in cols.iter().zip(&widths) {
            let _ = write!(out, "| {} ", pad(v, *w));
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "n = {}, phase-correct = {}",
            self.n_samples, self.conditioned.n_conditioned
        );
        out
    }
}
