//! Metric reports and the ground-truth substitution diagnosis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dap_core::eval::{
    acc_p, bottleneck_grid, check_alignment, class_accuracies, detection_map, substitute_ground_truth,
    video_accuracy, DiagnosisGrid, GridRow, MatchConfig, SubstitutionFlags,
};
use dap_core::{DatasetConfig, VideoAnnotation};
use serde::Serialize;

use crate::error::{Result, RuntimeError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub num_videos: usize,
    pub map: f64,
    pub acc: f64,
    pub acc_p: f64,
    /// Accuracy per action name, for actions present in the ground truth.
    pub per_class: BTreeMap<String, f64>,
}

/// Fails with the offending ids unless both sides cover the same videos.
pub fn ensure_aligned(predictions: &[VideoAnnotation], ground_truth: &[VideoAnnotation]) -> Result<()> {
    let m = check_alignment(predictions, ground_truth);
    if m.is_empty() {
        Ok(())
    } else {
        Err(RuntimeError::Alignment(m.to_string()))
    }
}

pub fn evaluate(
    predictions: &[VideoAnnotation],
    ground_truth: &[VideoAnnotation],
    dataset: &DatasetConfig,
    cfg: &MatchConfig,
) -> Result<MetricsReport> {
    ensure_aligned(predictions, ground_truth)?;
    let per_class = class_accuracies(predictions, ground_truth)
        .into_iter()
        .map(|(c, a)| (dataset.actions[c].clone(), a))
        .collect();
    Ok(MetricsReport {
        num_videos: ground_truth.len(),
        map: detection_map(predictions, ground_truth, cfg),
        acc: video_accuracy(predictions, ground_truth),
        acc_p: acc_p(predictions, ground_truth, cfg),
        per_class,
    })
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "videos  {}", self.num_videos);
        let _ = writeln!(out, "mAP     {:.4}", self.map);
        let _ = writeln!(out, "Acc     {:.4}", self.acc);
        let _ = writeln!(out, "Acc^p   {:.4}", self.acc_p);
        let width = self.per_class.keys().map(String::len).max().unwrap_or(0);
        for (name, a) in &self.per_class {
            let _ = writeln!(out, "  {name:<width$}  {a:.4}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisReport {
    pub grid: DiagnosisGrid,
    /// Extra row for a user-chosen flag combination.
    pub custom: Option<GridRow>,
}

pub fn diagnose(
    predictions: &[VideoAnnotation],
    ground_truth: &[VideoAnnotation],
    cfg: &MatchConfig,
    custom: Option<SubstitutionFlags>,
) -> Result<DiagnosisReport> {
    ensure_aligned(predictions, ground_truth)?;
    let custom = custom.map(|flags| GridRow {
        flags,
        acc_p: acc_p(&substitute_ground_truth(predictions, ground_truth, flags, cfg), ground_truth, cfg),
    });
    Ok(DiagnosisReport {
        grid: bottleneck_grid(predictions, ground_truth, cfg),
        custom,
    })
}

impl DiagnosisReport {
    pub fn to_text(&self) -> String {
        let mut out = self.grid.to_table();
        if let Some(row) = &self.custom {
            let f = row.flags;
            let _ = writeln!(
                out,
                "\ncustom (actor_det={}, part_det={}, state_parsing={}, action_parsing={}): Acc^p {:.2}%",
                f.actor_detection,
                f.part_det,
                f.state_parsing,
                f.action_parsing,
                100.0 * row.acc_p
            );
        }
        out
    }
}
