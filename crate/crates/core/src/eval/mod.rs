//! Metrics for part-level action parsing and the ground-truth substitution
//! diagnostic.

mod grid;
mod matching;
mod metrics;
mod psc;
mod substitution;

pub use grid::{bottleneck_grid, DiagnosisGrid, GridRow, SubstitutionFlags, TABLE_ROWS};
pub use matching::{greedy_match, greedy_match_by};
pub use metrics::{class_accuracies, detection_map, video_accuracy};
pub use psc::{acc_p, part_state_correctness};
pub use substitution::substitute_ground_truth;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::VideoAnnotation;
use crate::error::{DataError, Result};

/// Thresholds shared by every metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Minimum IoU for a person or part match.
    pub iou_threshold: f64,
    /// Minimum part-state correctness for a video to count under Acc^p.
    pub psc_threshold: f64,
    /// State given to parts inserted by part-detection substitution when
    /// the prediction had no part of that kind.
    pub fallback_state: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            iou_threshold: 0.5,
            psc_threshold: 0.5,
            fallback_state: 0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t <= 1.0;
        if ok(self.iou_threshold) && ok(self.psc_threshold) {
            Ok(())
        } else {
            Err(DataError::Argument(
                "match thresholds must lie in (0, 1]".into(),
            ))
        }
    }
}

/// Video ids present on only one side of a prediction/ground-truth pair.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Misalignment {
    pub missing_predictions: Vec<String>,
    pub unexpected_predictions: Vec<String>,
}

impl Misalignment {
    pub fn is_empty(&self) -> bool {
        self.missing_predictions.is_empty() && self.unexpected_predictions.is_empty()
    }
}

impl std::fmt::Display for Misalignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "no prediction for {:?}; no ground truth for {:?}",
            self.missing_predictions, self.unexpected_predictions
        )
    }
}

pub fn check_alignment(predictions: &[VideoAnnotation], ground_truth: &[VideoAnnotation]) -> Misalignment {
    let pred: BTreeSet<&str> = predictions.iter().map(|v| v.video_id.as_str()).collect();
    let gt: BTreeSet<&str> = ground_truth.iter().map(|v| v.video_id.as_str()).collect();
    Misalignment {
        missing_predictions: gt.difference(&pred).map(|s| s.to_string()).collect(),
        unexpected_predictions: pred.difference(&gt).map(|s| s.to_string()).collect(),
    }
}

fn index_by_id(videos: &[VideoAnnotation]) -> HashMap<&str, &VideoAnnotation> {
    videos.iter().map(|v| (v.video_id.as_str(), v)).collect()
}
