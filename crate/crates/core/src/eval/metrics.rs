use std::collections::{BTreeMap, HashMap};

use super::{index_by_id, MatchConfig};
use crate::dataset::VideoAnnotation;
use crate::geometry::{iou, BBox};

/// Person-detection average precision over every annotated frame.
///
/// Detections from all frames are ranked by descending score (ties keep file
/// order); each is a true positive when it claims an unmatched ground-truth
/// box of its own frame at IoU at least the threshold, the highest-IoU box
/// first. AP is the area under the precision envelope (all-point
/// interpolation). With no ground truth, AP is 1 if there are also no
/// detections and 0 otherwise.
pub fn detection_map(
    predictions: &[VideoAnnotation],
    ground_truth: &[VideoAnnotation],
    cfg: &MatchConfig,
) -> f64 {
    let mut gt_boxes: HashMap<(&str, usize), Vec<BBox>> = HashMap::new();
    let mut num_gt = 0usize;
    for v in ground_truth {
        for f in &v.frames {
            num_gt += f.persons.len();
            gt_boxes.insert(
                (v.video_id.as_str(), f.index),
                f.persons.iter().map(|p| p.bbox).collect(),
            );
        }
    }
    let mut dets: Vec<(f64, (&str, usize), BBox)> = Vec::new();
    for v in predictions {
        for f in &v.frames {
            for p in &f.persons {
                dets.push((p.confidence(), (v.video_id.as_str(), f.index), p.bbox));
            }
        }
    }
    if num_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut taken: HashMap<(&str, usize), Vec<bool>> = gt_boxes
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    let mut hits = Vec::with_capacity(dets.len());
    for (_, key, bbox) in &dets {
        let mut hit = false;
        if let (Some(boxes), Some(used)) = (gt_boxes.get(key), taken.get_mut(key)) {
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in boxes.iter().enumerate() {
                let o = iou(bbox, gb);
                if !used[g] && o >= cfg.iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
                hit = true;
            }
        }
        hits.push(hit);
    }
    average_precision(&hits, num_gt)
}

/// All-point interpolated AP of a ranked hit list against `num_gt` positives:
/// the enveloped precision summed over true positives, divided by `num_gt`.
fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    hits.iter()
        .zip(&precision)
        .filter(|(h, _)| **h)
        .map(|(_, p)| p)
        .sum::<f64>()
        / num_gt as f64
}

/// Per-class accuracy of the predicted video actions, for every class that
/// occurs in the ground truth. Videos without a prediction count as wrong.
pub fn class_accuracies(
    predictions: &[VideoAnnotation],
    ground_truth: &[VideoAnnotation],
) -> BTreeMap<usize, f64> {
    let pred = index_by_id(predictions);
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for gt in ground_truth {
        let entry = tally.entry(gt.action_id).or_default();
        entry.1 += 1;
        if pred
            .get(gt.video_id.as_str())
            .is_some_and(|p| p.predicted_action() == gt.action_id)
        {
            entry.0 += 1;
        }
    }
    tally
        .into_iter()
        .map(|(c, (ok, n))| (c, ok as f64 / n as f64))
        .collect()
}

/// Mean class accuracy over the classes present in the ground truth.
pub fn video_accuracy(predictions: &[VideoAnnotation], ground_truth: &[VideoAnnotation]) -> f64 {
    let per_class = class_accuracies(predictions, ground_truth);
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.values().sum::<f64>() / per_class.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Frame, Person};

    fn video(id: &str, action: usize, boxes: &[(BBox, Option<f64>)]) -> VideoAnnotation {
        VideoAnnotation {
            video_id: id.into(),
            action_id: action,
            width: 100,
            height: 100,
            frames: vec![Frame {
                index: 0,
                persons: boxes
                    .iter()
                    .map(|(b, s)| Person {
                        score: *s,
                        ..Person::new(*b)
                    })
                    .collect(),
            }],
            action_scores: None,
        }
    }

    #[test]
    fn perfect_detector_has_unit_ap() {
        let b = BBox::new(10.0, 10.0, 30.0, 50.0);
        let gt = vec![video("a", 0, &[(b, None)])];
        let pred = vec![video("a", 0, &[(b, Some(1.0))])];
        assert_eq!(detection_map(&pred, &gt, &MatchConfig::default()), 1.0);
    }

    #[test]
    fn empty_conventions() {
        let b = BBox::new(10.0, 10.0, 30.0, 50.0);
        let cfg = MatchConfig::default();
        let gt = vec![video("a", 0, &[(b, None)])];
        let none = vec![video("a", 0, &[])];
        assert_eq!(detection_map(&none, &gt, &cfg), 0.0);
        assert_eq!(detection_map(&none, &none, &cfg), 1.0);
        assert_eq!(detection_map(&gt, &none, &cfg), 0.0);
    }

    #[test]
    fn precision_envelope() {
        // Ranked hits: TP, FP, TP with 2 positives.
        // Envelope precision: 1, 2/3, 2/3 -> AP = 0.5 * 1 + 0.5 * 2/3.
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn class_mean_accuracy() {
        let gt = vec![video("a", 0, &[]), video("b", 1, &[])];
        let mut pred = gt.clone();
        pred[0].action_scores = Some(vec![0.9, 0.1]);
        pred[1].action_scores = Some(vec![0.8, 0.2]);
        assert_eq!(video_accuracy(&pred, &gt), 0.5);
        assert_eq!(video_accuracy(&gt, &gt), 1.0);
    }
}
