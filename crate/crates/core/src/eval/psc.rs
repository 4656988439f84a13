use super::{greedy_match, greedy_match_by, index_by_id, MatchConfig};
use crate::dataset::{Frame, VideoAnnotation};
use crate::geometry::iou;

/// Fraction of ground-truth parts that are both localized and in the right
/// state.
///
/// Per annotated frame, predicted persons are greedily matched to
/// ground-truth persons; inside each matched pair, predicted parts are
/// greedily matched to ground-truth parts of the same part kind. A
/// ground-truth part is correct when it is matched and the states agree.
/// Videos without ground-truth parts score 1.
pub fn part_state_correctness(pred: &VideoAnnotation, gt: &VideoAnnotation, cfg: &MatchConfig) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for gf in &gt.frames {
        total += gf.persons.iter().map(|p| p.parts.len()).sum::<usize>();
        if let Some(pf) = pred.frame(gf.index) {
            correct += correct_parts(pf, gf, cfg);
        }
    }
    if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    }
}

fn correct_parts(pf: &Frame, gf: &Frame, cfg: &MatchConfig) -> usize {
    let pred: Vec<_> = pf.persons.iter().map(|p| (p.bbox, p.confidence())).collect();
    let gt: Vec<_> = gf.persons.iter().map(|p| p.bbox).collect();
    let mut correct = 0;
    for (pi, gi) in greedy_match(&pred, &gt, cfg.iou_threshold).into_iter().enumerate() {
        let Some(gi) = gi else { continue };
        let (pp, gp) = (&pf.persons[pi], &gf.persons[gi]);
        let scores: Vec<f64> = pp.parts.iter().map(|p| p.score.unwrap_or(1.0)).collect();
        let matches = greedy_match_by(&scores, gp.parts.len(), cfg.iou_threshold, |a, b| {
            let (x, y) = (&pp.parts[a], &gp.parts[b]);
            if x.part_id == y.part_id {
                iou(&x.bbox, &y.bbox)
            } else {
                f64::NEG_INFINITY
            }
        });
        for (a, b) in matches.into_iter().enumerate() {
            if let Some(b) = b {
                correct += (pp.parts[a].state_id == gp.parts[b].state_id) as usize;
            }
        }
    }
    correct
}

/// Video accuracy gated on part-state correctness: the mean over
/// ground-truth videos of `[action correct] * [PSC >= psc_threshold]`.
/// Videos without a prediction count as 0; an empty ground truth gives 0.
pub fn acc_p(predictions: &[VideoAnnotation], ground_truth: &[VideoAnnotation], cfg: &MatchConfig) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let pred = index_by_id(predictions);
    let hits = ground_truth
        .iter()
        .filter(|gt| {
            pred.get(gt.video_id.as_str()).is_some_and(|p| {
                p.predicted_action() == gt.action_id
                    && part_state_correctness(p, gt, cfg) >= cfg.psc_threshold
            })
        })
        .count();
    hits as f64 / ground_truth.len() as f64
}
