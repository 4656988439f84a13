use crate::geometry::{iou, BBox};

/// Greedy one-to-one matching of scored predictions to ground truth.
///
/// Predictions are visited by descending score, ties in input order. Each
/// takes the still-unmatched ground truth with the highest IoU at or above
/// `threshold`, preferring the lower ground-truth index on equal IoU. Returns
/// the matched ground-truth index per prediction.
pub fn greedy_match(pred: &[(BBox, f64)], gt: &[BBox], threshold: f64) -> Vec<Option<usize>> {
    let scores: Vec<f64> = pred.iter().map(|p| p.1).collect();
    greedy_match_by(&scores, gt.len(), threshold, |p, g| iou(&pred[p].0, &gt[g]))
}

/// [`greedy_match`] over an arbitrary affinity; pairs with affinity below
/// `threshold` never match.
pub fn greedy_match_by(
    scores: &[f64],
    num_gt: usize,
    threshold: f64,
    affinity: impl Fn(usize, usize) -> f64,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut taken = vec![false; num_gt];
    let mut result = vec![None; scores.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, used) in taken.iter().enumerate() {
            if *used {
                continue;
            }
            let a = affinity(p, g);
            if a >= threshold && best.is_none_or(|(_, b)| a > b) {
                best = Some((g, a));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            result[p] = Some(g);
        }
    }
    result
}
