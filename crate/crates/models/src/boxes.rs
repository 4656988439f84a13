//! Anchor generation, box coding, assignment and suppression.

use dap_core::geometry::{iou, BBox};

const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

/// Anchors for an `h x w` feature grid, ordered by row, column, then anchor size.
pub fn grid_anchors(h: usize, w: usize, stride: usize, sizes: &[[f64; 2]]) -> Vec<BBox> {
    let mut out = Vec::with_capacity(h * w * sizes.len());
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for s in sizes {
                out.push(BBox::from_center(cx, cy, s[0], s[1]));
            }
        }
    }
    out
}

/// Regression target of `gt` relative to `anchor`, divided by `std`.
pub fn encode(anchor: &BBox, gt: &BBox, std: &[f64; 4]) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.width() / std[0],
        (gy - ay) / anchor.height() / std[1],
        (gt.width() / anchor.width()).ln() / std[2],
        (gt.height() / anchor.height()).ln() / std[3],
    ]
}

pub fn decode(anchor: &BBox, deltas: &[f64; 4], std: &[f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let cx = ax + deltas[0] * std[0] * anchor.width();
    let cy = ay + deltas[1] * std[1] * anchor.height();
    let w = anchor.width() * (deltas[2] * std[2]).min(MAX_LOG_SCALE).exp();
    let h = anchor.height() * (deltas[3] * std[3]).min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU at or above `positive_iou` is positive, below `negative_iou` negative,
/// anything in between ignored. Each ground-truth box additionally claims its
/// best-overlapping anchors so that no object goes unassigned.
pub fn assign_anchors(anchors: &[BBox], gt: &[BBox], positive_iou: f64, negative_iou: f64) -> Vec<AnchorLabel> {
    if gt.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let overlaps: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| iou(a, g)).collect())
        .collect();
    let mut labels: Vec<AnchorLabel> = overlaps
        .iter()
        .map(|row| {
            let (best, o) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &o)| if o > acc.1 { (i, o) } else { acc });
            if o >= positive_iou {
                AnchorLabel::Positive(best)
            } else if o < negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for g in 0..gt.len() {
        let best = overlaps.iter().map(|row| row[g]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (a, row) in overlaps.iter().enumerate() {
            if row[g] == best {
                labels[a] = AnchorLabel::Positive(g);
            }
        }
    }
    labels
}

/// Greedy non-maximum suppression; returns kept indices in descending score
/// order. A box is suppressed when its IoU with a kept box exceeds
/// `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coding_round_trip() {
        let std = [0.1, 0.1, 0.2, 0.2];
        let a = BBox::new(10.0, 12.0, 30.0, 50.0);
        let g = BBox::new(13.0, 9.5, 29.0, 55.0);
        let back = decode(&a, &encode(&a, &g, &std), &std);
        for (x, y) in [(back.x1, g.x1), (back.y1, g.y1), (back.x2, g.x2), (back.y2, g.y2)] {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_boxes_leave_one_survivor() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0);
        assert_eq!(nms(&[b, b], &[0.7, 0.9], 0.5), vec![1]);
    }

    #[test]
    fn assignment_thresholds() {
        let gt = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let anchors = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(0.0, 0.0, 10.0, 22.0),  // iou 0.4545
            BBox::new(50.0, 50.0, 60.0, 60.0),
        ];
        let labels = assign_anchors(&anchors, &gt, 0.5, 0.4);
        assert_eq!(labels, vec![AnchorLabel::Positive(0), AnchorLabel::Ignore, AnchorLabel::Negative]);
    }

    #[test]
    fn every_gt_gets_its_best_anchor() {
        let gt = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let anchors = [BBox::new(0.0, 0.0, 10.0, 30.0), BBox::new(40.0, 0.0, 50.0, 10.0)];
        let labels = assign_anchors(&anchors, &gt, 0.5, 0.4);
        assert_eq!(labels[0], AnchorLabel::Positive(0));
        assert_eq!(labels[1], AnchorLabel::Negative);
    }
}
