use std::collections::BTreeMap;

use super::{greedy_match, greedy_match_by, index_by_id, MatchConfig, SubstitutionFlags};
use crate::dataset::{Frame, Part, Person, VideoAnnotation};
use crate::geometry::iou;

/// Replaces the prediction of each flagged stage with ground truth.
///
/// Person and part matches are computed once on the unmodified predictions
/// and reused by every flag:
///
/// * `actor_detection`: the persons of each frame become the ground-truth
///   boxes with score 1; matched predictions keep their parts, unmatched
///   predictions are dropped and unmatched ground-truth persons are added
///   without parts.
/// * `part_det`: inside matched persons, every ground-truth part takes the
///   box of its kind; the predicted part of that kind that matched it (or
///   else the best-scoring one) keeps its state and score, and a missing kind
///   is added in `cfg.fallback_state`. Parts of kinds absent from the ground
///   truth are dropped.
/// * `state_parsing`: inside matched persons, every part whose kind is
///   annotated takes the annotated state.
/// * `action_parsing`: the action scores become the ground-truth one-hot.
///
/// Predictions without a ground-truth counterpart are returned unchanged.
pub fn substitute_ground_truth(
    predictions: &[VideoAnnotation],
    ground_truth: &[VideoAnnotation],
    flags: SubstitutionFlags,
    cfg: &MatchConfig,
) -> Vec<VideoAnnotation> {
    let gt = index_by_id(ground_truth);
    predictions
        .iter()
        .map(|p| match gt.get(p.video_id.as_str()) {
            Some(g) => substitute_video(p, g, flags, cfg),
            None => p.clone(),
        })
        .collect()
}

fn substitute_video(
    pred: &VideoAnnotation,
    gt: &VideoAnnotation,
    flags: SubstitutionFlags,
    cfg: &MatchConfig,
) -> VideoAnnotation {
    let mut out = pred.clone();
    if flags.action_parsing {
        out.action_id = gt.action_id;
        if let Some(scores) = &mut out.action_scores {
            if gt.action_id < scores.len() {
                scores.iter_mut().for_each(|s| *s = 0.0);
                scores[gt.action_id] = 1.0;
            }
        }
    }
    if !(flags.actor_detection || flags.part_det || flags.state_parsing) {
        return out;
    }
    let mut frames: BTreeMap<usize, Frame> = BTreeMap::new();
    for pf in &pred.frames {
        let frame = match gt.frame(pf.index) {
            Some(gf) => substitute_frame(pf, gf, flags, cfg),
            None => pf.clone(),
        };
        frames.insert(pf.index, frame);
    }
    if flags.actor_detection {
        for gf in &gt.frames {
            frames.entry(gf.index).or_insert_with(|| {
                let empty = Frame {
                    index: gf.index,
                    persons: Vec::new(),
                };
                substitute_frame(&empty, gf, flags, cfg)
            });
        }
    }
    out.frames = frames.into_values().collect();
    out
}

fn substitute_frame(pf: &Frame, gf: &Frame, flags: SubstitutionFlags, cfg: &MatchConfig) -> Frame {
    let boxes: Vec<_> = pf.persons.iter().map(|p| (p.bbox, p.confidence())).collect();
    let gt_boxes: Vec<_> = gf.persons.iter().map(|p| p.bbox).collect();
    let matches = greedy_match(&boxes, &gt_boxes, cfg.iou_threshold);

    // (person, index of its ground-truth partner)
    let mut persons: Vec<(Person, Option<usize>)> = if flags.actor_detection {
        let mut owner = vec![None; gf.persons.len()];
        for (pi, gi) in matches.iter().enumerate() {
            if let Some(gi) = gi {
                owner[*gi] = Some(pi);
            }
        }
        gf.persons
            .iter()
            .enumerate()
            .map(|(gi, g)| {
                let mut person = match owner[gi] {
                    Some(pi) => pf.persons[pi].clone(),
                    None => Person::new(g.bbox),
                };
                person.bbox = g.bbox;
                person.score = Some(1.0);
                (person, Some(gi))
            })
            .collect()
    } else {
        pf.persons.iter().cloned().zip(matches).collect()
    };

    for (person, partner) in &mut persons {
        let Some(gi) = partner else { continue };
        let gp = &gf.persons[*gi];
        if flags.part_det {
            person.parts = substitute_parts(&person.parts, &gp.parts, cfg);
        }
        if flags.state_parsing {
            for part in &mut person.parts {
                if let Some(g) = gp.parts.iter().find(|g| g.part_id == part.part_id) {
                    part.state_id = g.state_id;
                }
            }
        }
    }
    Frame {
        index: pf.index,
        persons: persons.into_iter().map(|(p, _)| p).collect(),
    }
}

fn substitute_parts(pred: &[Part], gt: &[Part], cfg: &MatchConfig) -> Vec<Part> {
    let scores: Vec<f64> = pred.iter().map(|p| p.score.unwrap_or(1.0)).collect();
    let matches = greedy_match_by(&scores, gt.len(), cfg.iou_threshold, |a, b| {
        if pred[a].part_id == gt[b].part_id {
            iou(&pred[a].bbox, &gt[b].bbox)
        } else {
            f64::NEG_INFINITY
        }
    });
    gt.iter()
        .enumerate()
        .map(|(gi, g)| {
            let matched = matches.iter().position(|m| *m == Some(gi));
            let fallback = || {
                pred.iter()
                    .enumerate()
                    .filter(|(_, p)| p.part_id == g.part_id)
                    .max_by(|a, b| scores[a.0].total_cmp(&scores[b.0]).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
            };
            match matched.or_else(fallback) {
                Some(pi) => Part {
                    bbox: g.bbox,
                    ..pred[pi].clone()
                },
                None => Part {
                    part_id: g.part_id,
                    bbox: g.bbox,
                    state_id: cfg.fallback_state,
                    score: Some(1.0),
                },
            }
        })
        .collect()
}
