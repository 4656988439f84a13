#![allow(dead_code)]

use dap_core::{BBox, Frame, Part, Person, VideoAnnotation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NUM_ACTIONS: usize = 3;
pub const NUM_PARTS: usize = 3;
pub const NUM_STATES: usize = 3;

/// Coordinates on a coarse grid so exact IoU ties and threshold hits occur.
fn grid_box(rng: &mut impl Rng) -> BBox {
    let x1 = rng.random_range(0..8) as f64;
    let y1 = rng.random_range(0..8) as f64;
    let w = rng.random_range(1..5) as f64;
    let h = rng.random_range(1..5) as f64;
    BBox::new(x1, y1, x1 + w, y1 + h)
}

fn nudge(b: &BBox, rng: &mut impl Rng) -> BBox {
    let d = |rng: &mut ChaCha8Rng| [-1.0, 0.0, 0.0, 0.0, 1.0][rng.random_range(0..5)];
    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
    let n = BBox::new(b.x1 + d(&mut r), b.y1 + d(&mut r), b.x2 + d(&mut r), b.y2 + d(&mut r));
    if n.is_valid() {
        n
    } else {
        *b
    }
}

fn score(rng: &mut impl Rng) -> f64 {
    [0.25, 0.5, 0.5, 0.75, 1.0][rng.random_range(0..5)]
}

/// Up to 5 videos, 3 frames, 3 persons and 3 parts (distinct kinds) each.
pub fn ground_truth(seed: u64) -> Vec<VideoAnnotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=5);
    (0..n)
        .map(|v| {
            let frames = (0..rng.random_range(1..=3))
                .map(|f| Frame {
                    index: f * 2,
                    persons: (0..rng.random_range(0..=3))
                        .map(|_| {
                            let mut kinds: Vec<usize> = (0..NUM_PARTS).collect();
                            kinds.truncate(rng.random_range(0..=NUM_PARTS));
                            Person {
                                bbox: grid_box(&mut rng),
                                score: None,
                                action_scores: None,
                                parts: kinds
                                    .into_iter()
                                    .map(|k| Part {
                                        part_id: k,
                                        bbox: grid_box(&mut rng),
                                        state_id: rng.random_range(0..NUM_STATES),
                                        score: None,
                                    })
                                    .collect(),
                            }
                        })
                        .collect(),
                })
                .collect();
            VideoAnnotation {
                video_id: format!("v{v}"),
                action_id: rng.random_range(0..NUM_ACTIONS),
                width: 16,
                height: 16,
                frames,
                action_scores: None,
            }
        })
        .collect()
}

/// Noisy predictions for `gt`: copied or nudged persons and parts, spurious
/// boxes, dropped frames, random states and tied scores.
pub fn predictions(gt: &[VideoAnnotation], seed: u64) -> Vec<VideoAnnotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gt.iter()
        .map(|g| {
            let mut frames = Vec::new();
            for gf in &g.frames {
                if rng.random_bool(0.15) {
                    continue;
                }
                let mut persons = Vec::new();
                for gp in &gf.persons {
                    if rng.random_bool(0.2) {
                        continue;
                    }
                    let bbox = if rng.random_bool(0.5) { gp.bbox } else { nudge(&gp.bbox, &mut rng) };
                    let mut parts: Vec<Part> = Vec::new();
                    for p in &gp.parts {
                        if !rng.random_bool(0.85) {
                            continue;
                        }
                        let bbox = if rng.random_bool(0.5) { p.bbox } else { nudge(&p.bbox, &mut rng) };
                        let state_id = if rng.random_bool(0.6) { p.state_id } else { rng.random_range(0..NUM_STATES) };
                        parts.push(Part {
                            part_id: p.part_id,
                            bbox,
                            state_id,
                            score: Some(score(&mut rng)),
                        });
                    }
                    if rng.random_bool(0.3) {
                        parts.push(Part {
                            part_id: rng.random_range(0..NUM_PARTS),
                            bbox: grid_box(&mut rng),
                            state_id: rng.random_range(0..NUM_STATES),
                            score: Some(score(&mut rng)),
                        });
                    }
                    persons.push(Person {
                        bbox,
                        score: Some(score(&mut rng)),
                        action_scores: None,
                        parts,
                    });
                }
                if rng.random_bool(0.3) {
                    persons.push(Person {
                        bbox: grid_box(&mut rng),
                        score: Some(score(&mut rng)),
                        action_scores: None,
                        parts: vec![],
                    });
                }
                frames.push(Frame {
                    index: gf.index,
                    persons,
                });
            }
            let mut scores: Vec<f64> = (0..NUM_ACTIONS).map(|_| score(&mut rng)).collect();
            if rng.random_bool(0.5) {
                scores[g.action_id] += 1.0;
            }
            let total: f64 = scores.iter().sum();
            scores.iter_mut().for_each(|s| *s /= total);
            VideoAnnotation {
                video_id: g.video_id.clone(),
                action_id: 0,
                width: g.width,
                height: g.height,
                frames,
                action_scores: Some(scores),
            }
        })
        .collect()
}
