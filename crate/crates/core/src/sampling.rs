//! Minival splitting and temporal frame sampling.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::VideoAnnotation;
use crate::error::{DataError, Result};

/// Splits `dataset` into `(train, val)` with `round(fraction * n)` validation
/// videos picked uniformly at random. Input order is preserved within each side.
pub fn split_minival(
    dataset: &[VideoAnnotation],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<VideoAnnotation>, Vec<VideoAnnotation>)> {
    check_fraction(fraction)?;
    let n = dataset.len();
    let n_val = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; n];
    for i in index::sample(&mut rng, n, n_val) {
        is_val[i] = true;
    }
    Ok(partition(dataset, &is_val))
}

/// Class-stratified variant: per-class quotas are allotted by largest
/// remainder so the validation total is still `round(fraction * n)`.
pub fn split_minival_stratified(
    dataset: &[VideoAnnotation],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<VideoAnnotation>, Vec<VideoAnnotation>)> {
    check_fraction(fraction)?;
    let n = dataset.len();
    let n_val = (fraction * n as f64).round() as usize;
    let num_classes = dataset.iter().map(|v| v.action_id + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, v) in dataset.iter().enumerate() {
        members[v.action_id].push(i);
    }
    let exact: Vec<f64> = members.iter().map(|m| fraction * m.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = n_val.saturating_sub(quota.iter().sum());
    for c in order.into_iter().cycle().take(num_classes * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < members[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; n];
    for (c, m) in members.iter().enumerate() {
        for j in index::sample(&mut rng, m.len(), quota[c]) {
            is_val[m[j]] = true;
        }
    }
    Ok(partition(dataset, &is_val))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(DataError::Argument(format!(
            "minival fraction must lie in (0, 1), got {fraction}"
        )))
    }
}

fn partition(
    dataset: &[VideoAnnotation],
    is_val: &[bool],
) -> (Vec<VideoAnnotation>, Vec<VideoAnnotation>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (v, &flag) in dataset.iter().zip(is_val) {
        if flag {
            val.push(v.clone());
        } else {
            train.push(v.clone());
        }
    }
    (train, val)
}

/// Draws `t` positions into `video.frames`, sorted ascending.
///
/// Sampling is without replacement when the video has at least `t` frames and
/// with replacement otherwise, so the result always has exactly `t` entries.
pub fn sample_frames(video: &VideoAnnotation, t: usize, seed: u64) -> Result<Vec<usize>> {
    sample_positions(video.frames.len(), t, seed)
}

pub fn sample_positions(num_frames: usize, t: usize, seed: u64) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(DataError::Argument("T must be at least 1".into()));
    }
    if num_frames == 0 {
        return Err(DataError::Argument("cannot sample from an empty video".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if num_frames >= t {
        index::sample(&mut rng, num_frames, t).into_vec()
    } else {
        (0..t).map(|_| rng.random_range(0..num_frames)).collect()
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Deterministic shuffle used by the trainers.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}
