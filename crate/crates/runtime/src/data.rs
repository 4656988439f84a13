//! Dataset loading, held-out splits and per-epoch frame sampling.

use dap_core::sampling::{sample_positions, split_minival, split_minival_stratified};
use dap_core::{load_dataset, load_dataset_with_config, DatasetConfig, VideoAnnotation};

use crate::config::PipelineConfig;
use crate::error::Result;

pub struct Splits {
    pub dataset: DatasetConfig,
    pub train: Vec<VideoAnnotation>,
    pub eval: Vec<VideoAnnotation>,
}

/// Training and held-out videos: the configured eval file when given,
/// otherwise a minival split of the training file.
pub fn load_splits(cfg: &PipelineConfig) -> Result<Splits> {
    let (dataset, videos) = load_dataset_with_config(&cfg.data.train)?;
    if !cfg.data.eval.as_os_str().is_empty() {
        let eval = load_dataset(&cfg.data.eval, &dataset)?;
        return Ok(Splits {
            dataset,
            train: videos,
            eval,
        });
    }
    let (train, eval) = if cfg.data.stratified {
        split_minival_stratified(&videos, cfg.data.minival_fraction, cfg.seed)?
    } else {
        split_minival(&videos, cfg.data.minival_fraction, cfg.seed)?
    };
    Ok(Splits { dataset, train, eval })
}

/// `(video, frame position)` pairs for one epoch: every frame when
/// `per_video` is 0, otherwise up to `per_video` distinct frames per video.
pub fn epoch_frames(videos: &[VideoAnnotation], per_video: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (v, video) in videos.iter().enumerate() {
        let n = video.frames.len();
        if per_video == 0 || per_video >= n {
            out.extend((0..n).map(|f| (v, f)));
        } else {
            let s = seed ^ (v as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            out.extend(sample_positions(n, per_video, s)?.into_iter().map(|f| (v, f)));
        }
    }
    Ok(out)
}

/// Seed for per-video sampling, stable across runs and processes.
pub fn video_seed(seed: u64, video_id: &str) -> u64 {
    let h = video_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    seed ^ h
}
