//! Inference: detection, part parsing and action fusion per video.

use dap_core::dataset::{argmax, Frame, Part, Person};
use dap_core::sampling::sample_positions;
use dap_core::synth::{render_video, Image};
use dap_core::{PredictionRecord, VideoAnnotation};
use dap_models::action_parser::{
    analyze_frames, assemble_nonvideo_features, ensemble, extract_nonvideo_features, FrameAnalysis, FusionBatch, FusionModel, NonVideoFeatures,
    VideoBackboneFeatures, VideoFeatureProvider,
};
use dap_models::detector::PersonDetector;
use dap_models::part_parser::PartParser;
use sha2::{Digest, Sha256};

use crate::cache::FeatureCache;
use crate::config::{EnsembleMember, PipelineConfig, VideoProviderKind};
use crate::data::video_seed;
use crate::error::Result;
use crate::stages::{device, load_detector, load_fusion, load_part_parser, video_provider, Loaded, DTYPE};

const ANALYSIS_BATCH: usize = 8;

/// Frozen detector and parser plus the optional video provider.
pub struct Upstream {
    pub detector: Loaded<PersonDetector>,
    pub parser: Loaded<PartParser>,
    pub provider: Option<Box<dyn VideoFeatureProvider>>,
    /// Identifies the upstream weights in feature-cache keys.
    pub checksum: String,
}

impl Upstream {
    pub fn load(cfg: &PipelineConfig, allow_mismatch: bool) -> Result<Self> {
        let detector = load_detector(cfg, allow_mismatch)?;
        let parser = load_part_parser(cfg, allow_mismatch)?;
        let checksum = hex::encode(Sha256::digest(
            format!("{}{}", detector.checkpoint.checksum(), parser.checkpoint.checksum()).as_bytes(),
        ));
        Ok(Upstream {
            detector,
            parser,
            provider: video_provider(cfg),
            checksum,
        })
    }

    pub fn analyze(&self, images: &[&Image]) -> Result<Vec<FrameAnalysis>> {
        Ok(analyze_frames(
            images,
            &self.detector.model,
            &self.parser.model,
            ANALYSIS_BATCH,
            DTYPE,
            &device(),
        )?)
    }

    fn video_features(&self, video: &VideoAnnotation, images: &[Image]) -> Result<VideoBackboneFeatures> {
        Ok(match &self.provider {
            Some(p) => {
                let f = p.features(&video.video_id, images)?;
                f.validate()?;
                f
            }
            None => VideoBackboneFeatures::default(),
        })
    }

    /// Fusion inputs of a video from the frames at its sampled positions.
    /// `analyses` may hold every frame's analysis already; otherwise only
    /// the sampled frames are analyzed.
    pub fn fusion_inputs(
        &self,
        cfg: &PipelineConfig,
        video: &VideoAnnotation,
        images: &[Image],
        analyses: Option<&[FrameAnalysis]>,
    ) -> Result<(NonVideoFeatures, VideoBackboneFeatures)> {
        let fc = &cfg.action_parser.model;
        let seed = video_seed(cfg.seed, &video.video_id);
        let nvf = match analyses {
            Some(all) => {
                let positions = sample_positions(images.len(), fc.num_frames, seed)?;
                assemble_nonvideo_features(all, &positions, fc.max_persons)?
            }
            None => extract_nonvideo_features(
                images,
                &self.detector.model,
                &self.parser.model,
                fc.num_frames,
                fc.max_persons,
                seed,
                DTYPE,
                &device(),
            )?,
        };
        Ok((nvf, self.video_features(video, images)?))
    }

    /// As [`Self::fusion_inputs`], reading and filling the feature cache.
    pub fn cached_fusion_inputs(
        &self,
        cfg: &PipelineConfig,
        cache: &FeatureCache,
        video: &VideoAnnotation,
    ) -> Result<(NonVideoFeatures, VideoBackboneFeatures)> {
        let fc = &cfg.action_parser.model;
        let provider = match cfg.action_parser.video_provider {
            VideoProviderKind::None => "none".to_string(),
            VideoProviderKind::Stub => format!("stub{}", cfg.seed),
        };
        let key = FeatureCache::key(
            &video.video_id,
            &self.checksum,
            fc.num_frames,
            fc.max_persons,
            video_seed(cfg.seed, &video.video_id),
            &provider,
        );
        if let Some(hit) = cache.get(&key) {
            return Ok(hit);
        }
        let images = render_video(video);
        let out = self.fusion_inputs(cfg, video, &images, None)?;
        cache.put(&key, &out.0, &out.1)?;
        Ok(out)
    }
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn mean_distribution(rows: &[Vec<f64>], classes: usize) -> Vec<f64> {
    if rows.is_empty() {
        return vec![1.0 / classes as f64; classes];
    }
    let mut out = vec![0.0; classes];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v / rows.len() as f64;
        }
    }
    out
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// The three trained stages, ready for prediction.
pub struct Predictor {
    pub upstream: Upstream,
    pub fusion: Loaded<FusionModel>,
}

impl Predictor {
    pub fn load(cfg: &PipelineConfig, allow_mismatch: bool) -> Result<Self> {
        let upstream = Upstream::load(cfg, allow_mismatch)?;
        let fusion = load_fusion(cfg, allow_mismatch)?;
        Ok(Predictor { upstream, fusion })
    }

    pub fn predict_video(&self, cfg: &PipelineConfig, video: &VideoAnnotation) -> Result<PredictionRecord> {
        let images = render_video(video);
        let refs: Vec<&Image> = images.iter().collect();
        let analyses = self.upstream.analyze(&refs)?;
        let c = cfg.action_parser.model.num_actions;

        let mut frames = Vec::with_capacity(video.frames.len());
        let mut frame_dists = Vec::new();
        let mut instance_dists = Vec::new();
        for (frame, fa) in video.frames.iter().zip(&analyses) {
            frame_dists.push(softmax(&fa.detections.frame.logits));
            let mut persons = Vec::with_capacity(fa.persons.len());
            for ((det, inst), pa) in fa.detections.boxes.iter().zip(&fa.detections.instances).zip(&fa.persons) {
                let dist = softmax(&inst.logits);
                instance_dists.push(dist.clone());
                let parts = pa
                    .parts
                    .iter()
                    .filter_map(|p| {
                        let bbox = p.bbox.clip_to(&det.bbox);
                        bbox.is_valid().then(|| Part {
                            part_id: p.part_id,
                            bbox,
                            state_id: p.state_id,
                            score: Some(p.confidence.clamp(0.0, 1.0)),
                        })
                    })
                    .collect();
                persons.push(Person {
                    bbox: det.bbox,
                    score: Some(det.score.clamp(0.0, 1.0)),
                    action_scores: Some(normalized(dist)),
                    parts,
                });
            }
            frames.push(Frame {
                index: frame.index,
                persons,
            });
        }

        let mut members = Vec::new();
        for m in &cfg.action_parser.ensemble {
            members.push(match m {
                EnsembleMember::Fusion => {
                    let (nvf, vbf) = self.upstream.fusion_inputs(cfg, video, &images, Some(&analyses))?;
                    let batch = FusionBatch::new(&[(&nvf, &vbf)], &cfg.action_parser.model, DTYPE, &device())?;
                    self.fusion.model.predict(&batch)?.remove(0)
                }
                EnsembleMember::FrameHead => mean_distribution(&frame_dists, c),
                EnsembleMember::InstanceHead => mean_distribution(&instance_dists, c),
            });
        }
        let weights = &cfg.action_parser.ensemble_weights;
        let scores = normalized(ensemble(&members, (!weights.is_empty()).then_some(weights.as_slice()))?);
        Ok(PredictionRecord {
            video_id: video.video_id.clone(),
            action_id: argmax(&scores),
            width: video.width,
            height: video.height,
            frames,
            action_scores: Some(scores),
        })
    }

    pub fn predict(&self, cfg: &PipelineConfig, videos: &[VideoAnnotation]) -> Result<Vec<PredictionRecord>> {
        videos.iter().map(|v| self.predict_video(cfg, v)).collect()
    }
}

/// Averages the action scores of several prediction sets over shared
/// videos; every set must cover the videos of the first.
pub fn ensemble_records(sets: &[Vec<PredictionRecord>], weights: Option<&[f64]>) -> Result<Vec<PredictionRecord>> {
    let Some(first) = sets.first() else {
        return Ok(Vec::new());
    };
    let index: Vec<std::collections::HashMap<&str, &PredictionRecord>> = sets
        .iter()
        .map(|s| s.iter().map(|r| (r.video_id.as_str(), r)).collect())
        .collect();
    let mut out = Vec::with_capacity(first.len());
    for rec in first {
        let mut members = Vec::with_capacity(sets.len());
        for idx in &index {
            let other = idx.get(rec.video_id.as_str()).ok_or_else(|| {
                crate::error::RuntimeError::Alignment(format!("video {:?} missing from an ensemble member", rec.video_id))
            })?;
            let scores = other.action_scores.clone().ok_or_else(|| {
                crate::error::RuntimeError::Alignment(format!("video {:?} lacks action scores", rec.video_id))
            })?;
            members.push(scores);
        }
        let scores = normalized(ensemble(&members, weights)?);
        let mut r = rec.clone();
        r.action_id = argmax(&scores);
        r.action_scores = Some(scores);
        out.push(r);
    }
    Ok(out)
}
