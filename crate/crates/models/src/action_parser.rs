//! Video-level action recognition from pooled per-frame and per-person
//! features, optionally concatenated with video-backbone embeddings.

use std::fmt;

use candle_core::{DType, Device, Tensor, D};
use dap_core::sampling::sample_positions;
use dap_core::synth::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{select_top_boxes, FrameDetections, PersonDetector, FRAME_FEATURE_DIM, INSTANCE_FEATURE_DIM};
use crate::error::{ModelError, Result};
use crate::heatmap::CropGeometry;
use crate::nn::{global_avg_pool, softmax, Dense};
use crate::params::Scope;
use crate::part_parser::{ParsedPart, PartParser, STATE_FEATURE_DIM, VISUAL_DIM};

pub const VIDEO_TEMPORAL_DIM: usize = 768;
pub const VIDEO_SPATIAL_DIM: usize = 1024;
const PAD_FILL: f64 = -1e30;

/// Spatial mean of `(N, 48, h, w)` part features.
pub fn pool_part_features(f_pa: &Tensor) -> Result<Tensor> {
    global_avg_pool(f_pa)
}

/// Per-frame and per-person features of `T` sampled frames with `P` person
/// slots each. Padded slots hold zeros and have `mask` false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonVideoFeatures {
    pub num_frames: usize,
    pub max_persons: usize,
    /// `(T, 2048)`.
    pub frame: Vec<f32>,
    /// `(T, P, 256)`.
    pub instance: Vec<f32>,
    /// `(T, P, 48)`.
    pub part: Vec<f32>,
    /// `(T, P, 192)`.
    pub state: Vec<f32>,
    /// `(T, P)`.
    pub mask: Vec<bool>,
}

/// Slot contents for one person.
pub struct PersonFeatures<'a> {
    pub instance: &'a [f32],
    pub part: &'a [f32],
    pub state: &'a [f32],
}

impl NonVideoFeatures {
    pub fn padded(num_frames: usize, max_persons: usize) -> Self {
        let slots = num_frames * max_persons;
        NonVideoFeatures {
            num_frames,
            max_persons,
            frame: vec![0.0; num_frames * FRAME_FEATURE_DIM],
            instance: vec![0.0; slots * INSTANCE_FEATURE_DIM],
            part: vec![0.0; slots * VISUAL_DIM],
            state: vec![0.0; slots * STATE_FEATURE_DIM],
            mask: vec![false; slots],
        }
    }

    pub fn set_frame(&mut self, t: usize, feature: &[f32]) -> Result<()> {
        check_len("frame feature", feature.len(), FRAME_FEATURE_DIM)?;
        self.frame[t * FRAME_FEATURE_DIM..(t + 1) * FRAME_FEATURE_DIM].copy_from_slice(feature);
        Ok(())
    }

    pub fn set_person(&mut self, t: usize, slot: usize, person: &PersonFeatures<'_>) -> Result<()> {
        if slot >= self.max_persons || t >= self.num_frames {
            return Err(ModelError::Shape(format!("slot ({t}, {slot}) out of range")));
        }
        check_len("instance feature", person.instance.len(), INSTANCE_FEATURE_DIM)?;
        check_len("part feature", person.part.len(), VISUAL_DIM)?;
        check_len("state feature", person.state.len(), STATE_FEATURE_DIM)?;
        let i = t * self.max_persons + slot;
        self.instance[i * INSTANCE_FEATURE_DIM..(i + 1) * INSTANCE_FEATURE_DIM].copy_from_slice(person.instance);
        self.part[i * VISUAL_DIM..(i + 1) * VISUAL_DIM].copy_from_slice(person.part);
        self.state[i * STATE_FEATURE_DIM..(i + 1) * STATE_FEATURE_DIM].copy_from_slice(person.state);
        self.mask[i] = true;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let slots = self.num_frames * self.max_persons;
        check_len("frame block", self.frame.len(), self.num_frames * FRAME_FEATURE_DIM)?;
        check_len("instance block", self.instance.len(), slots * INSTANCE_FEATURE_DIM)?;
        check_len("part block", self.part.len(), slots * VISUAL_DIM)?;
        check_len("state block", self.state.len(), slots * STATE_FEATURE_DIM)?;
        check_len("mask", self.mask.len(), slots)
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(ModelError::Shape(format!("{what} has {got} values, expected {want}")))
    }
}

/// Embeddings from external video models; absent when no provider is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoBackboneFeatures {
    /// 768-d.
    pub temporal: Option<Vec<f32>>,
    /// 1024-d.
    pub spatial: Option<Vec<f32>>,
}

impl VideoBackboneFeatures {
    pub fn validate(&self) -> Result<()> {
        for (v, dim, name) in [
            (&self.temporal, VIDEO_TEMPORAL_DIM, "temporal"),
            (&self.spatial, VIDEO_SPATIAL_DIM, "spatial"),
        ] {
            if let Some(v) = v {
                if v.len() != dim {
                    return Err(ModelError::Config(format!(
                        "{name} video feature must have {dim} dimensions, got {}",
                        v.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub trait VideoFeatureProvider: Send + Sync {
    fn features(&self, video_id: &str, frames: &[Image]) -> Result<VideoBackboneFeatures>;
}

/// Frozen, seeded stand-in for the external video models: a small 3-D
/// convolution over a downsampled clip, pooled and projected to 768 and 1024
/// dimensions through fixed random matrices.
pub struct StubVideoProvider {
    filters: usize,
    kernels: Vec<f32>,
    temporal: Vec<f32>,
    spatial: Vec<f32>,
}

const STUB_SIZE: usize = 16;
const STUB_CLIP: usize = 8;

impl StubVideoProvider {
    pub fn new(seed: u64) -> Self {
        let filters = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, scale: f32| -> Vec<f32> { (0..n).map(|_| scale * rng.random_range(-1.0f32..1.0)).collect() };
        let kernels = uniform(filters * 3 * 27, (3.0 / 81.0f32).sqrt());
        let temporal = uniform(VIDEO_TEMPORAL_DIM * filters, (3.0 / filters as f32).sqrt());
        let spatial = uniform(VIDEO_SPATIAL_DIM * filters, (3.0 / filters as f32).sqrt());
        StubVideoProvider {
            filters,
            kernels,
            temporal,
            spatial,
        }
    }

    /// `(clip, 3, 16, 16)` area-averaged clip of evenly spaced frames.
    fn clip(frames: &[Image]) -> Vec<f32> {
        let s = STUB_SIZE;
        let mut out = vec![0f32; STUB_CLIP * 3 * s * s];
        for t in 0..STUB_CLIP {
            let img = &frames[t * frames.len() / STUB_CLIP];
            let mut counts = vec![0f32; s * s];
            for y in 0..img.height {
                for x in 0..img.width {
                    let (cy, cx) = (y * s / img.height, x * s / img.width);
                    let px = img.pixel(x, y);
                    counts[cy * s + cx] += 1.0;
                    for c in 0..3 {
                        out[((t * 3 + c) * s + cy) * s + cx] += px[c];
                    }
                }
            }
            for c in 0..3 {
                for i in 0..s * s {
                    out[(t * 3 + c) * s * s + i] /= counts[i].max(1.0);
                }
            }
        }
        out
    }
}

impl VideoFeatureProvider for StubVideoProvider {
    fn features(&self, _video_id: &str, frames: &[Image]) -> Result<VideoBackboneFeatures> {
        if frames.is_empty() {
            return Err(ModelError::Shape("video has no frames".into()));
        }
        let s = STUB_SIZE;
        let clip = Self::clip(frames);
        let (to, so) = (STUB_CLIP - 2, s - 2);
        let mut pooled = vec![0f32; self.filters];
        for f in 0..self.filters {
            let k = &self.kernels[f * 81..(f + 1) * 81];
            let mut acc = 0f32;
            for t in 0..to {
                for y in 0..so {
                    for x in 0..so {
                        let mut v = 0f32;
                        for c in 0..3 {
                            for dt in 0..3 {
                                for dy in 0..3 {
                                    for dx in 0..3 {
                                        v += k[((c * 3 + dt) * 3 + dy) * 3 + dx]
                                            * clip[(((t + dt) * 3 + c) * s + y + dy) * s + x + dx];
                                    }
                                }
                            }
                        }
                        acc += v.max(0.0);
                    }
                }
            }
            pooled[f] = acc / (to * so * so) as f32;
        }
        let project = |m: &[f32], dim: usize| -> Vec<f32> {
            (0..dim)
                .map(|o| {
                    let row = &m[o * self.filters..(o + 1) * self.filters];
                    row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f32>().tanh()
                })
                .collect()
        };
        Ok(VideoBackboneFeatures {
            temporal: Some(project(&self.temporal, VIDEO_TEMPORAL_DIM)),
            spatial: Some(project(&self.spatial, VIDEO_SPATIAL_DIM)),
        })
    }
}

/// One detected person with its parsed parts and features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonAnalysis {
    pub part_feature: Vec<f32>,
    pub state_feature: Vec<f32>,
    pub parts: Vec<ParsedPart>,
}

/// Detector and parser output for one frame; `persons` is parallel to
/// `detections.boxes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnalysis {
    pub detections: FrameDetections,
    pub persons: Vec<PersonAnalysis>,
}

/// Runs detection and part parsing on every image, in batches of `batch`.
pub fn analyze_frames(
    images: &[&Image],
    detector: &PersonDetector,
    parser: &PartParser,
    batch: usize,
    dtype: DType,
    device: &Device,
) -> Result<Vec<FrameAnalysis>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let tensor = detector.prepare_images(chunk, dtype, device)?;
        let dets = detector.detect(&tensor)?;
        let mut crops: Vec<(&Image, CropGeometry)> = Vec::new();
        for (img, d) in chunk.iter().zip(&dets) {
            crops.extend(d.boxes.iter().map(|b| (*img, parser.crop_for(&b.bbox))));
        }
        let mut persons: Vec<PersonAnalysis> = Vec::with_capacity(crops.len());
        for group in crops.chunks(64) {
            let t = parser.prepare_crops(group, dtype, device)?;
            let fwd = parser.forward(&t)?;
            let geoms: Vec<CropGeometry> = group.iter().map(|c| c.1).collect();
            let parsed = parser.parse(&fwd, &geoms)?;
            let part_f: Vec<Vec<f32>> = pool_part_features(&fwd.part_features)?.to_dtype(DType::F32)?.to_vec2()?;
            let state_f: Vec<Vec<f32>> = fwd.state_features.to_dtype(DType::F32)?.to_vec2()?;
            for ((parts, pf), sf) in parsed.into_iter().zip(part_f).zip(state_f) {
                persons.push(PersonAnalysis {
                    part_feature: pf,
                    state_feature: sf,
                    parts,
                });
            }
        }
        let mut persons = persons.into_iter();
        for d in dets {
            let p = persons.by_ref().take(d.boxes.len()).collect();
            out.push(FrameAnalysis { detections: d, persons: p });
        }
    }
    Ok(out)
}

/// Fills `T = positions.len()` frames with the top `max_persons` people of
/// each sampled frame.
pub fn assemble_nonvideo_features(frames: &[FrameAnalysis], positions: &[usize], max_persons: usize) -> Result<NonVideoFeatures> {
    let mut nvf = NonVideoFeatures::padded(positions.len(), max_persons);
    for (t, &pos) in positions.iter().enumerate() {
        let fa = frames
            .get(pos)
            .ok_or_else(|| ModelError::Shape(format!("frame position {pos} out of range")))?;
        nvf.set_frame(t, &fa.detections.frame.feature)?;
        for (slot, i) in select_top_boxes(&fa.detections, max_persons).into_iter().enumerate() {
            nvf.set_person(
                t,
                slot,
                &PersonFeatures {
                    instance: &fa.detections.instances[i].feature,
                    part: &fa.persons[i].part_feature,
                    state: &fa.persons[i].state_feature,
                },
            )?;
        }
    }
    Ok(nvf)
}

/// Samples `t` frames of a video and builds its non-video features.
#[allow(clippy::too_many_arguments)]
pub fn extract_nonvideo_features(
    images: &[Image],
    detector: &PersonDetector,
    parser: &PartParser,
    t: usize,
    max_persons: usize,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<NonVideoFeatures> {
    let positions = sample_positions(images.len(), t, seed).map_err(|e| ModelError::Shape(e.to_string()))?;
    let mut unique = positions.clone();
    unique.dedup();
    let refs: Vec<&Image> = unique.iter().map(|&i| &images[i]).collect();
    let analyses = analyze_frames(&refs, detector, parser, 8, dtype, device)?;
    let remapped: Vec<usize> = positions
        .iter()
        .map(|p| unique.binary_search(p).expect("position was sampled"))
        .collect();
    assemble_nonvideo_features(&analyses, &remapped, max_persons)
}

/// Feature family fed to the fusion classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Frame,
    Instance,
    Part,
    State,
    VideoTemporal,
    VideoSpatial,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Frame,
        Family::Instance,
        Family::Part,
        Family::State,
        Family::VideoTemporal,
        Family::VideoSpatial,
    ];

    pub fn input_dim(&self) -> usize {
        match self {
            Family::Frame => FRAME_FEATURE_DIM,
            Family::Instance => INSTANCE_FEATURE_DIM,
            Family::Part => VISUAL_DIM,
            Family::State => STATE_FEATURE_DIM,
            Family::VideoTemporal => VIDEO_TEMPORAL_DIM,
            Family::VideoSpatial => VIDEO_SPATIAL_DIM,
        }
    }

    pub fn is_video(&self) -> bool {
        matches!(self, Family::VideoTemporal | Family::VideoSpatial)
    }

    fn name(&self) -> &'static str {
        match self {
            Family::Frame => "frame",
            Family::Instance => "instance",
            Family::Part => "part",
            Family::State => "state",
            Family::VideoTemporal => "video_temporal",
            Family::VideoSpatial => "video_spatial",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub num_actions: usize,
    pub families: Vec<Family>,
    /// Width of both layers of every per-family MLP.
    pub hidden: usize,
    pub num_frames: usize,
    pub max_persons: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            num_actions: 4,
            families: Family::ALL.to_vec(),
            hidden: 512,
            num_frames: 32,
            max_persons: 10,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(ModelError::Config("fusion needs at least one feature family".into()));
        }
        let mut f = self.families.clone();
        f.sort();
        f.dedup();
        if f.len() != self.families.len() {
            return Err(ModelError::Config("feature families listed twice".into()));
        }
        if self.num_actions < 2 || self.hidden == 0 || self.num_frames == 0 || self.max_persons == 0 {
            return Err(ModelError::Config("num_actions >= 2 and positive hidden, num_frames, max_persons required".into()));
        }
        Ok(())
    }

    pub fn uses_video(&self) -> bool {
        self.families.iter().any(|f| f.is_video())
    }
}

/// Tensors for a batch of videos, one entry per enabled family.
pub struct FusionBatch {
    pub families: Vec<(Family, Tensor)>,
    /// `(B, T, P)` slot validity as `u8`.
    pub mask: Tensor,
}

impl FusionBatch {
    pub fn new(
        items: &[(&NonVideoFeatures, &VideoBackboneFeatures)],
        config: &FusionConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let b = items.len();
        let (t, p) = (config.num_frames, config.max_persons);
        for (nvf, vbf) in items {
            nvf.validate()?;
            vbf.validate()?;
            if (nvf.num_frames, nvf.max_persons) != (t, p) {
                return Err(ModelError::Shape(format!(
                    "features have T={}, P={}, fusion expects T={t}, P={p}",
                    nvf.num_frames, nvf.max_persons
                )));
            }
        }
        let mut families = Vec::with_capacity(config.families.len());
        for &fam in &config.families {
            let mut data: Vec<f32> = Vec::new();
            for (nvf, vbf) in items {
                match fam {
                    Family::Frame => data.extend_from_slice(&nvf.frame),
                    Family::Instance => data.extend_from_slice(&nvf.instance),
                    Family::Part => data.extend_from_slice(&nvf.part),
                    Family::State => data.extend_from_slice(&nvf.state),
                    Family::VideoTemporal | Family::VideoSpatial => {
                        let v = if fam == Family::VideoTemporal { &vbf.temporal } else { &vbf.spatial };
                        let v = v
                            .as_ref()
                            .ok_or_else(|| ModelError::Config(format!("{fam} features enabled but not provided")))?;
                        data.extend_from_slice(v);
                    }
                }
            }
            let d = fam.input_dim();
            let tensor = match fam {
                Family::Frame => Tensor::from_vec(data, (b, t, d), device)?,
                f if f.is_video() => Tensor::from_vec(data, (b, d), device)?,
                _ => Tensor::from_vec(data, (b, t, p, d), device)?,
            };
            families.push((fam, tensor.to_dtype(dtype)?));
        }
        let mask: Vec<u8> = items.iter().flat_map(|(n, _)| n.mask.iter().map(|&m| m as u8)).collect();
        let mask = Tensor::from_vec(mask, (b, t, p), device)?;
        Ok(FusionBatch { families, mask })
    }
}

/// Max over persons then frames, ignoring padded slots; a video without any
/// person pools to zeros. `x` is `(B, T, P, D)`, `mask` `(B, T, P)`.
pub fn masked_max_pool(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let m = mask.unsqueeze(D::Minus1)?.broadcast_as(dims.as_slice())?.contiguous()?;
    let fill = Tensor::full(PAD_FILL, dims.as_slice(), x.device())?.to_dtype(x.dtype())?;
    let pooled = m.where_cond(x, &fill)?.max(2)?.max(1)?;
    let any = mask.flatten_from(1)?.max(1)?.unsqueeze(1)?.broadcast_as(pooled.dims())?.contiguous()?;
    Ok(any.where_cond(&pooled, &pooled.zeros_like()?)?)
}

struct Mlp {
    fc0: Dense,
    fc1: Dense,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc1.forward(&self.fc0.forward(x)?.relu()?)?.relu()?)
    }
}

pub struct FusionModel {
    config: FusionConfig,
    mlps: Vec<(Family, Mlp)>,
    classifier: Dense,
}

impl FusionModel {
    pub fn new(config: FusionConfig, scope: &mut Scope<'_>) -> Result<Self> {
        config.validate()?;
        let mut mlps = Vec::new();
        let mut width = 0;
        for &fam in &config.families {
            if fam.is_video() {
                width += fam.input_dim();
                continue;
            }
            let mut s = scope.pp(&format!("mlp.{fam}"));
            let mlp = Mlp {
                fc0: Dense::new(&mut s.pp("fc0"), fam.input_dim(), config.hidden)?,
                fc1: Dense::new(&mut s.pp("fc1"), config.hidden, config.hidden)?,
            };
            mlps.push((fam, mlp));
            width += config.hidden;
        }
        let classifier = Dense::new(&mut scope.pp("classifier"), width, config.num_actions)?;
        Ok(FusionModel { config, mlps, classifier })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn family<'a>(batch: &'a FusionBatch, fam: Family) -> Result<&'a Tensor> {
        batch
            .families
            .iter()
            .find(|(f, _)| *f == fam)
            .map(|(_, t)| t)
            .ok_or_else(|| ModelError::Config(format!("batch lacks the {fam} family")))
    }

    /// Pooled per-family MLP outputs, one `(B, hidden)` block per non-video
    /// family in configuration order.
    pub fn pooled_families(&self, batch: &FusionBatch) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.mlps.len());
        for (fam, mlp) in &self.mlps {
            let x = Self::family(batch, *fam)?;
            let h = mlp.forward(x)?;
            let pooled = if *fam == Family::Frame {
                h.max(1)?
            } else {
                masked_max_pool(&h, &batch.mask)?
            };
            out.push(pooled);
        }
        Ok(out)
    }

    /// Concatenated pooled non-video features, `(B, hidden * families)`;
    /// `None` when only video families are enabled.
    pub fn mlp_fuse(&self, batch: &FusionBatch) -> Result<Option<Tensor>> {
        let parts = self.pooled_families(batch)?;
        if parts.is_empty() {
            return Ok(None);
        }
        Ok(Some(Tensor::cat(&parts, 1)?))
    }

    /// Linear classifier over the fused non-video feature and any video
    /// families, in configuration order; returns logits.
    pub fn concat_predict(&self, fused: Option<&Tensor>, batch: &FusionBatch) -> Result<Tensor> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for &fam in &self.config.families {
            if fam.is_video() {
                blocks.push(Self::family(batch, fam)?.clone());
            } else {
                let f = fused.ok_or_else(|| ModelError::Config("missing fused non-video feature".into()))?;
                blocks.push(f.narrow(1, offset, self.config.hidden)?);
                offset += self.config.hidden;
            }
        }
        if blocks.is_empty() {
            return Err(ModelError::Config("no feature family present".into()));
        }
        self.classifier.forward(&Tensor::cat(&blocks, 1)?)
    }

    pub fn forward(&self, batch: &FusionBatch) -> Result<Tensor> {
        let fused = self.mlp_fuse(batch)?;
        self.concat_predict(fused.as_ref(), batch)
    }

    /// Action probabilities per video.
    pub fn predict(&self, batch: &FusionBatch) -> Result<Vec<Vec<f64>>> {
        Ok(softmax(&self.forward(batch)?)?.to_dtype(DType::F64)?.to_vec2()?)
    }
}

/// Weighted mean of probability vectors, renormalized; uniform by default.
pub fn ensemble(scores: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let Some(first) = scores.first() else {
        return Err(ModelError::Config("ensemble needs at least one score vector".into()));
    };
    let c = first.len();
    if scores.iter().any(|s| s.len() != c) {
        return Err(ModelError::Shape("ensemble inputs differ in length".into()));
    }
    let uniform = vec![1.0; scores.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != scores.len() || w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
        return Err(ModelError::Config("ensemble weights must be non-negative, one per input, not all zero".into()));
    }
    let mut out = vec![0.0; c];
    for (s, wi) in scores.iter().zip(w) {
        for (o, v) in out.iter_mut().zip(s) {
            *o += wi * v;
        }
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|o| *o /= total);
    }
    Ok(out)
}
