//! Single-person part parsing: a 48-channel visual trunk, a convolutional
//! part head emitting heatmaps, and a pooled state head.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use dap_core::dataset::{argmax, Part};
use dap_core::geometry::BBox;
use dap_core::synth::Image;
use serde::{Deserialize, Serialize};

use crate::detector::images_to_tensor;
use crate::error::{ModelError, Result};
use crate::heatmap::{crop_image, encode_gt_heatmaps, largest_region, rasterize_into, region_to_frame, CropGeometry};
use crate::loss::{cross_entropy, focal_loss, mse, scalar};
use crate::nn::{global_avg_pool, softmax, Conv2d, Dense};
use crate::params::Scope;

pub const VISUAL_DIM: usize = 48;
pub const STATE_FEATURE_DIM: usize = 192;

/// Output layouts compared for part and state parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartVariant {
    /// `K * S` maps indexed by (part, state).
    Shared,
    /// `K` part maps plus `S` state maps.
    SeparatedHeatmaps,
    /// `K` part maps plus a state distribution per part, cross-entropy.
    StateVectors,
    /// As `StateVectors` with focal loss on states.
    StateVectorsFocal,
}

impl PartVariant {
    pub const ALL: [PartVariant; 4] = [
        PartVariant::Shared,
        PartVariant::SeparatedHeatmaps,
        PartVariant::StateVectors,
        PartVariant::StateVectorsFocal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PartVariant::Shared => "shared",
            PartVariant::SeparatedHeatmaps => "separated_heatmaps",
            PartVariant::StateVectors => "state_vectors",
            PartVariant::StateVectorsFocal => "state_vectors_focal",
        }
    }

    /// Channels of the part head.
    pub fn heatmap_channels(&self, num_parts: usize, num_states: usize) -> usize {
        match self {
            PartVariant::Shared => num_parts * num_states,
            PartVariant::SeparatedHeatmaps => num_parts + num_states,
            PartVariant::StateVectors | PartVariant::StateVectorsFocal => num_parts,
        }
    }
}

impl fmt::Display for PartVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        PartVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown part-parser variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartParserConfig {
    pub num_parts: usize,
    pub num_states: usize,
    pub variant: PartVariant,
    pub input_height: usize,
    pub input_width: usize,
    /// Widths of the reference trunk; the first two layers downsample by 2.
    pub trunk_channels: Vec<usize>,
    pub tau: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub crop_padding: f64,
    /// Relative jitter of ground-truth boxes when cropping training samples.
    pub crop_jitter: f64,
    pub pixel_mean: f64,
    pub pixel_scale: f64,
}

impl Default for PartParserConfig {
    fn default() -> Self {
        PartParserConfig {
            num_parts: 4,
            num_states: 3,
            variant: PartVariant::StateVectorsFocal,
            input_height: 256,
            input_width: 192,
            trunk_channels: vec![24, 48, 48, 48],
            tau: 0.5,
            lambda: 0.5,
            gamma: 2.0,
            alpha: 0.25,
            crop_padding: 1.1,
            crop_jitter: 0.05,
            pixel_mean: 0.3,
            pixel_scale: 0.3,
        }
    }
}

impl PartParserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(format!("part parser: {m}")));
        if self.num_parts == 0 || self.num_states < 2 {
            return bad("need at least one part and two states");
        }
        if self.trunk_channels.len() < 2 || self.trunk_channels.last() != Some(&VISUAL_DIM) {
            return bad("trunk needs at least two layers and must end at 48 channels");
        }
        if self.input_height % 4 != 0 || self.input_width % 4 != 0 || self.input_height == 0 || self.input_width == 0 {
            return bad("input size must be a positive multiple of the stride");
        }
        if !(0.0..=1.0).contains(&self.tau) || self.lambda < 0.0 || self.gamma < 0.0 || self.alpha <= 0.0 {
            return bad("tau must lie in [0, 1]; lambda, gamma non-negative; alpha positive");
        }
        if self.crop_padding < 1.0 || self.pixel_scale <= 0.0 {
            return bad("crop_padding must be >= 1 and pixel_scale positive");
        }
        Ok(())
    }

    pub fn crop_for(&self, person: &BBox, stride: usize) -> CropGeometry {
        CropGeometry::for_person(person, self.crop_padding, self.input_width, self.input_height, stride)
    }
}

/// Trunk producing the 48-channel visual feature of a crop.
pub trait VisualBackbone: Send + Sync {
    fn forward(&self, crops: &Tensor) -> Result<Tensor>;
    fn out_channels(&self) -> usize;
    fn stride(&self) -> usize;
}

pub struct ToyVisualBackbone {
    convs: Vec<Conv2d>,
    stride: usize,
}

impl ToyVisualBackbone {
    pub fn new(scope: &mut Scope<'_>, channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut cin = 3;
        let mut stride = 1;
        for (i, &c) in channels.iter().enumerate() {
            let s = if i < 2 { 2 } else { 1 };
            stride *= s;
            convs.push(Conv2d::new(&mut scope.pp(&format!("conv{i}")), cin, c, 3, s, 1)?);
            cin = c;
        }
        Ok(ToyVisualBackbone { convs, stride })
    }
}

impl VisualBackbone for ToyVisualBackbone {
    fn forward(&self, crops: &Tensor) -> Result<Tensor> {
        let mut x = crops.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x)
    }

    fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels())
    }

    fn stride(&self) -> usize {
        self.stride
    }
}

pub struct PartParserForward {
    /// `(N, 48, h, w)` visual feature.
    pub visual: Tensor,
    /// `(N, 48, h, w)` output of the second part-head layer.
    pub part_features: Tensor,
    /// `(N, channels, h, w)` raw heatmaps; the channel layout follows the variant.
    pub heatmaps: Tensor,
    /// `(N, 192)`.
    pub state_features: Tensor,
    /// `(N, K, S)`.
    pub state_logits: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartLossBreakdown {
    pub l_p: f64,
    pub l_s: f64,
    pub l_part: f64,
    pub lambda: f64,
}

/// Training targets for a batch of crops.
#[derive(Debug, Clone, PartialEq)]
pub struct PartTargets {
    /// `(N, channels, h, w)` flattened, in the variant's layout.
    pub maps: Vec<f32>,
    /// Per `(crop, part)` state; `None` for unannotated parts.
    pub states: Vec<Option<usize>>,
}

/// Parsed part of one person: frame-space box, confidence and state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPart {
    pub part_id: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub state_id: usize,
    pub state_probs: Vec<f64>,
}

pub struct PartParser {
    config: PartParserConfig,
    visual: Box<dyn VisualBackbone>,
    ppm: [Conv2d; 3],
    spm: [Dense; 3],
}

impl PartParser {
    pub fn new(config: PartParserConfig, scope: &mut Scope<'_>) -> Result<Self> {
        config.validate()?;
        let visual = ToyVisualBackbone::new(&mut scope.pp("visual"), &config.trunk_channels)?;
        Self::with_backbone(config, scope, Box::new(visual))
    }

    /// Fails with a configuration error unless `visual` emits 48 channels at
    /// a stride dividing the input size.
    pub fn with_backbone(config: PartParserConfig, scope: &mut Scope<'_>, visual: Box<dyn VisualBackbone>) -> Result<Self> {
        config.validate()?;
        if visual.out_channels() != VISUAL_DIM {
            return Err(ModelError::Config(format!(
                "visual backbone must emit {VISUAL_DIM} channels, got {}",
                visual.out_channels()
            )));
        }
        if config.input_height % visual.stride() != 0 || config.input_width % visual.stride() != 0 {
            return Err(ModelError::Config("input size must be divisible by the visual stride".into()));
        }
        let out = config.variant.heatmap_channels(config.num_parts, config.num_states);
        let ppm = [
            Conv2d::new(&mut scope.pp("ppm.conv0"), VISUAL_DIM, VISUAL_DIM, 3, 1, 1)?,
            Conv2d::new(&mut scope.pp("ppm.conv1"), VISUAL_DIM, VISUAL_DIM, 3, 1, 1)?,
            Conv2d::new(&mut scope.pp("ppm.out"), VISUAL_DIM, out, 1, 1, 0)?,
        ];
        let spm = [
            Dense::new(&mut scope.pp("spm.fc0"), VISUAL_DIM, STATE_FEATURE_DIM)?,
            Dense::new(&mut scope.pp("spm.fc1"), STATE_FEATURE_DIM, STATE_FEATURE_DIM)?,
            Dense::new(&mut scope.pp("spm.out"), STATE_FEATURE_DIM, config.num_parts * config.num_states)?,
        ];
        Ok(PartParser { config, visual, ppm, spm })
    }

    pub fn config(&self) -> &PartParserConfig {
        &self.config
    }

    pub fn stride(&self) -> usize {
        self.visual.stride()
    }

    pub fn crop_for(&self, person: &BBox) -> CropGeometry {
        self.config.crop_for(person, self.stride())
    }

    /// Crops the given regions and stacks them into a normalized batch.
    pub fn prepare_crops(&self, crops: &[(&Image, CropGeometry)], dtype: DType, device: &Device) -> Result<Tensor> {
        let images: Vec<Image> = crops.iter().map(|(img, g)| crop_image(img, g)).collect();
        let refs: Vec<&Image> = images.iter().collect();
        images_to_tensor(&refs, self.config.pixel_mean, self.config.pixel_scale, dtype, device)
    }

    pub fn visual_forward(&self, crops: &Tensor) -> Result<Tensor> {
        self.visual.forward(crops)
    }

    /// Part features from the first two layers and heatmaps from the third.
    pub fn ppm_forward(&self, visual: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.ppm[0].forward(visual)?.relu()?;
        let f_pa = self.ppm[1].forward(&h)?.relu()?;
        let maps = self.ppm[2].forward(&f_pa)?;
        Ok((f_pa, maps))
    }

    /// 192-d state feature and `(N, K, S)` state logits.
    pub fn spm_forward(&self, visual: &Tensor) -> Result<(Tensor, Tensor)> {
        let pooled = global_avg_pool(visual)?;
        let h = self.spm[0].forward(&pooled)?.relu()?;
        let f_sta = self.spm[1].forward(&h)?.relu()?;
        let n = f_sta.dims()[0];
        let logits = self.spm[2]
            .forward(&f_sta)?
            .reshape((n, self.config.num_parts, self.config.num_states))?;
        Ok((f_sta, logits))
    }

    pub fn forward(&self, crops: &Tensor) -> Result<PartParserForward> {
        let visual = self.visual_forward(crops)?;
        let (part_features, heatmaps) = self.ppm_forward(&visual)?;
        let (state_features, state_logits) = self.spm_forward(&visual)?;
        Ok(PartParserForward {
            visual,
            part_features,
            heatmaps,
            state_features,
            state_logits,
        })
    }

    /// Target maps and per-part states for crops of annotated persons.
    pub fn build_targets(&self, persons: &[(&[Part], CropGeometry)]) -> PartTargets {
        let (k, s) = (self.config.num_parts, self.config.num_states);
        let mut maps = Vec::new();
        let mut states = Vec::with_capacity(persons.len() * k);
        for (parts, geom) in persons {
            maps.extend(encode_variant_targets(self.config.variant, parts, k, s, geom));
            let mut st = vec![None; k];
            for p in parts.iter().filter(|p| p.part_id < k) {
                st[p.part_id] = Some(p.state_id);
            }
            states.extend(st);
        }
        PartTargets { maps, states }
    }

    /// Objective of the configured variant. Heatmap terms are mean squared
    /// errors over every cell; the state term is cross-entropy or focal loss
    /// over annotated parts for the vector variants and the state-map MSE
    /// for the separated variant. The shared variant has no state term.
    pub fn loss(&self, fwd: &PartParserForward, targets: &PartTargets) -> Result<(Tensor, PartLossBreakdown)> {
        let (k, s) = (self.config.num_parts, self.config.num_states);
        let target = Tensor::from_slice(&targets.maps, fwd.heatmaps.dims(), fwd.heatmaps.device())?
            .to_dtype(fwd.heatmaps.dtype())?;
        let lambda = self.config.lambda;
        match self.config.variant {
            PartVariant::StateVectors | PartVariant::StateVectorsFocal => {
                let (rows, labels) = annotated_rows(&fwd.state_logits, &targets.states, s)?;
                let gamma = if self.config.variant == PartVariant::StateVectors { None } else { Some((self.config.gamma, self.config.alpha)) };
                match gamma {
                    Some((g, a)) => part_loss(&fwd.heatmaps, &target, &rows, &labels, lambda, g, a),
                    None => {
                        let l_p = mse(&fwd.heatmaps, &target)?;
                        let l_s = cross_entropy(&rows, &labels)?;
                        combine(l_p, l_s, lambda)
                    }
                }
            }
            PartVariant::SeparatedHeatmaps => {
                let l_p = mse(&fwd.heatmaps.narrow(1, 0, k)?, &target.narrow(1, 0, k)?)?;
                let l_s = mse(&fwd.heatmaps.narrow(1, k, s)?, &target.narrow(1, k, s)?)?;
                combine(l_p, l_s, lambda)
            }
            PartVariant::Shared => {
                let l_p = mse(&fwd.heatmaps, &target)?;
                let l_s = Tensor::zeros((), l_p.dtype(), l_p.device())?;
                combine(l_p, l_s, lambda)
            }
        }
    }

    /// Decodes every crop of a forward pass into frame-space parts with states.
    pub fn parse(&self, fwd: &PartParserForward, geoms: &[CropGeometry]) -> Result<Vec<Vec<ParsedPart>>> {
        let (n, ch, rows, cols) = fwd.heatmaps.dims4()?;
        let maps: Vec<f32> = fwd.heatmaps.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let probs: Vec<f64> = softmax(&fwd.state_logits)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let (k, s) = (self.config.num_parts, self.config.num_states);
        let plane = rows * cols;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let crop = &maps[i * ch * plane..(i + 1) * ch * plane];
            let mut parts = Vec::new();
            for part in 0..k {
                let (location, state_maps): (Vec<f32>, Option<Vec<&[f32]>>) = match self.config.variant {
                    PartVariant::Shared => {
                        let chans: Vec<&[f32]> = (0..s).map(|st| &crop[(part * s + st) * plane..(part * s + st + 1) * plane]).collect();
                        let loc = (0..plane).map(|c| chans.iter().map(|m| m[c]).fold(f32::NEG_INFINITY, f32::max)).collect();
                        (loc, Some(chans))
                    }
                    PartVariant::SeparatedHeatmaps => {
                        let chans = (0..s).map(|st| &crop[(k + st) * plane..(k + st + 1) * plane]).collect();
                        (crop[part * plane..(part + 1) * plane].to_vec(), Some(chans))
                    }
                    _ => (crop[part * plane..(part + 1) * plane].to_vec(), None),
                };
                let Some(region) = largest_region(&location, rows, cols, self.config.tau) else {
                    continue;
                };
                let state_probs = match state_maps {
                    Some(chans) => {
                        let means: Vec<f64> = chans.iter().map(|m| region.mean(m).max(0.0)).collect();
                        let total: f64 = means.iter().sum();
                        if total > 0.0 {
                            means.iter().map(|m| m / total).collect()
                        } else {
                            vec![1.0 / s as f64; s]
                        }
                    }
                    None => probs[(i * k + part) * s..(i * k + part + 1) * s].to_vec(),
                };
                parts.push(ParsedPart {
                    part_id: part,
                    bbox: region_to_frame(&region, &geoms[i]),
                    confidence: region.mean(&location),
                    state_id: argmax(&state_probs),
                    state_probs,
                });
            }
            out.push(parts);
        }
        Ok(out)
    }
}

/// Target maps of one crop in the channel layout of `variant`.
pub fn encode_variant_targets(variant: PartVariant, parts: &[Part], k: usize, s: usize, geom: &CropGeometry) -> Vec<f32> {
    let (rows, cols) = geom.heatmap_size();
    let plane = rows * cols;
    match variant {
        PartVariant::StateVectors | PartVariant::StateVectorsFocal => encode_gt_heatmaps(parts, k, geom),
        PartVariant::SeparatedHeatmaps => {
            let mut maps = encode_gt_heatmaps(parts, k, geom);
            maps.resize((k + s) * plane, 0.0);
            for p in parts.iter().filter(|p| p.part_id < k && p.state_id < s) {
                let ch = &mut maps[(k + p.state_id) * plane..(k + p.state_id + 1) * plane];
                rasterize_into(ch, rows, cols, &geom.frame_to_cells(&p.bbox));
            }
            maps
        }
        PartVariant::Shared => {
            let mut maps = vec![0f32; k * s * plane];
            for p in parts.iter().filter(|p| p.part_id < k && p.state_id < s) {
                let c = p.part_id * s + p.state_id;
                rasterize_into(&mut maps[c * plane..(c + 1) * plane], rows, cols, &geom.frame_to_cells(&p.bbox));
            }
            maps
        }
    }
}

/// `(N, K, S)` logits restricted to annotated `(crop, part)` rows.
fn annotated_rows(logits: &Tensor, states: &[Option<usize>], s: usize) -> Result<(Tensor, Vec<usize>)> {
    let flat = logits.reshape(((), s))?;
    if flat.dims()[0] != states.len() {
        return Err(ModelError::Shape(format!("{} state rows but {} targets", flat.dims()[0], states.len())));
    }
    let (idx, labels): (Vec<u32>, Vec<usize>) = states
        .iter()
        .enumerate()
        .filter_map(|(i, st)| st.map(|st| (i as u32, st)))
        .unzip();
    if idx.len() == states.len() {
        return Ok((flat, labels));
    }
    let index = Tensor::from_slice(&idx, idx.len(), logits.device())?;
    Ok((flat.index_select(&index, 0)?, labels))
}

fn combine(l_p: Tensor, l_s: Tensor, lambda: f64) -> Result<(Tensor, PartLossBreakdown)> {
    let total = (&l_p + l_s.affine(lambda, 0.0)?)?;
    let (p, s) = (scalar(&l_p)?, scalar(&l_s)?);
    Ok((
        total,
        PartLossBreakdown {
            l_p: p,
            l_s: s,
            l_part: p + lambda * s,
            lambda,
        },
    ))
}

/// Heatmap MSE plus `lambda` times the focal state loss.
pub fn part_loss(
    heatmaps: &Tensor,
    targets: &Tensor,
    state_logits: &Tensor,
    states: &[usize],
    lambda: f64,
    gamma: f64,
    alpha: f64,
) -> Result<(Tensor, PartLossBreakdown)> {
    let l_p = mse(heatmaps, targets)?;
    let l_s = focal_loss(state_logits, states, gamma, alpha)?;
    combine(l_p, l_s, lambda)
}
