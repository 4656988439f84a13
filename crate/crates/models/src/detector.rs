//! Person detector with a frame-level action head (global context parsing)
//! and an instance-level action head on pooled regions.
//!
//! The box branch is a single-stage anchor detector; anything implementing
//! [`Backbone`] with 2048 output channels can replace the reference trunk.

use candle_core::{DType, Device, Tensor, D};
use dap_core::geometry::BBox;
use dap_core::synth::Image;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{assign_anchors, decode, encode, grid_anchors, nms, AnchorLabel};
use crate::error::{ModelError, Result};
use crate::loss::{cross_entropy, scalar, smooth_l1};
use crate::nn::{global_avg_pool, softmax, Conv2d, Dense};
use crate::params::Scope;
use crate::roi::roi_align;

pub const FRAME_FEATURE_DIM: usize = 2048;
pub const INSTANCE_FEATURE_DIM: usize = 256;
pub const ROI_SIZE: usize = 7;
/// Two classes (background, person) times four box deltas.
pub const BOX_DELTA_DIM: usize = 8;
/// Class index of the person row in the anchor classifier.
pub const PERSON: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub num_actions: usize,
    pub pixel_mean: f64,
    pub pixel_scale: f64,
    /// Reference trunk widths; the first three layers downsample by 2.
    pub trunk_channels: Vec<usize>,
    pub neck_channels: usize,
    pub head_channels: usize,
    /// Anchor `[width, height]` pairs in pixels.
    pub anchor_sizes: Vec<[f64; 2]>,
    pub box_std: [f64; 4],
    pub smooth_l1_beta: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub nms_iou: f64,
    pub score_floor: f64,
    pub max_detections: usize,
    /// Relative jitter applied to ground-truth boxes used as training regions.
    pub roi_jitter: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_actions: 4,
            pixel_mean: 0.3,
            pixel_scale: 0.3,
            trunk_channels: vec![16, 32, 64, 64],
            neck_channels: 256,
            head_channels: 128,
            anchor_sizes: vec![[19.0, 38.0], [23.0, 46.0]],
            box_std: [0.1, 0.1, 0.2, 0.2],
            smooth_l1_beta: 1.0 / 9.0,
            positive_iou: 0.5,
            negative_iou: 0.4,
            nms_iou: 0.5,
            score_floor: 0.05,
            max_detections: 20,
            roi_jitter: 0.08,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(format!("detector: {m}")));
        if self.num_actions < 2 {
            return bad("num_actions must be at least 2");
        }
        if self.trunk_channels.is_empty() || self.trunk_channels.contains(&0) {
            return bad("trunk_channels must be non-empty and positive");
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| s[0] <= 0.0 || s[1] <= 0.0) {
            return bad("anchor sizes must be positive");
        }
        if !(self.negative_iou <= self.positive_iou && self.positive_iou <= 1.0 && self.negative_iou > 0.0) {
            return bad("need 0 < negative_iou <= positive_iou <= 1");
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) || !(0.0..1.0).contains(&self.score_floor) {
            return bad("nms_iou must lie in (0, 1] and score_floor in [0, 1)");
        }
        if self.pixel_scale <= 0.0 || self.max_detections == 0 {
            return bad("pixel_scale and max_detections must be positive");
        }
        Ok(())
    }
}

/// Feature extractor in front of the detection heads.
pub trait Backbone: Send + Sync {
    /// `(N, 3, H, W)` normalized images to `(N, out_channels, H / stride, W / stride)`.
    fn forward(&self, images: &Tensor) -> Result<Tensor>;
    fn out_channels(&self) -> usize;
    fn stride(&self) -> usize;
}

/// Small convolutional trunk followed by a 1x1 expansion to 2048 channels.
pub struct ToyBackbone {
    trunk: Vec<Conv2d>,
    expand: Conv2d,
    stride: usize,
}

impl ToyBackbone {
    pub fn new(scope: &mut Scope<'_>, trunk_channels: &[usize], out_channels: usize) -> Result<Self> {
        let mut trunk = Vec::with_capacity(trunk_channels.len());
        let mut cin = 3;
        let mut stride = 1;
        for (i, &c) in trunk_channels.iter().enumerate() {
            let s = if i < 3 { 2 } else { 1 };
            stride *= s;
            trunk.push(Conv2d::new(&mut scope.pp(&format!("conv{i}")), cin, c, 3, s, 1)?);
            cin = c;
        }
        let expand = Conv2d::new(&mut scope.pp("expand"), cin, out_channels, 1, 1, 0)?;
        Ok(ToyBackbone { trunk, expand, stride })
    }
}

impl Backbone for ToyBackbone {
    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for conv in &self.trunk {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(self.expand.forward(&x)?.relu()?)
    }

    fn out_channels(&self) -> usize {
        self.expand.out_channels()
    }

    fn stride(&self) -> usize {
        self.stride
    }
}

/// Raw box-head output for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxHeadOutput {
    pub class_logits: [f64; 2],
    pub deltas: [f64; BOX_DELTA_DIM],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceActionOutput {
    pub feature: Vec<f32>,
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameActionOutput {
    pub feature: Vec<f32>,
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Detector output for one frame; `boxes` and `instances` are parallel and
/// sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub boxes: Vec<Detection>,
    pub instances: Vec<InstanceActionOutput>,
    pub frame: FrameActionOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLossBreakdown {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_ins: f64,
    pub l_img: f64,
    pub l_det: f64,
}

/// Tensors produced by one batched pass through the backbone and heads.
pub struct DetectorForward {
    /// `(N, 2048, h, w)`.
    pub features: Tensor,
    /// `(N, neck, h, w)`, the input to region pooling.
    pub neck: Tensor,
    /// `(N * h * w * A, 2)`, rows ordered by image, row, column, anchor.
    pub class_logits: Tensor,
    /// `(N * h * w * A, 8)`; columns 4..8 regress the person class.
    pub box_deltas: Tensor,
    /// `(N, 2048)` pooled frame feature.
    pub frame_features: Tensor,
    /// `(N, C)`.
    pub frame_logits: Tensor,
    pub grid: (usize, usize),
}

/// Ground truth of one training frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTarget {
    pub boxes: Vec<BBox>,
    pub action: usize,
}

/// Anchor-level targets for a batch, produced by [`PersonDetector::build_targets`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionTargets {
    /// Rows of non-ignored anchors and their class (0 background, 1 person).
    pub anchor_rows: Vec<u32>,
    pub anchor_classes: Vec<usize>,
    /// Rows of positive anchors and their encoded regression targets.
    pub positive_rows: Vec<u32>,
    pub box_targets: Vec<[f64; 4]>,
    /// Action labels of the pooled training regions.
    pub instance_labels: Vec<usize>,
    pub frame_labels: Vec<usize>,
}

pub struct PersonDetector {
    config: DetectorConfig,
    backbone: Box<dyn Backbone>,
    neck: Conv2d,
    head: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
    gcp: Dense,
    ap_convs: Vec<Conv2d>,
    ap_cls: Dense,
}

impl PersonDetector {
    pub fn new(config: DetectorConfig, scope: &mut Scope<'_>) -> Result<Self> {
        config.validate()?;
        let backbone = ToyBackbone::new(&mut scope.pp("backbone"), &config.trunk_channels, FRAME_FEATURE_DIM)?;
        Self::with_backbone(config, scope, Box::new(backbone))
    }

    /// Fails with a configuration error unless `backbone` emits 2048 channels.
    pub fn with_backbone(config: DetectorConfig, scope: &mut Scope<'_>, backbone: Box<dyn Backbone>) -> Result<Self> {
        config.validate()?;
        if backbone.out_channels() != FRAME_FEATURE_DIM {
            return Err(ModelError::Config(format!(
                "detector backbone must emit {FRAME_FEATURE_DIM} channels, got {}",
                backbone.out_channels()
            )));
        }
        let a = config.anchor_sizes.len();
        let nc = config.neck_channels;
        let neck = Conv2d::new(&mut scope.pp("neck"), FRAME_FEATURE_DIM, nc, 1, 1, 0)?;
        let head = Conv2d::new(&mut scope.pp("head"), nc, config.head_channels, 3, 1, 1)?;
        let cls = Conv2d::new(&mut scope.pp("cls"), config.head_channels, a * 2, 1, 1, 0)?;
        let reg = Conv2d::new(&mut scope.pp("reg"), config.head_channels, a * BOX_DELTA_DIM, 1, 1, 0)?;
        let gcp = Dense::new(&mut scope.pp("gcp"), FRAME_FEATURE_DIM, config.num_actions)?;
        let mut ap_convs = Vec::with_capacity(4);
        let mut cin = nc;
        for i in 0..4 {
            ap_convs.push(Conv2d::new(&mut scope.pp(&format!("ap_rcnn.conv{i}")), cin, INSTANCE_FEATURE_DIM, 3, 1, 1)?);
            cin = INSTANCE_FEATURE_DIM;
        }
        let ap_cls = Dense::new(&mut scope.pp("ap_rcnn.cls"), INSTANCE_FEATURE_DIM, config.num_actions)?;
        Ok(PersonDetector {
            config,
            backbone,
            neck,
            head,
            cls,
            reg,
            gcp,
            ap_convs,
            ap_cls,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    /// Stacks frames into a normalized `(N, 3, H, W)` tensor.
    pub fn prepare_images(&self, images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        images_to_tensor(images, self.config.pixel_mean, self.config.pixel_scale, dtype, device)
    }

    pub fn backbone_forward(&self, images: &Tensor) -> Result<Tensor> {
        let f = self.backbone.forward(images)?;
        if f.dims()[1] != FRAME_FEATURE_DIM {
            return Err(ModelError::Shape(format!("backbone produced {} channels", f.dims()[1])));
        }
        Ok(f)
    }

    /// Frame feature (spatial mean of the backbone map) and frame action logits.
    pub fn gcp_forward(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let f_c = global_avg_pool(features)?;
        let logits = self.gcp.forward(&f_c)?;
        Ok((f_c, logits))
    }

    /// `(R, neck, 7, 7)` pooled regions to the 256-d instance feature and
    /// instance action logits.
    pub fn ap_rcnn_forward(&self, roi_features: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut x = roi_features.clone();
        for conv in &self.ap_convs {
            x = conv.forward(&x)?.relu()?;
        }
        let f_ia = global_avg_pool(&x)?;
        let logits = self.ap_cls.forward(&f_ia)?;
        Ok((f_ia, logits))
    }

    pub fn forward(&self, images: &Tensor) -> Result<DetectorForward> {
        let features = self.backbone_forward(images)?;
        let (n, _, h, w) = features.dims4()?;
        let neck = self.neck.forward(&features)?.relu()?;
        let hidden = self.head.forward(&neck)?.relu()?;
        let a = self.config.anchor_sizes.len();
        let rows = n * h * w * a;
        let class_logits = self.cls.forward(&hidden)?.permute((0, 2, 3, 1))?.reshape((rows, 2))?;
        let box_deltas = self
            .reg
            .forward(&hidden)?
            .permute((0, 2, 3, 1))?
            .reshape((rows, BOX_DELTA_DIM))?;
        let (frame_features, frame_logits) = self.gcp_forward(&features)?;
        Ok(DetectorForward {
            features,
            neck,
            class_logits,
            box_deltas,
            frame_features,
            frame_logits,
            grid: (h, w),
        })
    }

    pub fn anchors(&self, grid: (usize, usize)) -> Vec<BBox> {
        grid_anchors(grid.0, grid.1, self.stride(), &self.config.anchor_sizes)
    }

    pub fn roi_features(&self, neck: &Tensor, rois: &[(usize, BBox)]) -> Result<Tensor> {
        roi_align(neck, rois, self.stride(), ROI_SIZE)
    }

    /// Anchor assignment and labels for a batch of frames.
    pub fn build_targets(&self, frames: &[FrameTarget], grid: (usize, usize), instance_labels: Vec<usize>) -> DetectionTargets {
        let anchors = self.anchors(grid);
        let per_image = anchors.len();
        let mut t = DetectionTargets {
            instance_labels,
            frame_labels: frames.iter().map(|f| f.action).collect(),
            ..Default::default()
        };
        for (n, frame) in frames.iter().enumerate() {
            let labels = assign_anchors(&anchors, &frame.boxes, self.config.positive_iou, self.config.negative_iou);
            for (i, label) in labels.into_iter().enumerate() {
                let row = (n * per_image + i) as u32;
                match label {
                    AnchorLabel::Positive(g) => {
                        t.anchor_rows.push(row);
                        t.anchor_classes.push(PERSON);
                        t.positive_rows.push(row);
                        t.box_targets.push(encode(&anchors[i], &frame.boxes[g], &self.config.box_std));
                    }
                    AnchorLabel::Negative => {
                        t.anchor_rows.push(row);
                        t.anchor_classes.push(0);
                    }
                    AnchorLabel::Ignore => {}
                }
            }
        }
        t
    }

    /// Ground-truth boxes perturbed by up to `roi_jitter` of their size, one
    /// region per box, tagged with the frame's action.
    pub fn training_regions<R: Rng>(&self, frames: &[FrameTarget], width: f64, height: f64, rng: &mut R) -> (Vec<(usize, BBox)>, Vec<usize>) {
        let j = self.config.roi_jitter;
        let mut rois = Vec::new();
        let mut labels = Vec::new();
        let bounds = BBox::new(0.0, 0.0, width, height);
        for (n, frame) in frames.iter().enumerate() {
            for b in &frame.boxes {
                let (bw, bh) = (b.width(), b.height());
                let mut r = BBox::new(
                    b.x1 + bw * rng.random_range(-j..=j),
                    b.y1 + bh * rng.random_range(-j..=j),
                    b.x2 + bw * rng.random_range(-j..=j),
                    b.y2 + bh * rng.random_range(-j..=j),
                )
                .clip_to(&bounds);
                if !r.is_valid() {
                    r = *b;
                }
                rois.push((n, r));
                labels.push(frame.action);
            }
        }
        (rois, labels)
    }

    pub fn loss(&self, forward: &DetectorForward, instance_logits: &Tensor, targets: &DetectionTargets) -> Result<(Tensor, DetectionLossBreakdown)> {
        detection_loss(
            &forward.class_logits,
            &forward.box_deltas,
            instance_logits,
            &forward.frame_logits,
            targets,
            self.config.smooth_l1_beta,
        )
    }

    /// Boxes after score floor, clipping and suppression, with both action
    /// heads evaluated.
    pub fn detect(&self, images: &Tensor) -> Result<Vec<FrameDetections>> {
        let (_, _, img_h, img_w) = images.dims4()?;
        let fwd = self.forward(images)?;
        let n = images.dims()[0];
        let scores: Vec<f64> = softmax(&fwd.class_logits)?
            .narrow(1, PERSON, 1)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        let deltas: Vec<f64> = fwd
            .box_deltas
            .narrow(1, 4 * PERSON, 4)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        let anchors = self.anchors(fwd.grid);
        let per_image = anchors.len();
        let bounds = BBox::new(0.0, 0.0, img_w as f64, img_h as f64);

        let mut kept: Vec<Vec<Detection>> = Vec::with_capacity(n);
        for b in 0..n {
            let mut cand: Vec<Detection> = Vec::new();
            for (i, anchor) in anchors.iter().enumerate() {
                let row = b * per_image + i;
                let score = scores[row];
                if score < self.config.score_floor {
                    continue;
                }
                let d = [deltas[row * 4], deltas[row * 4 + 1], deltas[row * 4 + 2], deltas[row * 4 + 3]];
                let bbox = decode(anchor, &d, &self.config.box_std).clip_to(&bounds);
                if bbox.is_valid() {
                    cand.push(Detection { bbox, score });
                }
            }
            let order = ranking(&cand);
            let cand: Vec<Detection> = order.into_iter().map(|i| cand[i]).collect();
            let boxes: Vec<BBox> = cand.iter().map(|d| d.bbox).collect();
            let s: Vec<f64> = cand.iter().map(|d| d.score).collect();
            let mut keep = nms(&boxes, &s, self.config.nms_iou);
            keep.truncate(self.config.max_detections);
            kept.push(keep.into_iter().map(|i| cand[i]).collect());
        }

        let rois: Vec<(usize, BBox)> = kept
            .iter()
            .enumerate()
            .flat_map(|(b, d)| d.iter().map(move |d| (b, d.bbox)))
            .collect();
        let (f_ia, ins_logits) = if rois.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let pooled = self.roi_features(&fwd.neck, &rois)?;
            let (f, l) = self.ap_rcnn_forward(&pooled)?;
            (rows_f32(&f)?, rows_f32(&l)?)
        };
        let frame_f = rows_f32(&fwd.frame_features)?;
        let frame_l = rows_f32(&fwd.frame_logits)?;

        let mut out = Vec::with_capacity(n);
        let mut r = 0;
        for (b, boxes) in kept.into_iter().enumerate() {
            let instances = (0..boxes.len())
                .map(|i| InstanceActionOutput {
                    feature: f_ia[r + i].clone(),
                    logits: ins_logits[r + i].clone(),
                })
                .collect();
            r += boxes.len();
            out.push(FrameDetections {
                boxes,
                instances,
                frame: FrameActionOutput {
                    feature: frame_f[b].clone(),
                    logits: frame_l[b].clone(),
                },
            });
        }
        Ok(out)
    }
}

/// Indices ordered by descending score, then larger area, then lower index.
fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[b].bbox.area().total_cmp(&dets[a].bbox.area()))
            .then(a.cmp(&b))
    });
    order
}

/// Indices of at most `p` boxes, highest score first; ties go to the larger
/// box, then the lower index.
pub fn select_top_boxes(detections: &FrameDetections, p: usize) -> Vec<usize> {
    let mut order = ranking(&detections.boxes);
    order.truncate(p);
    order
}

pub fn images_to_tensor(images: &[&Image], mean: f64, scale: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(ModelError::Shape("no images".into()));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(ModelError::Shape("images in a batch must share one size".into()));
        }
        data.extend(img.to_chw().into_iter().map(|v| ((v as f64 - mean) / scale) as f32));
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

fn rows_f32(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2()?)
}

fn index_tensor(rows: &[u32], device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(rows, rows.len(), device)?)
}

/// `l_cls + l_box + l_ins + l_img`, added in that order.
///
/// `l_cls` averages cross-entropy over all non-ignored anchors; `l_box` is
/// smooth-L1 on the person-class deltas of positive anchors, summed over the
/// four coordinates and averaged over positives; `l_ins` and `l_img` are
/// cross-entropies over regions and frames. Empty sets contribute 0.
pub fn detection_loss(
    class_logits: &Tensor,
    box_deltas: &Tensor,
    instance_logits: &Tensor,
    frame_logits: &Tensor,
    targets: &DetectionTargets,
    beta: f64,
) -> Result<(Tensor, DetectionLossBreakdown)> {
    let device = class_logits.device();
    let l_cls = if targets.anchor_rows.is_empty() {
        Tensor::zeros((), class_logits.dtype(), device)?
    } else {
        let rows = class_logits.index_select(&index_tensor(&targets.anchor_rows, device)?, 0)?;
        cross_entropy(&rows, &targets.anchor_classes)?
    };
    let l_box = if targets.positive_rows.is_empty() {
        Tensor::zeros((), box_deltas.dtype(), device)?
    } else {
        let pred = box_deltas
            .index_select(&index_tensor(&targets.positive_rows, device)?, 0)?
            .narrow(1, 4 * PERSON, 4)?;
        let flat: Vec<f64> = targets.box_targets.iter().flatten().copied().collect();
        let target = Tensor::from_vec(flat, (targets.box_targets.len(), 4), device)?.to_dtype(box_deltas.dtype())?;
        smooth_l1(&pred, &target, beta)?
    };
    let l_ins = cross_entropy(instance_logits, &targets.instance_labels)?;
    let l_img = cross_entropy(frame_logits, &targets.frame_labels)?;
    let total = (((&l_cls + &l_box)? + &l_ins)? + &l_img)?;
    let (a, b, c, d) = (scalar(&l_cls)?, scalar(&l_box)?, scalar(&l_ins)?, scalar(&l_img)?);
    let breakdown = DetectionLossBreakdown {
        l_cls: a,
        l_box: b,
        l_ins: c,
        l_img: d,
        l_det: a + b + c + d,
    };
    Ok((total, breakdown))
}

/// Box-head output of one anchor row, for inspection.
pub fn box_head_output(forward: &DetectorForward, row: usize) -> Result<BoxHeadOutput> {
    let c: Vec<f64> = forward.class_logits.get(row)?.to_dtype(DType::F64)?.to_vec1()?;
    let d: Vec<f64> = forward.box_deltas.get(row)?.to_dtype(DType::F64)?.to_vec1()?;
    let mut out = BoxHeadOutput {
        class_logits: [c[0], c[1]],
        deltas: [0.0; BOX_DELTA_DIM],
    };
    out.deltas.copy_from_slice(&d);
    Ok(out)
}

/// Person probability for every anchor row.
pub fn person_scores(forward: &DetectorForward) -> Result<Vec<f64>> {
    Ok(softmax(&forward.class_logits)?
        .narrow(D::Minus1, PERSON, 1)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?)
}
