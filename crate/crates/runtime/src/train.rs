//! Training loops for the three stages.

use std::collections::BTreeMap;
use std::time::Instant;

use dap_core::dataset::Part;
use dap_core::sampling::shuffled;
use dap_core::synth::{render_frame, Image};
use dap_core::{BBox, VideoAnnotation};
use dap_models::action_parser::{FusionBatch, NonVideoFeatures, VideoBackboneFeatures};
use dap_models::detector::FrameTarget;
use dap_models::heatmap::CropGeometry;
use dap_models::loss::{cross_entropy, scalar};
use dap_models::ParamStore;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cache::FeatureCache;
use crate::checkpoint::Checkpoint;
use crate::config::{PipelineConfig, Stage};
use crate::data::{epoch_frames, load_splits};
use crate::error::{Result, RuntimeError};
use crate::optim::{learning_rate, Optimizer};
use crate::pipeline::Upstream;
use crate::stages::{device, new_detector, new_fusion, new_part_parser, DTYPE};

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    /// Mean of each loss term.
    pub breakdown: BTreeMap<String, f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs: Vec<EpochLog>,
    pub checkpoint: std::path::PathBuf,
}

#[derive(Default)]
struct Running {
    batches: usize,
    total: f64,
    terms: BTreeMap<String, f64>,
}

impl Running {
    fn add(&mut self, total: f64, terms: &[(&str, f64)]) {
        self.batches += 1;
        self.total += total;
        for (k, v) in terms {
            *self.terms.entry((*k).to_string()).or_default() += v;
        }
    }

    fn finish(self, epoch: usize, lr: f64, started: Instant) -> EpochLog {
        let n = self.batches.max(1) as f64;
        EpochLog {
            epoch,
            lr,
            loss: self.total / n,
            breakdown: self.terms.into_iter().map(|(k, v)| (k, v / n)).collect(),
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

fn epoch_seed(seed: u64, stage: Stage, epoch: usize) -> u64 {
    let salt = match stage {
        Stage::Detector => 1u64,
        Stage::PartParser => 2,
        Stage::ActionParser => 3,
    };
    seed ^ (salt << 56) ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn save(cfg: &PipelineConfig, stage: Stage, store: &ParamStore, epochs: &[EpochLog]) -> Result<std::path::PathBuf> {
    let mut metrics = BTreeMap::new();
    if let Some(last) = epochs.last() {
        metrics.insert("loss".to_string(), last.loss);
        metrics.extend(last.breakdown.clone());
    }
    let config = serde_json::to_value(cfg.run_config(stage)).expect("run config serializes");
    let ckpt = Checkpoint::from_store(stage, cfg.config_hash(stage), epochs.len(), metrics, config, store)?;
    let path = cfg.checkpoint_path(stage);
    ckpt.save(&path)?;
    info!("{stage}: wrote {}", path.display());
    Ok(path)
}

fn log_epoch(stage: Stage, total_epochs: usize, log: &EpochLog) {
    let terms: Vec<String> = log.breakdown.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    info!(
        "{stage} epoch {}/{total_epochs} lr={:.2e} loss={:.4} {} ({:.1}s)",
        log.epoch + 1,
        log.lr,
        log.loss,
        terms.join(" "),
        log.seconds
    );
}

/// Trains one stage on the configured training split and writes its
/// checkpoint. The action parser needs both upstream checkpoints.
pub fn train_stage(cfg: &PipelineConfig, stage: Stage, allow_mismatch: bool) -> Result<TrainReport> {
    let splits = load_splits(cfg)?;
    let mut cfg = cfg.clone();
    cfg.apply_dataset(&splits.dataset);
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(crate::error::io_err(&cfg.output_dir))?;
    info!("{stage}: {} training videos", splits.train.len());
    let (store, epochs) = match stage {
        Stage::Detector => train_detector(&cfg, &splits.train)?,
        Stage::PartParser => train_part_parser(&cfg, &splits.train)?,
        Stage::ActionParser => train_action_parser(&cfg, &splits.train, allow_mismatch)?,
    };
    let checkpoint = save(&cfg, stage, &store, &epochs)?;
    Ok(TrainReport {
        stage,
        epochs,
        checkpoint,
    })
}

fn frame_target(video: &VideoAnnotation, pos: usize) -> FrameTarget {
    FrameTarget {
        boxes: video.frames[pos].persons.iter().map(|p| p.bbox).collect(),
        action: video.frame_action_id(pos),
    }
}

fn train_detector(cfg: &PipelineConfig, videos: &[VideoAnnotation]) -> Result<(ParamStore, Vec<EpochLog>)> {
    let tc = &cfg.detector.train;
    let (store, model) = new_detector(cfg)?;
    let mut opt = Optimizer::new(store.all_vars(), tc);
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        let seed = epoch_seed(cfg.seed, Stage::Detector, epoch);
        let frames = epoch_frames(videos, tc.frames_per_video, seed)?;
        let order = shuffled(frames.len(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut run = Running::default();
        let mut lr = learning_rate(tc, epoch, opt.steps());
        for chunk in order.chunks(tc.batch_size) {
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    let (v, f) = frames[i];
                    render_frame(&videos[v], &videos[v].frames[f])
                })
                .collect();
            let targets: Vec<FrameTarget> = chunk
                .iter()
                .map(|&i| frame_target(&videos[frames[i].0], frames[i].1))
                .collect();
            let refs: Vec<&Image> = images.iter().collect();
            let x = model.prepare_images(&refs, DTYPE, &device())?;
            let fwd = model.forward(&x)?;
            let (w, h) = (images[0].width as f64, images[0].height as f64);
            let (rois, labels) = model.training_regions(&targets, w, h, &mut rng);
            let ins_logits = if rois.is_empty() {
                candle_core::Tensor::zeros((0, model.config().num_actions), DTYPE, &device())?
            } else {
                model.ap_rcnn_forward(&model.roi_features(&fwd.neck, &rois)?)?.1
            };
            let t = model.build_targets(&targets, fwd.grid, labels);
            let (loss, b) = model.loss(&fwd, &ins_logits, &t)?;
            lr = learning_rate(tc, epoch, opt.steps());
            opt.backward_step(&loss, lr)?;
            run.add(
                b.l_det,
                &[("l_cls", b.l_cls), ("l_box", b.l_box), ("l_ins", b.l_ins), ("l_img", b.l_img)],
            );
        }
        let log = run.finish(epoch, lr, started);
        log_epoch(Stage::Detector, tc.epochs, &log);
        logs.push(log);
    }
    Ok((store, logs))
}

/// Ground-truth box shifted and rescaled by up to `jitter` of its size.
fn jittered(b: &BBox, jitter: f64, rng: &mut impl Rng) -> BBox {
    if jitter <= 0.0 {
        return *b;
    }
    let (w, h) = (b.width(), b.height());
    let r = BBox::new(
        b.x1 + w * rng.random_range(-jitter..=jitter),
        b.y1 + h * rng.random_range(-jitter..=jitter),
        b.x2 + w * rng.random_range(-jitter..=jitter),
        b.y2 + h * rng.random_range(-jitter..=jitter),
    );
    if r.is_valid() {
        r
    } else {
        *b
    }
}

fn train_part_parser(cfg: &PipelineConfig, videos: &[VideoAnnotation]) -> Result<(ParamStore, Vec<EpochLog>)> {
    let tc = &cfg.part_parser.train;
    let (store, model) = new_part_parser(cfg)?;
    let jitter = cfg.part_parser.model.crop_jitter;
    let mut opt = Optimizer::new(store.all_vars(), tc);
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        let seed = epoch_seed(cfg.seed, Stage::PartParser, epoch);
        let frames = epoch_frames(videos, tc.frames_per_video, seed)?;
        // one sample per annotated person
        let people: Vec<(usize, usize, usize)> = frames
            .iter()
            .flat_map(|&(v, f)| (0..videos[v].frames[f].persons.len()).map(move |p| (v, f, p)))
            .collect();
        let order = shuffled(people.len(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut run = Running::default();
        let mut lr = learning_rate(tc, epoch, opt.steps());
        for chunk in order.chunks(tc.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut samples: Vec<(&[Part], CropGeometry)> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (v, f, p) = people[i];
                let video = &videos[v];
                let person = &video.frames[f].persons[p];
                images.push(render_frame(video, &video.frames[f]));
                samples.push((&person.parts, model.crop_for(&jittered(&person.bbox, jitter, &mut rng))));
            }
            let crops: Vec<(&Image, CropGeometry)> = images.iter().zip(&samples).map(|(img, s)| (img, s.1)).collect();
            let x = model.prepare_crops(&crops, DTYPE, &device())?;
            let fwd = model.forward(&x)?;
            let t = model.build_targets(&samples);
            let (loss, b) = model.loss(&fwd, &t)?;
            lr = learning_rate(tc, epoch, opt.steps());
            opt.backward_step(&loss, lr)?;
            run.add(b.l_part, &[("l_p", b.l_p), ("l_s", b.l_s)]);
        }
        let log = run.finish(epoch, lr, started);
        log_epoch(Stage::PartParser, tc.epochs, &log);
        logs.push(log);
    }
    Ok((store, logs))
}

type FusionInputs = (NonVideoFeatures, VideoBackboneFeatures);

fn train_action_parser(
    cfg: &PipelineConfig,
    videos: &[VideoAnnotation],
    allow_mismatch: bool,
) -> Result<(ParamStore, Vec<EpochLog>)> {
    let tc = &cfg.action_parser.train;
    let upstream = Upstream::load(cfg, allow_mismatch)?;
    let cache = FeatureCache::new(cfg.cache_dir());
    let started = Instant::now();
    let inputs: Vec<FusionInputs> = videos
        .iter()
        .map(|v| upstream.cached_fusion_inputs(cfg, &cache, v))
        .collect::<Result<_>>()?;
    info!(
        "action_parser: features for {} videos ready ({:.1}s)",
        inputs.len(),
        started.elapsed().as_secs_f64()
    );
    let labels: Vec<usize> = videos.iter().map(|v| v.action_id).collect();
    let (store, model) = new_fusion(cfg)?;
    let mut opt = Optimizer::new(store.all_vars(), tc);
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        let order = shuffled(inputs.len(), epoch_seed(cfg.seed, Stage::ActionParser, epoch));
        let mut run = Running::default();
        let lr = learning_rate(tc, epoch, opt.steps());
        for chunk in order.chunks(tc.batch_size) {
            let items: Vec<(&NonVideoFeatures, &VideoBackboneFeatures)> =
                chunk.iter().map(|&i| (&inputs[i].0, &inputs[i].1)).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = FusionBatch::new(&items, &cfg.action_parser.model, DTYPE, &device())?;
            let loss = cross_entropy(&model.forward(&batch)?, &y)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(RuntimeError::Config(format!("action_parser: loss diverged at epoch {epoch}")));
            }
            opt.backward_step(&loss, learning_rate(tc, epoch, opt.steps()))?;
            run.add(value, &[("l_action", value)]);
        }
        let log = run.finish(epoch, lr, started);
        log_epoch(Stage::ActionParser, tc.epochs, &log);
        logs.push(log);
    }
    Ok((store, logs))
}
