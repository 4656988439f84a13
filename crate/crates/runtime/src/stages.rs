//! Model construction and checkpoint restoration for each stage.

use candle_core::{DType, Device};
use dap_models::action_parser::{FusionModel, StubVideoProvider, VideoFeatureProvider};
use dap_models::detector::PersonDetector;
use dap_models::part_parser::PartParser;
use dap_models::ParamStore;

use crate::checkpoint::Checkpoint;
use crate::config::{PipelineConfig, Stage, VideoProviderKind};
use crate::error::Result;

pub const DTYPE: DType = DType::F32;

pub fn device() -> Device {
    Device::Cpu
}

fn stage_seed(cfg: &PipelineConfig, stage: Stage) -> u64 {
    let salt = match stage {
        Stage::Detector => 0x11,
        Stage::PartParser => 0x22,
        Stage::ActionParser => 0x33,
    };
    cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt
}

pub fn new_detector(cfg: &PipelineConfig) -> Result<(ParamStore, PersonDetector)> {
    let mut store = ParamStore::new(DTYPE, stage_seed(cfg, Stage::Detector));
    let model = PersonDetector::new(cfg.detector.model.clone(), &mut store.root().pp("detector"))?;
    Ok((store, model))
}

pub fn new_part_parser(cfg: &PipelineConfig) -> Result<(ParamStore, PartParser)> {
    let mut store = ParamStore::new(DTYPE, stage_seed(cfg, Stage::PartParser));
    let model = PartParser::new(cfg.part_parser.model.clone(), &mut store.root().pp("part_parser"))?;
    Ok((store, model))
}

pub fn new_fusion(cfg: &PipelineConfig) -> Result<(ParamStore, FusionModel)> {
    let mut store = ParamStore::new(DTYPE, stage_seed(cfg, Stage::ActionParser));
    let model = FusionModel::new(cfg.action_parser.model.clone(), &mut store.root().pp("fusion"))?;
    Ok((store, model))
}

/// A model restored from its stage checkpoint.
pub struct Loaded<M> {
    pub store: ParamStore,
    pub model: M,
    pub checkpoint: Checkpoint,
}

fn restore<M>(
    cfg: &PipelineConfig,
    stage: Stage,
    allow_mismatch: bool,
    build: impl FnOnce(&PipelineConfig) -> Result<(ParamStore, M)>,
) -> Result<Loaded<M>> {
    let checkpoint = Checkpoint::load_for(&cfg.checkpoint_path(stage), stage, &cfg.config_hash(stage), allow_mismatch)?;
    let (mut store, model) = build(cfg)?;
    checkpoint.restore(&mut store)?;
    Ok(Loaded { store, model, checkpoint })
}

pub fn load_detector(cfg: &PipelineConfig, allow_mismatch: bool) -> Result<Loaded<PersonDetector>> {
    restore(cfg, Stage::Detector, allow_mismatch, new_detector)
}

pub fn load_part_parser(cfg: &PipelineConfig, allow_mismatch: bool) -> Result<Loaded<PartParser>> {
    restore(cfg, Stage::PartParser, allow_mismatch, new_part_parser)
}

pub fn load_fusion(cfg: &PipelineConfig, allow_mismatch: bool) -> Result<Loaded<FusionModel>> {
    restore(cfg, Stage::ActionParser, allow_mismatch, new_fusion)
}

pub fn video_provider(cfg: &PipelineConfig) -> Option<Box<dyn VideoFeatureProvider>> {
    match cfg.action_parser.video_provider {
        VideoProviderKind::None => None,
        VideoProviderKind::Stub => Some(Box::new(StubVideoProvider::new(cfg.seed ^ 0x5eed))),
    }
}
