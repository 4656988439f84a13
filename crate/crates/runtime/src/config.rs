//! Run configuration: a TOML document layered over per-stage defaults, with
//! `DAP_`-prefixed environment overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dap_core::eval::MatchConfig;
use dap_core::DatasetConfig;
use dap_models::action_parser::FusionConfig;
use dap_models::detector::DetectorConfig;
use dap_models::part_parser::PartParserConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Result, RuntimeError};

pub const ENV_PREFIX: &str = "DAP_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detector,
    PartParser,
    ActionParser,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Detector, Stage::PartParser, Stage::ActionParser];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Detector => "detector",
            Stage::PartParser => "part_parser",
            Stage::ActionParser => "action_parser",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = RuntimeError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| RuntimeError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Multiply the rate by `gamma` at each listed epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// Cosine annealing from the base rate to `min_lr` over all epochs.
    Cosine { min_lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in iterations; 0 disables it.
    pub warmup_iters: usize,
    /// Frames drawn from each video per epoch; 0 uses every frame.
    pub frames_per_video: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_grad_norm: f64,
}

impl TrainConfig {
    /// Defaults per stage: step decay at 8 and 11 of 12 epochs with momentum
    /// SGD for the detector, at 30 and 35 of 40 with Adam for the part
    /// parser, and 30 epochs of cosine-annealed AdamW for action fusion.
    pub fn defaults_for(stage: Stage) -> Self {
        match stage {
            Stage::Detector => TrainConfig {
                epochs: 12,
                lr: 0.02,
                schedule: Schedule::Step {
                    milestones: vec![8, 11],
                    gamma: 0.1,
                },
                optimizer: OptimizerKind::SgdMomentum,
                batch_size: 8,
                momentum: 0.9,
                weight_decay: 1e-4,
                warmup_iters: 100,
                frames_per_video: 0,
                clip_grad_norm: 10.0,
            },
            Stage::PartParser => TrainConfig {
                epochs: 40,
                lr: 1e-4,
                schedule: Schedule::Step {
                    milestones: vec![30, 35],
                    gamma: 0.1,
                },
                optimizer: OptimizerKind::Adam,
                batch_size: 32,
                momentum: 0.9,
                weight_decay: 0.0,
                warmup_iters: 0,
                frames_per_video: 0,
                clip_grad_norm: 0.0,
            },
            Stage::ActionParser => TrainConfig {
                epochs: 30,
                lr: 1e-3,
                schedule: Schedule::Cosine { min_lr: 0.0 },
                optimizer: OptimizerKind::Adamw,
                batch_size: 16,
                momentum: 0.9,
                weight_decay: 1e-2,
                warmup_iters: 0,
                frames_per_video: 0,
                clip_grad_norm: 0.0,
            },
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        let bad = |m: String| Err(RuntimeError::Config(format!("{stage}.train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) || self.clip_grad_norm < 0.0 {
            return bad("weight_decay and clip_grad_norm must be non-negative, momentum in [0, 1)".into());
        }
        match &self.schedule {
            Schedule::Step { milestones, gamma } => {
                if !milestones.windows(2).all(|w| w[0] < w[1]) || !(*gamma > 0.0) {
                    return bad("step milestones must increase and gamma be positive".into());
                }
            }
            Schedule::Cosine { min_lr } => {
                if *min_lr < 0.0 || *min_lr > self.lr {
                    return bad("cosine min_lr must lie in [0, lr]".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Annotation file of the training videos.
    pub train: PathBuf,
    /// Held-out annotation file; empty means split `train`.
    pub eval: PathBuf,
    pub minival_fraction: f64,
    pub stratified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorStage {
    pub model: DetectorConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartParserStage {
    pub model: PartParserConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoProviderKind {
    None,
    Stub,
}

/// Score source combined into the final action prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMember {
    Fusion,
    /// Mean over frames of the detector's frame-level action distribution.
    FrameHead,
    /// Mean over detected people of the instance-level action distribution.
    InstanceHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionParserStage {
    pub model: FusionConfig,
    pub train: TrainConfig,
    pub video_provider: VideoProviderKind,
    pub ensemble: Vec<EnsembleMember>,
    /// One weight per ensemble member; empty means uniform.
    pub ensemble_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// Checkpoints, feature cache and reports live here.
    pub output_dir: PathBuf,
    pub detector: DetectorStage,
    pub part_parser: PartParserStage,
    pub action_parser: ActionParserStage,
    pub evaluation: MatchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            data: DataConfig {
                train: PathBuf::from("data/train.json"),
                eval: PathBuf::new(),
                minival_fraction: 0.3,
                stratified: false,
            },
            output_dir: PathBuf::from("runs/default"),
            detector: DetectorStage {
                model: DetectorConfig::default(),
                train: TrainConfig::defaults_for(Stage::Detector),
            },
            part_parser: PartParserStage {
                model: PartParserConfig::default(),
                train: TrainConfig::defaults_for(Stage::PartParser),
            },
            action_parser: ActionParserStage {
                model: FusionConfig::default(),
                train: TrainConfig::defaults_for(Stage::ActionParser),
                video_provider: VideoProviderKind::Stub,
                ensemble: vec![EnsembleMember::Fusion],
                ensemble_weights: Vec::new(),
            },
            evaluation: MatchConfig::default(),
        }
    }
}

/// The stage-level view of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub train: TrainConfig,
    pub model: serde_json::Value,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    /// Parses `text` over the defaults, then applies `env` overrides.
    pub fn from_toml_str(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut base = toml::Value::try_from(PipelineConfig::default())
            .map_err(|e| RuntimeError::Config(e.to_string()))?;
        let user: toml::Value = toml::from_str(text).map_err(|e| RuntimeError::Config(e.to_string()))?;
        merge(&mut base, user);
        for (key, value) in env {
            if let Some(path) = key.strip_prefix(ENV_PREFIX) {
                apply_override(&mut base, path, &value)?;
            }
        }
        let cfg: PipelineConfig = base.try_into().map_err(|e: toml::de::Error| RuntimeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (the defaults alone when `None`) with process
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(io_err(p))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, std::env::vars())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| RuntimeError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.model.validate()?;
        self.part_parser.model.validate()?;
        self.action_parser.model.validate()?;
        self.evaluation.validate()?;
        for stage in Stage::ALL {
            self.train_config(stage).validate(stage)?;
        }
        let ens = &self.action_parser;
        if ens.ensemble.is_empty() {
            return Err(RuntimeError::Config("action_parser.ensemble needs at least one member".into()));
        }
        if !ens.ensemble_weights.is_empty() && ens.ensemble_weights.len() != ens.ensemble.len() {
            return Err(RuntimeError::Config("ensemble_weights must match ensemble members".into()));
        }
        if ens.model.uses_video() && ens.video_provider == VideoProviderKind::None {
            return Err(RuntimeError::Config(
                "video feature families are enabled but no video provider is configured".into(),
            ));
        }
        Ok(())
    }

    /// Copies the label counts of `dataset` into every model configuration.
    pub fn apply_dataset(&mut self, dataset: &DatasetConfig) {
        self.detector.model.num_actions = dataset.num_actions();
        self.action_parser.model.num_actions = dataset.num_actions();
        self.part_parser.model.num_parts = dataset.num_parts();
        self.part_parser.model.num_states = dataset.num_states();
    }

    pub fn train_config(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Detector => &self.detector.train,
            Stage::PartParser => &self.part_parser.train,
            Stage::ActionParser => &self.action_parser.train,
        }
    }

    pub fn run_config(&self, stage: Stage) -> RunConfig {
        let model = match stage {
            Stage::Detector => serde_json::to_value(&self.detector.model),
            Stage::PartParser => serde_json::to_value(&self.part_parser.model),
            Stage::ActionParser => serde_json::to_value((
                &self.action_parser.model,
                self.action_parser.video_provider,
            )),
        }
        .expect("configs serialize");
        RunConfig {
            stage,
            seed: self.seed,
            train: self.train_config(stage).clone(),
            model,
            data: self.data.clone(),
            output_dir: self.output_dir.clone(),
        }
    }

    /// Hex SHA-256 over everything that shapes a stage's weights.
    pub fn config_hash(&self, stage: Stage) -> String {
        let rc = self.run_config(stage);
        let doc = serde_json::json!({
            "stage": stage,
            "seed": rc.seed,
            "train": rc.train,
            "model": rc.model,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.output_dir.join(format!("{stage}.ckpt"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output_dir.join("feature_cache")
    }
}

fn merge(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    // A tagged schedule is replaced whole so its variant can change.
                    Some(slot) if k != "schedule" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `DAP_DETECTOR__TRAIN__EPOCHS=3` sets `detector.train.epochs`. Values are
/// read as TOML literals, falling back to plain strings.
fn apply_override(root: &mut toml::Value, path: &str, value: &str) -> Result<()> {
    let keys: Vec<String> = path.split("__").map(|k| k.to_ascii_lowercase()).collect();
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| RuntimeError::Config(format!("override {ENV_PREFIX}{path}: {key:?} is not a table")))?;
        if i + 1 == keys.len() {
            if !table.contains_key(key) {
                return Err(RuntimeError::Config(format!("override {ENV_PREFIX}{path}: unknown key {key:?}")));
            }
            table.insert(key.clone(), parsed);
            return Ok(());
        }
        node = table
            .get_mut(key)
            .ok_or_else(|| RuntimeError::Config(format!("override {ENV_PREFIX}{path}: unknown key {key:?}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn empty_document_gives_stage_defaults() {
        let cfg = PipelineConfig::from_toml_str("", no_env()).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.detector.train.epochs, 12);
        assert_eq!(cfg.part_parser.train.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.action_parser.train.schedule, Schedule::Cosine { min_lr: 0.0 });
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = PipelineConfig::from_toml_str("[part_parser.train]\nepochs = 3\n", no_env()).unwrap();
        assert_eq!(cfg.part_parser.train.epochs, 3);
        assert_eq!(cfg.part_parser.train.lr, 1e-4);
        assert_eq!(cfg.part_parser.train.batch_size, 32);
    }

    #[test]
    fn environment_overrides_apply() {
        let env = vec![
            ("DAP_SEED".to_string(), "17".to_string()),
            ("DAP_DETECTOR__TRAIN__LR".to_string(), "0.5".to_string()),
            ("DAP_OUTPUT_DIR".to_string(), "/tmp/x".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let cfg = PipelineConfig::from_toml_str("seed = 3", env).unwrap();
        assert_eq!(cfg.seed, 17);
        assert_eq!(cfg.detector.train.lr, 0.5);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[detector.train]\nepoch = 3\n", no_env()).is_err());
        assert!(PipelineConfig::from_toml_str("", vec![("DAP_NOPE".into(), "1".into())]).is_err());
    }

    #[test]
    fn schedule_variant_can_change() {
        let text = "[detector.train.schedule]\nkind = \"cosine\"\nmin_lr = 0.0\n";
        let cfg = PipelineConfig::from_toml_str(text, no_env()).unwrap();
        assert_eq!(cfg.detector.train.schedule, Schedule::Cosine { min_lr: 0.0 });
    }

    #[test]
    fn hash_tracks_stage_settings_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.part_parser.train.epochs = 1;
        assert_eq!(a.config_hash(Stage::Detector), b.config_hash(Stage::Detector));
        assert_ne!(a.config_hash(Stage::PartParser), b.config_hash(Stage::PartParser));
    }

    #[test]
    fn toml_round_trip() {
        let a = PipelineConfig::default();
        let b = PipelineConfig::from_toml_str(&a.to_toml_string().unwrap(), no_env()).unwrap();
        assert_eq!(a, b);
    }
}
