//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dap_core::eval::SubstitutionFlags;
use dap_core::synth::{synth_generate, SynthSpec};
use dap_core::{load_dataset_with_config, load_predictions, save_dataset, save_predictions};
use log::info;

use crate::config::{PipelineConfig, Stage};
use crate::data::load_splits;
use crate::error::{io_err, Result, RuntimeError};
use crate::pipeline::{ensemble_records, Predictor};
use crate::report::{diagnose, evaluate};
use crate::train::train_stage;

#[derive(Debug, Parser)]
#[command(name = "dap", version, about = "Part-level action parsing: train, predict, evaluate, diagnose")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage and write its checkpoint.
    Train(TrainArgs),
    /// Run the trained pipeline and write a prediction file.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Acc^p under ground-truth substitution of each stage.
    Diagnose(DiagnoseArgs),
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; `DAP_`-prefixed variables override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// detector, part_parser or action_parser.
    pub stage: Stage,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory for checkpoints (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accept upstream checkpoints written under a different config.
    #[arg(long)]
    pub allow_config_mismatch: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Videos to predict; defaults to the held-out split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Prediction file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Run directory holding the checkpoints (overrides `output_dir`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Further prediction files whose action scores are averaged in.
    #[arg(long, num_args = 1..)]
    pub ensemble: Vec<PathBuf>,
    #[arg(long)]
    pub allow_config_mismatch: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON report destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run configuration supplying the match thresholds.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Extra row, e.g. `actor_det,state_parsing`.
    #[arg(long)]
    pub flags: Option<String>,
    /// SVG bar chart destination.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub videos_per_class: usize,
    #[arg(long, default_value_t = 4)]
    pub actions: usize,
    #[arg(long, default_value_t = 4)]
    pub parts: usize,
    #[arg(long, default_value_t = 3)]
    pub states: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 2)]
    pub max_actors: usize,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = a.config.load()?;
            if let Some(out) = a.out {
                cfg.output_dir = out;
            }
            let report = train_stage(&cfg, a.stage, a.allow_config_mismatch)?;
            for e in &report.epochs {
                println!("epoch {:>3}  lr {:.2e}  loss {:.5}", e.epoch + 1, e.lr, e.loss);
            }
            println!("checkpoint {}", report.checkpoint.display());
        }
        Command::Predict(a) => {
            let mut cfg = a.config.load()?;
            if let Some(dir) = a.run_dir {
                cfg.output_dir = dir;
            }
            let (dataset, videos) = match &a.data {
                Some(path) => load_dataset_with_config(path)?,
                None => {
                    let s = load_splits(&cfg)?;
                    (s.dataset, s.eval)
                }
            };
            cfg.apply_dataset(&dataset);
            cfg.validate()?;
            let predictor = Predictor::load(&cfg, a.allow_config_mismatch)?;
            info!("predicting {} videos", videos.len());
            let mut records = predictor.predict(&cfg, &videos)?;
            if !a.ensemble.is_empty() {
                let mut sets = vec![records];
                for p in &a.ensemble {
                    sets.push(load_predictions(p, &dataset)?);
                }
                records = ensemble_records(&sets, None)?;
            }
            save_predictions(&a.out, &records, &dataset)?;
            println!("wrote {} predictions to {}", records.len(), a.out.display());
        }
        Command::Evaluate(a) => {
            let cfg = PipelineConfig::load(a.config.as_deref())?;
            let (dataset, gt) = load_dataset_with_config(&a.gt)?;
            let pred = load_predictions(&a.pred, &dataset)?;
            let report = evaluate(&pred, &gt, &dataset, &cfg.evaluation)?;
            print!("{}", report.to_text());
            if let Some(out) = &a.out {
                write_text(out, &to_json(&report))?;
            }
        }
        Command::Diagnose(a) => {
            let cfg = PipelineConfig::load(a.config.as_deref())?;
            let custom = a
                .flags
                .as_deref()
                .map(SubstitutionFlags::parse)
                .transpose()
                .map_err(RuntimeError::Config)?;
            let (dataset, gt) = load_dataset_with_config(&a.gt)?;
            let pred = load_predictions(&a.pred, &dataset)?;
            let report = diagnose(&pred, &gt, &cfg.evaluation, custom)?;
            print!("{}", report.to_text());
            if let Some(plot) = &a.plot {
                write_text(plot, &report.grid.to_svg())?;
            }
            if let Some(out) = &a.out {
                write_text(out, &to_json(&report))?;
            }
        }
        Command::Synth(a) => {
            let spec = SynthSpec {
                num_actions: a.actions,
                num_parts: a.parts,
                num_states: a.states,
                width: a.size,
                height: a.size,
                frames_per_video: a.frames,
                videos_per_class: a.videos_per_class,
                max_actors: a.max_actors,
            };
            let videos = synth_generate(&spec, a.seed)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            save_dataset(&a.out, &videos, &spec.dataset_config())?;
            println!("wrote {} videos to {}", videos.len(), a.out.display());
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| RuntimeError::Config(e.to_string()))?;
    run(cli)
}
