#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dap_core::save_dataset;
use dap_core::synth::{synth_generate, SynthSpec};
use dap_runtime::PipelineConfig;

pub fn spec(videos_per_class: usize) -> SynthSpec {
    SynthSpec {
        videos_per_class,
        frames_per_video: 4,
        ..SynthSpec::default()
    }
}

/// Writes small train and eval sets under `dir` and returns the path of a
/// config sized for quick runs.
pub fn tiny_workspace(dir: &Path, epochs: usize) -> PathBuf {
    let train = dir.join("train.json");
    let eval = dir.join("eval.json");
    for (path, seed, n) in [(&train, 1, 2), (&eval, 2, 1)] {
        let s = spec(n);
        save_dataset(path, &synth_generate(&s, seed).unwrap(), &s.dataset_config()).unwrap();
    }
    let text = format!(
        r#"
seed = 5
output_dir = "{out}"
[data]
train = "{train}"
eval = "{eval}"
[detector.model]
trunk_channels = [4, 4, 4]
neck_channels = 16
head_channels = 16
[detector.train]
epochs = {epochs}
batch_size = 4
frames_per_video = 1
warmup_iters = 0
[part_parser.model]
input_height = 32
input_width = 16
trunk_channels = [4, 8, 48]
[part_parser.train]
epochs = {epochs}
batch_size = 8
frames_per_video = 1
[action_parser.model]
hidden = 8
num_frames = 2
max_persons = 2
[action_parser.train]
epochs = {epochs}
batch_size = 4
"#,
        out = dir.join("run").display(),
        train = train.display(),
        eval = eval.display(),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn load(config: &Path) -> PipelineConfig {
    let text = std::fs::read_to_string(config).unwrap();
    let mut cfg = PipelineConfig::from_toml_str(&text, Vec::new()).unwrap();
    let splits = dap_runtime::data::load_splits(&cfg).unwrap();
    cfg.apply_dataset(&splits.dataset);
    cfg
}

pub fn cli(args: &[&str]) -> dap_runtime::Result<()> {
    let mut full = vec!["dap"];
    full.extend_from_slice(args);
    dap_runtime::cli::run_from(full)
}
