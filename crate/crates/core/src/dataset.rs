//! Annotation records shared by ground truth and predictions, and their JSON
//! wire format.
//!
//! Labels are stored as indices in memory and as strings on disk; the
//! [`DatasetConfig`] name lists resolve one into the other.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::geometry::BBox;

/// Name of the distinguished "nothing happening" part state.
pub const NONE_STATE: &str = "none";

const BOX_TOL: f64 = 1e-6;
const SCORE_SUM_TOL: f64 = 1e-6;

/// Label vocabularies: `C` actions, `K` parts and `S` part states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub actions: Vec<String>,
    pub parts: Vec<String>,
    pub states: Vec<String>,
}

impl DatasetConfig {
    pub fn new(actions: Vec<String>, parts: Vec<String>, states: Vec<String>) -> Result<Self> {
        let config = DatasetConfig {
            actions,
            parts,
            states,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Index of the "none" state, if the vocabulary has one.
    pub fn none_state(&self) -> Option<usize> {
        self.states.iter().position(|s| s == NONE_STATE)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |kind: &str, names: &[String], min: usize| -> Result<()> {
            if names.len() < min {
                return Err(DataError::schema(
                    "config",
                    format!("need at least {min} {kind} labels, got {}", names.len()),
                ));
            }
            let mut seen = HashSet::new();
            for n in names {
                if !seen.insert(n.as_str()) {
                    return Err(DataError::schema(
                        "config",
                        format!("duplicate {kind} label {n:?}"),
                    ));
                }
            }
            Ok(())
        };
        check("action", &self.actions, 2)?;
        check("part", &self.parts, 1)?;
        check("state", &self.states, 2)
    }

    fn resolve(&self, kind: &'static str, label: &str, record: &str) -> Result<usize> {
        let names = match kind {
            "action" => &self.actions,
            "part" => &self.parts,
            _ => &self.states,
        };
        names
            .iter()
            .position(|n| n == label)
            .ok_or_else(|| DataError::UnknownLabel {
                kind,
                label: label.to_string(),
                record: record.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub part_id: usize,
    pub bbox: BBox,
    pub state_id: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Person {
    pub bbox: BBox,
    pub score: Option<f64>,
    /// Instance-level action distribution (predictions only).
    pub action_scores: Option<Vec<f64>>,
    pub parts: Vec<Part>,
}

impl Person {
    pub fn new(bbox: BBox) -> Self {
        Person {
            bbox,
            score: None,
            action_scores: None,
            parts: Vec::new(),
        }
    }

    /// Detection score; ground-truth persons count as certain.
    pub fn confidence(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub persons: Vec<Person>,
}

/// One annotated (or predicted) video.
///
/// Every frame carries the video's action, so the frame-level action label is
/// not stored separately: see [`VideoAnnotation::frame_action_id`].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub action_id: usize,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Frame>,
    /// Video-level action distribution (predictions only).
    pub action_scores: Option<Vec<f64>>,
}

/// Predictions use the annotation schema with scores filled in.
pub type PredictionRecord = VideoAnnotation;

impl VideoAnnotation {
    pub fn frame_action_id(&self, _frame: usize) -> usize {
        self.action_id
    }

    pub fn frame_bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }

    /// Predicted action: argmax of the score vector (lowest index on ties),
    /// falling back to `action_id` when no scores are attached.
    pub fn predicted_action(&self) -> usize {
        match &self.action_scores {
            Some(scores) if !scores.is_empty() => argmax(scores),
            _ => self.action_id,
        }
    }

    pub fn frame(&self, index: usize) -> Option<&Frame> {
        self.frames
            .binary_search_by_key(&index, |f| f.index)
            .ok()
            .map(|i| &self.frames[i])
    }

    /// Checks the ground-truth invariants against `config`.
    pub fn validate(&self, config: &DatasetConfig) -> Result<()> {
        let rec = |frame: Option<usize>| match frame {
            Some(f) => format!("video {:?} frame {f}", self.video_id),
            None => format!("video {:?}", self.video_id),
        };
        if self.action_id >= config.num_actions() {
            return Err(DataError::schema(rec(None), "action index out of range"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(DataError::schema(rec(None), "frame size must be positive"));
        }
        if self.frames.is_empty() {
            return Err(DataError::schema(rec(None), "video has no frames"));
        }
        if let Some(scores) = &self.action_scores {
            check_distribution(scores, config.num_actions(), &rec(None))?;
        }
        let bounds = self.frame_bounds();
        let mut prev: Option<usize> = None;
        for frame in &self.frames {
            let r = rec(Some(frame.index));
            if prev.is_some_and(|p| frame.index <= p) {
                return Err(DataError::schema(r, "frame indices must be strictly increasing"));
            }
            prev = Some(frame.index);
            for person in &frame.persons {
                if !person.bbox.is_valid() {
                    return Err(DataError::schema(r, "degenerate person box"));
                }
                if !bounds.contains_box(&person.bbox, BOX_TOL) {
                    return Err(DataError::schema(r, "person box outside frame"));
                }
                check_score(person.score, &r)?;
                if let Some(scores) = &person.action_scores {
                    check_distribution(scores, config.num_actions(), &r)?;
                }
                let mut seen = vec![false; config.num_parts()];
                for part in &person.parts {
                    if part.part_id >= config.num_parts() {
                        return Err(DataError::schema(r, "part index out of range"));
                    }
                    if part.state_id >= config.num_states() {
                        return Err(DataError::schema(r, "state index out of range"));
                    }
                    if std::mem::replace(&mut seen[part.part_id], true) {
                        return Err(DataError::schema(
                            r,
                            format!("part {:?} annotated twice", config.parts[part.part_id]),
                        ));
                    }
                    if !part.bbox.is_valid() {
                        return Err(DataError::schema(r, "degenerate part box"));
                    }
                    if !person.bbox.contains_box(&part.bbox, BOX_TOL) {
                        return Err(DataError::schema(r, "part box outside its person box"));
                    }
                    check_score(part.score, &r)?;
                }
            }
        }
        Ok(())
    }

    /// Ground-truth invariants plus mandatory scores.
    pub fn validate_prediction(&self, config: &DatasetConfig) -> Result<()> {
        self.validate(config)?;
        let r = format!("video {:?}", self.video_id);
        if self.action_scores.is_none() {
            return Err(DataError::schema(r, "prediction lacks action_scores"));
        }
        for frame in &self.frames {
            for person in &frame.persons {
                if person.score.is_none() {
                    return Err(DataError::schema(&r, "prediction person lacks score"));
                }
                if person.parts.iter().any(|p| p.score.is_none()) {
                    return Err(DataError::schema(&r, "prediction part lacks score"));
                }
            }
        }
        Ok(())
    }
}

fn check_score(score: Option<f64>, record: &str) -> Result<()> {
    match score {
        Some(s) if !(0.0..=1.0).contains(&s) => {
            Err(DataError::schema(record, format!("score {s} outside [0,1]")))
        }
        _ => Ok(()),
    }
}

fn check_distribution(scores: &[f64], len: usize, record: &str) -> Result<()> {
    if scores.len() != len {
        return Err(DataError::schema(
            record,
            format!("action_scores has {} entries, expected {len}", scores.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(DataError::schema(record, "action_scores must be non-negative"));
    }
    let sum: f64 = scores.iter().sum();
    if (sum - 1.0).abs() > SCORE_SUM_TOL {
        return Err(DataError::schema(record, format!("action_scores sum to {sum}")));
    }
    Ok(())
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<DatasetConfig>,
    videos: Vec<VideoWire>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoWire {
    video_id: String,
    action: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_scores: Option<Vec<f64>>,
    frames: Vec<FrameWire>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameWire {
    idx: usize,
    persons: Vec<PersonWire>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PersonWire {
    #[serde(rename = "box")]
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_scores: Option<Vec<f64>>,
    parts: Vec<PartWire>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartWire {
    part: String,
    #[serde(rename = "box")]
    bbox: BBox,
    state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

impl VideoWire {
    fn resolve(self, config: &DatasetConfig) -> Result<VideoAnnotation> {
        let rec = format!("video {:?}", self.video_id);
        let action_id = config.resolve("action", &self.action, &rec)?;
        let mut frames = Vec::with_capacity(self.frames.len());
        for f in self.frames {
            let frec = format!("{rec} frame {}", f.idx);
            let mut persons = Vec::with_capacity(f.persons.len());
            for p in f.persons {
                let mut parts = Vec::with_capacity(p.parts.len());
                for part in p.parts {
                    parts.push(Part {
                        part_id: config.resolve("part", &part.part, &frec)?,
                        bbox: part.bbox,
                        state_id: config.resolve("state", &part.state, &frec)?,
                        score: part.score,
                    });
                }
                persons.push(Person {
                    bbox: p.bbox,
                    score: p.score,
                    action_scores: p.action_scores,
                    parts,
                });
            }
            frames.push(Frame {
                index: f.idx,
                persons,
            });
        }
        Ok(VideoAnnotation {
            video_id: self.video_id,
            action_id,
            width: self.width,
            height: self.height,
            frames,
            action_scores: self.action_scores,
        })
    }

    fn from_record(v: &VideoAnnotation, config: &DatasetConfig) -> Self {
        VideoWire {
            video_id: v.video_id.clone(),
            action: config.actions[v.action_id].clone(),
            width: v.width,
            height: v.height,
            action_scores: v.action_scores.clone(),
            frames: v
                .frames
                .iter()
                .map(|f| FrameWire {
                    idx: f.index,
                    persons: f
                        .persons
                        .iter()
                        .map(|p| PersonWire {
                            bbox: p.bbox,
                            score: p.score,
                            action_scores: p.action_scores.clone(),
                            parts: p
                                .parts
                                .iter()
                                .map(|part| PartWire {
                                    part: config.parts[part.part_id].clone(),
                                    bbox: part.bbox,
                                    state: config.states[part.state_id].clone(),
                                    score: part.score,
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Parses a dataset document, resolving labels against `config`.
pub fn parse_dataset(text: &str, config: &DatasetConfig) -> Result<Vec<VideoAnnotation>> {
    config.validate()?;
    let file: DatasetFile = serde_json::from_str(text)?;
    resolve_file(file, config)
}

fn resolve_file(file: DatasetFile, config: &DatasetConfig) -> Result<Vec<VideoAnnotation>> {
    let mut seen = HashSet::new();
    let mut videos = Vec::with_capacity(file.videos.len());
    for wire in file.videos {
        if !seen.insert(wire.video_id.clone()) {
            return Err(DataError::schema(
                format!("video {:?}", wire.video_id),
                "duplicate video_id",
            ));
        }
        let video = wire.resolve(config)?;
        video.validate(config)?;
        videos.push(video);
    }
    Ok(videos)
}

/// Loads a dataset file, resolving labels against `config`.
pub fn load_dataset(path: &Path, config: &DatasetConfig) -> Result<Vec<VideoAnnotation>> {
    parse_dataset(&read(path)?, config)
}

/// Loads a dataset file using the config block embedded in it.
pub fn load_dataset_with_config(path: &Path) -> Result<(DatasetConfig, Vec<VideoAnnotation>)> {
    let file: DatasetFile = serde_json::from_str(&read(path)?)?;
    let config = file
        .config
        .clone()
        .ok_or_else(|| DataError::schema(path.display().to_string(), "missing config block"))?;
    config.validate()?;
    let videos = resolve_file(file, &config)?;
    Ok((config, videos))
}

/// Loads a prediction file: same schema, scores mandatory.
pub fn load_predictions(path: &Path, config: &DatasetConfig) -> Result<Vec<PredictionRecord>> {
    let videos = load_dataset(path, config)?;
    for v in &videos {
        v.validate_prediction(config)?;
    }
    Ok(videos)
}

pub fn dataset_to_json(videos: &[VideoAnnotation], config: &DatasetConfig) -> Result<String> {
    let file = DatasetFile {
        config: Some(config.clone()),
        videos: videos
            .iter()
            .map(|v| VideoWire::from_record(v, config))
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_dataset(path: &Path, videos: &[VideoAnnotation], config: &DatasetConfig) -> Result<()> {
    for v in videos {
        v.validate(config)?;
    }
    write(path, &dataset_to_json(videos, config)?)
}

/// Validates every record as a prediction before writing.
pub fn save_predictions(
    path: &Path,
    videos: &[PredictionRecord],
    config: &DatasetConfig,
) -> Result<()> {
    for v in videos {
        v.validate_prediction(config)?;
    }
    write(path, &dataset_to_json(videos, config)?)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> DatasetConfig {
        DatasetConfig::new(
            vec!["wave".into(), "clap".into()],
            vec!["head".into()],
            vec!["none".into(), "raised".into()],
        )
        .unwrap()
    }

    const MINIMAL: &str = r#"{"videos":[{"video_id":"v0","action":"clap","width":64,"height":48,
        "frames":[{"idx":0,"persons":[{"box":[2,3,30,40],
        "parts":[{"part":"head","box":[10,3,20,12],"state":"raised"}]}]}]}]}"#;

    #[test]
    fn empty_video_list_is_empty_dataset() {
        let videos = parse_dataset(r#"{"videos":[]}"#, &config()).unwrap();
        assert!(videos.is_empty());
    }

    #[test]
    fn minimal_record_resolves_labels() {
        let videos = parse_dataset(MINIMAL, &config()).unwrap();
        assert_eq!(videos.len(), 1);
        let v = &videos[0];
        assert_eq!(v.action_id, 1);
        assert_eq!(v.frame_action_id(0), 1);
        let part = &v.frames[0].persons[0].parts[0];
        assert_eq!((part.part_id, part.state_id), (0, 1));
        v.validate(&config()).unwrap();
    }

    #[test]
    fn unknown_label_is_named() {
        let text = MINIMAL.replace("\"raised\"", "\"sitting\"");
        match parse_dataset(&text, &config()) {
            Err(DataError::UnknownLabel { kind, label, .. }) => {
                assert_eq!(kind, "state");
                assert_eq!(label, "sitting");
            }
            other => panic!("expected unknown label, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\"videos\": [\n  {\"video_id\": }\n]}";
        match parse_dataset(text, &config()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn part_outside_person_is_rejected() {
        let text = MINIMAL.replace("[10,3,20,12]", "[10,1,20,12]");
        assert!(matches!(
            parse_dataset(&text, &config()),
            Err(DataError::Schema { .. })
        ));
    }

    #[test]
    fn non_increasing_frames_are_rejected() {
        let mut v = parse_dataset(MINIMAL, &config()).unwrap().remove(0);
        v.frames.push(v.frames[0].clone());
        assert!(v.validate(&config()).is_err());
    }

    #[test]
    fn prediction_requires_scores() {
        let v = parse_dataset(MINIMAL, &config()).unwrap().remove(0);
        assert!(v.validate_prediction(&config()).is_err());
        let mut p = v.clone();
        p.action_scores = Some(vec![0.25, 0.75]);
        p.frames[0].persons[0].score = Some(0.9);
        p.frames[0].persons[0].parts[0].score = Some(0.8);
        p.validate_prediction(&config()).unwrap();
        p.action_scores = Some(vec![0.25, 0.70]);
        assert!(p.validate_prediction(&config()).is_err());
    }

    #[test]
    fn config_needs_two_actions() {
        assert!(DatasetConfig::new(vec!["a".into()], vec!["p".into()], vec!["s".into(), "t".into()]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
