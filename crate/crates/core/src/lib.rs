//! Annotation schema, deterministic synthetic scenes, splits and metrics for
//! part-level action parsing.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod sampling;
pub mod synth;

pub use dataset::{
    load_dataset, load_dataset_with_config, load_predictions, save_dataset, save_predictions, DatasetConfig,
    Frame, Part, Person, PredictionRecord, VideoAnnotation,
};
pub use error::{DataError, Result};
pub use geometry::{iou, BBox};
