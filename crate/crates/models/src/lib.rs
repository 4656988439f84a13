//! Neural components of the pipeline: person detection with action heads,
//! part and state parsing, and video-level action fusion.

pub mod action_parser;
pub mod boxes;
pub mod detector;
pub mod error;
pub mod heatmap;
pub mod loss;
pub mod nn;
pub mod params;
pub mod part_parser;
pub mod roi;

pub use error::{ModelError, Result};
pub use params::{Init, ParamStore, Scope};
