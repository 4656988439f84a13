//! Configuration, training, prediction and reporting for the three-stage
//! part-level action parser.

pub mod archive;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod stages;
pub mod train;

pub use config::{PipelineConfig, Stage};
pub use error::{Result, RuntimeError};
