//! File formats and pipeline drivers around `apt_core`.

pub mod annotations;
pub mod categories;
pub mod config;
pub mod detections;
pub mod embeddings;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{Result, ToolError};
