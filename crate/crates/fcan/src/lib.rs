//! File formats, the end-to-end adaptation pipeline and the `fcan` command
//! line tool, on top of `fcan-core`.
//!
//! * [`netpbm`] and [`fct`]: PPM/PGM images and FCT1 tensor blobs.
//! * [`checkpoint`]: model, discriminator and domain-style directories.
//! * [`dataset`]: synthetic data splits on disk.
//! * [`config`] and [`pipeline`]: the JSON pipeline config and the benchmark
//!   runner behind `fcan ablate` and the acceptance suite.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod fct;
pub mod netpbm;
pub mod pipeline;
pub mod report;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use config::PipelineConfig;
pub use error::{AppError, Result, StageExt};

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::format(path, e.to_string()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}
