//! On-disk formats for point clouds and depth rasters.

pub mod depth;
pub mod ply;

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed PLY: {0}")]
    Ply(String),
    #[error("malformed depth raster: {0}")]
    Depth(String),
    #[error("invalid sidecar JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Prior(#[from] crate::prior::PriorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
