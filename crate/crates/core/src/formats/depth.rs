//! Depth raster files: raw little-endian `f32` samples, row-major, plus a
//! JSON sidecar
//!
//! ```json
//! {"width": 640, "height": 480, "fx": 500, "fy": 500, "cx": 320, "cy": 240,
//!  "depth_scale": 1.0, "valid_mask_path": "mask.bin", "labels_path": "labels.bin"}
//! ```
//!
//! Depth in meters is `raw * depth_scale`. The optional valid mask holds one
//! byte per pixel (non-zero = valid); without it a pixel is valid when its
//! depth is finite and positive. The optional label raster holds one
//! little-endian `i32` per pixel (`-1` background, `>= 0` landmark id).
//! Relative paths resolve against the sidecar's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::FormatError;
use crate::prior::{DepthRaster, Intrinsics, PointLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "one")]
    pub depth_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    /// Depth samples; defaults to the sidecar path with a `.bin` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

/// A raster together with its per-pixel landmark labels, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthInput {
    pub raster: DepthRaster,
    pub labels: Option<Vec<PointLabel>>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_f32s(path: &Path, n: usize) -> Result<Vec<f32>, FormatError> {
    let bytes = fs::read(path)?;
    if bytes.len() != n * 4 {
        return Err(FormatError::Depth(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            n * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn load_depth(sidecar_path: &Path) -> Result<DepthInput, FormatError> {
    let meta: DepthSidecar = serde_json::from_slice(&fs::read(sidecar_path)?)?;
    let base = sidecar_path.parent().unwrap_or(Path::new("."));
    let n = meta.width * meta.height;
    let depth_path = match &meta.depth_path {
        Some(p) => resolve(base, p),
        None => sidecar_path.with_extension("bin"),
    };
    let depth: Vec<f32> = read_f32s(&depth_path, n)?
        .into_iter()
        .map(|d| (d as f64 * meta.depth_scale) as f32)
        .collect();
    let intrinsics = Intrinsics {
        fx: meta.fx,
        fy: meta.fy,
        cx: meta.cx,
        cy: meta.cy,
    };
    let raster = match &meta.valid_mask_path {
        Some(p) => {
            let mask = fs::read(resolve(base, p))?;
            if mask.len() != n {
                return Err(FormatError::Depth(format!(
                    "valid mask holds {} bytes, expected {n}",
                    mask.len()
                )));
            }
            let valid = mask
                .iter()
                .zip(&depth)
                .map(|(&m, &d)| m != 0 && d.is_finite() && d > 0.0)
                .collect();
            DepthRaster::new(meta.width, meta.height, depth, valid, intrinsics)?
        }
        None => DepthRaster::from_depth(meta.width, meta.height, depth, intrinsics)?,
    };
    let labels = match &meta.labels_path {
        Some(p) => {
            let bytes = fs::read(resolve(base, p))?;
            if bytes.len() != n * 4 {
                return Err(FormatError::Depth(format!(
                    "label raster holds {} bytes, expected {}",
                    bytes.len(),
                    n * 4
                )));
            }
            Some(
                bytes
                    .chunks_exact(4)
                    .map(|c| {
                        PointLabel::from_code(i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64)
                    })
                    .collect(),
            )
        }
        None => None,
    };
    Ok(DepthInput { raster, labels })
}

/// Writes `<stem>.json` and `<stem>.bin` (plus `<stem>.labels.bin` when labels
/// are given) and returns the sidecar path.
pub fn save_depth(input: &DepthInput, dir: &Path, stem: &str) -> Result<PathBuf, FormatError> {
    let r = &input.raster;
    let k = r.intrinsics();
    let mut bytes = Vec::with_capacity(r.depth().len() * 4);
    for (d, v) in r.depth().iter().zip(r.valid()) {
        let d = if *v { *d } else { 0.0 };
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    let labels_path = match &input.labels {
        Some(labels) => {
            let name = format!("{stem}.labels.bin");
            let mut bytes = Vec::with_capacity(labels.len() * 4);
            for l in labels {
                bytes.extend_from_slice(&(l.code() as i32).to_le_bytes());
            }
            fs::write(dir.join(&name), bytes)?;
            Some(PathBuf::from(name))
        }
        None => None,
    };
    let meta = DepthSidecar {
        width: r.width(),
        height: r.height(),
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        depth_scale: 1.0,
        valid_mask_path: None,
        labels_path,
        depth_path: None,
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&meta)?)?;
    Ok(path)
}
