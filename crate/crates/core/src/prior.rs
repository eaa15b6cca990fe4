//! Scene prior from a depth raster: unprojection, normalization into the unit
//! cube, voxelization at the scene resolution and zero-feature initialization.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{LatentError, StructuredLatent, Voxel};
use crate::scene_state::{SceneState, VoxelTag};

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("depth raster has no valid pixels")]
    NoValidPixels,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("point {0} has a non-finite coordinate")]
    NonFinitePoint(usize),
    #[error("{points} points but {labels} labels")]
    LabelCount { points: usize, labels: usize },
    #[error(transparent)]
    Latent(#[from] LatentError),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Pixel coordinate of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Metric depth image. Pixel `(u, v)` lives at index `u + width * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRaster {
    width: usize,
    height: usize,
    depth: Vec<f32>,
    valid: Vec<bool>,
    intrinsics: Intrinsics,
}

impl DepthRaster {
    pub fn new(
        width: usize,
        height: usize,
        depth: Vec<f32>,
        valid: Vec<bool>,
        intrinsics: Intrinsics,
    ) -> Result<Self, PriorError> {
        let n = width * height;
        if n == 0 {
            return Err(PriorError::InvalidRaster("zero-sized raster".into()));
        }
        if depth.len() != n || valid.len() != n {
            return Err(PriorError::InvalidRaster(format!(
                "{}x{} raster with {} depths and {} mask entries",
                width,
                height,
                depth.len(),
                valid.len()
            )));
        }
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(PriorError::InvalidRaster(
                "focal lengths must be positive".into(),
            ));
        }
        if let Some(i) = (0..n).find(|&i| valid[i] && !(depth[i].is_finite() && depth[i] > 0.0)) {
            return Err(PriorError::InvalidRaster(format!(
                "pixel {} is marked valid with depth {}",
                i, depth[i]
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
            valid,
            intrinsics,
        })
    }

    /// Validity derived from the depth itself (finite and positive).
    pub fn from_depth(
        width: usize,
        height: usize,
        depth: Vec<f32>,
        intrinsics: Intrinsics,
    ) -> Result<Self, PriorError> {
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self::new(width, height, depth, valid, intrinsics)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.intrinsics
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointLabel {
    Background,
    Foreground(u32),
}

impl PointLabel {
    /// `-1` for background, the landmark id otherwise.
    pub fn from_code(code: i64) -> Self {
        if code < 0 {
            PointLabel::Background
        } else {
            PointLabel::Foreground(code as u32)
        }
    }

    pub fn code(self) -> i64 {
        match self {
            PointLabel::Background => -1,
            PointLabel::Foreground(id) => id as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledPointCloud {
    points: Vec<Vector3<f64>>,
    labels: Vec<PointLabel>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<Vector3<f64>>, labels: Vec<PointLabel>) -> Result<Self, PriorError> {
        if points.len() != labels.len() {
            return Err(PriorError::LabelCount {
                points: points.len(),
                labels: labels.len(),
            });
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(PriorError::NonFinitePoint(i));
        }
        Ok(Self { points, labels })
    }

    pub fn background(points: Vec<Vector3<f64>>) -> Result<Self, PriorError> {
        let labels = vec![PointLabel::Background; points.len()];
        Self::new(points, labels)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn labels(&self) -> &[PointLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn set_label(&mut self, i: usize, label: PointLabel) {
        self.labels[i] = label;
    }

    pub fn into_parts(self) -> (Vec<Vector3<f64>>, Vec<PointLabel>) {
        (self.points, self.labels)
    }
}

/// Isotropic map `p -> scale * p + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            offset: [0.0; 3],
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p * self.scale + Vector3::from(self.offset)
    }

    pub fn invert(&self, q: &Vector3<f64>) -> Vector3<f64> {
        (q - Vector3::from(self.offset)) / self.scale
    }
}

/// Camera-frame points for every valid pixel, all labeled background.
pub fn unproject(raster: &DepthRaster) -> Result<LabeledPointCloud, PriorError> {
    let k = raster.intrinsics;
    let mut points = Vec::new();
    for v in 0..raster.height {
        for u in 0..raster.width {
            let i = u + raster.width * v;
            if !raster.valid[i] {
                continue;
            }
            let d = raster.depth[i] as f64;
            points.push(Vector3::new(
                d * (u as f64 - k.cx) / k.fx,
                d * (v as f64 - k.cy) / k.fy,
                d,
            ));
        }
    }
    if points.is_empty() {
        return Err(PriorError::NoValidPixels);
    }
    LabeledPointCloud::background(points)
}

/// Like [`unproject`], carrying a per-pixel label raster over to the points.
pub fn unproject_labeled(
    raster: &DepthRaster,
    labels: &[PointLabel],
) -> Result<LabeledPointCloud, PriorError> {
    let n = raster.width * raster.height;
    if labels.len() != n {
        return Err(PriorError::LabelCount {
            points: n,
            labels: labels.len(),
        });
    }
    let mut cloud = unproject(raster)?;
    let valid_labels = labels
        .iter()
        .zip(&raster.valid)
        .filter(|(_, &ok)| ok)
        .map(|(l, _)| *l);
    for (i, l) in valid_labels.enumerate() {
        cloud.labels[i] = l;
    }
    Ok(cloud)
}

/// Scales the cloud's bounding box into the unit cube: the longest axis spans
/// exactly `[0, 1]` and shorter axes are centered. A cloud of coincident
/// points lands at `(0.5, 0.5, 0.5)`.
///
/// Points are mapped as `(p - lo) * scale + pad` rather than through the
/// folded transform, so translating or power-of-two scaling an exactly
/// representable cloud gives bit-identical output.
pub fn normalize(
    cloud: &LabeledPointCloud,
) -> Result<(LabeledPointCloud, NormalizationTransform), PriorError> {
    let (lo, scale, pad) = bbox_fit(cloud.points())?;
    let points = cloud
        .points
        .iter()
        .map(|p| (p - lo) * scale + pad)
        .collect();
    Ok((
        LabeledPointCloud {
            points,
            labels: cloud.labels.clone(),
        },
        folded(lo, scale, pad),
    ))
}

pub fn fit_normalization(points: &[Vector3<f64>]) -> Result<NormalizationTransform, PriorError> {
    let (lo, scale, pad) = bbox_fit(points)?;
    Ok(folded(lo, scale, pad))
}

fn bbox_fit(points: &[Vector3<f64>]) -> Result<(Vector3<f64>, f64, Vector3<f64>), PriorError> {
    let first = points.first().ok_or(PriorError::EmptyCloud)?;
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    let longest = extent.max();
    let scale = if longest > 0.0 { 1.0 / longest } else { 1.0 };
    let pad = extent.map(|e| (1.0 - e * scale) / 2.0);
    Ok((lo, scale, pad))
}

fn folded(lo: Vector3<f64>, scale: f64, pad: Vector3<f64>) -> NormalizationTransform {
    let offset = pad - lo * scale;
    NormalizationTransform {
        scale,
        offset: [offset.x, offset.y, offset.z],
    }
}

/// Per-axis `floor(c * M)` clamped into `[0, M-1]`.
pub fn voxel_of(p: &Vector3<f64>, resolution: u32) -> Voxel {
    let bin = |c: f64| -> u32 {
        let b = (c * resolution as f64).floor();
        b.clamp(0.0, (resolution - 1) as f64) as u32
    };
    Voxel::new(bin(p.x), bin(p.y), bin(p.z))
}

/// Bins a normalized cloud into an `M³` grid.
///
/// Any foreground point makes its voxel a landmark voxel, with the landmark
/// id chosen by majority (ties go to the lowest id). Voxels holding only
/// background points are tagged as prior.
pub fn voxelize(cloud: &LabeledPointCloud, resolution: u32) -> (Vec<Voxel>, SceneState) {
    let mut bins: BTreeMap<Voxel, BTreeMap<u32, usize>> = BTreeMap::new();
    for (p, label) in cloud.points.iter().zip(&cloud.labels) {
        let counts = bins.entry(voxel_of(p, resolution)).or_default();
        if let PointLabel::Foreground(id) = label {
            *counts.entry(*id).or_default() += 1;
        }
    }
    let mut state = SceneState::new(resolution);
    let mut positions = Vec::with_capacity(bins.len());
    for (voxel, counts) in bins {
        // max_by_key keeps the last maximum, so walk ids in descending order
        let tag = match counts.iter().rev().max_by_key(|(_, &n)| n) {
            Some((&id, _)) => VoxelTag::Landmark(id),
            None => VoxelTag::Prior,
        };
        state.set(voxel, tag);
        positions.push(voxel);
    }
    (positions, state)
}

/// The initial scene latent: given positions with all-zero features.
pub fn init_scene_latent(
    positions: Vec<Voxel>,
    resolution: u32,
    channels: usize,
) -> Result<StructuredLatent, PriorError> {
    Ok(StructuredLatent::zeros(resolution, channels, positions)?)
}
