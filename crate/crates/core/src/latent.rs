//! Structured latents: sparse sets of active voxels paired with feature rows.
//!
//! Every [`StructuredLatent`] is canonical: positions are unique, inside the
//! `K³` grid, and sorted lexicographically by `(x, y, z)` with feature rows
//! permuted in lockstep. Dense grids use a row-major layout with `x` fastest,
//! i.e. cell index `x + K * (y + K * z)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("resolution and channel count must be positive (got K={resolution}, C={channels})")]
    ZeroDimension { resolution: u32, channels: usize },
    #[error("feature buffer holds {got} values, expected {expected} ({rows} rows x {channels} channels)")]
    FeatureCount {
        got: usize,
        expected: usize,
        rows: usize,
        channels: usize,
    },
    #[error("non-finite feature value at row {row}, channel {channel}")]
    NonFinite { row: usize, channel: usize },
    #[error("voxel {voxel} is outside the {resolution}^3 grid")]
    OutOfBounds { voxel: Voxel, resolution: u32 },
    #[error("voxel {0} appears more than once")]
    DuplicatePosition(Voxel),
    #[error(
        "window at {origin:?} with shape {shape:?} does not fit inside the {resolution}^3 grid"
    )]
    WindowOutOfGrid {
        origin: [u32; 3],
        shape: [u32; 3],
        resolution: u32,
    },
    #[error("dense grid has {got} cells, expected {expected}")]
    CellCount { got: usize, expected: usize },
}

/// Integer voxel coordinate. Ordering is lexicographic by `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Voxel {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Voxel {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [u32; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [u32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Componentwise `self + origin`.
    pub fn offset(self, origin: [u32; 3]) -> Self {
        Self::new(self.x + origin[0], self.y + origin[1], self.z + origin[2])
    }

    /// True when `origin <= self < origin + shape` on every axis.
    pub fn within(self, origin: [u32; 3], shape: [u32; 3]) -> bool {
        self.to_array()
            .iter()
            .zip(origin.iter().zip(shape.iter()))
            .all(|(&p, (&o, &s))| p >= o && p - o < s)
    }

    /// Row-major, x-fastest index into a grid with the given dimensions.
    pub fn linear_index(self, dims: [u32; 3]) -> usize {
        self.x as usize + dims[0] as usize * (self.y as usize + dims[1] as usize * self.z as usize)
    }

    pub fn from_linear_index(index: usize, dims: [u32; 3]) -> Self {
        let nx = dims[0] as usize;
        let ny = dims[1] as usize;
        Self::new(
            (index % nx) as u32,
            ((index / nx) % ny) as u32,
            (index / (nx * ny)) as u32,
        )
    }
}

impl fmt::Display for Voxel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Sparse voxel positions with a `C`-channel feature row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredLatent {
    resolution: u32,
    channels: usize,
    positions: Vec<Voxel>,
    features: Vec<f32>,
}

impl StructuredLatent {
    /// Validates and canonicalizes: positions are sorted and the feature
    /// rows permuted with them. Rejects duplicates, out-of-grid voxels and
    /// non-finite features.
    pub fn new(
        resolution: u32,
        channels: usize,
        positions: Vec<Voxel>,
        features: Vec<f32>,
    ) -> Result<Self, LatentError> {
        if resolution == 0 || channels == 0 {
            return Err(LatentError::ZeroDimension {
                resolution,
                channels,
            });
        }
        let rows = positions.len();
        if features.len() != rows * channels {
            return Err(LatentError::FeatureCount {
                got: features.len(),
                expected: rows * channels,
                rows,
                channels,
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(LatentError::NonFinite {
                row: i / channels,
                channel: i % channels,
            });
        }
        if let Some(&voxel) = positions
            .iter()
            .find(|p| p.x >= resolution || p.y >= resolution || p.z >= resolution)
        {
            return Err(LatentError::OutOfBounds { voxel, resolution });
        }

        let sorted = positions.windows(2).all(|w| w[0] < w[1]);
        if sorted {
            return Ok(Self {
                resolution,
                channels,
                positions,
                features,
            });
        }

        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_unstable_by_key(|&i| positions[i]);
        if let Some(w) = order
            .windows(2)
            .find(|w| positions[w[0]] == positions[w[1]])
        {
            return Err(LatentError::DuplicatePosition(positions[w[0]]));
        }
        let mut sorted_features = Vec::with_capacity(features.len());
        for &i in &order {
            sorted_features.extend_from_slice(&features[i * channels..(i + 1) * channels]);
        }
        Ok(Self {
            resolution,
            channels,
            positions: order.iter().map(|&i| positions[i]).collect(),
            features: sorted_features,
        })
    }

    pub fn empty(resolution: u32, channels: usize) -> Result<Self, LatentError> {
        Self::new(resolution, channels, Vec::new(), Vec::new())
    }

    /// Builds a latent from positions only, with all-zero features.
    pub fn zeros(
        resolution: u32,
        channels: usize,
        positions: Vec<Voxel>,
    ) -> Result<Self, LatentError> {
        let features = vec![0.0; positions.len() * channels];
        Self::new(resolution, channels, positions, features)
    }

    /// Assembles from parts already known to satisfy every invariant.
    pub(crate) fn from_canonical_parts(
        resolution: u32,
        channels: usize,
        positions: Vec<Voxel>,
        features: Vec<f32>,
    ) -> Self {
        debug_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        debug_assert_eq!(features.len(), positions.len() * channels);
        Self {
            resolution,
            channels,
            positions,
            features,
        }
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Voxel] {
        &self.positions
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Row index of `voxel`, if active.
    pub fn find(&self, voxel: Voxel) -> Option<usize> {
        self.positions.binary_search(&voxel).ok()
    }

    pub fn into_parts(self) -> (Vec<Voxel>, Vec<f32>) {
        (self.positions, self.features)
    }

    /// `+1` at every active voxel, `-1` elsewhere.
    pub fn to_dense(&self) -> DenseOccupancy {
        let dims = [self.resolution; 3];
        let mut cells = vec![-1.0; dims.iter().map(|&d| d as usize).product()];
        for p in &self.positions {
            cells[p.linear_index(dims)] = 1.0;
        }
        DenseOccupancy {
            resolution: self.resolution,
            cells,
        }
    }

    /// Entries with `origin <= p < origin + shape`, rebased to the window.
    /// The result has resolution `max(shape)`.
    pub fn window(&self, origin: [u32; 3], shape: [u32; 3]) -> Result<Self, LatentError> {
        check_window(origin, shape, self.resolution)?;
        let mut positions = Vec::new();
        let mut features = Vec::new();
        // Positions are sorted by x first, so the x-slab is a contiguous run.
        let start = self.positions.partition_point(|p| p.x < origin[0]);
        let end = self
            .positions
            .partition_point(|p| p.x < origin[0] + shape[0]);
        for i in start..end {
            let p = self.positions[i];
            if p.within(origin, shape) {
                positions.push(Voxel::new(
                    p.x - origin[0],
                    p.y - origin[1],
                    p.z - origin[2],
                ));
                features.extend_from_slice(self.row(i));
            }
        }
        let resolution = shape.iter().copied().max().unwrap_or(1);
        Ok(Self::from_canonical_parts(
            resolution,
            self.channels,
            positions,
            features,
        ))
    }
}

pub(crate) fn check_window(
    origin: [u32; 3],
    shape: [u32; 3],
    resolution: u32,
) -> Result<(), LatentError> {
    let fits = shape.iter().all(|&s| s > 0)
        && origin
            .iter()
            .zip(shape.iter())
            .all(|(&o, &s)| o as u64 + s as u64 <= resolution as u64);
    if fits {
        Ok(())
    } else {
        Err(LatentError::WindowOutOfGrid {
            origin,
            shape,
            resolution,
        })
    }
}

/// Dense `K³` grid whose sign encodes occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOccupancy {
    resolution: u32,
    cells: Vec<f32>,
}

impl DenseOccupancy {
    pub fn new(resolution: u32, cells: Vec<f32>) -> Result<Self, LatentError> {
        let expected = (resolution as usize).pow(3);
        if resolution == 0 || cells.len() != expected {
            return Err(LatentError::CellCount {
                got: cells.len(),
                expected,
            });
        }
        if let Some(i) = cells.iter().position(|v| !v.is_finite()) {
            return Err(LatentError::NonFinite { row: i, channel: 0 });
        }
        Ok(Self { resolution, cells })
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn cells(&self) -> &[f32] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<f32> {
        self.cells
    }

    /// Canonically ordered voxels whose cell value exceeds `threshold`.
    pub fn active_positions(&self, threshold: f32) -> Vec<Voxel> {
        decode_active(&self.cells, [self.resolution; 3], threshold)
    }
}

/// Positions of a dense grid decoded with the default threshold of `0.0`.
pub fn from_dense(grid: &DenseOccupancy, threshold: f32) -> Vec<Voxel> {
    grid.active_positions(threshold)
}

pub(crate) fn decode_active(cells: &[f32], dims: [u32; 3], threshold: f32) -> Vec<Voxel> {
    let mut out: Vec<Voxel> = cells
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, _)| Voxel::from_linear_index(i, dims))
        .collect();
    out.sort_unstable();
    out
}
