//! Per-voxel provenance tags for the scene grid.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::latent::{check_window, LatentError, Voxel};

/// What is known about a scene voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum VoxelTag {
    #[default]
    Empty,
    /// Occupied by the depth prior; no features yet.
    Prior,
    /// Written by fusion of a completed region.
    Generated,
    /// Part of the landmark instance with this id.
    Landmark(u32),
}

impl VoxelTag {
    pub fn is_occupied(self) -> bool {
        !matches!(self, VoxelTag::Empty)
    }
}

/// Dense tag grid, x-fastest layout.
///
/// Landmarks additionally carry a frozen flag once their features have been
/// written by a region that contained them completely.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    dims: [u32; 3],
    tags: Vec<VoxelTag>,
    frozen_landmarks: BTreeSet<u32>,
}

#[derive(Debug, Error)]
pub enum StateError {
    #[error("bad state file magic")]
    BadMagic,
    #[error("unsupported state file version {0}")]
    VersionMismatch(u32),
    #[error("state file is truncated")]
    TruncatedFile,
    #[error("invalid tag byte {0}")]
    BadTag(u8),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SceneState {
    pub fn new(resolution: u32) -> Self {
        Self::with_dims([resolution; 3])
    }

    pub fn with_dims(dims: [u32; 3]) -> Self {
        let n = dims.iter().map(|&d| d as usize).product();
        Self {
            dims,
            tags: vec![VoxelTag::Empty; n],
            frozen_landmarks: BTreeSet::new(),
        }
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    /// Side length of a cubic grid (the largest dimension otherwise).
    pub fn resolution(&self) -> u32 {
        self.dims.iter().copied().max().unwrap_or(0)
    }

    pub fn tags(&self) -> &[VoxelTag] {
        &self.tags
    }

    pub fn get(&self, v: Voxel) -> VoxelTag {
        self.tags[v.linear_index(self.dims)]
    }

    pub fn set(&mut self, v: Voxel, tag: VoxelTag) {
        let i = v.linear_index(self.dims);
        self.tags[i] = tag;
    }

    pub fn contains(&self, v: Voxel) -> bool {
        v.x < self.dims[0] && v.y < self.dims[1] && v.z < self.dims[2]
    }

    pub fn is_frozen(&self, landmark: u32) -> bool {
        self.frozen_landmarks.contains(&landmark)
    }

    pub fn freeze(&mut self, landmark: u32) {
        self.frozen_landmarks.insert(landmark);
    }

    pub fn frozen_landmarks(&self) -> &BTreeSet<u32> {
        &self.frozen_landmarks
    }

    /// Distinct landmark ids present in the grid.
    pub fn landmark_ids(&self) -> BTreeSet<u32> {
        self.tags
            .iter()
            .filter_map(|t| match t {
                VoxelTag::Landmark(id) => Some(*id),
                _ => None,
            })
            .collect()
    }

    pub fn count(&self, pred: impl Fn(VoxelTag) -> bool) -> usize {
        self.tags.iter().filter(|&&t| pred(t)).count()
    }

    /// Sub-grid with the window's own dimensions. Frozen flags are carried over.
    pub fn window(&self, origin: [u32; 3], shape: [u32; 3]) -> Result<Self, LatentError> {
        let resolution = self.resolution();
        check_window(origin, shape, resolution)?;
        let mut out = Self::with_dims(shape);
        out.frozen_landmarks = self.frozen_landmarks.clone();
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                let src =
                    Voxel::new(origin[0], origin[1] + y, origin[2] + z).linear_index(self.dims);
                let dst = Voxel::new(0, y, z).linear_index(shape);
                out.tags[dst..dst + shape[0] as usize]
                    .copy_from_slice(&self.tags[src..src + shape[0] as usize]);
            }
        }
        Ok(out)
    }

    /// Binary layout: `"SSTA"`, u32 version=1, 3 x u32 dims, one tag byte per
    /// cell (0 empty, 1 prior, 2 generated, 3 landmark), u64 landmark-cell
    /// count followed by (u64 cell index, u32 id) pairs, u32 frozen count and
    /// the frozen ids.
    pub fn write<W: Write>(&self, mut sink: W) -> Result<(), StateError> {
        let mut buf = Vec::with_capacity(self.tags.len() + 64);
        buf.extend_from_slice(b"SSTA");
        buf.extend_from_slice(&1u32.to_le_bytes());
        for d in self.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        let mut landmarks = Vec::new();
        for (i, t) in self.tags.iter().enumerate() {
            buf.push(match t {
                VoxelTag::Empty => 0,
                VoxelTag::Prior => 1,
                VoxelTag::Generated => 2,
                VoxelTag::Landmark(id) => {
                    landmarks.push((i as u64, *id));
                    3
                }
            });
        }
        buf.extend_from_slice(&(landmarks.len() as u64).to_le_bytes());
        for (i, id) in landmarks {
            buf.extend_from_slice(&i.to_le_bytes());
            buf.extend_from_slice(&id.to_le_bytes());
        }
        buf.extend_from_slice(&(self.frozen_landmarks.len() as u32).to_le_bytes());
        for id in &self.frozen_landmarks {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        sink.write_all(&buf)?;
        sink.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut source: R) -> Result<Self, StateError> {
        let mut all = Vec::new();
        source.read_to_end(&mut all)?;
        let mut cur = Cursor { buf: &all, pos: 0 };
        if cur.take(4)? != b"SSTA" {
            return Err(StateError::BadMagic);
        }
        let version = cur.u32()?;
        if version != 1 {
            return Err(StateError::VersionMismatch(version));
        }
        let dims = [cur.u32()?, cur.u32()?, cur.u32()?];
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let n = n.ok_or(StateError::TruncatedFile)?;
        let raw = cur.take(n)?;
        let mut tags = Vec::with_capacity(n);
        for &b in raw {
            tags.push(match b {
                0 => VoxelTag::Empty,
                1 => VoxelTag::Prior,
                2 => VoxelTag::Generated,
                3 => VoxelTag::Landmark(u32::MAX),
                other => return Err(StateError::BadTag(other)),
            });
        }
        let count = cur.u64()?;
        for _ in 0..count {
            let i = cur.u64()? as usize;
            let id = cur.u32()?;
            match tags.get_mut(i) {
                Some(t @ VoxelTag::Landmark(_)) => *t = VoxelTag::Landmark(id),
                _ => return Err(StateError::BadTag(3)),
            }
        }
        if tags.contains(&VoxelTag::Landmark(u32::MAX)) {
            return Err(StateError::BadTag(3));
        }
        let frozen = cur.u32()?;
        let mut frozen_landmarks = BTreeSet::new();
        for _ in 0..frozen {
            frozen_landmarks.insert(cur.u32()?);
        }
        Ok(Self {
            dims,
            tags,
            frozen_landmarks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StateError> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, StateError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StateError> {
        let end = self.pos.checked_add(n).ok_or(StateError::TruncatedFile)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(StateError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, StateError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StateError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
