//! Writing completed regions back into the scene.
//!
//! Per region entry at scene voxel `q`:
//!
//! | state of `q`                          | effect                                  |
//! |---------------------------------------|-----------------------------------------|
//! | landmark, partial in this region      | entry discarded                         |
//! | landmark, already written (frozen)    | scene copy kept                         |
//! | landmark, first full containment      | features written, landmark then frozen  |
//! | generated                             | scene copy kept                         |
//! | empty or prior                        | features written, state -> generated    |
//!
//! No scene entry is ever removed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{check_window, LatentError, StructuredLatent, Voxel};
use crate::scene_state::{SceneState, VoxelTag};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("region at {origin:?} with extent {extent:?} does not fit a {resolution}^3 scene")]
    OriginOutOfGrid {
        origin: [u32; 3],
        extent: [u32; 3],
        resolution: u32,
    },
    #[error("region has {region} channels, scene has {scene}")]
    ChannelMismatch { scene: usize, region: usize },
    #[error("{} prior voxel(s) never received features, first {}", .0.len(), .0[0])]
    IncompleteScene(Vec<Voxel>),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

/// What one fusion did, entry by entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuseStats {
    pub written: usize,
    pub new_voxels: usize,
    pub kept_existing: usize,
    pub discarded_partial: usize,
}

/// Landmarks with voxels both inside and outside the region.
pub fn classify_partial_landmarks(
    origin: [u32; 3],
    patch_shape: [u32; 3],
    state: &SceneState,
) -> BTreeSet<u32> {
    let dims = state.dims();
    let mut inside = BTreeSet::new();
    let mut outside = BTreeSet::new();
    for (i, tag) in state.tags().iter().enumerate() {
        if let VoxelTag::Landmark(id) = *tag {
            if Voxel::from_linear_index(i, dims).within(origin, patch_shape) {
                inside.insert(id);
            } else {
                outside.insert(id);
            }
        }
    }
    inside.intersection(&outside).copied().collect()
}

/// Smallest box anchored at the origin holding every region entry.
fn region_extent(region: &StructuredLatent) -> [u32; 3] {
    let mut ext = [1u32; 3];
    for p in region.positions() {
        ext[0] = ext[0].max(p.x + 1);
        ext[1] = ext[1].max(p.y + 1);
        ext[2] = ext[2].max(p.z + 1);
    }
    ext
}

pub fn fuse_region(
    scene: &StructuredLatent,
    state: &SceneState,
    region: &StructuredLatent,
    origin: [u32; 3],
    partial_ids: &BTreeSet<u32>,
) -> Result<(StructuredLatent, SceneState, FuseStats), FusionError> {
    let extent = region_extent(region);
    if check_window(origin, extent, scene.resolution()).is_err() {
        return Err(FusionError::OriginOutOfGrid {
            origin,
            extent,
            resolution: scene.resolution(),
        });
    }
    if region.channels() != scene.channels() {
        return Err(FusionError::ChannelMismatch {
            scene: scene.channels(),
            region: region.channels(),
        });
    }
    let c = scene.channels();
    let mut state = state.clone();
    let mut stats = FuseStats::default();
    let mut writes: Vec<(Voxel, usize)> = Vec::new();
    let mut to_freeze = BTreeSet::new();

    for (i, p) in region.positions().iter().enumerate() {
        let q = p.offset(origin);
        match state.get(q) {
            VoxelTag::Landmark(id) if partial_ids.contains(&id) => stats.discarded_partial += 1,
            VoxelTag::Landmark(id) if state.is_frozen(id) => stats.kept_existing += 1,
            VoxelTag::Landmark(id) => {
                to_freeze.insert(id);
                writes.push((q, i));
            }
            VoxelTag::Generated => stats.kept_existing += 1,
            VoxelTag::Empty | VoxelTag::Prior => {
                state.set(q, VoxelTag::Generated);
                writes.push((q, i));
            }
        }
    }
    for id in to_freeze {
        state.freeze(id);
    }
    stats.written = writes.len();

    // Region positions are canonical and the offset preserves order, so both
    // lists are sorted and a single merge suffices.
    let mut positions = Vec::with_capacity(scene.len() + writes.len());
    let mut features = Vec::with_capacity((scene.len() + writes.len()) * c);
    let mut s = 0;
    for (q, ri) in writes {
        while s < scene.len() && scene.positions()[s] < q {
            positions.push(scene.positions()[s]);
            features.extend_from_slice(scene.row(s));
            s += 1;
        }
        if s < scene.len() && scene.positions()[s] == q {
            s += 1;
        } else {
            stats.new_voxels += 1;
        }
        positions.push(q);
        features.extend_from_slice(region.row(ri));
    }
    positions.extend_from_slice(&scene.positions()[s..]);
    features.extend_from_slice(&scene.features()[s * c..]);

    let fused = StructuredLatent::from_canonical_parts(scene.resolution(), c, positions, features);
    Ok((fused, state, stats))
}

/// Checks that every prior voxel was fused and returns the scene.
pub fn finalize_scene(
    scene: &StructuredLatent,
    state: &SceneState,
) -> Result<StructuredLatent, FusionError> {
    let dims = state.dims();
    let unresolved: Vec<Voxel> = state
        .tags()
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == VoxelTag::Prior)
        .map(|(i, _)| Voxel::from_linear_index(i, dims))
        .collect();
    if !unresolved.is_empty() {
        let mut unresolved = unresolved;
        unresolved.sort_unstable();
        return Err(FusionError::IncompleteScene(unresolved));
    }
    Ok(scene.clone())
}
