//! Overlapping region schedule over the scene grid, and per-region extraction.
//!
//! Planning works on the tight bounding box of occupied voxels:
//!
//! 1. x and y get a base grid of abutting tiles starting at the box minimum;
//!    when the extent is not a multiple of the patch size the last tile is
//!    shifted back to end exactly at the box maximum.
//! 2. z gets the minimum number of full patches covering the box height, with
//!    start positions evenly interpolated (rounded down).
//! 3. Seam patches are added at the floor midpoint of every pair of
//!    neighboring origins, first along x with y and z fixed, then along y
//!    with x and z fixed (the y pass sees the x seams).
//! 4. Origins are deduplicated and sorted lexicographically.
//!
//! Every origin is clamped so its patch fits inside the grid.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::RegenMask;
use crate::fusion::classify_partial_landmarks;
use crate::latent::{LatentError, StructuredLatent, Voxel};
use crate::prior::{Intrinsics, NormalizationTransform};
use crate::scene_state::{SceneState, VoxelTag};

#[derive(Debug, Error, PartialEq)]
pub enum TilerError {
    #[error("scene has no occupied voxels")]
    EmptyScene,
    #[error("patch {patch:?} does not fit a {resolution}^3 grid")]
    PatchLargerThanGrid { patch: [u32; 3], resolution: u32 },
    #[error(transparent)]
    Latent(#[from] LatentError),
}

/// Inclusive voxel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [u32; 3],
    pub max: [u32; 3],
}

impl BoundingBox {
    pub fn of(voxels: &[Voxel]) -> Option<Self> {
        let first = voxels.first()?.to_array();
        let (mut min, mut max) = (first, first);
        for v in voxels {
            let a = v.to_array();
            for i in 0..3 {
                min[i] = min[i].min(a[i]);
                max[i] = max[i].max(a[i]);
            }
        }
        Some(Self { min, max })
    }

    pub fn extent(&self, axis: usize) -> u32 {
        self.max[axis] - self.min[axis] + 1
    }

    pub fn contains(&self, v: Voxel) -> bool {
        let a = v.to_array();
        (0..3).all(|i| a[i] >= self.min[i] && a[i] <= self.max[i])
    }
}

/// Ordered region origins of one shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub patch_shape: [u32; 3],
    pub origins: Vec<[u32; 3]>,
    pub bbox: BoundingBox,
    /// Grid resolution the plan was made for.
    pub resolution: u32,
}

impl PatchPlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Origins of patches containing `v`.
    pub fn covering(&self, v: Voxel) -> impl Iterator<Item = &[u32; 3]> {
        let shape = self.patch_shape;
        self.origins.iter().filter(move |o| v.within(**o, shape))
    }
}

/// Abutting tiles from `lo` with the last one ending at `hi_excl`.
fn base_starts(lo: u32, hi_excl: u32, patch: u32, grid: u32) -> Vec<u32> {
    let extent = hi_excl - lo;
    let n = extent.div_ceil(patch).max(1);
    let mut starts: Vec<u32> = (0..n - 1).map(|i| lo + i * patch).collect();
    starts.push(if n == 1 { lo } else { hi_excl - patch });
    starts.into_iter().map(|s| s.min(grid - patch)).collect()
}

/// Minimum number of full patches over `[lo, hi_excl)`, evenly spaced.
fn interpolated_starts(lo: u32, hi_excl: u32, patch: u32, grid: u32) -> Vec<u32> {
    let extent = hi_excl - lo;
    let n = extent.div_ceil(patch).max(1);
    let starts: Vec<u32> = if n == 1 {
        vec![lo]
    } else {
        let span = (extent - patch) as u64;
        (0..n as u64)
            .map(|i| lo + (i * span / (n as u64 - 1)) as u32)
            .collect()
    };
    starts.into_iter().map(|s| s.min(grid - patch)).collect()
}

/// Adds floor midpoints between neighbors along `axis`, grouping by the other two.
fn add_seams(origins: &mut BTreeSet<[u32; 3]>, axis: usize) {
    let mut lines: BTreeMap<[u32; 2], Vec<u32>> = BTreeMap::new();
    for o in origins.iter() {
        let key = match axis {
            0 => [o[1], o[2]],
            1 => [o[0], o[2]],
            _ => [o[0], o[1]],
        };
        lines.entry(key).or_default().push(o[axis]);
    }
    for (key, mut coords) in lines {
        coords.sort_unstable();
        coords.dedup();
        for pair in coords.windows(2) {
            let mid = pair[0] + (pair[1] - pair[0]) / 2;
            let origin = match axis {
                0 => [mid, key[0], key[1]],
                1 => [key[0], mid, key[1]],
                _ => [key[0], key[1], mid],
            };
            origins.insert(origin);
        }
    }
}

pub fn plan_patches(
    occupied: &[Voxel],
    resolution: u32,
    patch_shape: [u32; 3],
) -> Result<PatchPlan, TilerError> {
    if patch_shape.iter().any(|&p| p == 0 || p > resolution) {
        return Err(TilerError::PatchLargerThanGrid {
            patch: patch_shape,
            resolution,
        });
    }
    let bbox = BoundingBox::of(occupied).ok_or(TilerError::EmptyScene)?;
    let end = |a: usize| bbox.max[a] + 1;
    let xs = base_starts(bbox.min[0], end(0), patch_shape[0], resolution);
    let ys = base_starts(bbox.min[1], end(1), patch_shape[1], resolution);
    let zs = interpolated_starts(bbox.min[2], end(2), patch_shape[2], resolution);

    let mut origins = BTreeSet::new();
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                origins.insert([x, y, z]);
            }
        }
    }
    add_seams(&mut origins, 0);
    add_seams(&mut origins, 1);

    Ok(PatchPlan {
        patch_shape,
        origins: origins.into_iter().collect(),
        bbox,
        resolution,
    })
}

/// Pixel rectangle `(u0, v0, w, h)` in the top-down image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub u0: u32,
    pub v0: u32,
    pub w: u32,
    pub h: u32,
}

/// What region extraction needs to know about the source image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub width: u32,
    pub height: u32,
    /// Camera and normalization used to build the prior; absent in mock runs.
    pub camera: Option<CameraMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraMeta {
    pub intrinsics: Intrinsics,
    pub normalization: NormalizationTransform,
}

impl ImageMeta {
    /// Image rectangle covering a scene region.
    ///
    /// With a camera, the 8 region corners go back through the normalization
    /// and are projected; the result is their axis-aligned bounding box,
    /// clamped to the image. Without one (or when no corner lies in front of
    /// the camera) the region's x/y footprint maps proportionally.
    pub fn crop_for(&self, origin: [u32; 3], shape: [u32; 3], resolution: u32) -> CropRect {
        let (w, h) = (self.width as f64, self.height as f64);
        let m = resolution as f64;
        let proportional = || {
            let u0 = (origin[0] as f64 / m * w).floor();
            let v0 = (origin[1] as f64 / m * h).floor();
            let u1 = ((origin[0] + shape[0]) as f64 / m * w).ceil().min(w);
            let v1 = ((origin[1] + shape[1]) as f64 / m * h).ceil().min(h);
            rect(u0, v0, u1, v1)
        };
        let Some(cam) = self.camera else {
            return proportional();
        };
        let (mut umin, mut vmin, mut umax, mut vmax) = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for corner in 0..8 {
            let q = Vector3::new(
                (origin[0] + if corner & 1 != 0 { shape[0] } else { 0 }) as f64 / m,
                (origin[1] + if corner & 2 != 0 { shape[1] } else { 0 }) as f64 / m,
                (origin[2] + if corner & 4 != 0 { shape[2] } else { 0 }) as f64 / m,
            );
            let p = cam.normalization.invert(&q);
            if p.z <= 1e-9 {
                continue;
            }
            let (u, v) = cam.intrinsics.project(&p);
            umin = umin.min(u);
            vmin = vmin.min(v);
            umax = umax.max(u);
            vmax = vmax.max(v);
        }
        if !umin.is_finite() {
            return proportional();
        }
        let r = rect(
            umin.floor().clamp(0.0, w),
            vmin.floor().clamp(0.0, h),
            umax.ceil().clamp(0.0, w),
            vmax.ceil().clamp(0.0, h),
        );
        if r.w == 0 || r.h == 0 {
            proportional()
        } else {
            r
        }
    }
}

fn rect(u0: f64, v0: f64, u1: f64, v1: f64) -> CropRect {
    CropRect {
        u0: u0 as u32,
        v0: v0 as u32,
        w: (u1 - u0).max(0.0) as u32,
        h: (v1 - v0).max(0.0) as u32,
    }
}

/// Everything the two completion stages need for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionContext {
    pub origin: [u32; 3],
    pub shape: [u32; 3],
    /// Windowed, rebased scene latent.
    pub latent: StructuredLatent,
    pub state: SceneState,
    /// Over the dense region grid (tensor shape `[z, y, x]`, x fastest).
    pub structure_mask: RegenMask,
    /// One flag per row of `latent`.
    pub feature_mask: Vec<bool>,
    pub crop: CropRect,
}

impl RegionContext {
    /// Dense tensor shape for the structure stage.
    pub fn dense_shape(&self) -> Vec<usize> {
        vec![
            self.shape[2] as usize,
            self.shape[1] as usize,
            self.shape[0] as usize,
        ]
    }

    /// Rows whose features are known and must be kept.
    pub fn known_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.feature_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(|(i, _)| i)
    }
}

/// Whether a voxel's features must be kept as they are.
///
/// Landmark rows are regenerated only by a region that holds the whole
/// landmark, and only until their first write.
pub fn features_known(tag: VoxelTag, state: &SceneState, partial: &BTreeSet<u32>) -> bool {
    match tag {
        VoxelTag::Generated => true,
        VoxelTag::Landmark(id) => state.is_frozen(id) || partial.contains(&id),
        VoxelTag::Empty | VoxelTag::Prior => false,
    }
}

/// Windows the scene and derives the region's masks.
///
/// Structure: occupied voxels (prior, generated, landmark) are preserved and
/// everything else may be generated. Features: generated rows and landmark
/// rows are preserved (see [`features_known`]); prior rows and new rows are
/// regenerated.
pub fn extract_region(
    scene: &StructuredLatent,
    state: &SceneState,
    origin: [u32; 3],
    patch_shape: [u32; 3],
    image: &ImageMeta,
) -> Result<RegionContext, TilerError> {
    let latent = scene.window(origin, patch_shape)?;
    let local = state.window(origin, patch_shape)?;
    let bits = local.tags().iter().map(|t| !t.is_occupied()).collect();
    let dense_shape = vec![
        patch_shape[2] as usize,
        patch_shape[1] as usize,
        patch_shape[0] as usize,
    ];
    let structure_mask = RegenMask::new(dense_shape, bits).expect("window dims match");
    let partial = classify_partial_landmarks(origin, patch_shape, state);
    let feature_mask = latent
        .positions()
        .iter()
        .map(|&p| !features_known(local.get(p), &local, &partial))
        .collect();
    Ok(RegionContext {
        origin,
        shape: patch_shape,
        latent,
        state: local,
        structure_mask,
        feature_mask,
        crop: image.crop_for(origin, patch_shape, state.resolution()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slab(x: u32, y: u32, z: u32) -> Vec<Voxel> {
        // corners suffice to pin the bounding box
        vec![Voxel::new(0, 0, 0), Voxel::new(x - 1, y - 1, z - 1)]
    }

    #[test]
    fn nine_patch_fixture() {
        let plan = plan_patches(&slab(128, 128, 64), 128, [64; 3]).unwrap();
        let mut expected = Vec::new();
        for x in [0, 32, 64] {
            for y in [0, 32, 64] {
                expected.push([x, y, 0]);
            }
        }
        assert_eq!(plan.origins, expected);
    }

    #[test]
    fn single_tile() {
        let plan = plan_patches(&slab(64, 64, 64), 128, [64; 3]).unwrap();
        assert_eq!(plan.origins, vec![[0, 0, 0]]);
    }

    #[test]
    fn z_starts_are_interpolated() {
        let plan = plan_patches(&slab(64, 64, 96), 128, [64; 3]).unwrap();
        assert_eq!(plan.origins, vec![[0, 0, 0], [0, 0, 32]]);
        assert_eq!(interpolated_starts(0, 200, 64, 256), vec![0, 45, 90, 136]);
    }

    #[test]
    fn last_base_tile_shifts_back() {
        assert_eq!(base_starts(0, 100, 64, 128), vec![0, 36]);
        assert_eq!(base_starts(10, 50, 64, 128), vec![10]);
        assert_eq!(base_starts(100, 120, 64, 128), vec![64]);
        let plan =
            plan_patches(&[Voxel::new(0, 0, 0), Voxel::new(99, 0, 0)], 128, [64; 3]).unwrap();
        assert_eq!(plan.origins, vec![[0, 0, 0], [18, 0, 0], [36, 0, 0]]);
    }

    #[test]
    fn errors() {
        assert_eq!(plan_patches(&[], 128, [64; 3]), Err(TilerError::EmptyScene));
        assert!(matches!(
            plan_patches(&slab(4, 4, 4), 32, [64; 3]),
            Err(TilerError::PatchLargerThanGrid { .. })
        ));
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = plan_patches(&slab(100, 70, 20), 128, [64; 3]).unwrap();
        assert_eq!(PatchPlan::from_json(&plan.to_json()).unwrap(), plan);
    }

    fn mock_image() -> ImageMeta {
        ImageMeta {
            width: 256,
            height: 128,
            camera: None,
        }
    }

    #[test]
    fn extract_empty_and_generated_regions() {
        let scene = StructuredLatent::empty(8, 2).unwrap();
        let state = SceneState::new(8);
        let ctx = extract_region(&scene, &state, [0, 0, 0], [4; 3], &mock_image()).unwrap();
        assert!(ctx.latent.is_empty());
        assert_eq!(ctx.structure_mask.count_regenerate(), 64);

        let all: Vec<Voxel> = (0..64)
            .map(|i| Voxel::from_linear_index(i, [4; 3]))
            .collect();
        let scene = StructuredLatent::zeros(8, 2, all.clone()).unwrap();
        let mut state = SceneState::new(8);
        for v in &all {
            state.set(*v, VoxelTag::Generated);
        }
        let ctx = extract_region(&scene, &state, [0, 0, 0], [4; 3], &mock_image()).unwrap();
        assert_eq!(ctx.structure_mask.count_regenerate(), 0);
        assert!(ctx.feature_mask.iter().all(|&m| !m));
    }

    #[test]
    fn extract_mixed_region() {
        let mut state = SceneState::new(16);
        let mut positions = Vec::new();
        for i in 0..15 {
            let v = Voxel::new(8 + i % 4, 8 + i / 4, 9);
            state.set(
                v,
                if i < 10 {
                    VoxelTag::Prior
                } else {
                    VoxelTag::Generated
                },
            );
            positions.push(v);
        }
        let scene = StructuredLatent::zeros(16, 3, positions).unwrap();
        let ctx = extract_region(&scene, &state, [8, 8, 8], [8; 3], &mock_image()).unwrap();
        assert_eq!(ctx.latent.len(), 15);
        assert_eq!(
            ctx.structure_mask.bits().iter().filter(|&&b| !b).count(),
            15
        );
        assert_eq!(ctx.feature_mask.iter().filter(|&&b| !b).count(), 5);
        for (p, &m) in ctx.latent.positions().iter().zip(&ctx.feature_mask) {
            assert_eq!(m, ctx.state.get(*p) == VoxelTag::Prior);
        }
    }

    #[test]
    fn proportional_crop() {
        let crop = mock_image().crop_for([64, 32, 0], [64, 64, 64], 128);
        assert_eq!(
            crop,
            CropRect {
                u0: 128,
                v0: 32,
                w: 128,
                h: 64
            }
        );
    }

    #[test]
    fn camera_crop_covers_projected_corners() {
        // camera 10 units above a ground plane, scene normalized 1:1
        let cam = CameraMeta {
            intrinsics: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 50.0,
                cy: 50.0,
            },
            normalization: NormalizationTransform {
                scale: 0.1,
                offset: [0.5, 0.5, -0.5],
            },
        };
        let image = ImageMeta {
            width: 100,
            height: 100,
            camera: Some(cam),
        };
        let full = image.crop_for([0, 0, 0], [128; 3], 128);
        assert_eq!(
            full,
            CropRect {
                u0: 0,
                v0: 0,
                w: 100,
                h: 100
            }
        );
        let quarter = image.crop_for([64, 64, 64], [64; 3], 128);
        assert!(quarter.u0 >= 50 && quarter.v0 >= 50, "{quarter:?}");
    }
}
