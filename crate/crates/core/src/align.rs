//! Rigid alignment of generated landmark point sets onto the raw scene cloud
//! (point-to-point ICP), and substitution of the raw landmark points.

use std::collections::HashMap;

use log::warn;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prior::{LabeledPointCloud, PointLabel};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("source geometry is degenerate (needs >= 3 non-collinear points)")]
    DegenerateGeometry,
    #[error("landmark {0} does not occur in the scene")]
    UnknownLandmark(u32),
}

/// `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `RᵀR = I` and `det R = 1`, both within `tol`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        orth <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Largest absolute entry difference over rotation and translation.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once an iteration improves RMSE by less than this.
    pub tol: f64,
    /// Also fit a uniform scale (Umeyama). Off by default.
    pub estimate_scale: bool,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-7,
            estimate_scale: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Uniform scale applied before the rotation; 1 unless scale fitting is on.
    pub scale: f64,
    pub rmse: f64,
    /// RMSE of the nearest-neighbor matching after initialization and after
    /// every accepted update; non-increasing.
    pub rmse_history: Vec<f64>,
    pub iterations: usize,
}

impl IcpResult {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.transform.apply(&(p * self.scale))
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn check_source(source: &[Vector3<f64>]) -> Result<(), AlignError> {
    if source.len() < 3 {
        return Err(AlignError::DegenerateGeometry);
    }
    let c = centroid(source);
    let cov: Matrix3<f64> = source.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let mut ev: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(AlignError::DegenerateGeometry);
    }
    Ok(())
}

/// Closed-form least-squares similarity (or rigid, when `with_scale` is off)
/// mapping `src[i]` onto `dst[i]`, via SVD with determinant correction.
pub fn procrustes(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> (RigidTransform, f64) {
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
        var_src += (s - cs).norm_squared();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let scale = if with_scale && var_src > 0.0 {
        let sv = svd.singular_values;
        (sv[0] + sv[1] + d * sv[2]) / var_src
    } else {
        1.0
    };
    let translation = cd - rotation * cs * scale;
    (
        RigidTransform {
            rotation,
            translation,
        },
        scale,
    )
}

/// Uniform-grid nearest-neighbor index. Ties resolve to the lowest index.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> GridIndex<'a> {
    /// Cell size is twice the mean nearest-neighbor spacing of `points`.
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        assert!(!points.is_empty());
        let (mut lo, mut hi) = (points[0], points[0]);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let longest = (hi - lo).max();
        let rough = if longest > 0.0 {
            longest / (points.len() as f64).cbrt()
        } else {
            1.0
        };
        let probe = Self::with_cell(points, rough);
        let mean_nn = if points.len() > 1 {
            let total: f64 = (0..points.len())
                .into_par_iter()
                .map(|i| probe.nearest_excluding(&points[i], Some(i)).1.sqrt())
                .sum();
            total / points.len() as f64
        } else {
            0.0
        };
        let cell = if mean_nn > 0.0 { 2.0 * mean_nn } else { rough };
        Self::with_cell(points, cell)
    }

    pub fn with_cell(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let c = Self::cell_of(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            cells.entry(c).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    fn cell_of(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    /// `(index, squared distance)` of the nearest indexed point.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        self.nearest_excluding(q, None)
    }

    fn nearest_excluding(&self, q: &Vector3<f64>, skip: Option<usize>) -> (usize, f64) {
        let c = Self::cell_of(q, self.cell);
        let r_max = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |key: [i64; 3], best: &mut (usize, f64)| {
            if (0..3).any(|a| key[a] < self.lo[a] || key[a] > self.hi[a]) {
                return;
            }
            if let Some(ids) = self.cells.get(&key) {
                for &i in ids {
                    if Some(i) == skip {
                        continue;
                    }
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
        };
        for r in 0..=r_max {
            for dx in -r..=r {
                for dy in -r..=r {
                    if dx.abs() == r || dy.abs() == r {
                        for dz in -r..=r {
                            consider([c[0] + dx, c[1] + dy, c[2] + dz], &mut best);
                        }
                    } else if r > 0 {
                        consider([c[0] + dx, c[1] + dy, c[2] - r], &mut best);
                        consider([c[0] + dx, c[1] + dy, c[2] + r], &mut best);
                    }
                }
            }
            // Every cell in ring r+1 is at least r cells away from q.
            if best.1.is_finite() && best.1.sqrt() <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

fn match_rmse(index: &GridIndex<'_>, moved: &[Vector3<f64>]) -> (Vec<usize>, f64) {
    let matches: Vec<(usize, f64)> = moved.par_iter().map(|p| index.nearest(p)).collect();
    let sse: f64 = matches.iter().map(|m| m.1).sum();
    (
        matches.into_iter().map(|m| m.0).collect(),
        (sse / moved.len() as f64).sqrt(),
    )
}

/// Principal axes as columns, largest variance first.
fn principal_axes(points: &[Vector3<f64>]) -> Matrix3<f64> {
    let c = centroid(points);
    let cov: Matrix3<f64> = points.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ])
}

/// Starting poses: centroid alignment, then the four proper rotations that
/// take the source's principal axes onto the target's.
fn initial_poses(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Vec<RigidTransform> {
    let (cs, ct) = (centroid(source), centroid(target));
    let mut poses = vec![RigidTransform {
        rotation: Matrix3::identity(),
        translation: ct - cs,
    }];
    let (es, et) = (principal_axes(source), principal_axes(target));
    for signs in [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
        let mut d = Matrix3::from_diagonal(&Vector3::new(signs[0], signs[1], 1.0));
        let r = et * d * es.transpose();
        if r.determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let rotation = et * d * es.transpose();
        poses.push(RigidTransform {
            rotation,
            translation: ct - rotation * cs,
        });
    }
    poses
}

fn refine(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    index: &GridIndex<'_>,
    init: RigidTransform,
    cfg: &IcpConfig,
) -> IcpResult {
    let mut transform = init;
    let mut scale = 1.0;
    let apply = |t: &RigidTransform, s: f64| -> Vec<Vector3<f64>> {
        source.iter().map(|p| t.apply(&(p * s))).collect()
    };

    let (mut matches, mut rmse) = match_rmse(index, &apply(&transform, scale));
    let mut history = vec![rmse];
    let mut iterations = 0;
    while iterations < cfg.max_iters && rmse > 0.0 {
        let matched: Vec<Vector3<f64>> = matches.iter().map(|&j| target[j]).collect();
        let (candidate, cand_scale) = procrustes(source, &matched, cfg.estimate_scale);
        let (cand_matches, cand_rmse) = match_rmse(index, &apply(&candidate, cand_scale));
        if cand_rmse > rmse {
            break;
        }
        iterations += 1;
        let improvement = rmse - cand_rmse;
        transform = candidate;
        scale = cand_scale;
        matches = cand_matches;
        rmse = cand_rmse;
        history.push(rmse);
        if improvement < cfg.tol {
            break;
        }
    }
    IcpResult {
        transform,
        scale,
        rmse,
        rmse_history: history,
        iterations,
    }
}

/// Point-to-point ICP from `source` onto `target`.
///
/// Refines each pose from [`initial_poses`] and keeps the lowest final RMSE
/// (the earliest pose on ties). Each iteration matches every source point to
/// its nearest target point and re-solves the full transform from the
/// original source in closed form. An update that would raise the RMSE is
/// rejected and ends that run.
pub fn icp_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    cfg: &IcpConfig,
) -> Result<IcpResult, AlignError> {
    if source.is_empty() || target.is_empty() {
        return Err(AlignError::EmptyCloud);
    }
    check_source(source)?;
    if target.len() < 3 {
        return Err(AlignError::DegenerateGeometry);
    }
    let index = GridIndex::new(target);
    let mut best: Option<IcpResult> = None;
    for init in initial_poses(source, target) {
        let run = refine(source, target, &index, init, cfg);
        if best.as_ref().is_none_or(|b| run.rmse < b.rmse) {
            best = Some(run);
        }
        if best.as_ref().is_some_and(|b| b.rmse == 0.0) {
            break;
        }
    }
    Ok(best.expect("at least one initial pose"))
}

/// Replaces the points of landmark `landmark_id` with `generated` moved by
/// `transform`. All other points are kept as they are, in order.
pub fn substitute_landmark(
    scene: &LabeledPointCloud,
    landmark_id: u32,
    generated: &[Vector3<f64>],
    transform: &RigidTransform,
) -> Result<LabeledPointCloud, AlignError> {
    let target = PointLabel::Foreground(landmark_id);
    if !scene.labels().contains(&target) {
        return Err(AlignError::UnknownLandmark(landmark_id));
    }
    if generated.is_empty() {
        warn!("landmark {landmark_id}: no generated points, removing the region");
    }
    let mut points = Vec::with_capacity(scene.len() + generated.len());
    let mut labels = Vec::with_capacity(scene.len() + generated.len());
    for (p, l) in scene.points().iter().zip(scene.labels()) {
        if *l != target {
            points.push(*p);
            labels.push(*l);
        }
    }
    for p in generated {
        points.push(transform.apply(p));
        labels.push(target);
    }
    LabeledPointCloud::new(points, labels).map_err(|_| AlignError::EmptyCloud)
}

/// Points of one landmark instance.
pub fn landmark_points(scene: &LabeledPointCloud, landmark_id: u32) -> Vec<Vector3<f64>> {
    scene
        .points()
        .iter()
        .zip(scene.labels())
        .filter(|(_, l)| **l == PointLabel::Foreground(landmark_id))
        .map(|(p, _)| *p)
        .collect()
}
