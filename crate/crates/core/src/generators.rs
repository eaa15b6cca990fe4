//! Builtin flow fields and the protocol handler that serves them.
//!
//! Both builtin kinds steer every element straight to a per-voxel target
//! keyed by scene coordinates, so overlapping regions agree on shared voxels:
//!
//! * `mock`: occupancy is a seeded hash with a fixed density; features are
//!   hashed normals.
//! * `oracle`: occupancy is the scene's own prior; features are hashed
//!   normals. Completion then reproduces the prior exactly.

use std::sync::Arc;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::align::RigidTransform;
use crate::flow::{oracle_velocity, Condition, FieldError, FlowField, FlowTensor, Stage};
use crate::latent::Voxel;
use crate::protocol::{parse_field_request, AdapterEnvelope, Handshake};
use crate::rng::{inverse_normal_cdf, splitmix64, word_to_open_unit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Mock,
    Oracle,
    Adapter,
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "oracle" => Ok(Self::Oracle),
            "adapter" => Ok(Self::Adapter),
            other => Err(format!(
                "unknown generator '{other}' (mock, oracle, adapter)"
            )),
        }
    }
}

/// Fraction of voxels the mock field marks occupied.
pub const MOCK_DENSITY: f64 = 1.0 / 16.0;

/// Dense occupancy over the scene grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOccupancy {
    resolution: u32,
    cells: Vec<bool>,
}

impl SceneOccupancy {
    pub fn new(resolution: u32, occupied: &[Voxel]) -> Self {
        let dims = [resolution; 3];
        let mut cells = vec![false; (resolution as usize).pow(3)];
        for v in occupied {
            cells[v.linear_index(dims)] = true;
        }
        Self { resolution, cells }
    }

    pub fn contains(&self, v: Voxel) -> bool {
        v.x < self.resolution
            && v.y < self.resolution
            && v.z < self.resolution
            && self.cells[v.linear_index([self.resolution; 3])]
    }
}

#[derive(Debug, Clone)]
enum Occupancy {
    Hashed,
    Scene(Arc<SceneOccupancy>),
}

/// A builtin field: `mock` or `oracle`.
#[derive(Debug, Clone)]
pub struct BuiltinField {
    occupancy: Occupancy,
    seed: u64,
    sigma_min: f64,
}

fn voxel_key(v: Voxel) -> u64 {
    (v.x as u64) | (v.y as u64) << 21 | (v.z as u64) << 42
}

fn hash(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(seed ^ splitmix64(a ^ splitmix64(b)))
}

impl BuiltinField {
    pub fn mock(seed: u64, sigma_min: f64) -> Self {
        Self {
            occupancy: Occupancy::Hashed,
            seed,
            sigma_min,
        }
    }

    pub fn oracle(scene: Arc<SceneOccupancy>, seed: u64, sigma_min: f64) -> Self {
        Self {
            occupancy: Occupancy::Scene(scene),
            seed,
            sigma_min,
        }
    }

    pub fn occupied(&self, v: Voxel) -> bool {
        match &self.occupancy {
            Occupancy::Hashed => {
                word_to_open_unit(hash(self.seed, voxel_key(v), 0x0cc)) < MOCK_DENSITY
            }
            Occupancy::Scene(s) => s.contains(v),
        }
    }

    pub fn feature(&self, v: Voxel, channel: usize) -> f32 {
        let w = hash(self.seed, voxel_key(v), 0xfea7_0000 + channel as u64);
        inverse_normal_cdf(word_to_open_unit(w)) as f32
    }

    /// The tensor this field transports any state to.
    pub fn target(&self, shape: &[usize], c: &Condition) -> Result<Vec<f32>, FieldError> {
        match c.stage {
            Stage::Structure => {
                let dims = c.region_shape;
                let expected = [dims[2] as usize, dims[1] as usize, dims[0] as usize];
                if shape != expected {
                    return Err(FieldError::TargetShape {
                        target: expected.to_vec(),
                        input: shape.to_vec(),
                    });
                }
                let n = expected.iter().product();
                Ok((0..n)
                    .map(|i| {
                        let q = Voxel::from_linear_index(i, dims).offset(c.origin);
                        if self.occupied(q) {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect())
            }
            Stage::Latent => {
                if shape.len() != 2 || shape[0] != c.rows.len() {
                    return Err(FieldError::TargetShape {
                        target: vec![c.rows.len(), shape.get(1).copied().unwrap_or(0)],
                        input: shape.to_vec(),
                    });
                }
                let channels = shape[1];
                let mut out = Vec::with_capacity(c.rows.len() * channels);
                for row in &c.rows {
                    let q = row.offset(c.origin);
                    out.extend((0..channels).map(|ch| self.feature(q, ch)));
                }
                Ok(out)
            }
        }
    }
}

impl FlowField for BuiltinField {
    fn evaluate(
        &self,
        x: &FlowTensor,
        t: f64,
        condition: &Condition,
    ) -> Result<FlowTensor, FieldError> {
        let target = self.target(x.shape(), condition)?;
        let mut out = vec![0.0; x.len()];
        oracle_velocity(x.values(), &target, t, self.sigma_min, &mut out)?;
        Ok(FlowTensor::new(x.shape().to_vec(), out).expect("same shape as input"))
    }
}

/// Pose of a landmark's generated object relative to the scene.
///
/// Builtin runs stand in for an object generator by returning the observed
/// landmark points moved into this object frame; alignment must undo it.
pub fn builtin_object_pose(landmark: u32) -> RigidTransform {
    let angle = (2.0 + (landmark % 3) as f64).to_radians();
    RigidTransform {
        rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix(),
        translation: Vector3::new(0.05, -0.03, 0.02) * (1.0 + landmark as f64),
    }
}

/// Object-frame points for a landmark, per [`builtin_object_pose`].
pub fn builtin_object_points(landmark: u32, observed: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let to_object = builtin_object_pose(landmark).inverse();
    observed.iter().map(|p| to_object.apply(p)).collect()
}

/// Protocol handler answering handshake, image encoding and field ops with
/// a builtin field. Used for in-process adapters and the CLI's test server.
pub fn builtin_handler(
    field: BuiltinField,
    handshake: Handshake,
) -> impl FnMut(&AdapterEnvelope) -> Result<AdapterEnvelope, String> {
    move |req| match req.op.as_str() {
        "handshake" => Ok(AdapterEnvelope::new("handshake")
            .param("sigma_min", handshake.sigma_min)
            .param("channels", handshake.channels as u64)
            .param("resolution", handshake.resolution)),
        "encode_image" => {
            let get = |k: &str| req.get_u64(k).map_err(|e| e.to_string());
            let id = format!(
                "crop-{}-{}-{}-{}",
                get("crop_u0")?,
                get("crop_v0")?,
                get("crop_w")?,
                get("crop_h")?
            );
            Ok(AdapterEnvelope::new("encode_image").param("condition_id", id))
        }
        "eval_structure_field" | "eval_latent_field" => {
            let (x, t, cond) = parse_field_request(req).map_err(|e| e.to_string())?;
            let v = field.evaluate(&x, t, &cond).map_err(|e| e.to_string())?;
            Ok(AdapterEnvelope::new(&req.op).tensor("v", &v))
        }
        other => Err(format!("unsupported op '{other}'")),
    }
}
