//! Two-stage completion of one region: occupancy over the dense region grid,
//! then features over the completed rows.

use thiserror::Error;

use crate::flow::{
    masked_complete, Condition, FlowConfig, FlowError, FlowField, FlowTensor, RegenMask, Stage,
};
use crate::latent::{decode_active, LatentError, StructuredLatent, Voxel};
use crate::rng::NoiseSource;
use crate::tiler::RegionContext;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("known feature row at {0} is missing from the completed structure")]
    RowAlignment(Voxel),
    #[error(transparent)]
    Latent(#[from] LatentError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureOutcome {
    /// Region-local, canonical order.
    pub positions: Vec<Voxel>,
    /// Known-occupied voxels the sampler dropped and that were put back.
    pub reinserted: Vec<Voxel>,
}

fn condition(
    ctx: &RegionContext,
    stage: Stage,
    guidance: f32,
    condition_id: Option<&str>,
) -> Condition {
    Condition {
        stage,
        guidance,
        origin: ctx.origin,
        region_shape: ctx.shape,
        crop: Some(ctx.crop),
        rows: Vec::new(),
        condition_id: condition_id.map(str::to_string),
    }
}

/// Known occupancy as a `+1 / -1` tensor over the region grid.
pub fn known_occupancy(ctx: &RegionContext) -> FlowTensor {
    let values = ctx
        .state
        .tags()
        .iter()
        .map(|t| if t.is_occupied() { 1.0 } else { -1.0 })
        .collect();
    FlowTensor::new(ctx.dense_shape(), values).expect("state matches region shape")
}

pub fn complete_structure(
    ctx: &RegionContext,
    field: &dyn FlowField,
    cfg: &FlowConfig,
    noise: &mut dyn NoiseSource,
    condition_id: Option<&str>,
) -> Result<StructureOutcome, RunnerError> {
    let x_known = known_occupancy(ctx);
    let cond = condition(ctx, Stage::Structure, cfg.guidance_structure, condition_id);
    let out = masked_complete(&x_known, &ctx.structure_mask, field, &cond, cfg, noise)?;
    let mut positions = decode_active(out.values(), ctx.shape, 0.0);

    let mut reinserted = Vec::new();
    for (i, tag) in ctx.state.tags().iter().enumerate() {
        if tag.is_occupied() && out.values()[i] <= 0.0 {
            let v = Voxel::from_linear_index(i, ctx.shape);
            log::warn!(
                "structure stage dropped known voxel {v} in region {:?}; re-inserting",
                ctx.origin
            );
            reinserted.push(v);
        }
    }
    if !reinserted.is_empty() {
        reinserted.sort_unstable();
        positions.extend_from_slice(&reinserted);
        positions.sort_unstable();
    }
    Ok(StructureOutcome {
        positions,
        reinserted,
    })
}

/// Completes features for `positions` (region-local, canonical).
///
/// Rows the region context marks as known keep their features; every other
/// row starts from noise and follows the field.
pub fn complete_features(
    ctx: &RegionContext,
    positions: &[Voxel],
    field: &dyn FlowField,
    cfg: &FlowConfig,
    noise: &mut dyn NoiseSource,
    condition_id: Option<&str>,
) -> Result<StructuredLatent, RunnerError> {
    let channels = ctx.latent.channels();
    let resolution = ctx.latent.resolution();
    for row in ctx.known_rows() {
        let v = ctx.latent.positions()[row];
        if positions.binary_search(&v).is_err() {
            return Err(RunnerError::RowAlignment(v));
        }
    }
    if positions.is_empty() {
        return Ok(StructuredLatent::empty(resolution, channels)?);
    }

    let mut known = vec![0.0f32; positions.len() * channels];
    let mut regen = vec![true; positions.len()];
    for (i, &p) in positions.iter().enumerate() {
        if let Some(j) = ctx.latent.find(p) {
            if !ctx.feature_mask[j] {
                regen[i] = false;
                known[i * channels..(i + 1) * channels].copy_from_slice(ctx.latent.row(j));
            }
        }
    }
    let shape = vec![positions.len(), channels];
    let x_known = FlowTensor::new(shape, known)?;
    let mask = RegenMask::from_rows(&regen, channels);
    let mut cond = condition(ctx, Stage::Latent, cfg.guidance_latent, condition_id);
    cond.rows = positions.to_vec();
    let out = masked_complete(&x_known, &mask, field, &cond, cfg, noise)?;
    Ok(StructuredLatent::new(
        resolution,
        channels,
        positions.to_vec(),
        out.into_values(),
    )?)
}
