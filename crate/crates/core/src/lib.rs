//! Sparse structured-latent scene engine.
//!
//! A scene is a set of active voxels on an `M³` grid, each carrying a
//! feature vector ([`StructuredLatent`]). The pipeline builds a partial scene
//! from a top-down depth map, cuts it into overlapping `N³` regions, completes
//! each region with masked rectified flow against a pluggable velocity field,
//! and fuses the regions back into one scene.
//!
//! Module map:
//!
//! * [`latent`], [`slat`]: the latent type and its binary format
//! * [`scene_state`]: per-voxel provenance tags
//! * [`prior`], [`formats`]: depth unprojection, normalization, voxelization
//! * [`align`]: ICP and landmark substitution
//! * [`tiler`]: region planning and extraction
//! * [`flow`], [`rng`]: the masked sampler and its noise
//! * [`runner`], [`fusion`]: per-region completion and write-back
//! * [`protocol`], [`generators`]: external adapters and builtin fields
//! * [`pipeline`]: the end-to-end run

pub mod align;
pub mod fixtures;
pub mod flow;
pub mod formats;
pub mod fusion;
pub mod generators;
pub mod latent;
pub mod pipeline;
pub mod prior;
pub mod protocol;
pub mod rng;
pub mod runner;
pub mod scene_state;
pub mod slat;
pub mod tiler;

pub use flow::{masked_complete, FlowConfig, FlowField, FlowTensor, RegenMask};
pub use latent::{DenseOccupancy, StructuredLatent, Voxel};
pub use pipeline::{run_pipeline, PipelineConfig, RunManifest};
pub use rng::{NoiseSource, PhiloxRng};
pub use scene_state::{SceneState, VoxelTag};
