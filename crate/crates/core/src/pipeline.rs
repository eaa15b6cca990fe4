//! End-to-end scene run: prior, landmark alignment, voxelization, planning,
//! per-region completion and fusion, finalization.
//!
//! Every stage writes its artifacts into the output directory as soon as it
//! finishes. A failing run keeps what was written and records the failing
//! stage in `manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::align::{icp_align, landmark_points, substitute_landmark, IcpConfig};
use crate::flow::{FlowConfig, FlowField};
use crate::formats::depth::{load_depth, DepthInput};
use crate::formats::ply::{load_ply, save_ply};
use crate::fusion::{classify_partial_landmarks, finalize_scene, fuse_region, FuseStats};
use crate::generators::{builtin_object_points, BuiltinField, GeneratorKind, SceneOccupancy};
use crate::latent::StructuredLatent;
use crate::prior::{
    init_scene_latent, normalize, unproject, unproject_labeled, DepthRaster, LabeledPointCloud,
    NormalizationTransform, PointLabel,
};
use crate::protocol::{AdapterClient, AdapterEndpoint, AdapterField, Handshake, DEFAULT_TIMEOUT};
use crate::rng::PhiloxRng;
use crate::runner::{complete_features, complete_structure};
use crate::scene_state::{SceneState, VoxelTag};
use crate::slat::save_slat;
use crate::tiler::{extract_region, plan_patches, CameraMeta, ImageMeta, PatchPlan};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Connect,
    Prior,
    Landmarks,
    Voxelize,
    Plan,
    Complete,
    Fuse,
    Finalize,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: BoxError,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(self.source.as_ref())
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<BoxError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    /// Adapter process to spawn, argv form.
    pub command: Option<Vec<String>>,
    /// `host:port` of a running adapter.
    pub address: Option<String>,
    pub timeout_secs: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Mock,
            command: None,
            address: None,
            timeout_secs: DEFAULT_TIMEOUT.as_secs(),
        }
    }
}

impl GeneratorConfig {
    pub fn endpoint(&self) -> Option<AdapterEndpoint> {
        if let Some(cmd) = &self.command {
            Some(AdapterEndpoint::Command(cmd.clone()))
        } else {
            self.address.clone().map(AdapterEndpoint::Tcp)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    /// Depth sidecar JSON (see `formats::depth`).
    pub depth: Option<PathBuf>,
    /// Labeled PLY point cloud in camera coordinates.
    pub cloud: Option<PathBuf>,
    /// Top-down image, forwarded to the adapter.
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Region resolution `N`.
    pub n: u32,
    /// Scene resolution `M`; `2N` when absent.
    pub m: Option<u32>,
    pub channels: usize,
    pub flow: FlowConfig,
    pub generator: GeneratorConfig,
    pub icp: IcpConfig,
    /// Replace detected landmarks with generated objects aligned by ICP.
    pub landmarks: bool,
    pub inputs: InputPaths,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n: 64,
            m: None,
            channels: 8,
            flow: FlowConfig::default(),
            generator: GeneratorConfig::default(),
            icp: IcpConfig::default(),
            landmarks: false,
            inputs: InputPaths::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn scene_resolution(&self) -> u32 {
        self.m.unwrap_or(2 * self.n)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn validate(&self) -> Result<(), String> {
        let m = self.scene_resolution();
        if self.n == 0 || m == 0 {
            return Err("resolutions must be positive".into());
        }
        if m < self.n {
            return Err(format!(
                "scene resolution M={m} is below region resolution N={}",
                self.n
            ));
        }
        if m > u16::MAX as u32 + 1 {
            return Err(format!(
                "scene resolution M={m} exceeds the 16-bit voxel range"
            ));
        }
        if self.channels == 0 {
            return Err("channels must be positive".into());
        }
        self.flow.validate().map_err(|e| e.to_string())?;
        if self.generator.kind == GeneratorKind::Adapter && self.generator.endpoint().is_none() {
            return Err("adapter generator needs a command or an address".into());
        }
        let has_input = self.inputs.depth.is_some()
            || self.inputs.cloud.is_some()
            || (self.inputs.image.is_some() && self.generator.kind == GeneratorKind::Adapter);
        if !has_input {
            return Err(
                "no input: give a depth sidecar, a point cloud, or an image with an adapter".into(),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamSeeds {
    pub seed: u64,
    pub structure_stream: u64,
    pub feature_stream: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub index: usize,
    pub origin: [u32; 3],
    pub seeds: StreamSeeds,
    pub known_voxels: usize,
    pub completed_voxels: usize,
    pub reinserted: usize,
    pub partial_landmarks: Vec<u32>,
    pub fusion: FuseStats,
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub id: u32,
    pub removed_points: usize,
    pub inserted_points: usize,
    pub rmse: f64,
    pub iterations: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deviations {
    /// Known voxels the structure stage dropped and that were put back.
    pub reinserted_known_voxels: usize,
    /// Landmarks no region held in full, so their features were never written.
    pub unwritten_landmarks: Vec<u32>,
}

impl Deviations {
    pub fn total(&self) -> usize {
        self.reinserted_known_voxels + self.unwritten_landmarks.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub config: Option<PipelineConfig>,
    pub handshake: Option<Handshake>,
    pub normalization: Option<NormalizationTransform>,
    pub prior_voxels: usize,
    pub scene_voxels: usize,
    pub landmarks: Vec<LandmarkRecord>,
    pub plan: Option<PatchPlan>,
    pub regions: Vec<RegionRecord>,
    pub deviations: Deviations,
    pub timings_ms: BTreeMap<String, f64>,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
}

/// How scene voxels relate to the input image, written as `prior.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorMeta {
    pub normalization: NormalizationTransform,
    pub image: ImageMeta,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENE_FILE: &str = "scene.slat";

fn ms(d: Duration) -> f64 {
    (d.as_secs_f64() * 1e6).round() / 1e3
}

/// Image size and camera derived from whatever input the run had.
pub fn image_meta(
    raster: Option<&DepthRaster>,
    normalization: NormalizationTransform,
    resolution: u32,
) -> ImageMeta {
    match raster {
        Some(r) => ImageMeta {
            width: r.width() as u32,
            height: r.height() as u32,
            camera: Some(CameraMeta {
                intrinsics: r.intrinsics(),
                normalization,
            }),
        },
        None => ImageMeta {
            width: resolution,
            height: resolution,
            camera: None,
        },
    }
}

enum Fields {
    Builtin(BuiltinField),
    Adapter(AdapterField),
}

impl Fields {
    fn field(&self) -> &dyn FlowField {
        match self {
            Fields::Builtin(f) => f,
            Fields::Adapter(f) => f,
        }
    }
}

struct Run<'a> {
    cfg: PipelineConfig,
    out: &'a Path,
    manifest: RunManifest,
    client: Option<AdapterClient>,
}

impl Run<'_> {
    fn record(&mut self, name: &str) {
        self.manifest.artifacts.push(name.to_string());
    }

    fn time(&mut self, stage: Stage, started: Instant) {
        self.manifest
            .timings_ms
            .insert(stage.to_string(), ms(started.elapsed()));
    }

    fn image_param(&self) -> String {
        self.cfg
            .inputs
            .image
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    }

    fn connect(&mut self) -> Result<(), PipelineError> {
        if self.cfg.generator.kind != GeneratorKind::Adapter {
            return Ok(());
        }
        let started = Instant::now();
        let endpoint = self.cfg.generator.endpoint().expect("validated");
        let timeout = Duration::from_secs(self.cfg.generator.timeout_secs);
        let mut client = AdapterClient::connect(&endpoint, timeout).at(Stage::Connect)?;
        let hs = client.handshake().at(Stage::Connect)?;
        if hs.resolution != self.cfg.n {
            return Err(format!(
                "adapter works at resolution {}, config has N={}",
                hs.resolution, self.cfg.n
            ))
            .at(Stage::Connect);
        }
        log::info!(
            "adapter handshake: sigma_min={} channels={}",
            hs.sigma_min,
            hs.channels
        );
        self.cfg.flow.sigma_min = hs.sigma_min;
        self.cfg.channels = hs.channels;
        self.manifest.handshake = Some(hs);
        self.client = Some(client);
        self.time(Stage::Connect, started);
        Ok(())
    }

    fn prior(&mut self) -> Result<(LabeledPointCloud, Option<DepthRaster>), PipelineError> {
        let started = Instant::now();
        let inputs = self.cfg.inputs.clone();
        let (cloud, raster) = if let Some(path) = &inputs.depth {
            let DepthInput { raster, labels } = load_depth(path).at(Stage::Prior)?;
            let cloud = match &labels {
                Some(l) => unproject_labeled(&raster, l),
                None => unproject(&raster),
            }
            .at(Stage::Prior)?;
            (cloud, Some(raster))
        } else if let Some(path) = &inputs.cloud {
            (load_ply(path).at(Stage::Prior)?, None)
        } else {
            let image = self.image_param();
            let client = self
                .client
                .as_mut()
                .expect("validated: image input needs an adapter");
            let (depth, k) = client.estimate_depth(&image).at(Stage::Prior)?;
            let (h, w) = (depth.shape()[0], depth.shape()[1]);
            let raster = DepthRaster::from_depth(w, h, depth.into_values(), k).at(Stage::Prior)?;
            let cloud = if self.cfg.landmarks {
                let ids = client.detect_landmarks(&image).at(Stage::Prior)?;
                if ids.shape() != [h, w] {
                    return Err(format!(
                        "landmark raster {:?} for depth [{h}, {w}]",
                        ids.shape()
                    ))
                    .at(Stage::Prior);
                }
                let labels: Vec<PointLabel> = ids
                    .values()
                    .iter()
                    .map(|&v| PointLabel::from_code(v as i64))
                    .collect();
                unproject_labeled(&raster, &labels)
            } else {
                unproject(&raster)
            }
            .at(Stage::Prior)?;
            (cloud, Some(raster))
        };
        save_ply(&cloud, &self.out.join("prior_cloud.ply")).at(Stage::Prior)?;
        self.record("prior_cloud.ply");
        self.time(Stage::Prior, started);
        Ok((cloud, raster))
    }

    fn landmarks(
        &mut self,
        mut cloud: LabeledPointCloud,
    ) -> Result<LabeledPointCloud, PipelineError> {
        if !self.cfg.landmarks {
            return Ok(cloud);
        }
        let started = Instant::now();
        let mut ids: Vec<u32> = cloud
            .labels()
            .iter()
            .filter_map(|l| match l {
                PointLabel::Foreground(id) => Some(*id),
                PointLabel::Background => None,
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let image = self.image_param();
        for id in ids {
            let observed = landmark_points(&cloud, id);
            let generated = match &mut self.client {
                Some(client) => client.decode_object(&image, id).at(Stage::Landmarks)?,
                None => builtin_object_points(id, &observed),
            };
            let fit = icp_align(&generated, &observed, &self.cfg.icp).at(Stage::Landmarks)?;
            let scaled: Vec<_> = generated.iter().map(|p| p * fit.scale).collect();
            cloud =
                substitute_landmark(&cloud, id, &scaled, &fit.transform).at(Stage::Landmarks)?;
            log::info!(
                "landmark {id}: icp rmse {:.3e} after {} iterations",
                fit.rmse,
                fit.iterations
            );
            self.manifest.landmarks.push(LandmarkRecord {
                id,
                removed_points: observed.len(),
                inserted_points: generated.len(),
                rmse: fit.rmse,
                iterations: fit.iterations,
                scale: fit.scale,
            });
        }
        save_ply(&cloud, &self.out.join("landmark_cloud.ply")).at(Stage::Landmarks)?;
        self.record("landmark_cloud.ply");
        self.time(Stage::Landmarks, started);
        Ok(cloud)
    }

    fn voxelize(
        &mut self,
        cloud: &LabeledPointCloud,
        raster: Option<&DepthRaster>,
    ) -> Result<(StructuredLatent, SceneState, ImageMeta), PipelineError> {
        let started = Instant::now();
        let m = self.cfg.scene_resolution();
        let (normalized, transform) = normalize(cloud).at(Stage::Voxelize)?;
        let (positions, state) = crate::prior::voxelize(&normalized, m);
        let scene = init_scene_latent(positions, m, self.cfg.channels).at(Stage::Voxelize)?;
        save_slat(&scene, &self.out.join("prior.slat")).at(Stage::Voxelize)?;
        state
            .save(&self.out.join("prior.state"))
            .at(Stage::Voxelize)?;
        let image = image_meta(raster, transform, m);
        let meta = PriorMeta {
            normalization: transform,
            image,
        };
        fs::write(
            self.out.join("prior.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
        .at(Stage::Voxelize)?;
        self.record("prior.slat");
        self.record("prior.state");
        self.record("prior.json");
        self.manifest.normalization = Some(transform);
        self.manifest.prior_voxels = scene.len();
        self.time(Stage::Voxelize, started);
        Ok((scene, state, image))
    }

    fn plan(&mut self, scene: &StructuredLatent) -> Result<PatchPlan, PipelineError> {
        let started = Instant::now();
        let n = self.cfg.n;
        let plan =
            plan_patches(scene.positions(), self.cfg.scene_resolution(), [n; 3]).at(Stage::Plan)?;
        fs::write(self.out.join("plan.json"), plan.to_json()).at(Stage::Plan)?;
        self.record("plan.json");
        self.manifest.plan = Some(plan.clone());
        log::info!("{} regions planned", plan.len());
        self.time(Stage::Plan, started);
        Ok(plan)
    }

    fn fields(&mut self, prior: &StructuredLatent) -> Fields {
        let seed = self.cfg.flow.seed;
        let sigma = self.cfg.flow.sigma_min;
        match self.cfg.generator.kind {
            GeneratorKind::Mock => Fields::Builtin(BuiltinField::mock(seed, sigma)),
            GeneratorKind::Oracle => {
                let occ = SceneOccupancy::new(prior.resolution(), prior.positions());
                Fields::Builtin(BuiltinField::oracle(Arc::new(occ), seed, sigma))
            }
            GeneratorKind::Adapter => {
                Fields::Adapter(AdapterField::new(self.client.take().expect("connected")))
            }
        }
    }

    fn regions(
        &mut self,
        mut scene: StructuredLatent,
        mut state: SceneState,
        image: &ImageMeta,
        plan: &PatchPlan,
    ) -> Result<(StructuredLatent, SceneState), PipelineError> {
        let started = Instant::now();
        let fields = self.fields(&scene);
        let root = PhiloxRng::new(self.cfg.flow.seed);
        let flow = self.cfg.flow.clone();
        let image_arg = self.image_param();
        let mut fuse_time = Duration::ZERO;

        for (index, &origin) in plan.origins.iter().enumerate() {
            let mut timings = BTreeMap::new();
            let t0 = Instant::now();
            let ctx = extract_region(&scene, &state, origin, plan.patch_shape, image)
                .at(Stage::Complete)?;
            let condition_id = match &fields {
                Fields::Adapter(f) => Some(
                    f.client()
                        .encode_image(&image_arg, ctx.crop)
                        .at(Stage::Complete)?,
                ),
                Fields::Builtin(_) => None,
            };
            let region_rng = root.fork(index as u64);
            let mut structure_rng = region_rng.fork(0);
            let mut feature_rng = region_rng.fork(1);
            let seeds = StreamSeeds {
                seed: flow.seed,
                structure_stream: structure_rng.stream(),
                feature_stream: feature_rng.stream(),
            };

            let t1 = Instant::now();
            let structure = complete_structure(
                &ctx,
                fields.field(),
                &flow,
                &mut structure_rng,
                condition_id.as_deref(),
            )
            .at(Stage::Complete)?;
            timings.insert("structure".to_string(), ms(t1.elapsed()));
            let t2 = Instant::now();
            let region = complete_features(
                &ctx,
                &structure.positions,
                fields.field(),
                &flow,
                &mut feature_rng,
                condition_id.as_deref(),
            )
            .at(Stage::Complete)?;
            timings.insert("features".to_string(), ms(t2.elapsed()));

            let t3 = Instant::now();
            let partial = classify_partial_landmarks(origin, plan.patch_shape, &state);
            let (fused, fused_state, stats) =
                fuse_region(&scene, &state, &region, origin, &partial).at(Stage::Fuse)?;
            scene = fused;
            state = fused_state;
            fuse_time += t3.elapsed();
            timings.insert("fusion".to_string(), ms(t3.elapsed()));
            timings.insert("total".to_string(), ms(t0.elapsed()));

            log::debug!(
                "region {index} at {origin:?}: {} voxels, {} written, {} new",
                region.len(),
                stats.written,
                stats.new_voxels
            );
            self.manifest.deviations.reinserted_known_voxels += structure.reinserted.len();
            self.manifest.regions.push(RegionRecord {
                index,
                origin,
                seeds,
                known_voxels: ctx.latent.len(),
                completed_voxels: region.len(),
                reinserted: structure.reinserted.len(),
                partial_landmarks: partial.into_iter().collect(),
                fusion: stats,
                timings_ms: timings,
            });
        }
        self.manifest
            .timings_ms
            .insert(Stage::Fuse.to_string(), ms(fuse_time));
        self.manifest.timings_ms.insert(
            Stage::Complete.to_string(),
            ms(started.elapsed() - fuse_time),
        );
        Ok((scene, state))
    }

    fn finalize(
        &mut self,
        scene: &StructuredLatent,
        state: &SceneState,
    ) -> Result<StructuredLatent, PipelineError> {
        let started = Instant::now();
        let final_scene = finalize_scene(scene, state).at(Stage::Finalize)?;
        self.manifest.deviations.unwritten_landmarks = state
            .landmark_ids()
            .into_iter()
            .filter(|id| !state.is_frozen(*id))
            .collect();
        for id in &self.manifest.deviations.unwritten_landmarks {
            log::warn!("landmark {id} was never fully inside a region; its features stay at their prior values");
        }
        self.manifest.scene_voxels = final_scene.len();
        self.time(Stage::Finalize, started);

        let started = Instant::now();
        save_slat(&final_scene, &self.out.join(SCENE_FILE)).at(Stage::Write)?;
        state.save(&self.out.join("scene.state")).at(Stage::Write)?;
        self.record(SCENE_FILE);
        self.record("scene.state");
        self.time(Stage::Write, started);
        Ok(final_scene)
    }

    fn execute(&mut self) -> Result<StructuredLatent, PipelineError> {
        self.connect()?;
        let (cloud, raster) = self.prior()?;
        let cloud = self.landmarks(cloud)?;
        let (scene, state, image) = self.voxelize(&cloud, raster.as_ref())?;
        let plan = self.plan(&scene)?;
        let (scene, state) = self.regions(scene, state, &image, &plan)?;
        self.finalize(&scene, &state)
    }

    fn write_manifest(&self) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(self.out.join(MANIFEST_FILE), text)
    }
}

/// Result of a successful run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub scene: StructuredLatent,
    pub manifest: RunManifest,
}

/// Runs every stage in order. See the module docs for failure behavior.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate().at(Stage::Config)?;
    fs::create_dir_all(&cfg.out).at(Stage::Config)?;
    let mut run = Run {
        cfg: cfg.clone(),
        out: &cfg.out,
        manifest: RunManifest {
            config: Some(cfg.clone()),
            ..Default::default()
        },
        client: None,
    };
    let started = Instant::now();
    let result = run.execute();
    run.manifest
        .timings_ms
        .insert("total".to_string(), ms(started.elapsed()));
    match result {
        Ok(scene) => {
            run.manifest.status = "ok".into();
            run.write_manifest().at(Stage::Write)?;
            Ok(RunOutput {
                scene,
                manifest: run.manifest,
            })
        }
        Err(e) => {
            log::error!("{e}");
            run.manifest.status = "failed".into();
            run.manifest.failed_stage = Some(e.stage);
            run.manifest.error = Some(e.to_string());
            if let Err(io) = run.write_manifest() {
                log::error!("could not write the failure manifest: {io}");
            }
            Err(e)
        }
    }
}

/// Counts of each state tag, for summaries.
pub fn tag_counts(state: &SceneState) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for t in state.tags() {
        let name = match t {
            VoxelTag::Empty => "empty",
            VoxelTag::Prior => "prior",
            VoxelTag::Generated => "generated",
            VoxelTag::Landmark(_) => "landmark",
        };
        *out.entry(name).or_default() += 1;
    }
    out
}
