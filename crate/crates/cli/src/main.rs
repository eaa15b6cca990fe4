use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scenelat::align::{icp_align, landmark_points, substitute_landmark, IcpConfig};
use scenelat::fixtures::two_box_town;
use scenelat::flow::FlowField;
use scenelat::formats::depth::{load_depth, save_depth};
use scenelat::formats::ply::{load_ply, save_ply};
use scenelat::fusion::{classify_partial_landmarks, fuse_region};
use scenelat::generators::{builtin_handler, builtin_object_points, BuiltinField, GeneratorKind, SceneOccupancy};
use scenelat::pipeline::{image_meta, run_pipeline, tag_counts, PipelineConfig, PriorMeta};
use scenelat::prior::{init_scene_latent, normalize, unproject, unproject_labeled, voxelize, PointLabel};
use scenelat::protocol::{serve, AdapterClient, AdapterField, Handshake};
use scenelat::rng::PhiloxRng;
use scenelat::runner::{complete_features, complete_structure};
use scenelat::slat::{load_slat, save_slat};
use scenelat::tiler::{extract_region, plan_patches, ImageMeta, PatchPlan};
use scenelat::{FlowConfig, SceneState, StructuredLatent};

#[derive(Parser)]
#[command(name = "scenelat", version, about = "Structured-latent scene completion engine")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Global {
    /// Pipeline config JSON; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// mock, oracle or adapter.
    #[arg(long, global = true)]
    generator: Option<GeneratorKind>,
    /// Adapter command line, split on whitespace.
    #[arg(long, global = true, conflicts_with = "adapter_addr")]
    adapter_cmd: Option<String>,
    /// Adapter `host:port`.
    #[arg(long, global = true)]
    adapter_addr: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Depth map or point cloud to a voxelized prior scene.
    Prior {
        #[arg(long, conflicts_with = "cloud")]
        depth: Option<PathBuf>,
        #[arg(long)]
        cloud: Option<PathBuf>,
    },
    /// Replace labeled landmarks with generated objects aligned by ICP.
    Landmarks {
        #[arg(long)]
        cloud: PathBuf,
        /// Image handed to the adapter's object decoder.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Fit a uniform scale as well.
        #[arg(long)]
        scale: bool,
    },
    /// Plan overlapping regions over a scene.
    Plan {
        #[arg(long)]
        scene: PathBuf,
        /// Region size; the config's N when absent.
        #[arg(long)]
        patch: Option<u32>,
    },
    /// Complete one planned region.
    Complete {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Index into the plan's origins.
        #[arg(long)]
        region: usize,
        /// `prior.json` from the prior step, for image crops.
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Scene whose occupancy the oracle generator targets; `--scene` when absent.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Fuse a completed region into the scene.
    Fuse {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        region: PathBuf,
        /// Region origin as `x,y,z`.
        #[arg(long, value_parser = parse_origin)]
        origin: [u32; 3],
    },
    /// Run every stage.
    Run {
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        landmarks: bool,
    },
    /// Print statistics of a `.slat` latent or `.state` file.
    Inspect { file: PathBuf },
    /// Write the procedural two-box depth fixture.
    Fixture {
        #[arg(long)]
        landmarks: bool,
    },
    /// Serve a builtin generator over the adapter protocol (stdio or TCP).
    #[command(hide = true)]
    ServeBuiltin {
        /// Listen on this address instead of stdio; serves one connection.
        #[arg(long)]
        listen: Option<String>,
        /// Scene the oracle generator targets.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        resolution: u32,
        #[arg(long, default_value_t = 8)]
        channels: usize,
    },
}

fn parse_origin(s: &str) -> Result<[u32; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got '{s}'"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad coordinate '{p}'"))?;
    }
    Ok(out)
}

impl Global {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                PipelineConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.flow.seed = seed;
        }
        if let Some(kind) = self.generator {
            cfg.generator.kind = kind;
        }
        if let Some(cmd) = &self.adapter_cmd {
            cfg.generator.command = Some(cmd.split_whitespace().map(str::to_string).collect());
            cfg.generator.address = None;
        }
        if let Some(addr) = &self.adapter_addr {
            cfg.generator.address = Some(addr.clone());
            cfg.generator.command = None;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &PipelineConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn connect(cfg: &PipelineConfig) -> Result<(AdapterClient, Handshake)> {
    let endpoint = cfg
        .generator
        .endpoint()
        .context("adapter generator needs --adapter-cmd or --adapter-addr")?;
    let mut client = AdapterClient::connect(&endpoint, Duration::from_secs(cfg.generator.timeout_secs))?;
    let hs = client.handshake()?;
    Ok((client, hs))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_prior(cfg: &PipelineConfig, depth: Option<PathBuf>, cloud: Option<PathBuf>) -> Result<()> {
    let out = out_dir(cfg)?;
    let m = cfg.scene_resolution();
    let (cloud, raster) = match (depth, cloud) {
        (Some(path), _) => {
            let input = load_depth(&path)?;
            let cloud = match &input.labels {
                Some(l) => unproject_labeled(&input.raster, l)?,
                None => unproject(&input.raster)?,
            };
            save_ply(&cloud, &out.join("prior_cloud.ply"))?;
            (cloud, Some(input.raster))
        }
        (None, Some(path)) => (load_ply(&path)?, None),
        (None, None) => bail!("give --depth or --cloud"),
    };
    let (normalized, transform) = normalize(&cloud)?;
    let (positions, state) = voxelize(&normalized, m);
    let scene = init_scene_latent(positions, m, cfg.channels)?;
    save_slat(&scene, &out.join("prior.slat"))?;
    state.save(&out.join("prior.state"))?;
    let meta = PriorMeta {
        normalization: transform,
        image: image_meta(raster.as_ref(), transform, m),
    };
    write_json(&out.join("prior.json"), &meta)?;
    println!("{} points -> {} voxels at M={m}", cloud.len(), scene.len());
    Ok(())
}

fn cmd_landmarks(cfg: &PipelineConfig, cloud_path: &Path, image: Option<PathBuf>, scale: bool) -> Result<()> {
    let out = out_dir(cfg)?;
    let mut cloud = load_ply(cloud_path)?;
    let ids: BTreeSet<u32> = cloud
        .labels()
        .iter()
        .filter_map(|l| match l {
            PointLabel::Foreground(id) => Some(*id),
            PointLabel::Background => None,
        })
        .collect();
    let mut client = match cfg.generator.kind {
        GeneratorKind::Adapter => Some(connect(cfg)?.0),
        _ => None,
    };
    let image = image.map(|p| p.display().to_string()).unwrap_or_default();
    let icp = IcpConfig {
        estimate_scale: scale,
        ..cfg.icp
    };
    let mut report = Vec::new();
    for id in ids {
        let observed = landmark_points(&cloud, id);
        let generated = match &mut client {
            Some(c) => c.decode_object(&image, id)?,
            None => builtin_object_points(id, &observed),
        };
        let fit = icp_align(&generated, &observed, &icp).with_context(|| format!("aligning landmark {id}"))?;
        let scaled: Vec<_> = generated.iter().map(|p| p * fit.scale).collect();
        cloud = substitute_landmark(&cloud, id, &scaled, &fit.transform)?;
        println!("landmark {id}: {} -> {} points, rmse {:.3e}", observed.len(), generated.len(), fit.rmse);
        report.push(serde_json::json!({
            "id": id,
            "rmse": fit.rmse,
            "iterations": fit.iterations,
            "scale": fit.scale,
            "rmse_history": fit.rmse_history,
        }));
    }
    save_ply(&cloud, &out.join("landmark_cloud.ply"))?;
    write_json(&out.join("landmarks.json"), &report)
}

fn cmd_plan(cfg: &PipelineConfig, scene: &Path, patch: Option<u32>) -> Result<()> {
    let out = out_dir(cfg)?;
    let scene = load_slat(scene)?;
    let p = patch.unwrap_or(cfg.n);
    let plan = plan_patches(scene.positions(), scene.resolution(), [p; 3])?;
    fs::write(out.join("plan.json"), plan.to_json())?;
    println!("{} regions of {p}^3 over bbox {:?}..={:?}", plan.len(), plan.bbox.min, plan.bbox.max);
    Ok(())
}

struct CompleteArgs {
    scene: PathBuf,
    state: PathBuf,
    plan: PathBuf,
    region: usize,
    meta: Option<PathBuf>,
    target: Option<PathBuf>,
}

fn cmd_complete(cfg: &PipelineConfig, a: CompleteArgs) -> Result<()> {
    let out = out_dir(cfg)?;
    let scene = load_slat(&a.scene)?;
    let state = SceneState::load(&a.state)?;
    let plan = PatchPlan::from_json(&fs::read_to_string(&a.plan)?)?;
    let origin = *plan
        .origins
        .get(a.region)
        .with_context(|| format!("plan has {} regions", plan.len()))?;
    let image = match &a.meta {
        Some(p) => serde_json::from_str::<PriorMeta>(&fs::read_to_string(p)?)?.image,
        None => ImageMeta {
            width: scene.resolution(),
            height: scene.resolution(),
            camera: None,
        },
    };
    let mut flow: FlowConfig = cfg.flow.clone();
    let ctx = extract_region(&scene, &state, origin, plan.patch_shape, &image)?;

    let mut condition_id = None;
    let field: Box<dyn FlowField> = match cfg.generator.kind {
        GeneratorKind::Mock => Box::new(BuiltinField::mock(flow.seed, flow.sigma_min)),
        GeneratorKind::Oracle => {
            let target = match &a.target {
                Some(p) => load_slat(p)?,
                None => scene.clone(),
            };
            let occ = SceneOccupancy::new(target.resolution(), target.positions());
            Box::new(BuiltinField::oracle(Arc::new(occ), flow.seed, flow.sigma_min))
        }
        GeneratorKind::Adapter => {
            let (mut client, hs) = connect(cfg)?;
            flow.sigma_min = hs.sigma_min;
            condition_id = Some(client.encode_image("", ctx.crop)?);
            Box::new(AdapterField::new(client))
        }
    };
    let region_rng = PhiloxRng::new(flow.seed).fork(a.region as u64);
    let structure = complete_structure(&ctx, &field, &flow, &mut region_rng.fork(0), condition_id.as_deref())?;
    let latent = complete_features(
        &ctx,
        &structure.positions,
        &field,
        &flow,
        &mut region_rng.fork(1),
        condition_id.as_deref(),
    )?;
    let name = format!("region_{}", a.region);
    save_slat(&latent, &out.join(format!("{name}.slat")))?;
    write_json(
        &out.join(format!("{name}.json")),
        &serde_json::json!({
            "origin": origin,
            "seed": flow.seed,
            "known_voxels": ctx.latent.len(),
            "completed_voxels": latent.len(),
            "reinserted": structure.reinserted.len(),
        }),
    )?;
    println!("region {} at {origin:?}: {} -> {} voxels", a.region, ctx.latent.len(), latent.len());
    Ok(())
}

fn cmd_fuse(cfg: &PipelineConfig, scene: &Path, state: &Path, region: &Path, origin: [u32; 3]) -> Result<()> {
    let out = out_dir(cfg)?;
    let scene = load_slat(scene)?;
    let state = SceneState::load(state)?;
    let region = load_slat(region)?;
    let shape = [region.resolution(); 3];
    let partial = classify_partial_landmarks(origin, shape, &state);
    let (fused, fused_state, stats) = fuse_region(&scene, &state, &region, origin, &partial)?;
    save_slat(&fused, &out.join("scene.slat"))?;
    fused_state.save(&out.join("scene.state"))?;
    println!(
        "fused at {origin:?}: {} written ({} new), {} kept, {} discarded",
        stats.written, stats.new_voxels, stats.kept_existing, stats.discarded_partial
    );
    Ok(())
}

fn inspect_latent(latent: &StructuredLatent) {
    println!("resolution  {}", latent.resolution());
    println!("channels    {}", latent.channels());
    println!("voxels      {}", latent.len());
    if latent.is_empty() {
        return;
    }
    let mut lo = [u32::MAX; 3];
    let mut hi = [0u32; 3];
    for p in latent.positions() {
        for (i, c) in p.to_array().into_iter().enumerate() {
            lo[i] = lo[i].min(c);
            hi[i] = hi[i].max(c);
        }
    }
    println!("bbox        {lo:?}..={hi:?}");
    for c in 0..latent.channels() {
        let vals = latent.features().iter().skip(c).step_by(latent.channels()).map(|&v| v as f64);
        let (mut n, mut sum, mut sq, mut min, mut max) = (0.0, 0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for v in vals {
            n += 1.0;
            sum += v;
            sq += v * v;
            min = min.min(v);
            max = max.max(v);
        }
        let mean = sum / n;
        let std = (sq / n - mean * mean).max(0.0).sqrt();
        println!("channel {c:<3} mean {mean:+.4} std {std:.4} min {min:+.4} max {max:+.4}");
    }
}

fn cmd_inspect(path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "state") {
        let state = SceneState::load(path)?;
        println!("dims        {:?}", state.dims());
        for (tag, n) in tag_counts(&state) {
            println!("{tag:<11} {n}");
        }
        println!("landmarks   {:?}", state.landmark_ids());
        println!("frozen      {:?}", state.frozen_landmarks());
    } else {
        inspect_latent(&load_slat(path)?);
    }
    Ok(())
}

fn cmd_serve(cfg: &PipelineConfig, listen: Option<String>, target: Option<PathBuf>, hs: Handshake) -> Result<()> {
    let field = match (cfg.generator.kind, target) {
        (GeneratorKind::Oracle, Some(p)) => {
            let t = load_slat(&p)?;
            BuiltinField::oracle(Arc::new(SceneOccupancy::new(t.resolution(), t.positions())), cfg.flow.seed, hs.sigma_min)
        }
        (GeneratorKind::Oracle, None) => bail!("the oracle generator needs --target"),
        _ => BuiltinField::mock(cfg.flow.seed, hs.sigma_min),
    };
    let handler = builtin_handler(field, hs);
    match listen {
        Some(addr) => {
            let listener = TcpListener::bind(&addr)?;
            println!("listening on {}", listener.local_addr()?);
            let (stream, _) = listener.accept()?;
            serve(BufReader::new(stream.try_clone()?), stream, handler)?;
        }
        None => serve(io::stdin().lock(), io::stdout().lock(), handler)?,
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCENELAT_LOG", "warn")).init();
    let cli = Cli::parse();
    let mut cfg = cli.global.pipeline_config()?;
    match cli.command {
        Cmd::Prior { depth, cloud } => cmd_prior(&cfg, depth, cloud),
        Cmd::Landmarks { cloud, image, scale } => cmd_landmarks(&cfg, &cloud, image, scale),
        Cmd::Plan { scene, patch } => cmd_plan(&cfg, &scene, patch),
        Cmd::Complete {
            scene,
            state,
            plan,
            region,
            meta,
            target,
        } => cmd_complete(
            &cfg,
            CompleteArgs {
                scene,
                state,
                plan,
                region,
                meta,
                target,
            },
        ),
        Cmd::Fuse {
            scene,
            state,
            region,
            origin,
        } => cmd_fuse(&cfg, &scene, &state, &region, origin),
        Cmd::Run {
            depth,
            cloud,
            image,
            landmarks,
        } => {
            cfg.inputs.depth = depth.or(cfg.inputs.depth);
            cfg.inputs.cloud = cloud.or(cfg.inputs.cloud);
            cfg.inputs.image = image.or(cfg.inputs.image);
            cfg.landmarks |= landmarks;
            let run = run_pipeline(&cfg)?;
            let m = &run.manifest;
            println!(
                "{} regions, {} prior voxels -> {} scene voxels, {} deviations; wrote {}",
                m.regions.len(),
                m.prior_voxels,
                m.scene_voxels,
                m.deviations.total(),
                cfg.out.join(scenelat::pipeline::SCENE_FILE).display()
            );
            Ok(())
        }
        Cmd::Inspect { file } => cmd_inspect(&file),
        Cmd::Fixture { landmarks } => {
            let out = out_dir(&cfg)?;
            let path = save_depth(&two_box_town(landmarks), out, "two_box")?;
            println!("{}", path.display());
            Ok(())
        }
        Cmd::ServeBuiltin {
            listen,
            target,
            resolution,
            channels,
        } => {
            let hs = Handshake {
                sigma_min: cfg.flow.sigma_min,
                channels,
                resolution,
            };
            cmd_serve(&cfg, listen, target, hs)
        }
    }
}
