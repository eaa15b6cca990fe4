use std::fs;
use std::path::Path;

use scenelat::fixtures::two_box_town;
use scenelat::formats::depth::save_depth;
use scenelat::generators::GeneratorKind;
use scenelat::pipeline::{
    run_pipeline, tag_counts, GeneratorConfig, InputPaths, Stage, MANIFEST_FILE, SCENE_FILE,
};
use scenelat::slat::load_slat;
use scenelat::{PipelineConfig, RunManifest, SceneState};

fn small_config(dir: &Path, kind: GeneratorKind) -> PipelineConfig {
    let depth = save_depth(&two_box_town(true), dir, "two_box").unwrap();
    let mut cfg = PipelineConfig {
        n: 32,
        generator: GeneratorConfig {
            kind,
            ..Default::default()
        },
        landmarks: true,
        inputs: InputPaths {
            depth: Some(depth),
            ..Default::default()
        },
        out: dir.join("out"),
        ..Default::default()
    };
    cfg.flow.steps = 8;
    cfg
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn scene_below_region_size_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), GeneratorKind::Mock);
    cfg.m = Some(16);
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    assert!(err.to_string().contains("M=16"), "{err}");
}

#[test]
fn adapter_without_endpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), GeneratorKind::Adapter);
    assert_eq!(run_pipeline(&cfg).unwrap_err().stage, Stage::Config);
}

#[test]
fn config_json_defaults_and_round_trip() {
    let cfg = PipelineConfig::from_json(r#"{"n": 16, "flow": {"steps": 3}}"#).unwrap();
    assert_eq!(cfg.n, 16);
    assert_eq!(cfg.scene_resolution(), 32);
    assert_eq!(cfg.flow.steps, 3);
    assert_eq!(cfg.channels, PipelineConfig::default().channels);

    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);

    assert!(PipelineConfig::from_json(r#"{"n": 16, "typo": 1}"#).is_err());
}

#[test]
fn failing_stage_is_recorded_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), GeneratorKind::Mock);
    cfg.inputs.depth = Some(dir.path().join("missing.json"));
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Prior);
    let m = manifest(&cfg.out);
    assert_eq!(m.status, "failed");
    assert_eq!(m.failed_stage, Some(Stage::Prior));
    assert!(m.error.is_some());
    assert!(m.timings_ms.contains_key("total"));
}

#[test]
fn oracle_run_completes_the_prior_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), GeneratorKind::Oracle);
    let run = run_pipeline(&cfg).unwrap();
    let m = manifest(&cfg.out);
    assert_eq!(m, run.manifest);
    assert_eq!(m.status, "ok");
    assert_eq!(m.regions.len(), m.plan.as_ref().unwrap().len());
    assert_eq!(m.scene_voxels, run.scene.len());
    assert_eq!(m.deviations.reinserted_known_voxels, 0);
    assert!(!m.landmarks.is_empty());
    for a in &m.artifacts {
        assert!(cfg.out.join(a).exists(), "{a}");
    }

    let state = SceneState::load(&cfg.out.join("scene.state")).unwrap();
    assert_eq!(tag_counts(&state).get("prior"), None);
    assert_eq!(load_slat(&cfg.out.join(SCENE_FILE)).unwrap(), run.scene);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), GeneratorKind::Mock);
    let first = {
        run_pipeline(&cfg).unwrap();
        fs::read(cfg.out.join(SCENE_FILE)).unwrap()
    };
    cfg.out = dir.path().join("again");
    run_pipeline(&cfg).unwrap();
    assert_eq!(fs::read(cfg.out.join(SCENE_FILE)).unwrap(), first);

    cfg.flow.seed += 1;
    cfg.out = dir.path().join("other_seed");
    run_pipeline(&cfg).unwrap();
    assert_ne!(fs::read(cfg.out.join(SCENE_FILE)).unwrap(), first);
}
