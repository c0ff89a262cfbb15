use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use geoar::fusion::WorldMesh;
use geoar::pipeline::{files, run_pipeline, run_with_source, DenseMode, InputConfig, InputKind, PipelineConfig, RunHooks, RunStatus, SessionInfo};
use geoar::synth::{fast_rig, SceneSpec, SyntheticSequence, TrajectorySpec};
use geoar::tum;

fn sequence(scene: SceneSpec, frames: usize) -> SyntheticSequence {
    let span = 2.0 * std::f64::consts::PI * frames as f64 / 300.0;
    let traj = TrajectorySpec { frame_count: frames, angular_span: span, ..TrajectorySpec::default() };
    SyntheticSequence::new(scene, traj, fast_rig(), 5).unwrap()
}

fn config(input: &Path, out: &Path) -> PipelineConfig {
    PipelineConfig::new(InputConfig { kind: InputKind::Synthetic, dir: input.to_path_buf(), fps: 30.0, max_frames: None }, out.to_path_buf())
}

fn check_outputs(out: &Path, frames: usize) -> WorldMesh {
    let traj = tum::load_trajectory(out.join(files::TRAJECTORY)).unwrap();
    assert_eq!(traj.len(), frames);
    let info: SessionInfo = serde_json::from_str(&std::fs::read_to_string(out.join(files::SESSION)).unwrap()).unwrap();
    assert_eq!(info.frames, frames);
    let mesh = WorldMesh::load_ply(out.join(files::MESH_PLY), info.voxel_size).unwrap();
    assert_eq!(mesh.vertices.len(), info.mesh_vertices);
    for name in [files::MESH_OBJ, files::KEYFRAMES, files::MAP, files::TIMING_JSON, files::TIMING_TXT] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    mesh
}

#[test]
fn flat_sequence_from_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let (input, out) = (tmp.path().join("seq"), tmp.path().join("out"));
    sequence(SceneSpec::flat(0.09), 50).write_to_dir(&input, 10).unwrap();
    let run = run_pipeline(&config(&input, &out), &RunHooks::default()).unwrap();
    assert_eq!(run.status, RunStatus::Completed);
    assert_eq!(run.status.exit_code(), 0);
    assert!(!run.mesh.triangles.is_empty());
    let mesh = check_outputs(&out, 50);
    assert_eq!(mesh.triangles.len(), run.mesh.triangles.len());
}

#[test]
fn inline_runs_are_deterministic() {
    let seq = Arc::new(sequence(SceneSpec::default(), 20));
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let cfg = config(tmp.path(), &tmp.path().join(name));
        run_with_source(&cfg, seq.clone(), &RunHooks::default()).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.keyframes, b.keyframes);
    for (p, q) in a.trajectory.iter().zip(&b.trajectory) {
        assert_eq!(p.pose.r, q.pose.r);
        assert_eq!(p.pose.q, q.pose.q);
    }
    assert_eq!(a.mesh.vertices, b.mesh.vertices);
    assert_eq!(a.mesh.triangles, b.mesh.triangles);
    let read = |n: &str| std::fs::read_to_string(tmp.path().join(n).join(files::TRAJECTORY)).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn concurrent_run_merges_only_keyframes() {
    let seq = Arc::new(sequence(SceneSpec::default(), 30));
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), &tmp.path().join("out"));
    cfg.workers = 2;
    let hooks = RunHooks { keep_surface_every: 1, ..RunHooks::default() };
    let run = run_with_source(&cfg, seq, &hooks).unwrap();
    assert_eq!(run.status, RunStatus::Completed);
    assert_eq!(run.trajectory.len(), 30);
    assert!(!run.merges.is_empty());
    for m in &run.merges {
        assert!(run.keyframes.contains(&m.keyframe), "merge of non-keyframe {}", m.keyframe);
    }
    for w in run.merges.windows(2) {
        assert!(w[1].mesh_version > w[0].mesh_version);
        assert!(w[1].occupied_after >= w[0].occupied_after);
    }
    assert_eq!(run.mesh.version, run.merges.last().unwrap().mesh_version);
    assert_eq!(run.kept_surfaces.len(), run.merges.len());
    check_outputs(&tmp.path().join("out"), 30);
}

#[test]
fn dense_disabled_yields_empty_mesh() {
    let seq = Arc::new(sequence(SceneSpec::default(), 8));
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), &tmp.path().join("out"));
    cfg.dense_mode = DenseMode::Disabled;
    let run = run_with_source(&cfg, seq, &RunHooks::default()).unwrap();
    assert!(run.merges.is_empty());
    assert!(run.mesh.triangles.is_empty());
    assert!(run.timing.dense.is_none());
    check_outputs(&tmp.path().join("out"), 8);
}

#[test]
fn interrupt_leaves_readable_outputs() {
    let seq = Arc::new(sequence(SceneSpec::default(), 40));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &tmp.path().join("out"));
    let hooks = RunHooks { cancel: Some(Arc::new(AtomicBool::new(true))), ..RunHooks::default() };
    let run = run_with_source(&cfg, seq, &hooks).unwrap();
    let RunStatus::Interrupted { frame } = run.status else { panic!("status {:?}", run.status) };
    assert!(frame < 40);
    assert_eq!(run.status.exit_code(), 0);
    check_outputs(&tmp.path().join("out"), run.trajectory.len());
}

#[test]
fn missing_input_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_pipeline(&config(&tmp.path().join("nope"), &tmp.path().join("out")), &RunHooks::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
