//! End-to-end run: tracking, keyframe mapping with bundle adjustment, dense
//! reconstruction and fusion, with per-stage timing and session outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densestereo::{compute_disparity, DenseParams};
use crate::eval::{rmsd_surfaces, timing_report, trajectory_ate, GridSpec, RmsdReport, RunTiming, TimingReport, TrajectoryError};
use crate::features::OrbConfig;
use crate::frame::StereoFrame;
use crate::fusion::{lift_keyframe, to_world, FusionParams, LocalSurface, MergeStats, WorldMesh};
use crate::geometry::{PoseSE3, StereoRig};
use crate::interact::GeodesicParams;
use crate::mapping::{bundle_adjust, should_insert_keyframe, BaParams, KeyframePolicy, MapState, NewKeyframe, NewPoint};
use crate::synth::{self, SequenceManifest, SyntheticSequence};
use crate::tracking::{extract_frame_features, keyframe_points, TrackStatus, Tracker, TrackerConfig};
use crate::tum::{self, StampedPose};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl PipelineError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Input(_) => 2,
            PipelineError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenseMode {
    #[default]
    KeyframesOnly,
    EveryFrame,
    /// No dense reconstruction; the mesh stays empty.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// Directory written by `geoar synth` (includes ground truth).
    Synthetic,
    /// Rectified stereo image sequence.
    Images,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputConfig {
    pub kind: InputKind,
    pub dir: PathBuf,
    /// Frame rate used when the directory has no timestamps.
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Process at most this many frames.
    #[serde(default)]
    pub max_frames: Option<usize>,
}

fn default_fps() -> f64 {
    30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub keyframe: KeyframePolicy,
    pub ba: BaParams,
}

/// Run configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: InputConfig,
    pub output: PathBuf,
    #[serde(default)]
    pub dense_mode: DenseMode,
    /// 1 runs every stage inline on the calling thread (deterministic);
    /// 0 or more than 1 runs the tracker, mapper and dense pool concurrently,
    /// with 0 sizing the dense pool from the available cores.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Mesh checkpoint interval in merges; 0 writes the mesh only at the end.
    #[serde(default = "default_checkpoint")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub features: OrbConfig,
    #[serde(default)]
    pub tracking: TrackerConfig,
    #[serde(default)]
    pub mapping: MappingConfig,
    #[serde(default)]
    pub dense: DenseParams,
    #[serde(default)]
    pub fusion: FusionParams,
    #[serde(default)]
    pub interact: GeodesicParams,
}

fn default_workers() -> usize {
    1
}

fn default_checkpoint() -> usize {
    10
}

impl PipelineConfig {
    pub fn new(input: InputConfig, output: PathBuf) -> Self {
        Self {
            input,
            output,
            dense_mode: DenseMode::default(),
            workers: default_workers(),
            checkpoint_every: default_checkpoint(),
            features: OrbConfig::default(),
            tracking: TrackerConfig::default(),
            mapping: MappingConfig::default(),
            dense: DenseParams::default(),
            fusion: FusionParams::default(),
            interact: GeodesicParams::default(),
        }
    }

    /// Parses TOML; relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if cfg.input.dir.is_relative() {
            cfg.input.dir = base.join(&cfg.input.dir);
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Checks parameters and that every input path exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.validate_params()?;
        let dir = &self.input.dir;
        let mut required = vec![dir.join("left"), dir.join("right"), dir.join("calib.txt")];
        if self.input.kind == InputKind::Synthetic {
            required.push(dir.join("scene.json"));
        }
        if !dir.is_dir() {
            return Err(PipelineError::Config(format!("input directory {} does not exist", dir.display())));
        }
        for p in required {
            if !p.exists() {
                return Err(PipelineError::Config(format!("missing input path {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn validate_params(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let p = self.dense.patch_size;
        if !(5..=15).contains(&p) || p % 2 == 0 {
            return bad(format!("dense.patch_size must be odd in 5..=15, got {p}"));
        }
        if self.fusion.stride == 0 || !(self.fusion.voxel_size > 0.0) || !(self.fusion.disc_threshold > 0.0) {
            return bad("fusion.stride, fusion.voxel_size and fusion.disc_threshold must be positive".into());
        }
        if self.tracking.min_inliers < 3 {
            return bad("tracking.min_inliers must be at least 3".into());
        }
        if !(self.input.fps > 0.0) {
            return bad("input.fps must be positive".into());
        }
        if self.mapping.ba.window == 0 {
            return bad("mapping.ba.window must be at least 1".into());
        }
        Ok(())
    }
}

/// Random-access stereo frames with their calibration.
pub trait FrameSource: Send + Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn rig(&self) -> StereoRig;
    fn frame(&self, i: usize) -> Result<StereoFrame, PipelineError>;
}

/// Frames stored as `left/*.png` and `right/*.png` with `calib.txt`.
/// Timestamps come from `poses_gt.txt` or `times.txt` when present,
/// otherwise from the frame rate.
#[derive(Debug, Clone)]
pub struct DirSource {
    pub dir: PathBuf,
    rig: StereoRig,
    names: Vec<String>,
    timestamps: Vec<f64>,
}

impl DirSource {
    pub fn open(dir: &Path, fps: f64) -> Result<Self, PipelineError> {
        let rig = StereoRig::load_calibration(dir.join("calib.txt")).map_err(|e| PipelineError::Input(e.to_string()))?;
        let mut names: Vec<String> = fs::read_dir(dir.join("left"))
            .map_err(|e| PipelineError::Input(format!("{}: {e}", dir.join("left").display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(PipelineError::Input(format!("no PNG frames in {}", dir.join("left").display())));
        }
        if let Some(n) = names.iter().find(|n| !dir.join("right").join(n).exists()) {
            return Err(PipelineError::Input(format!("right image {n} missing")));
        }
        let mut timestamps: Vec<f64> = (0..names.len()).map(|i| i as f64 / fps).collect();
        if let Ok(gt) = tum::load_trajectory(dir.join("poses_gt.txt")) {
            if gt.len() >= names.len() {
                timestamps = gt.iter().take(names.len()).map(|p| p.timestamp).collect();
            }
        } else if let Ok(text) = fs::read_to_string(dir.join("times.txt")) {
            let t: Vec<f64> = text.split_whitespace().filter_map(|s| s.parse().ok()).collect();
            if t.len() >= names.len() {
                timestamps = t[..names.len()].to_vec();
            }
        }
        Ok(Self { dir: dir.to_path_buf(), rig, names, timestamps })
    }
}

impl FrameSource for DirSource {
    fn len(&self) -> usize {
        self.names.len()
    }

    fn rig(&self) -> StereoRig {
        self.rig
    }

    fn frame(&self, i: usize) -> Result<StereoFrame, PipelineError> {
        let name = self.names.get(i).ok_or_else(|| PipelineError::Input(format!("frame {i} out of range")))?;
        let load = |side: &str| -> Result<Arc<image::GrayImage>, PipelineError> {
            let p = self.dir.join(side).join(name);
            let img = image::open(&p).map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?;
            Ok(Arc::new(img.into_luma8()))
        };
        let (left, right) = (load("left")?, load("right")?);
        let k = self.rig.intrinsics;
        for img in [&left, &right] {
            if img.dimensions() != (k.width, k.height) {
                return Err(PipelineError::Input(format!("frame {name} is {:?}, calibration says {}x{}", img.dimensions(), k.width, k.height)));
            }
        }
        Ok(StereoFrame { index: i, timestamp: self.timestamps[i], left, right })
    }
}

/// Frames rendered on demand from a synthetic sequence.
impl FrameSource for SyntheticSequence {
    fn len(&self) -> usize {
        SyntheticSequence::len(self)
    }

    fn rig(&self) -> StereoRig {
        self.rig
    }

    fn frame(&self, i: usize) -> Result<StereoFrame, PipelineError> {
        Ok(SyntheticSequence::frame(self, i))
    }
}

/// Reads the manifest of a synthetic directory back into a sequence.
pub fn synthetic_from_dir(dir: &Path) -> Result<(SyntheticSequence, SequenceManifest), PipelineError> {
    let m = crate::synth::load_manifest(dir).map_err(|e| PipelineError::Input(e.to_string()))?;
    let rig = StereoRig::load_calibration(dir.join("calib.txt")).map_err(|e| PipelineError::Input(e.to_string()))?;
    let seq = SyntheticSequence::new(m.scene.clone(), m.trajectory.clone(), rig, m.seed).map_err(|e| PipelineError::Input(e.to_string()))?;
    Ok((seq, m))
}

/// A value replaced atomically as a whole; readers hold the version they
/// loaded for as long as they need it.
#[derive(Debug)]
pub struct Published<T>(Mutex<Arc<T>>);

impl<T> Published<T> {
    pub fn new(value: T) -> Self {
        Self(Mutex::new(Arc::new(value)))
    }

    pub fn load(&self) -> Arc<T> {
        self.0.lock().expect("snapshot lock").clone()
    }

    pub fn store(&self, value: Arc<T>) {
        *self.0.lock().expect("snapshot lock") = value;
    }
}

/// Optional connections of a run to its surroundings.
#[derive(Clone, Default)]
pub struct RunHooks {
    /// Receives every new mesh version.
    pub mesh: Option<Arc<Published<WorldMesh>>>,
    /// Stops the run after the current frame when set.
    pub cancel: Option<Arc<AtomicBool>>,
    /// Keep the world-frame surface of every n-th merged keyframe (0: none).
    pub keep_surface_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Tracking stayed lost beyond the recovery window at this frame.
    TrackingLost { frame: usize },
    Interrupted { frame: usize },
}

impl RunStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Completed | RunStatus::Interrupted { .. } => 0,
            RunStatus::TrackingLost { .. } => 3,
        }
    }
}

/// One fusion merge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub keyframe: u64,
    pub vertices_added: usize,
    pub triangles_added: usize,
    pub voxels_added: usize,
    pub occupied_after: usize,
    pub mesh_version: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub trajectory: Vec<StampedPose>,
    pub track_status: Vec<TrackStatus>,
    pub keyframes: Vec<u64>,
    pub map: Arc<MapState>,
    pub mesh: Arc<WorldMesh>,
    pub merges: Vec<MergeRecord>,
    pub kept_surfaces: Vec<LocalSurface>,
    pub timing: RunTiming,
}

impl RunOutcome {
    pub fn status_line(&self) -> String {
        match self.status {
            RunStatus::Completed => format!(
                "completed: {} frames, {} keyframes, {} landmarks, mesh version {} with {} vertices",
                self.trajectory.len(),
                self.keyframes.len(),
                self.map.landmarks.len(),
                self.mesh.version,
                self.mesh.vertices.len()
            ),
            RunStatus::TrackingLost { frame } => format!("tracking lost at frame {frame}: {} frames written", self.trajectory.len()),
            RunStatus::Interrupted { frame } => format!("interrupted at frame {frame}: {} frames written", self.trajectory.len()),
        }
    }
}

/// Summary written next to the outputs and read back by `serve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub status: RunStatus,
    pub input_dir: PathBuf,
    pub frames: usize,
    pub keyframes: usize,
    pub landmarks: usize,
    pub mesh_version: u64,
    pub mesh_vertices: usize,
    pub voxel_size: f64,
    pub calibration: String,
}

/// Output file names inside the output directory.
pub mod files {
    pub const TRAJECTORY: &str = "trajectory.txt";
    pub const MESH_PLY: &str = "mesh.ply";
    pub const MESH_OBJ: &str = "mesh.obj";
    pub const KEYFRAMES: &str = "keyframes.txt";
    pub const MAP: &str = "map.txt";
    pub const TIMING_JSON: &str = "timing.json";
    pub const TIMING_TXT: &str = "timing.txt";
    pub const SESSION: &str = "session.json";
    pub const ANNOTATIONS: &str = "annotations.txt";
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(fs::File::create(&tmp)?);
    write(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(tmp, path)
}

/// Work item for the dense stage.
struct DenseJob {
    seq: usize,
    keyframe: u64,
    /// Pose when tracking-only (every-frame mode, non-keyframes).
    pose: Option<PoseSE3>,
    frame: StereoFrame,
}

struct DenseOutput {
    seq: usize,
    keyframe: u64,
    pose: Option<PoseSE3>,
    surface: LocalSurface,
    seconds: f64,
}

fn dense_job(job: DenseJob, rig: &StereoRig, dense: &DenseParams, fusion: &FusionParams) -> DenseOutput {
    let t = Instant::now();
    let surface = match compute_disparity(&job.frame.left, &job.frame.right, rig, dense) {
        Ok(res) => lift_keyframe(&res.output, rig, fusion, job.keyframe),
        Err(e) => {
            warn!("dense failed on frame {}: {e}", job.keyframe);
            lift_keyframe(&crate::frame::FloatMap::new(0, 0, f32::NAN), rig, fusion, job.keyframe)
        }
    };
    DenseOutput { seq: job.seq, keyframe: job.keyframe, pose: job.pose, surface, seconds: t.elapsed().as_secs_f64() }
}

/// Single owner of the world mesh; merges dense outputs in submission order.
struct Fuser {
    mesh: Arc<WorldMesh>,
    next_seq: usize,
    pending: BTreeMap<usize, DenseOutput>,
    merges: Vec<MergeRecord>,
    kept: Vec<LocalSurface>,
    dense_seconds: Vec<f64>,
    fuse_seconds: Vec<f64>,
    hooks: RunHooks,
    checkpoint_every: usize,
    output: PathBuf,
}

impl Fuser {
    fn new(voxel: f64, hooks: RunHooks, checkpoint_every: usize, output: PathBuf) -> Self {
        Self {
            mesh: Arc::new(WorldMesh::new(voxel)),
            next_seq: 0,
            pending: BTreeMap::new(),
            merges: Vec::new(),
            kept: Vec::new(),
            dense_seconds: Vec::new(),
            fuse_seconds: Vec::new(),
            hooks,
            checkpoint_every,
            output,
        }
    }

    fn accept(&mut self, out: DenseOutput, map: &Published<MapState>) {
        self.pending.insert(out.seq, out);
        while let Some(out) = self.pending.remove(&self.next_seq) {
            self.next_seq += 1;
            self.merge(out, map);
        }
    }

    fn merge(&mut self, out: DenseOutput, map: &Published<MapState>) {
        self.dense_seconds.push(out.seconds);
        let t = Instant::now();
        // Keyframes use their latest refined pose.
        let pose = map.load().keyframes.get(&out.keyframe).map(|kf| kf.pose).or(out.pose);
        let Some(pose) = pose else {
            warn!("no pose for dense output of frame {}", out.keyframe);
            return;
        };
        let world = to_world(&out.surface, &pose);
        let mesh = Arc::make_mut(&mut self.mesh);
        let MergeStats { vertices_added, triangles_added, voxels_added } = mesh.merge(&world);
        let every = self.hooks.keep_surface_every;
        if every > 0 && self.merges.len() % every == 0 {
            self.kept.push(world);
        }
        self.merges.push(MergeRecord {
            keyframe: out.keyframe,
            vertices_added,
            triangles_added,
            voxels_added,
            occupied_after: mesh.occupied_voxels(),
            mesh_version: mesh.version,
        });
        if let Some(slot) = &self.hooks.mesh {
            slot.store(self.mesh.clone());
        }
        if self.checkpoint_every > 0 && self.merges.len() % self.checkpoint_every == 0 {
            let mesh = self.mesh.clone();
            if let Err(e) = write_atomic(&self.output.join(files::MESH_PLY), |w| mesh.write_ply(w)) {
                warn!("mesh checkpoint failed: {e}");
            }
        }
        self.fuse_seconds.push(t.elapsed().as_secs_f64());
    }
}

/// Keyframe insertion plus bundle adjustment, publishing the refined map.
fn map_keyframe(map: &mut Arc<MapState>, kf: NewKeyframe, rig: &StereoRig, ba: &BaParams) -> Option<PoseSE3> {
    let id = kf.id;
    let m = Arc::make_mut(map);
    if let Err(e) = m.insert_keyframe(kf) {
        warn!("keyframe {id} rejected: {e}");
        return None;
    }
    if m.keyframes.len() > 1 {
        let report = bundle_adjust(m, rig, ba);
        info!("keyframe {id}: BA {:?} after {} iterations, cost {:.3} -> {:.3}", report.status, report.iterations, report.initial_cost(), report.final_cost());
    }
    m.keyframes.get(&id).map(|k| k.pose)
}

/// Streams trajectory lines to disk as frames are tracked.
struct TrajectoryWriter {
    w: BufWriter<fs::File>,
}

impl TrajectoryWriter {
    fn create(path: &Path) -> io::Result<Self> {
        Ok(Self { w: BufWriter::new(fs::File::create(path)?) })
    }

    fn push(&mut self, p: &StampedPose) -> io::Result<()> {
        writeln!(self.w, "{}", tum::format_line(p))?;
        self.w.flush()
    }
}

enum Step {
    Continue,
    Stop(RunStatus),
}

/// Tracker-side state shared by the inline and concurrent schedules.
struct Front<'a> {
    cfg: &'a PipelineConfig,
    rig: StereoRig,
    tracker: Option<Tracker>,
    trajectory: Vec<StampedPose>,
    statuses: Vec<TrackStatus>,
    keyframes: Vec<u64>,
    awaiting: Option<u64>,
    track_seconds: Vec<f64>,
    writer: TrajectoryWriter,
}

/// What the tracker asks of the back end for one frame.
struct FrameResult {
    keyframe: Option<NewKeyframe>,
    dense: Option<(u64, Option<PoseSE3>)>,
}

impl<'a> Front<'a> {
    fn step(&mut self, frame: &StereoFrame, map: &MapState) -> Result<(FrameResult, Step), PipelineError> {
        let t = Instant::now();
        let feats = extract_frame_features(&frame.left, &frame.right, &self.rig, &self.cfg.features)
            .map_err(|e| PipelineError::Input(format!("frame {}: {e}", frame.index)))?;
        let mut result = FrameResult { keyframe: None, dense: None };
        if let Some(id) = self.awaiting {
            if map.keyframes.contains_key(&id) {
                self.awaiting = None;
            }
        }
        let (pose, status) = match &mut self.tracker {
            None => {
                let pose = PoseSE3::identity();
                self.tracker = Some(Tracker::new(self.cfg.tracking, self.rig.intrinsics, pose, frame.timestamp));
                let new_points = feats
                    .stereo
                    .iter()
                    .map(|sp| NewPoint {
                        camera_point: sp.camera_point,
                        pixel: nalgebra::Vector2::new(sp.feature.kp.x, sp.feature.kp.y),
                        right_u: sp.right_u,
                        descriptor: sp.feature.desc,
                    })
                    .collect();
                result.keyframe = Some(NewKeyframe {
                    id: frame.index as u64,
                    timestamp: frame.timestamp,
                    pose,
                    left: frame.left.clone(),
                    right: frame.right.clone(),
                    features: feats.left.clone(),
                    tracked: Vec::new(),
                    new_points,
                });
                (pose, TrackStatus::Tracking)
            }
            Some(tracker) => {
                let out = tracker.track(&feats, map, frame.timestamp);
                if matches!(out.status, TrackStatus::Tracking | TrackStatus::Relocalized) && self.awaiting.is_none() {
                    if let Some(reference) = map.last_keyframe() {
                        if should_insert_keyframe(&out.tracked_landmarks(), reference, &self.cfg.mapping.keyframe) {
                            let (tracked, new_points) = keyframe_points(&feats, &out);
                            result.keyframe = Some(NewKeyframe {
                                id: frame.index as u64,
                                timestamp: frame.timestamp,
                                pose: out.pose,
                                left: frame.left.clone(),
                                right: frame.right.clone(),
                                features: feats.left.clone(),
                                tracked,
                                new_points,
                            });
                        }
                    }
                }
                (out.pose, out.status)
            }
        };
        self.track_seconds.push(t.elapsed().as_secs_f64());
        let stamped = StampedPose { timestamp: frame.timestamp, pose };
        self.writer.push(&stamped)?;
        self.trajectory.push(stamped);
        self.statuses.push(status);
        if let Some(kf) = &result.keyframe {
            self.keyframes.push(kf.id);
            self.awaiting = Some(kf.id);
        }
        match self.cfg.dense_mode {
            DenseMode::KeyframesOnly if result.keyframe.is_some() => result.dense = Some((frame.index as u64, None)),
            DenseMode::EveryFrame if matches!(status, TrackStatus::Tracking | TrackStatus::Relocalized) => {
                let pose = if result.keyframe.is_some() { None } else { Some(pose) };
                result.dense = Some((frame.index as u64, pose));
            }
            _ => {}
        }
        if status == TrackStatus::Halted {
            return Ok((result, Step::Stop(RunStatus::TrackingLost { frame: frame.index })));
        }
        Ok((result, Step::Continue))
    }
}

fn cancelled(hooks: &RunHooks) -> bool {
    hooks.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed))
}

/// Validates the configuration, opens the input directory and runs.
pub fn run_pipeline(cfg: &PipelineConfig, hooks: &RunHooks) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let source = DirSource::open(&cfg.input.dir, cfg.input.fps)?;
    run_with_source(cfg, Arc::new(source), hooks)
}

/// Runs the pipeline over `source` and writes all outputs to `cfg.output`.
pub fn run_with_source(cfg: &PipelineConfig, source: Arc<dyn FrameSource>, hooks: &RunHooks) -> Result<RunOutcome, PipelineError> {
    cfg.validate_params()?;
    fs::create_dir_all(&cfg.output)?;
    let rig = source.rig();
    let n = cfg.input.max_frames.map_or(source.len(), |m| m.min(source.len()));
    if n == 0 {
        return Err(PipelineError::Input("no frames".into()));
    }
    let start = Instant::now();
    let mut front = Front {
        cfg,
        rig,
        tracker: None,
        trajectory: Vec::with_capacity(n),
        statuses: Vec::with_capacity(n),
        keyframes: Vec::new(),
        awaiting: None,
        track_seconds: Vec::with_capacity(n),
        writer: TrajectoryWriter::create(&cfg.output.join(files::TRAJECTORY))?,
    };
    let map_slot = Arc::new(Published::new(MapState::new()));
    let fuser = Fuser::new(cfg.fusion.voxel_size, hooks.clone(), cfg.checkpoint_every, cfg.output.clone());
    let (status, fuser) = if cfg.workers == 1 {
        run_inline(&mut front, &*source, n, &map_slot, fuser, hooks)?
    } else {
        run_concurrent(&mut front, source.clone(), n, &map_slot, fuser, hooks)?
    };
    let map = map_slot.load();
    let dense_ran = cfg.dense_mode != DenseMode::Disabled;
    let timing = RunTiming {
        frames: front.trajectory.len(),
        keyframes: front.keyframes.len(),
        wall_seconds: start.elapsed().as_secs_f64(),
        track: front.track_seconds,
        dense: dense_ran.then_some(fuser.dense_seconds),
        fuse: dense_ran.then_some(fuser.fuse_seconds),
    };
    let outcome = RunOutcome {
        status,
        trajectory: front.trajectory,
        track_status: front.statuses,
        keyframes: front.keyframes,
        map,
        mesh: fuser.mesh,
        merges: fuser.merges,
        kept_surfaces: fuser.kept,
        timing,
    };
    write_outputs(cfg, &rig, &outcome)?;
    info!("{}", outcome.status_line());
    Ok(outcome)
}

fn run_inline(
    front: &mut Front,
    source: &dyn FrameSource,
    n: usize,
    map_slot: &Published<MapState>,
    mut fuser: Fuser,
    hooks: &RunHooks,
) -> Result<(RunStatus, Fuser), PipelineError> {
    let mut map = map_slot.load();
    let mut seq = 0;
    for i in 0..n {
        if cancelled(hooks) {
            return Ok((RunStatus::Interrupted { frame: i }, fuser));
        }
        let frame = source.frame(i)?;
        let (res, step) = front.step(&frame, &map)?;
        if let Some(kf) = res.keyframe {
            map_keyframe(&mut map, kf, &front.rig, &front.cfg.mapping.ba);
            map_slot.store(map.clone());
        }
        if let Some((id, pose)) = res.dense {
            let out = dense_job(DenseJob { seq, keyframe: id, pose, frame }, &front.rig, &front.cfg.dense, &front.cfg.fusion);
            seq += 1;
            fuser.accept(out, map_slot);
        }
        if let Step::Stop(s) = step {
            return Ok((s, fuser));
        }
    }
    Ok((RunStatus::Completed, fuser))
}

fn run_concurrent(
    front: &mut Front,
    source: Arc<dyn FrameSource>,
    n: usize,
    map_slot: &Arc<Published<MapState>>,
    fuser: Fuser,
    hooks: &RunHooks,
) -> Result<(RunStatus, Fuser), PipelineError> {
    let rig = front.rig;
    let cfg = front.cfg;
    let pool_size = if cfg.workers == 0 { std::thread::available_parallelism().map_or(2, |n| n.get()) } else { cfg.workers };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(pool_size)
        .thread_name(|i| format!("dense-{i}"))
        .build()
        .map_err(|e| PipelineError::Config(format!("dense pool: {e}")))?;
    let stop = Arc::new(AtomicBool::new(false));

    std::thread::scope(|s| {
        // Frame reader, a few frames ahead of the tracker.
        let (frame_tx, frame_rx) = mpsc::sync_channel::<Result<StereoFrame, PipelineError>>(4);
        let reader_stop = stop.clone();
        let reader_source = source.clone();
        s.spawn(move || {
            for i in 0..n {
                if reader_stop.load(Ordering::Relaxed) || frame_tx.send(reader_source.frame(i)).is_err() {
                    break;
                }
            }
        });

        // Mapping worker: sole writer of the map.
        let (kf_tx, kf_rx) = mpsc::channel::<(NewKeyframe, Option<(usize, StereoFrame)>)>();
        let (dense_tx, dense_rx) = mpsc::channel::<DenseJob>();
        let mapper_slot = map_slot.clone();
        let mapper_dense_tx = dense_tx.clone();
        s.spawn(move || {
            let mut map = mapper_slot.load();
            for (kf, dense) in kf_rx {
                map_keyframe(&mut map, kf, &rig, &cfg.mapping.ba);
                mapper_slot.store(map.clone());
                if let Some((seq, frame)) = dense {
                    let _ = mapper_dense_tx.send(DenseJob { seq, keyframe: frame.index as u64, pose: None, frame });
                }
            }
        });

        // Dense pool feeding the single fusion owner.
        let (out_tx, out_rx) = mpsc::channel::<DenseOutput>();
        let pool = &pool;
        s.spawn(move || {
            pool.scope(|ps| {
                for job in dense_rx {
                    let tx = out_tx.clone();
                    ps.spawn(move |_| {
                        let _ = tx.send(dense_job(job, &rig, &cfg.dense, &cfg.fusion));
                    });
                }
            });
        });
        let fuse_slot = map_slot.clone();
        let fusion = s.spawn(move || {
            let mut fuser = fuser;
            for out in out_rx {
                fuser.accept(out, &fuse_slot);
            }
            fuser
        });

        // Tracker on this thread.
        let mut seq = 0;
        let mut status = RunStatus::Completed;
        let mut error = None;
        for i in 0..n {
            if cancelled(hooks) {
                status = RunStatus::Interrupted { frame: i };
                break;
            }
            let frame = match frame_rx.recv() {
                Ok(Ok(f)) => f,
                Ok(Err(e)) => {
                    error = Some(e);
                    break;
                }
                Err(_) => break,
            };
            let map = map_slot.load();
            let (res, step) = match front.step(&frame, &map) {
                Ok(r) => r,
                Err(e) => {
                    error = Some(e);
                    break;
                }
            };
            let dense = res.dense.map(|(id, pose)| {
                seq += 1;
                (seq - 1, id, pose)
            });
            match (res.keyframe, dense) {
                (Some(kf), Some((sq, _, None))) => {
                    let _ = kf_tx.send((kf, Some((sq, frame))));
                }
                (Some(kf), d) => {
                    let _ = kf_tx.send((kf, None));
                    if let Some((sq, id, pose)) = d {
                        let _ = dense_tx.send(DenseJob { seq: sq, keyframe: id, pose, frame });
                    }
                }
                (None, Some((sq, id, pose))) => {
                    let _ = dense_tx.send(DenseJob { seq: sq, keyframe: id, pose, frame });
                }
                (None, None) => {}
            }
            if let Step::Stop(s) = step {
                status = s;
                break;
            }
        }
        stop.store(true, Ordering::Relaxed);
        drop(frame_rx);
        drop(kf_tx);
        drop(dense_tx);
        let fuser = fusion.join().expect("fusion thread");
        match error {
            Some(e) => Err(e),
            None => Ok((status, fuser)),
        }
    })
}

fn write_outputs(cfg: &PipelineConfig, rig: &StereoRig, out: &RunOutcome) -> Result<(), PipelineError> {
    let dir = &cfg.output;
    write_atomic(&dir.join(files::TRAJECTORY), |w| tum::write_trajectory(w, &out.trajectory))?;
    write_atomic(&dir.join(files::MESH_PLY), |w| out.mesh.write_ply(w))?;
    write_atomic(&dir.join(files::MESH_OBJ), |w| out.mesh.write_obj(w))?;
    write_atomic(&dir.join(files::KEYFRAMES), |w| {
        writeln!(w, "# keyframe_id timestamp tx ty tz qx qy qz qw")?;
        for id in &out.keyframes {
            if let Some(kf) = out.map.keyframes.get(id) {
                writeln!(w, "{id} {}", tum::format_line(&StampedPose { timestamp: kf.timestamp, pose: kf.pose }))?;
            }
        }
        Ok(())
    })?;
    write_atomic(&dir.join(files::MAP), |w| out.map.write_dump(w))?;
    let report = timing_report(&out.timing);
    write_atomic(&dir.join(files::TIMING_JSON), |w| {
        serde_json::to_writer_pretty(&mut *w, &serde_json::json!({ "raw": out.timing, "report": report })).map_err(io::Error::other)
    })?;
    fs::write(dir.join(files::TIMING_TXT), report.to_table())?;
    let info = SessionInfo {
        status: out.status,
        input_dir: cfg.input.dir.clone(),
        frames: out.trajectory.len(),
        keyframes: out.keyframes.len(),
        landmarks: out.map.landmarks.len(),
        mesh_version: out.mesh.version,
        mesh_vertices: out.mesh.vertices.len(),
        voxel_size: cfg.fusion.voxel_size,
        calibration: rig.to_calibration_string(),
    };
    write_atomic(&dir.join(files::SESSION), |w| serde_json::to_writer_pretty(&mut *w, &info).map_err(io::Error::other))?;
    Ok(())
}

/// Evaluation of a finished run against a synthetic sequence directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionEval {
    pub rmsd: RmsdReport,
    pub ate: TrajectoryError,
    pub timing: Option<TimingReport>,
}

/// Acceptance limits; `None` disables a check.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Thresholds {
    pub max_rmsd_mm: Option<f64>,
    pub min_coverage: Option<f64>,
    pub max_ate_fraction: Option<f64>,
}

impl SessionEval {
    /// Human-readable descriptions of every violated limit.
    pub fn violations(&self, t: &Thresholds) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(m) = t.max_rmsd_mm.filter(|&m| !(self.rmsd.rmsd_mm <= m)) {
            v.push(format!("surface RMSD {:.3} mm exceeds {m} mm", self.rmsd.rmsd_mm));
        }
        if let Some(c) = t.min_coverage.filter(|&c| !(self.rmsd.coverage >= c)) {
            v.push(format!("coverage {:.3} is below {c}", self.rmsd.coverage));
        }
        let frac = self.ate.rms / self.ate.path_length;
        if let Some(f) = t.max_ate_fraction.filter(|&f| !(frac <= f)) {
            v.push(format!("ATE {:.3}% of path exceeds {:.3}%", 100.0 * frac, 100.0 * f));
        }
        v
    }

    pub fn to_table(&self) -> String {
        let mut s = self.rmsd.to_table();
        s.push_str(&format!(
            "ATE rms {:.3} mm  max {:.3} mm  over {} poses, path {:.1} mm ({:.3}% of path)\n",
            self.ate.rms * 1e3,
            self.ate.max * 1e3,
            self.ate.poses,
            self.ate.path_length * 1e3,
            100.0 * self.ate.rms / self.ate.path_length
        ));
        if let Some(t) = &self.timing {
            s.push_str(&t.to_table());
        }
        s
    }
}

/// Compares the outputs in `outputs` with the ground truth stored in the
/// synthetic sequence directory `truth_dir`.
pub fn evaluate_outputs(outputs: &Path, truth_dir: &Path, grid: GridSpec) -> Result<SessionEval, PipelineError> {
    let input = |e: String| PipelineError::Input(e);
    let manifest = synth::load_manifest(truth_dir).map_err(|e| input(format!("{}: {e}", truth_dir.display())))?;
    let info: SessionInfo = serde_json::from_str(&fs::read_to_string(outputs.join(files::SESSION)).map_err(|e| input(format!("{}: {e}", outputs.join(files::SESSION).display())))?)
        .map_err(|e| input(e.to_string()))?;
    let mesh = WorldMesh::load_ply(outputs.join(files::MESH_PLY), info.voxel_size).map_err(|e| input(e.to_string()))?;
    let est: Vec<PoseSE3> = tum::load_trajectory(outputs.join(files::TRAJECTORY))?.into_iter().map(|p| p.pose).collect();
    let gt: Vec<PoseSE3> = tum::load_trajectory(truth_dir.join("poses_gt.txt"))?.into_iter().take(est.len()).map(|p| p.pose).collect();
    let ate = trajectory_ate(&gt, &est).map_err(|e| input(e.to_string()))?;
    let scene = manifest.scene;
    let h = scene.extent / 2.0;
    let bounds = [scene.center[0] - h, scene.center[0] + h, scene.center[1] - h, scene.center[1] + h];
    let rmsd = rmsd_surfaces(|x, y| scene.sample_surface(x, y).ok(), bounds, &mesh, grid).map_err(|e| input(e.to_string()))?;
    let timing = fs::read_to_string(outputs.join(files::TIMING_JSON))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| serde_json::from_value(v["report"].clone()).ok());
    Ok(SessionEval { rmsd, ate, timing })
}
