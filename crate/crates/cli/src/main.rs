use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use geoar::eval::GridSpec;
use geoar::fusion::WorldMesh;
use geoar::interact::{format_length_mm, AnnotationStore, GeodesicParams, InteractError, MeshIndex, Record, SurfacePoint};
use geoar::pipeline::{
    evaluate_outputs, files, run_pipeline, DenseMode, InputConfig, InputKind, PipelineConfig, PipelineError, Published, RunHooks, SessionInfo, Thresholds,
};
use geoar::serve::{MeshSource, Server, Session};
use geoar::synth::{default_rig, fast_rig, SceneSpec, SyntheticSequence, TrajectorySpec};

const EXIT_IO: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_THRESHOLD: u8 = 4;

#[derive(Parser)]
#[command(name = "geoar", version, about = "Stereo endoscopy reconstruction with surface measurement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    Default,
    Flat,
    Sphere,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenseArg {
    KeyframesOnly,
    EveryFrame,
    Disabled,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic stereo sequence with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, value_enum, default_value = "default")]
        scene: SceneKind,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Write a ground-truth depth map every n-th frame (0: none).
        #[arg(long, default_value_t = 10)]
        depth_every: usize,
        /// Use the 640x480 rig.
        #[arg(long)]
        fast: bool,
    },
    /// Run tracking, mapping, dense reconstruction and fusion.
    Run {
        /// TOML configuration; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum)]
        dense_mode: Option<DenseArg>,
        #[arg(long)]
        max_frames: Option<usize>,
        /// Serve the growing mesh on this port while running.
        #[arg(long)]
        serve: Option<u16>,
    },
    /// Compare run outputs with a synthetic sequence's ground truth.
    Eval {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 100)]
        grid: usize,
        /// Write the per-cell error heat image here.
        #[arg(long)]
        heat: Option<PathBuf>,
        /// Error mapped to full heat-image intensity.
        #[arg(long, default_value_t = 5.0)]
        heat_scale_mm: f64,
        #[arg(long)]
        max_rmsd_mm: Option<f64>,
        #[arg(long)]
        min_coverage: Option<f64>,
        #[arg(long)]
        max_ate_percent: Option<f64>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Serve a finished session over TCP.
    Serve {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 7878)]
        port: u16,
    },
    /// Measure the geodesic distance between two stored surface points.
    Measure {
        #[arg(long)]
        outputs: PathBuf,
        /// Endpoints as FACE:B0,B1,B2.
        #[arg(long, requires = "b")]
        a: Option<String>,
        #[arg(long, requires = "a")]
        b: Option<String>,
        /// Use the anchors of two stored labels.
        #[arg(long, num_args = 2, value_names = ["ID_A", "ID_B"])]
        labels: Option<Vec<u64>>,
        /// Re-measure a stored measurement.
        #[arg(long)]
        record: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Synth { out, frames, scene, seed, depth_every, fast } => synth(&out, frames, scene, seed, depth_every, fast),
        Command::Run { config, input, output, workers, dense_mode, max_frames, serve } => {
            run(config, input, output, workers, dense_mode, max_frames, serve)
        }
        Command::Eval { outputs, truth, grid, heat, heat_scale_mm, max_rmsd_mm, min_coverage, max_ate_percent, json } => {
            let t = Thresholds { max_rmsd_mm, min_coverage, max_ate_fraction: max_ate_percent.map(|p| p / 100.0) };
            eval(&outputs, &truth, grid, heat.as_deref(), heat_scale_mm, &t, json)
        }
        Command::Serve { outputs, host, port } => serve(&outputs, &host, port),
        Command::Measure { outputs, a, b, labels, record } => measure(&outputs, a.zip(b), labels, record),
    };
    ExitCode::from(code)
}

fn synth(out: &Path, frames: usize, scene: SceneKind, seed: u64, depth_every: usize, fast: bool) -> u8 {
    let scene = match scene {
        SceneKind::Default => SceneSpec::default(),
        SceneKind::Flat => SceneSpec::flat(0.09),
        SceneKind::Sphere => SceneSpec::sphere(0.1, 0.09, 0.02),
    };
    // Keep the per-frame motion of the 300-frame hover for any length.
    let base = TrajectorySpec::acceptance();
    let span = base.angular_span * frames as f64 / base.frame_count as f64;
    let traj = TrajectorySpec { frame_count: frames, angular_span: span, ..base };
    let rig = if fast { fast_rig() } else { default_rig() };
    let seq = match SyntheticSequence::new(scene, traj, rig, seed) {
        Ok(s) => s,
        Err(e) => {
            error!("{e}");
            return EXIT_INVALID;
        }
    };
    match seq.write_to_dir(out, depth_every) {
        Ok(()) => {
            println!("wrote {frames} frames to {}", out.display());
            0
        }
        Err(e) => {
            error!("{e}");
            EXIT_IO
        }
    }
}

fn pipeline_code(e: &PipelineError) -> u8 {
    e.exit_code() as u8
}

fn run(
    config: Option<PathBuf>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    workers: Option<usize>,
    dense: Option<DenseArg>,
    max_frames: Option<usize>,
    serve_port: Option<u16>,
) -> u8 {
    let mut cfg = match (config, input, output) {
        (Some(path), input, output) => {
            let mut cfg = match PipelineConfig::load(&path) {
                Ok(c) => c,
                Err(e) => {
                    error!("{e}");
                    return pipeline_code(&e);
                }
            };
            if let Some(i) = input {
                cfg.input.dir = i;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            cfg
        }
        (None, Some(input), Some(output)) => {
            let kind = if input.join("scene.json").exists() { InputKind::Synthetic } else { InputKind::Images };
            PipelineConfig::new(InputConfig { kind, dir: input, fps: 30.0, max_frames: None }, output)
        }
        _ => {
            error!("give --config or both --input and --output");
            return EXIT_INVALID;
        }
    };
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(d) = dense {
        cfg.dense_mode = match d {
            DenseArg::KeyframesOnly => DenseMode::KeyframesOnly,
            DenseArg::EveryFrame => DenseMode::EveryFrame,
            DenseArg::Disabled => DenseMode::Disabled,
        };
    }
    if max_frames.is_some() {
        cfg.input.max_frames = max_frames;
    }
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)) {
        log::warn!("no interrupt handler: {e}");
    }
    let slot = Arc::new(Published::new(WorldMesh::new(cfg.fusion.voxel_size)));
    let server = match serve_port {
        Some(port) => {
            let rig = match geoar::pipeline::DirSource::open(&cfg.input.dir, cfg.input.fps) {
                Ok(src) => geoar::pipeline::FrameSource::rig(&src),
                Err(e) => {
                    error!("{e}");
                    return pipeline_code(&e);
                }
            };
            let session = Session::new(MeshSource::Live(slot.clone()), rig, cfg.interact);
            match session.with_store(cfg.output.join(files::ANNOTATIONS)).and_then(|s| Server::start(Arc::new(s), ("127.0.0.1", port))) {
                Ok(s) => {
                    println!("live session on {}", s.addr);
                    Some(s)
                }
                Err(e) => {
                    error!("{e}");
                    return EXIT_IO;
                }
            }
        }
        None => None,
    };
    let hooks = RunHooks { mesh: Some(slot), cancel: Some(cancel), keep_surface_every: 0 };
    let outcome = run_pipeline(&cfg, &hooks);
    if let Some(s) = server {
        s.shutdown();
    }
    match outcome {
        Ok(out) => {
            println!("{}", out.status_line());
            info!("outputs in {}", cfg.output.display());
            out.status.exit_code() as u8
        }
        Err(e) => {
            error!("{e}");
            pipeline_code(&e)
        }
    }
}

fn eval(outputs: &Path, truth: &Path, grid: usize, heat: Option<&Path>, scale: f64, t: &Thresholds, json: bool) -> u8 {
    let report = match evaluate_outputs(outputs, truth, GridSpec { m: grid, n: grid }) {
        Ok(r) => r,
        Err(e) => {
            error!("{e}");
            return pipeline_code(&e);
        }
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
    }
    if let Some(path) = heat {
        if let Err(e) = report.rmsd.save_heat_image(path, scale) {
            error!("{e}");
            return EXIT_IO;
        }
    }
    let violations = report.violations(t);
    for v in &violations {
        println!("FAIL {v}");
    }
    if violations.is_empty() {
        0
    } else {
        EXIT_THRESHOLD
    }
}

fn serve(outputs: &Path, host: &str, port: u16) -> u8 {
    let session = match Session::open_outputs(outputs, GeodesicParams::default()) {
        Ok(s) => s,
        Err(e) => {
            error!("{e}");
            return EXIT_INVALID;
        }
    };
    match Server::start(Arc::new(session), (host, port)) {
        Ok(server) => {
            println!("serving {} on {}", outputs.display(), server.addr);
            server.wait();
            0
        }
        Err(e) => {
            error!("{e}");
            EXIT_IO
        }
    }
}

fn parse_point(s: &str) -> Option<(u32, [f64; 3])> {
    let (face, bary) = s.split_once(':')?;
    let b: Vec<f64> = bary.split(',').map(|v| v.trim().parse().ok()).collect::<Option<_>>()?;
    Some((face.trim().parse().ok()?, b.try_into().ok()?))
}

fn measure(outputs: &Path, ab: Option<(String, String)>, labels: Option<Vec<u64>>, record: Option<u64>) -> u8 {
    let fail = |msg: String, code: u8| {
        error!("{msg}");
        code
    };
    let info: SessionInfo = match std::fs::read_to_string(outputs.join(files::SESSION)).map_err(|e| e.to_string()).and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string())) {
        Ok(i) => i,
        Err(e) => return fail(format!("{}: {e}", outputs.join(files::SESSION).display()), EXIT_INVALID),
    };
    let mut mesh = match WorldMesh::load_ply(outputs.join(files::MESH_PLY), info.voxel_size) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string(), EXIT_INVALID),
    };
    mesh.version = info.mesh_version;
    let index = MeshIndex::new(Arc::new(mesh), GeodesicParams::default());
    let stored = || AnnotationStore::load(outputs.join(files::ANNOTATIONS)).map_err(|e| e.to_string());
    let endpoints: Result<(SurfacePoint, SurfacePoint), String> = if let Some((a, b)) = ab {
        let pa = parse_point(&a).ok_or(format!("bad point {a:?}, expected FACE:B0,B1,B2"));
        let pb = parse_point(&b).ok_or(format!("bad point {b:?}, expected FACE:B0,B1,B2"));
        pa.and_then(|pa| pb.map(|pb| (pa, pb))).and_then(|(pa, pb)| {
            let a = SurfacePoint::new(&index.mesh, pa.0, pa.1).map_err(|e| e.to_string())?;
            let b = SurfacePoint::new(&index.mesh, pb.0, pb.1).map_err(|e| e.to_string())?;
            Ok((a, b))
        })
    } else if let Some(ids) = labels {
        stored().and_then(|store| {
            let anchor = |id: u64| {
                store
                    .records
                    .iter()
                    .find_map(|r| match r {
                        Record::Label(a) if a.id == id => Some(a.anchor),
                        _ => None,
                    })
                    .ok_or(format!("no label {id}"))
            };
            Ok((anchor(ids[0])?, anchor(ids[1])?))
        })
    } else if let Some(id) = record {
        stored().and_then(|store| {
            store
                .records
                .iter()
                .find_map(|r| match r {
                    Record::Measure { id: rid, a, b, .. } if *rid == id => Some((*a, *b)),
                    _ => None,
                })
                .ok_or(format!("no measurement {id}"))
        })
    } else {
        Err("give --a/--b, --labels or --record".into())
    };
    let (a, b) = match endpoints {
        Ok(e) => e,
        Err(e) => return fail(e, EXIT_INVALID),
    };
    for p in [&a, &b] {
        if let Err(e) = SurfacePoint::new(&index.mesh, p.face, p.bary) {
            return fail(format!("stored point no longer valid: {e}"), EXIT_INVALID);
        }
    }
    match index.measure_geodesic(&a, &b) {
        Ok(path) => {
            println!("{}", format_length_mm(path.length));
            0
        }
        Err(e @ InteractError::NoPath) => fail(e.to_string(), EXIT_IO),
        Err(e) => fail(e.to_string(), EXIT_INVALID),
    }
}
