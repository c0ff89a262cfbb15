//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p geoar --test acceptance`.

use std::sync::Arc;
use std::time::Instant;

use image::{GrayImage, Luma};
use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use geoar::densestereo::{build_cost_volume, compute_disparity, zncc_score, DenseParams};
use geoar::eval::GridSpec;
use geoar::features::BinaryDescriptor;
use geoar::fusion::WorldMesh;
use geoar::geometry::{CameraIntrinsics, PoseSE3, StereoRig, Vec2, Vec3};
use geoar::interact::shapes::{flat_grid, icosphere};
use geoar::interact::{GeodesicParams, MeshIndex, Ray};
use geoar::mapping::{bundle_adjust, camproj_jacobians, BaParams, MapState, NewKeyframe, NewPoint, TrackedPoint};
use geoar::pipeline::{evaluate_outputs, run_pipeline, run_with_source, DenseMode, InputConfig, InputKind, PipelineConfig, RunHooks, RunStatus};
use geoar::synth::{default_rig, fast_rig, SceneSpec, SyntheticSequence, TrajectorySpec};
use geoar::tracking::{ransac_pose, reprojection_error, Correspondence3D, RansacParams};

const RMSD_MAX_MM: f64 = 3.0;
const COVERAGE_MIN: f64 = 0.60;
const ATE_MAX_FRACTION: f64 = 0.01;
const SEED: u64 = 7;

struct Ledger {
    failed: usize,
}

impl Ledger {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed += 1;
        }
    }

    fn info(&self, name: &str, detail: String) {
        println!("INFO {name}: {detail}");
    }
}

fn end_to_end(ledger: &mut Ledger) {
    let tmp = tempfile::tempdir().unwrap();
    let (seq_dir, out_dir) = (tmp.path().join("seq"), tmp.path().join("out"));
    let seq = SyntheticSequence::new(SceneSpec::default(), TrajectorySpec::acceptance(), default_rig(), SEED).unwrap();
    seq.write_to_dir(&seq_dir, 0).unwrap();
    let cfg = PipelineConfig::new(InputConfig { kind: InputKind::Synthetic, dir: seq_dir.clone(), fps: 30.0, max_frames: None }, out_dir.clone());
    let hooks = RunHooks { keep_surface_every: 1, ..RunHooks::default() };
    let t = Instant::now();
    let run = run_pipeline(&cfg, &hooks).unwrap();
    let secs = t.elapsed().as_secs_f64();
    ledger.info("run", format!("{} in {secs:.0} s", run.status_line()));
    let report = evaluate_outputs(&out_dir, &seq_dir, GridSpec::default()).unwrap();
    let completed = run.status == RunStatus::Completed;
    let r = &report.rmsd;
    ledger.record(
        "end-to-end surface accuracy",
        completed && r.rmsd_mm <= RMSD_MAX_MM && r.coverage >= COVERAGE_MIN,
        format!("RMSD {:.3} mm (limit {RMSD_MAX_MM}), coverage {:.1}% (limit {:.0}%)", r.rmsd_mm, 100.0 * r.coverage, 100.0 * COVERAGE_MIN),
    );
    let frac = report.ate.rms / report.ate.path_length;
    ledger.record(
        "tracking accuracy",
        completed && report.ate.poses == 300 && frac <= ATE_MAX_FRACTION,
        format!(
            "ATE {:.3} mm over {:.1} mm path = {:.3}% (limit {:.0}%), {} keyframes",
            report.ate.rms * 1e3,
            report.ate.path_length * 1e3,
            100.0 * frac,
            100.0 * ATE_MAX_FRACTION,
            run.keyframes.len()
        ),
    );
    fusion_properties(ledger, &run.mesh, &run.kept_surfaces, &run.merges, &seq.scene);
}

/// Distance from `p` to the heightfield, bounded above by a local search.
fn surface_distance(scene: &SceneSpec, p: &Vec3, reach: f64) -> f64 {
    let vertical = scene.sample_surface(p.x, p.y).map_or(f64::INFINITY, |z| (p.z - z).abs());
    if vertical <= reach {
        return vertical;
    }
    let steps = 24;
    let mut best = vertical;
    for i in -steps..=steps {
        for j in -steps..=steps {
            let (x, y) = (p.x + reach * i as f64 / steps as f64, p.y + reach * j as f64 / steps as f64);
            if let Ok(z) = scene.sample_surface(x, y) {
                best = best.min((Vec3::new(x, y, z) - p).norm());
            }
        }
    }
    best
}

fn fusion_properties(
    ledger: &mut Ledger,
    mesh: &WorldMesh,
    kept: &[geoar::fusion::LocalSurface],
    merges: &[geoar::pipeline::MergeRecord],
    scene: &SceneSpec,
) {
    let monotone = merges.windows(2).all(|w| w[1].occupied_after >= w[0].occupied_after && w[1].mesh_version > w[0].mesh_version);
    let mut again = mesh.clone();
    let (v0, t0, o0) = (again.vertices.len(), again.triangles.len(), again.occupied_voxels());
    let mut added = 0;
    for s in kept {
        let st = again.merge(s);
        added += st.vertices_added + st.triangles_added + st.voxels_added;
    }
    let idempotent = added == 0 && (again.vertices.len(), again.triangles.len(), again.occupied_voxels()) == (v0, t0, o0);
    let reach = 3.0 * mesh.voxel_size;
    let dists: Vec<f64> = mesh.vertices.iter().map(|p| surface_distance(scene, p, reach)).collect();
    let far = dists.iter().filter(|&&d| d > reach).count();
    let worst = dists.iter().cloned().fold(0.0, f64::max);
    ledger.record(
        "fusion properties",
        monotone && idempotent && far == 0 && !mesh.vertices.is_empty() && kept.len() == merges.len(),
        format!(
            "{} merges, coverage monotone {monotone}, re-merge of all {} keyframe surfaces adds {added} elements, {far}/{} vertices beyond {:.1} mm (worst {:.2} mm)",
            merges.len(),
            kept.len(),
            mesh.vertices.len(),
            reach * 1e3,
            worst * 1e3
        ),
    );
}

fn textured(w: u32, h: u32, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = GrayImage::from_fn(w, h, |_, _| Luma([rng.gen::<u8>()]));
    image::imageops::blur(&raw, 0.8)
}

fn brute_zncc(left: &GrayImage, right: &GrayImage, x: usize, y: usize, d: usize, r: usize) -> Option<f64> {
    let (w, h) = (left.width() as usize, left.height() as usize);
    if x < r + d || x + r >= w || y < r || y + r >= h {
        return None;
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for yy in y - r..=y + r {
        for xx in x - r..=x + r {
            a.push(left.get_pixel(xx as u32, yy as u32)[0] as f64);
            b.push(right.get_pixel((xx - d) as u32, yy as u32)[0] as f64);
        }
    }
    zncc_score(&a, &b)
}

fn dense_oracle(ledger: &mut Ledger) {
    // Fronto-parallel textured plane rendered by the synthesizer.
    let rig = default_rig();
    let depth = 0.0875;
    let seq = SyntheticSequence::new(SceneSpec::flat(depth), TrajectorySpec::stationary(2), rig, SEED).unwrap();
    let frame = seq.frame(0);
    let truth = rig.disparity_for_depth(depth) as f32;
    let res = compute_disparity(&frame.left, &frame.right, &rig, &DenseParams::default()).unwrap();
    let frac = |m: &geoar::frame::FloatMap| {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (i, v) in m.data.iter().enumerate() {
            let x = (i % m.width) as f32;
            if v.is_finite() && x - truth >= 3.0 {
                total += 1;
                hit += ((v - truth).abs() <= 1.0) as usize;
            }
        }
        (hit as f64 / total.max(1) as f64, total)
    };
    let (wta, n_wta) = frac(&res.wta.disparity);
    let (smooth, n_smooth) = frac(&res.output);
    ledger.record(
        "dense oracle (uniform disparity)",
        wta >= 0.95 && smooth >= 0.99 && n_wta > 0 && n_smooth > 0,
        format!("d = {truth:.2} px: WTA {:.2}% of {n_wta} within 1 px (limit 95%), smoothed {:.2}% of {n_smooth} (limit 99%)", 100.0 * wta, 100.0 * smooth),
    );

    let left = textured(64, 64, 1);
    let right = textured(64, 64, 2);
    let small = StereoRig::new(CameraIntrinsics::new(700.0, 32.0, 32.0, 64, 64).unwrap(), 0.005, 0.0, 12.0).unwrap();
    let mut worst: f64 = 0.0;
    let mut mismatched_validity = 0;
    for patch in [5, 7] {
        let vol = build_cost_volume(&left, &right, &small, patch).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                for di in 0..vol.n_disp {
                    let got = vol.get(x, y, di);
                    match brute_zncc(&left, &right, x, y, vol.disparity(di) as usize, patch / 2) {
                        Some(s) => worst = worst.max((s - got).abs()),
                        None => mismatched_validity += (!got.is_nan()) as usize,
                    }
                }
            }
        }
    }
    ledger.record(
        "dense oracle (incremental ZNCC)",
        worst < 1e-9 && mismatched_validity == 0,
        format!("64x64 crop, max |brute - incremental| = {worst:.2e} (limit 1e-9)"),
    );
}

fn random_pose(rng: &mut ChaCha8Rng, trans: f64, rot: f64) -> PoseSE3 {
    PoseSE3::new(
        Vec3::new(rng.gen_range(-trans..trans), rng.gen_range(-trans..trans), rng.gen_range(-trans..trans)),
        UnitQuaternion::from_scaled_axis(Vec3::new(rng.gen_range(-rot..rot), rng.gen_range(-rot..rot), rng.gen_range(-rot..rot))),
    )
}

/// Inliers seen exactly by a camera at `truth`, followed by uniform outliers.
/// With `sigma > 0` both stereo columns of each inlier get pixel noise and
/// the camera point is triangulated from the noisy pair.
fn ransac_trial(rng: &mut ChaCha8Rng, truth: &PoseSE3, sigma: f64) -> Vec<Correspondence3D> {
    let rig = default_rig();
    let k = rig.intrinsics;
    let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let mut out = Vec::new();
    for i in 0..60 {
        let pixel = Vec2::new(rng.gen_range(20.0..820.0), rng.gen_range(20.0..620.0));
        let z = rng.gen_range(0.06..0.12);
        let pc = k.backproject(&pixel, z).unwrap();
        let p_t = truth.transform_point(&pc);
        let (obs, p_t1) = if sigma > 0.0 {
            let obs = pixel + Vec2::new(noise.sample(rng), noise.sample(rng));
            let d = rig.disparity_for_depth(z) + noise.sample(rng) - (pixel.x - obs.x);
            (obs, k.backproject(&obs, k.f * rig.baseline / d).unwrap())
        } else {
            (pixel, pc)
        };
        out.push(Correspondence3D { p_t, p_t1, pixel: obs, landmark: i, feature: i as usize });
    }
    for i in 60..100 {
        let p_t = Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(0.05..0.15));
        let p_t1 = Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(0.05..0.15));
        let pixel = Vec2::new(rng.gen_range(0.0..840.0), rng.gen_range(0.0..640.0));
        out.push(Correspondence3D { p_t, p_t1, pixel, landmark: i, feature: i as usize });
    }
    out
}

fn ransac_robustness(ledger: &mut Ledger) {
    let k = default_rig().intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut exact_ok = 0;
    for trial in 0..100 {
        let truth = random_pose(&mut rng, 0.02, 0.2);
        let corrs = ransac_trial(&mut rng, &truth, 0.0);
        let params = RansacParams { seed: trial, ..RansacParams::default() };
        if let Ok(res) = ransac_pose(&corrs, &params, &k) {
            if res.pose.rotation_distance(&truth) < 1e-6 && res.pose.translation_distance(&truth) < 1e-6 {
                exact_ok += 1;
            }
        }
    }
    ledger.record("RANSAC exact recovery", exact_ok >= 99, format!("{exact_ok}/100 trials with rotation and translation error < 1e-6 (limit 99)"));

    let mut sq = 0.0;
    let mut count = 0usize;
    let mut worst_trial: f64 = 0.0;
    let mut lost = 0;
    for trial in 0..100 {
        let truth = random_pose(&mut rng, 0.02, 0.2);
        let corrs = ransac_trial(&mut rng, &truth, 1.0);
        let params = RansacParams { seed: 1000 + trial, ..RansacParams::default() };
        let Ok(res) = ransac_pose(&corrs, &params, &k) else {
            lost += 1;
            continue;
        };
        let inv = res.pose.inverse();
        let errs: Vec<f64> = corrs[..60].iter().map(|c| reprojection_error(&inv, c, &k)).collect();
        let s: f64 = errs.iter().map(|e| e * e).sum();
        worst_trial = worst_trial.max((s / 60.0).sqrt());
        sq += s;
        count += 60;
    }
    let rms = (sq / count.max(1) as f64).sqrt();
    ledger.record(
        "RANSAC noisy refit",
        lost == 0 && rms <= 1.5,
        format!("sigma 1 px: reprojection RMS over the 60 inliers of 100 trials {rms:.3} px (limit 1.5), worst single trial {worst_trial:.3} px"),
    );
}

fn ba_rig() -> StereoRig {
    default_rig()
}

fn blank() -> Arc<GrayImage> {
    Arc::new(GrayImage::new(1, 1))
}

/// Keyframes on a small orbit, each observing every visible point.
fn ba_map(seed: u64, n_kf: usize, n_pts: usize, sigma: f64, outlier_rate: f64) -> (MapState, Vec<PoseSE3>) {
    let rig = ba_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec3> = (0..n_pts)
        .map(|_| Vec3::new(rng.gen_range(-0.04..0.04), rng.gen_range(-0.03..0.03), rng.gen_range(0.07..0.11)))
        .collect();
    let poses: Vec<PoseSE3> = (0..n_kf)
        .map(|i| {
            let a = i as f64 * 0.3;
            PoseSE3::new(
                Vec3::new(0.004 * a.cos() - 0.004, 0.004 * a.sin(), 0.001 * i as f64),
                UnitQuaternion::from_euler_angles(0.01 * a.sin(), -0.01 * a.cos(), 0.02 * i as f64),
            )
        })
        .collect();
    let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let mut map = MapState::new();
    for (i, pose) in poses.iter().enumerate() {
        let t_cw = pose.inverse();
        let mut tracked = Vec::new();
        let mut new_points = Vec::new();
        for (j, p) in pts.iter().enumerate() {
            let (proj, _, _) = camproj_jacobians(&t_cw, p, &rig);
            if !rig.intrinsics.contains(&Vec2::new(proj.x, proj.y)) {
                continue;
            }
            if i == 0 {
                new_points.push(NewPoint { camera_point: t_cw.transform_point(p), pixel: Vec2::new(proj.x, proj.y), right_u: proj.z, descriptor: BinaryDescriptor::default() });
                continue;
            }
            let mut obs = proj + nalgebra::Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            if rng.gen_bool(outlier_rate) {
                let (r, a) = (rng.gen_range(20.0..60.0), rng.gen_range(0.0..std::f64::consts::TAU));
                obs += nalgebra::Vector3::new(r * a.cos(), r * a.sin(), r * a.cos());
            }
            tracked.push(TrackedPoint { landmark: j as u64, pixel: Vec2::new(obs.x, obs.y), right_u: Some(obs.z) });
        }
        // Later keyframes start from a perturbed pose.
        let start = if i == 0 { *pose } else { pose.retract_left(&Vec3::new(0.0005, -0.0004, 0.0003), &Vec3::new(0.002, -0.001, 0.0015)) };
        map.insert_keyframe(NewKeyframe { id: i as u64, timestamp: i as f64, pose: start, left: blank(), right: blank(), features: Vec::new(), tracked, new_points })
            .unwrap();
    }
    (map, poses)
}

fn pose_error(map: &MapState, truth: &[PoseSE3]) -> f64 {
    truth.iter().enumerate().skip(1).map(|(i, p)| map.keyframes[&(i as u64)].pose.translation_distance(p)).sum::<f64>() / (truth.len() - 1) as f64
}

fn ba_correctness(ledger: &mut Ledger) {
    let rig = ba_rig();
    let mut monotone_runs = 0;
    let runs = 30;
    for seed in 0..runs {
        let (mut map, _) = ba_map(seed, 5, 60, 0.2 + 0.1 * seed as f64, 0.05);
        let report = bundle_adjust(&mut map, &rig, &BaParams::default());
        monotone_runs += report.costs.windows(2).all(|w| w[1] <= w[0]) as usize;
    }
    ledger.record("BA cost monotone", monotone_runs == runs as usize, format!("{monotone_runs}/{runs} runs with non-increasing cost over accepted iterations"));

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t_cw = random_pose(&mut rng, 0.02, 0.3);
        let pc = Vec3::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(0.06..0.12));
        let pw = t_cw.inverse().transform_point(&pc);
        let (_, jp, jl) = camproj_jacobians(&t_cw, &pw, &rig);
        let proj = |pose: &PoseSE3, p: &Vec3| camproj_jacobians(pose, p, &rig).0;
        let h = 1e-6;
        for c in 0..6 {
            let mut d = [0.0; 6];
            d[c] = h;
            let plus = t_cw.retract_left(&Vec3::new(d[0], d[1], d[2]), &Vec3::new(d[3], d[4], d[5]));
            let minus = t_cw.retract_left(&Vec3::new(-d[0], -d[1], -d[2]), &Vec3::new(-d[3], -d[4], -d[5]));
            let fd = (proj(&plus, &pw) - proj(&minus, &pw)) / (2.0 * h);
            worst = worst.max((fd - jp.column(c)).norm() / jp.column(c).norm().max(1.0));
        }
        for c in 0..3 {
            let mut d = Vec3::zeros();
            d[c] = 1e-7;
            let fd = (proj(&t_cw, &(pw + d)) - proj(&t_cw, &(pw - d))) / 2e-7;
            worst = worst.max((fd - jl.column(c)).norm() / jl.column(c).norm().max(1.0));
        }
    }
    ledger.record("BA Jacobian", worst < 1e-5, format!("100 random configurations, worst relative difference to central differences {worst:.2e} (limit 1e-5)"));

    let (mut base, mut huber, mut quad) = (0.0, 0.0, 0.0);
    let seeds = 10;
    for seed in 0..seeds {
        let (mut m, truth) = ba_map(100 + seed, 6, 80, 0.5, 0.0);
        bundle_adjust(&mut m, &rig, &BaParams::default());
        base += pose_error(&m, &truth);
        let (mut m, truth) = ba_map(100 + seed, 6, 80, 0.5, 0.1);
        bundle_adjust(&mut m, &rig, &BaParams::default());
        huber += pose_error(&m, &truth);
        let (mut m, truth) = ba_map(100 + seed, 6, 80, 0.5, 0.1);
        bundle_adjust(&mut m, &rig, &BaParams { robust: false, ..BaParams::default() });
        quad += pose_error(&m, &truth);
    }
    let (hr, qr) = (huber / base, quad / base);
    ledger.record(
        "BA outlier A/B",
        hr <= 2.0 && qr > 10.0,
        format!("10% gross outliers: Huber pose error {hr:.2}x the outlier-free baseline (limit 2), quadratic {qr:.1}x (must exceed 10)"),
    );
}

fn geodesic(ledger: &mut Ledger) {
    let r = 0.05;
    let mesh = icosphere(r, 5, true);
    let faces = mesh.triangles.len();
    let idx = MeshIndex::new(Arc::new(mesh), GeodesicParams { steiner: 3, ..GeodesicParams::default() });
    let pole = idx.pick(&Ray { origin: Vec3::new(0.0, 0.0, 2.0 * r), dir: -Vec3::z() }).unwrap();
    // Just above the rim so the ray meets the upper cap.
    let lat = 0.05f64.to_radians();
    let eq = idx.pick(&Ray { origin: Vec3::zeros(), dir: Vec3::new(lat.cos() * 0.3f64.cos(), lat.cos() * 0.3f64.sin(), lat.sin()) }).unwrap();
    let m = idx.measure_geodesic(&pole, &eq).unwrap();
    let target = std::f64::consts::FRAC_PI_2 * r;
    let err = (m.length - target).abs() / target;

    let flat = MeshIndex::new(Arc::new(flat_grid(20, 0.001)), GeodesicParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut flat_worst: f64 = 0.0;
    for _ in 0..200 {
        let mut pick = || {
            let ray = Ray { origin: Vec3::new(rng.gen_range(0.0..0.02), rng.gen_range(0.0..0.02), 1.0), dir: -Vec3::z() };
            flat.pick(&ray).unwrap()
        };
        let (a, b) = (pick(), pick());
        let g = flat.measure_geodesic(&a, &b).unwrap();
        flat_worst = flat_worst.max((g.length - (b.position - a.position).norm()).abs());
    }
    ledger.record(
        "geodesic measurement",
        faces >= 10_000 && err <= 0.03 && flat_worst <= 1e-9,
        format!("hemisphere {faces} faces, k = 3: pole to equator {:.3}% from pi/2 r (limit 3%); flat mesh worst |geodesic - euclidean| {flat_worst:.1e} (limit 1e-9)", 100.0 * err),
    );
}

fn throughput(ledger: &Ledger) {
    let frames = 40;
    let seq = SyntheticSequence::new(SceneSpec::default(), TrajectorySpec { frame_count: frames, angular_span: 2.0 * std::f64::consts::PI * frames as f64 / 300.0, ..TrajectorySpec::acceptance() }, fast_rig(), SEED).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(InputConfig { kind: InputKind::Synthetic, dir: tmp.path().to_path_buf(), fps: 30.0, max_frames: None }, tmp.path().join("out"));
    cfg.dense_mode = DenseMode::Disabled;
    let run = run_with_source(&cfg, Arc::new(seq), &RunHooks::default()).unwrap();
    let report = geoar::eval::timing_report(&run.timing);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    ledger.info(
        "throughput",
        format!(
            "tracking-only {:.1} FPS at 640x480 on {cores} core(s) (target 10 FPS on 4 cores, not gating); reference {} FPS and {} ms dense latency",
            report.tracking_fps,
            geoar::eval::REFERENCE_FPS,
            geoar::eval::REFERENCE_DENSE_LATENCY_MS
        ),
    );
}

fn main() {
    // Plain `cargo test` passes harness flags; only filtering by name matters here.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let want = |name: &str| filter.as_deref().map_or(true, |f| name.contains(f));
    let mut ledger = Ledger { failed: 0 };
    let checks: [(&str, fn(&mut Ledger)); 6] = [
        ("dense", dense_oracle),
        ("ransac", ransac_robustness),
        ("ba", ba_correctness),
        ("geodesic", geodesic),
        ("throughput", |l| throughput(l)),
        ("end_to_end", end_to_end),
    ];
    for (name, check) in checks {
        if want(name) {
            check(&mut ledger);
        }
    }
    if ledger.failed > 0 {
        println!("{} acceptance criteria failed", ledger.failed);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
