//! Surface RMSD against a truth heightfield, trajectory error and stage
//! timing statistics.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::WorldMesh;
use crate::geometry::{PoseSE3, Vec3};
use crate::interact::{Bvh, Ray};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("trajectory lengths differ: {0} ground-truth poses, {1} estimated")]
    LengthMismatch(usize, usize),
    #[error("empty trajectory")]
    Empty,
    #[error("insufficient overlap: coverage {0:.3} is below 0.10")]
    InsufficientOverlap(f64),
    #[error("grid must be at least 1x1")]
    BadGrid,
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Minimum fraction of grid cells where both surfaces are defined.
pub const MIN_COVERAGE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells along x.
    pub m: usize,
    /// Cells along y.
    pub n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { m: 100, n: 100 }
    }
}

/// Axis-aligned xy rectangle `[x_min, x_max, y_min, y_max]`.
pub type Footprint = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsdReport {
    pub m: usize,
    pub n: usize,
    pub footprint: Footprint,
    pub rmsd_mm: f64,
    /// Truth minus reconstruction per cell in mm, row-major over y; `None`
    /// where either surface is undefined.
    pub errors_mm: Vec<Option<f64>>,
    pub coverage: f64,
}

impl RmsdReport {
    pub fn covered(&self) -> usize {
        self.errors_mm.iter().flatten().count()
    }

    pub fn max_abs_mm(&self) -> f64 {
        self.errors_mm.iter().flatten().fold(0.0, |a, e| a.max(e.abs()))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let f = self.footprint;
        let _ = writeln!(s, "grid       {} x {}", self.m, self.n);
        let _ = writeln!(s, "footprint  x [{:.4}, {:.4}] m, y [{:.4}, {:.4}] m", f[0], f[1], f[2], f[3]);
        let _ = writeln!(s, "covered    {} cells", self.covered());
        let _ = writeln!(s, "coverage   {:.4}", self.coverage);
        let _ = writeln!(s, "rmsd       {:.3} mm", self.rmsd_mm);
        let _ = writeln!(s, "max |err|  {:.3} mm", self.max_abs_mm());
        s
    }

    /// Error map as an 8-bit heat image, one pixel per cell: blue for zero
    /// error through red at `scale_mm`, black where uncovered.
    pub fn heat_image(&self, scale_mm: f64) -> RgbImage {
        let mut img = RgbImage::new(self.m as u32, self.n as u32);
        for (i, e) in self.errors_mm.iter().enumerate() {
            let px = match e {
                None => Rgb([0, 0, 0]),
                Some(e) => {
                    let t = (e.abs() / scale_mm.max(1e-12)).min(1.0);
                    let ramp = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
                    Rgb([ramp(2.0 * t - 0.5), ramp(1.0 - (2.0 * t - 1.0).abs()), ramp(1.5 - 2.0 * t)])
                }
            };
            img.put_pixel((i % self.m) as u32, (i / self.m) as u32, px);
        }
        img
    }

    pub fn save_heat_image(&self, path: impl AsRef<Path>, scale_mm: f64) -> Result<(), EvalError> {
        self.heat_image(scale_mm).save(path)?;
        Ok(())
    }
}

/// xy bounding box of the mesh vertices.
pub fn mesh_footprint(mesh: &WorldMesh) -> Option<Footprint> {
    let mut f = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for v in &mesh.vertices {
        f = [f[0].min(v.x), f[1].max(v.x), f[2].min(v.y), f[3].max(v.y)];
    }
    (f[0] <= f[1] && f[2] <= f[3]).then_some(f)
}

/// Height of the first surface hit by a vertical ray travelling along +z.
pub fn vertical_cast(bvh: &Bvh, mesh: &WorldMesh, x: f64, y: f64, z_start: f64) -> Option<f64> {
    bvh.pick(&Ray { origin: Vec3::new(x, y, z_start), dir: Vec3::z() }, mesh).map(|p| p.position.z)
}

/// Samples the `grid` at cell centres over the intersection of
/// `truth_bounds` and the mesh footprint. `truth` returns the surface height
/// at (x, y), or `None` outside its domain. The reconstructed height is the
/// first mesh hit of a vertical ray cast along +z (towards the surface as
/// seen from the first camera).
pub fn rmsd_surfaces(
    truth: impl Fn(f64, f64) -> Option<f64>,
    truth_bounds: Footprint,
    mesh: &WorldMesh,
    grid: GridSpec,
) -> Result<RmsdReport, EvalError> {
    if grid.m == 0 || grid.n == 0 {
        return Err(EvalError::BadGrid);
    }
    let mf = mesh_footprint(mesh).ok_or(EvalError::InsufficientOverlap(0.0))?;
    let f = [truth_bounds[0].max(mf[0]), truth_bounds[1].min(mf[1]), truth_bounds[2].max(mf[2]), truth_bounds[3].min(mf[3])];
    if !(f[0] < f[1] && f[2] < f[3]) {
        return Err(EvalError::InsufficientOverlap(0.0));
    }
    let bvh = Bvh::build(mesh);
    let z_start = mesh.vertices.iter().fold(f64::INFINITY, |a, v| a.min(v.z)) - 1.0;
    let (dx, dy) = ((f[1] - f[0]) / grid.m as f64, (f[3] - f[2]) / grid.n as f64);
    let mut errors_mm = Vec::with_capacity(grid.m * grid.n);
    for j in 0..grid.n {
        for i in 0..grid.m {
            let (x, y) = (f[0] + (i as f64 + 0.5) * dx, f[2] + (j as f64 + 0.5) * dy);
            let e = truth(x, y).zip(vertical_cast(&bvh, mesh, x, y, z_start)).map(|(zt, zr)| (zt - zr) * 1e3);
            errors_mm.push(e);
        }
    }
    let covered: Vec<f64> = errors_mm.iter().flatten().copied().collect();
    let coverage = covered.len() as f64 / errors_mm.len() as f64;
    if coverage < MIN_COVERAGE {
        return Err(EvalError::InsufficientOverlap(coverage));
    }
    let rmsd_mm = (covered.iter().map(|e| e * e).sum::<f64>() / covered.len() as f64).sqrt();
    Ok(RmsdReport { m: grid.m, n: grid.n, footprint: f, rmsd_mm, errors_mm, coverage })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    /// Meters.
    pub rms: f64,
    /// Meters.
    pub max: f64,
    pub poses: usize,
    /// Ground-truth path length, meters.
    pub path_length: f64,
}

/// Sum of distances between consecutive positions.
pub fn path_length(poses: &[PoseSE3]) -> f64 {
    poses.windows(2).map(|w| (w[1].r - w[0].r).norm()).sum()
}

/// Absolute trajectory error after aligning the estimate's first pose onto
/// the ground truth's first pose.
pub fn trajectory_ate(gt: &[PoseSE3], est: &[PoseSE3]) -> Result<TrajectoryError, EvalError> {
    if gt.len() != est.len() {
        return Err(EvalError::LengthMismatch(gt.len(), est.len()));
    }
    if gt.is_empty() {
        return Err(EvalError::Empty);
    }
    let align = gt[0].compose(&est[0].inverse());
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    for (g, e) in gt.iter().zip(est) {
        let d = (align.compose(e).r - g.r).norm();
        sum += d * d;
        max = max.max(d);
    }
    Ok(TrajectoryError { rms: (sum / gt.len() as f64).sqrt(), max, poses: gt.len(), path_length: path_length(gt) })
}

/// Per-frame stage latencies recorded by a pipeline run, in seconds.
/// A stage that did not run is `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub frames: usize,
    pub keyframes: usize,
    pub wall_seconds: f64,
    pub track: Vec<f64>,
    pub dense: Option<Vec<f64>>,
    pub fuse: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl StageStats {
    pub fn from_seconds(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = samples.iter().map(|s| s * 1e3).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median_ms = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        // Nearest-rank percentile.
        let p95_ms = v[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Some(Self { count: n, mean_ms: v.iter().sum::<f64>() / n as f64, median_ms, p95_ms })
    }
}

/// Reference figures reported alongside measured throughput.
pub const REFERENCE_FPS: f64 = 26.0;
pub const REFERENCE_DENSE_LATENCY_MS: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub frames: usize,
    pub keyframes: usize,
    pub track: Option<StageStats>,
    pub dense: Option<StageStats>,
    pub fuse: Option<StageStats>,
    /// Frames per second of the tracking stage alone.
    pub tracking_fps: f64,
    /// Frames per second over the whole run's wall time.
    pub end_to_end_fps: f64,
}

pub fn timing_report(run: &RunTiming) -> TimingReport {
    let track_total: f64 = run.track.iter().sum();
    let rate = |n: usize, t: f64| if t > 0.0 { n as f64 / t } else { 0.0 };
    TimingReport {
        frames: run.frames,
        keyframes: run.keyframes,
        track: StageStats::from_seconds(&run.track),
        dense: run.dense.as_deref().and_then(StageStats::from_seconds),
        fuse: run.fuse.as_deref().and_then(StageStats::from_seconds),
        tracking_fps: rate(run.track.len(), track_total),
        end_to_end_fps: rate(run.frames, run.wall_seconds),
    }
}

impl TimingReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames {}  keyframes {}", self.frames, self.keyframes);
        let _ = writeln!(s, "{:<6} {:>6} {:>10} {:>10} {:>10}", "stage", "count", "mean ms", "median ms", "p95 ms");
        for (name, st) in [("track", &self.track), ("dense", &self.dense), ("fuse", &self.fuse)] {
            match st {
                Some(st) => {
                    let _ = writeln!(s, "{name:<6} {:>6} {:>10.2} {:>10.2} {:>10.2}", st.count, st.mean_ms, st.median_ms, st.p95_ms);
                }
                None => {
                    let _ = writeln!(s, "{name:<6} {:>6}", "absent");
                }
            }
        }
        let _ = writeln!(s, "tracking-only rate  {:.1} FPS (reference {REFERENCE_FPS} FPS with GPU dense)", self.tracking_fps);
        let _ = writeln!(s, "end-to-end rate     {:.1} FPS", self.end_to_end_fps);
        if let Some(d) = &self.dense {
            let _ = writeln!(s, "dense latency       {:.0} ms mean (reference {REFERENCE_DENSE_LATENCY_MS} ms)", d.mean_ms);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interact::shapes::flat_grid;
    use proptest::prelude::*;

    /// Grid mesh of the heightfield `h` over `[0, side]²`.
    fn heightfield(side: f64, cells: usize, h: impl Fn(f64, f64) -> f64) -> WorldMesh {
        let mut mesh = flat_grid(cells, side / cells as f64);
        for v in mesh.vertices.iter_mut() {
            v.z = h(v.x, v.y);
        }
        mesh
    }

    fn truth_of(h: impl Fn(f64, f64) -> f64, side: f64) -> impl Fn(f64, f64) -> Option<f64> {
        move |x, y| ((0.0..=side).contains(&x) && (0.0..=side).contains(&y)).then(|| h(x, y))
    }

    #[test]
    fn identical_and_offset_surfaces() {
        let plane = |x: f64, y: f64| 0.09 + 0.1 * x - 0.05 * y;
        let mesh = heightfield(0.05, 20, plane);
        let bounds = [0.0, 0.05, 0.0, 0.05];
        let r = rmsd_surfaces(truth_of(plane, 0.05), bounds, &mesh, GridSpec::default()).unwrap();
        assert!(r.rmsd_mm < 1e-9, "{}", r.rmsd_mm);
        assert_eq!(r.coverage, 1.0);
        let shifted = heightfield(0.05, 20, |x, y| plane(x, y) + 0.001);
        let r = rmsd_surfaces(truth_of(plane, 0.05), bounds, &shifted, GridSpec::default()).unwrap();
        assert!((r.rmsd_mm - 1.0).abs() < 1e-9, "{}", r.rmsd_mm);
        assert!(r.errors_mm.iter().flatten().all(|e| (e + 1.0).abs() < 1e-9));
    }

    #[test]
    fn footprint_is_the_intersection() {
        let mesh = heightfield(0.05, 10, |_, _| 0.1);
        let r = rmsd_surfaces(|_, _| Some(0.1), [0.02, 1.0, -1.0, 0.03], &mesh, GridSpec { m: 10, n: 10 }).unwrap();
        assert_eq!(r.footprint, [0.02, 0.05, 0.0, 0.03]);
    }

    #[test]
    fn low_coverage_is_an_error() {
        let mesh = heightfield(0.05, 10, |_, _| 0.1);
        let truth = |x: f64, _y: f64| (x < 0.004).then_some(0.1);
        match rmsd_surfaces(truth, [0.0, 0.05, 0.0, 0.05], &mesh, GridSpec::default()) {
            Err(EvalError::InsufficientOverlap(c)) => assert!((c - 0.08).abs() < 1e-12, "{c}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(rmsd_surfaces(|_, _| Some(0.1), [1.0, 2.0, 1.0, 2.0], &mesh, GridSpec::default()), Err(EvalError::InsufficientOverlap(_))));
    }

    #[test]
    fn vertical_cast_finds_the_near_surface() {
        // Two stacked planes: the cast starts on the camera side and stops at
        // the nearer one.
        let mut mesh = heightfield(0.05, 4, |_, _| 0.08);
        let far = heightfield(0.05, 4, |_, _| 0.12);
        let n = mesh.vertices.len() as u32;
        mesh.vertices.extend(far.vertices);
        mesh.normals.extend(far.normals);
        mesh.triangles.extend(far.triangles.iter().map(|t| t.map(|i| i + n)));
        let r = rmsd_surfaces(|_, _| Some(0.08), [0.0, 0.05, 0.0, 0.05], &mesh, GridSpec { m: 7, n: 9 }).unwrap();
        assert!(r.rmsd_mm < 1e-9);
    }

    #[test]
    fn grid_refinement_is_stable() {
        let truth = |x: f64, y: f64| 0.1 + 0.01 * (x * 60.0).sin() * (y * 40.0).cos();
        let mesh = heightfield(0.06, 60, |x, y| truth(x, y) + 0.001 * (x * 30.0).cos());
        let b = [0.0, 0.06, 0.0, 0.06];
        let a = rmsd_surfaces(truth_of(truth, 0.06), b, &mesh, GridSpec { m: 100, n: 100 }).unwrap();
        let c = rmsd_surfaces(truth_of(truth, 0.06), b, &mesh, GridSpec { m: 200, n: 200 }).unwrap();
        assert!((a.rmsd_mm - c.rmsd_mm).abs() < 0.05 * c.rmsd_mm, "{} vs {}", a.rmsd_mm, c.rmsd_mm);
    }

    #[test]
    fn heat_image_shape() {
        let mesh = heightfield(0.05, 10, |x, _| 0.1 + 0.01 * x);
        let r = rmsd_surfaces(|_, _| Some(0.1), [0.0, 0.05, 0.0, 0.03], &mesh, GridSpec { m: 12, n: 8 }).unwrap();
        let img = r.heat_image(r.max_abs_mm());
        assert_eq!(img.dimensions(), (12, 8));
        assert!(img.get_pixel(0, 0)[2] > img.get_pixel(11, 0)[2]);
        assert!(img.get_pixel(11, 0)[0] > img.get_pixel(0, 0)[0]);
        assert!(r.to_table().contains("rmsd"));
    }

    fn line_traj(n: usize) -> Vec<PoseSE3> {
        (0..n)
            .map(|i| PoseSE3::new(Vec3::new(0.001 * i as f64, 0.0005 * (i as f64).sin(), 0.0), nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.01 * i as f64, 0.0)))
            .collect()
    }

    #[test]
    fn ate_examples() {
        let gt = line_traj(20);
        let e = trajectory_ate(&gt, &gt).unwrap();
        assert!(e.rms < 1e-12 && e.max < 1e-12);
        // A constant offset on every pose after the first: n - 1 residuals of
        // size δ, one of zero.
        let delta = Vec3::new(0.003, -0.004, 0.0);
        let est: Vec<PoseSE3> = gt.iter().enumerate().map(|(i, p)| if i == 0 { *p } else { PoseSE3::new(p.r + delta, p.q) }).collect();
        let e = trajectory_ate(&gt, &est).unwrap();
        assert!((e.rms - 0.005 * (19.0f64 / 20.0).sqrt()).abs() < 1e-12);
        assert!((e.max - 0.005).abs() < 1e-12);
        assert!(matches!(trajectory_ate(&gt, &est[1..]), Err(EvalError::LengthMismatch(20, 19))));
        assert!(matches!(trajectory_ate(&[], &[]), Err(EvalError::Empty)));
    }

    proptest! {
        #[test]
        fn ate_ignores_a_global_transform(rx in -1.0f64..1.0, ry in -1.0f64..1.0, rz in -1.0f64..1.0, t in -0.1f64..0.1) {
            let gt = line_traj(15);
            let g = PoseSE3::new(Vec3::new(t, -t, 2.0 * t), nalgebra::UnitQuaternion::from_euler_angles(rx, ry, rz));
            let est: Vec<PoseSE3> = gt.iter().map(|p| g.compose(p)).collect();
            prop_assert!(trajectory_ate(&gt, &est).unwrap().rms < 1e-9);
        }

        #[test]
        fn rmsd_ignores_traversal_order(seed in 0u64..1000) {
            let truth = move |x: f64, y: f64| 0.1 + 0.002 * ((x * 100.0 + seed as f64).sin() + (y * 70.0).cos());
            let mesh = heightfield(0.03, 15, |x, y| 0.1 + 0.001 * (x * 50.0).sin() + y * 0.01);
            let r = rmsd_surfaces(truth_of(truth, 0.03), [0.0, 0.03, 0.0, 0.03], &mesh, GridSpec { m: 20, n: 20 }).unwrap();
            let mut e: Vec<f64> = r.errors_mm.iter().flatten().copied().collect();
            e.reverse();
            let rev = (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt();
            prop_assert!((rev - r.rmsd_mm).abs() < 1e-9);
            prop_assert!(r.rmsd_mm >= 0.0 && (0.0..=1.0).contains(&r.coverage));
        }
    }

    #[test]
    fn timing_examples() {
        let run = RunTiming { frames: 4, keyframes: 1, wall_seconds: 0.4, track: vec![0.01, 0.02, 0.03, 0.04], dense: None, fuse: None };
        let rep = timing_report(&run);
        assert!(rep.dense.is_none());
        let table = rep.to_table();
        assert!(table.lines().any(|l| l.starts_with("dense") && l.contains("absent")));
        let t = rep.track.unwrap();
        assert!((t.mean_ms - 25.0).abs() < 1e-9 && (t.median_ms - 25.0).abs() < 1e-9 && (t.p95_ms - 40.0).abs() < 1e-9);
        assert!((rep.tracking_fps - 40.0).abs() < 1e-9);
        assert!((rep.end_to_end_fps - 10.0).abs() < 1e-9);
        let with_dense = timing_report(&RunTiming { dense: Some(vec![0.2]), ..run });
        assert!((with_dense.dense.unwrap().p95_ms - 200.0).abs() < 1e-9);
    }
}
