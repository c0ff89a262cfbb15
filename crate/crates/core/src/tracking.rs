//! Frame-to-map camera tracking: motion prediction, guided matching and
//! robust rigid pose estimation from stereo points.

use std::collections::{BTreeSet, HashMap, HashSet};

use image::GrayImage;
use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, BinaryDescriptor, Feature, OrbConfig};
use crate::geometry::{skew, CameraIntrinsics, PoseSE3, StereoRig, Vec2, Vec3};
use crate::mapping::{MapState, NewPoint, TrackedPoint};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TrackingError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("degenerate sample: points are collinear or coincident")]
    DegenerateSample,
    #[error("tracking lost: {0}")]
    Lost(String),
}

/// Camera pose with its velocities and accelerations. Angular rates are
/// expressed in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionState {
    pub pose: PoseSE3,
    pub v: Vec3,
    pub omega: Vec3,
    pub a: Vec3,
    pub alpha: Vec3,
}

impl MotionState {
    pub fn at_rest(pose: PoseSE3) -> Self {
        Self { pose, v: Vec3::zeros(), omega: Vec3::zeros(), a: Vec3::zeros(), alpha: Vec3::zeros() }
    }

    /// Velocities implied by moving from `prev` to `next` over `dt`.
    pub fn from_poses(prev: &PoseSE3, next: &PoseSE3, dt: f64) -> Self {
        let dq = prev.q.inverse() * next.q;
        Self {
            pose: *next,
            v: (next.r - prev.r) / dt,
            omega: dq.scaled_axis() / dt,
            a: Vec3::zeros(),
            alpha: Vec3::zeros(),
        }
    }
}

/// Constant-velocity prediction with optional acceleration terms.
pub fn predict_pose(state: &MotionState, dt: f64) -> Result<MotionState, TrackingError> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(TrackingError::NonPositiveDt(dt));
    }
    let mut q = state.pose.q * UnitQuaternion::from_scaled_axis(state.omega * dt);
    q.renormalize();
    Ok(MotionState {
        pose: PoseSE3 { r: state.pose.r + state.v * dt, q },
        v: state.v + state.a * dt,
        omega: state.omega + state.alpha * dt,
        a: state.a,
        alpha: state.alpha,
    })
}

/// A landmark matched to a stereo point of the current frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence3D {
    /// Landmark position, world frame.
    pub p_t: Vec3,
    /// Stereo-triangulated point, current camera frame.
    pub p_t1: Vec3,
    /// Left-image observation.
    pub pixel: Vec2,
    pub landmark: u64,
    /// Index into the frame's stereo points.
    pub feature: usize,
}

/// Least-squares rigid transform `(R, T)` with `p_t ≈ R p_t1 + T`, returned as
/// a pose (`q` = R, `r` = T).
pub fn fit_rigid(pairs: &[(Vec3, Vec3)]) -> Result<PoseSE3, TrackingError> {
    if pairs.len() < 3 {
        return Err(TrackingError::DegenerateSample);
    }
    let n = pairs.len() as f64;
    let ca = pairs.iter().map(|(a, _)| a).sum::<Vec3>() / n;
    let cb = pairs.iter().map(|(_, b)| b).sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = 0.0;
    for (a, b) in pairs {
        h += (b - cb) * (a - ca).transpose();
        spread += (b - cb).norm_squared();
    }
    // Collinear or coincident: the cross-covariance has rank below 2.
    let svd = h.svd(true, true);
    let s = svd.singular_values;
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    if spread <= 1e-18 || s[order[1]] <= 1e-9 * s[order[0]].max(1e-300) {
        return Err(TrackingError::DegenerateSample);
    }
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let rot = vt.transpose() * d * u.transpose();
    let t = ca - rot * cb;
    Ok(PoseSE3::from_rotation_matrix(&rot, t))
}

/// Closed-form rigid fit on exactly three correspondences.
pub fn fit_rigid_3pt(c: &[Correspondence3D; 3]) -> Result<PoseSE3, TrackingError> {
    let area = (c[1].p_t1 - c[0].p_t1).cross(&(c[2].p_t1 - c[0].p_t1)).norm();
    let scale = (c[1].p_t1 - c[0].p_t1).norm().max((c[2].p_t1 - c[0].p_t1).norm());
    if area <= 1e-9 * scale * scale || scale <= 1e-12 {
        return Err(TrackingError::DegenerateSample);
    }
    fit_rigid(&[(c[0].p_t, c[0].p_t1), (c[1].p_t, c[1].p_t1), (c[2].p_t, c[2].p_t1)])
}

/// Pixel distance between the observation and the landmark projected through
/// the world-from-camera `pose`.
pub fn reprojection_error(pose_inv: &PoseSE3, c: &Correspondence3D, k: &CameraIntrinsics) -> f64 {
    let pc = pose_inv.transform_point(&c.p_t);
    if pc.z <= 1e-9 {
        return f64::INFINITY;
    }
    let u = k.f * pc.x / pc.z + k.cx;
    let v = k.f * pc.y / pc.z + k.cy;
    (u - c.pixel.x).hypot(v - c.pixel.y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_tol_px: f64,
    pub confidence: f64,
    pub seed: u64,
    /// Polish the closed-form refit by minimising reprojection error.
    pub refine: bool,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iterations: 200, inlier_tol_px: 2.0, confidence: 0.99, seed: 0, refine: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    /// World-from-camera.
    pub pose: PoseSE3,
    pub inlier_indices: Vec<usize>,
    pub mean_reproj_error: f64,
}

fn score(pose: &PoseSE3, corrs: &[Correspondence3D], k: &CameraIntrinsics, tol: f64) -> (Vec<usize>, f64) {
    let inv = pose.inverse();
    let mut inliers = Vec::new();
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let e = reprojection_error(&inv, c, k);
        if e <= tol {
            inliers.push(i);
            sum += e;
        }
    }
    let mean = if inliers.is_empty() { f64::INFINITY } else { sum / inliers.len() as f64 };
    (inliers, mean)
}

fn refit(corrs: &[Correspondence3D], idx: &[usize], k: &CameraIntrinsics, refine: bool) -> Result<PoseSE3, TrackingError> {
    let pairs: Vec<(Vec3, Vec3)> = idx.iter().map(|&i| (corrs[i].p_t, corrs[i].p_t1)).collect();
    let pose = fit_rigid(&pairs)?;
    Ok(if refine { refine_reprojection(&pose, corrs, idx, k, 10) } else { pose })
}

/// Gauss-Newton on the left-image reprojection error of the given
/// correspondences, starting from `pose` (world-from-camera).
pub fn refine_reprojection(
    pose: &PoseSE3,
    corrs: &[Correspondence3D],
    idx: &[usize],
    k: &CameraIntrinsics,
    iterations: usize,
) -> PoseSE3 {
    let cost = |t_cw: &PoseSE3| -> f64 {
        idx.iter()
            .map(|&i| {
                let pc = t_cw.transform_point(&corrs[i].p_t);
                if pc.z <= 1e-9 {
                    return 1e12;
                }
                let e = Vec2::new(k.f * pc.x / pc.z + k.cx, k.f * pc.y / pc.z + k.cy) - corrs[i].pixel;
                e.norm_squared()
            })
            .sum()
    };
    let mut t_cw = pose.inverse();
    let mut current = cost(&t_cw);
    for _ in 0..iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for &i in idx {
            let pc = t_cw.transform_point(&corrs[i].p_t);
            if pc.z <= 1e-9 {
                continue;
            }
            let iz = 1.0 / pc.z;
            let e = corrs[i].pixel - Vec2::new(k.f * pc.x * iz + k.cx, k.f * pc.y * iz + k.cy);
            let dproj =
                nalgebra::Matrix2x3::new(k.f * iz, 0.0, -k.f * pc.x * iz * iz, 0.0, k.f * iz, -k.f * pc.y * iz * iz);
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&dproj);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-dproj * skew(&pc)));
            h += j.transpose() * j;
            g += j.transpose() * e;
        }
        let Some(d) = h.cholesky().map(|c| c.solve(&g)) else { break };
        let cand = t_cw.retract_left(&Vec3::new(d[0], d[1], d[2]), &Vec3::new(d[3], d[4], d[5]));
        let c = cost(&cand);
        if !(c < current) {
            break;
        }
        let done = current - c < 1e-12 * current.max(1e-30);
        t_cw = cand;
        current = c;
        if done {
            break;
        }
    }
    t_cw.inverse()
}

/// RANSAC over minimal 3-point rigid fits, scored by reprojection error, with
/// a refit on the consensus set. With `refine`, every minimal fit is also
/// polished on its three pixels and both versions are scored.
pub fn ransac_pose(
    corrs: &[Correspondence3D],
    params: &RansacParams,
    k: &CameraIntrinsics,
) -> Result<RansacResult, TrackingError> {
    let n = corrs.len();
    if n < 3 {
        return Err(TrackingError::Lost(format!("{n} correspondences, need at least 3")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut needed = params.iterations.max(1);
    let mut it = 0;
    while it < needed.min(params.iterations.max(1)) {
        it += 1;
        let s = sample(&mut rng, n, 3);
        let trio = [corrs[s.index(0)], corrs[s.index(1)], corrs[s.index(2)]];
        let Ok(model) = fit_rigid_3pt(&trio) else { continue };
        // Stereo depth noise can spoil the 3D fit; with `refine` the fit
        // polished on the three pixels competes with it.
        let polished = params.refine.then(|| refine_reprojection(&model, corrs, &[s.index(0), s.index(1), s.index(2)], k, 5));
        for m in std::iter::once(model).chain(polished) {
            let (inliers, mean) = score(&m, corrs, k, params.inlier_tol_px);
            let better = match &best {
                None => inliers.len() >= 3,
                Some((b, bm)) => inliers.len() > b.len() || (inliers.len() == b.len() && mean < *bm),
            };
            if better {
                let w = inliers.len() as f64 / n as f64;
                let denom = (1.0 - w.powi(3)).ln();
                needed = if denom < 0.0 {
                    ((1.0 - params.confidence).ln() / denom).ceil().max(1.0) as usize
                } else {
                    params.iterations
                };
                best = Some((inliers, mean));
            }
        }
    }
    let Some((mut inliers, _)) = best else {
        return Err(TrackingError::Lost("no model with at least 3 inliers".into()));
    };
    // Refit and re-score until the consensus set stops changing.
    let mut pose = refit(corrs, &inliers, k, params.refine)?;
    for _ in 0..5 {
        let (next, _) = score(&pose, corrs, k, params.inlier_tol_px);
        if next == inliers || next.len() < 3 {
            break;
        }
        inliers = next;
        pose = refit(corrs, &inliers, k, params.refine)?;
    }
    let inv = pose.inverse();
    let mean = inliers.iter().map(|&i| reprojection_error(&inv, &corrs[i], k)).sum::<f64>() / inliers.len() as f64;
    Ok(RansacResult { pose, inlier_indices: inliers, mean_reproj_error: mean })
}

/// A left feature with a stereo partner and its triangulated camera point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoPoint {
    pub feature: Feature,
    /// Index of `feature` in [`FrameFeatures::left`].
    pub left_index: usize,
    pub right_u: f64,
    pub camera_point: Vec3,
}

/// Features of one stereo frame.
#[derive(Debug, Clone, Default)]
pub struct FrameFeatures {
    /// All non-specular left features.
    pub left: Vec<Feature>,
    pub stereo: Vec<StereoPoint>,
}

/// Detects, filters and stereo-matches features, then triangulates matches.
pub fn extract_frame_features(
    left: &GrayImage,
    right: &GrayImage,
    rig: &StereoRig,
    cfg: &OrbConfig,
) -> Result<FrameFeatures, features::FeatureError> {
    let (lf, rf) = rayon::join(|| features::detect_and_describe(left, cfg), || features::detect_and_describe(right, cfg));
    let lf = features::filter_specular(lf?, left, cfg.specular_threshold);
    let rf = features::filter_specular(rf?, right, cfg.specular_threshold);
    let matches = features::match_stereo(&lf, &rf, rig, cfg);
    let refined = features::refine_stereo_subpixel(&matches, left, right, rig, cfg.scale_factor);
    let stereo = refined
        .iter()
        .filter_map(|m| {
            let p = rig.triangulate(&Vec2::new(m.left.x, m.left.y), m.disparity).ok()?;
            Some(StereoPoint { feature: lf[m.left_index], left_index: m.left_index, right_u: m.right.x, camera_point: p })
        })
        .collect();
    Ok(FrameFeatures { left: lf, stereo })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    /// Search radius around each reprojection, pixels.
    pub radius: f64,
    pub max_hamming: u32,
    /// Best-to-second-best Hamming ratio; 1.0 disables the test.
    pub ratio: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { radius: 12.0, max_hamming: 64, ratio: 0.9 }
    }
}

/// Map landmark as seen by the matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkRef {
    pub id: u64,
    pub position: Vec3,
    pub descriptor: BinaryDescriptor,
}

const CELL: f64 = 16.0;

struct PointGrid {
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl PointGrid {
    fn new(points: &[StereoPoint]) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            let key = ((p.feature.kp.x / CELL).floor() as i64, (p.feature.kp.y / CELL).floor() as i64);
            cells.entry(key).or_default().push(i);
        }
        Self { cells }
    }

    fn within<'a>(&'a self, uv: Vec2, r: f64) -> impl Iterator<Item = usize> + 'a {
        let (x0, x1) = (((uv.x - r) / CELL).floor() as i64, ((uv.x + r) / CELL).floor() as i64);
        let (y0, y1) = (((uv.y - r) / CELL).floor() as i64, ((uv.y + r) / CELL).floor() as i64);
        (y0..=y1).flat_map(move |cy| (x0..=x1).filter_map(move |cx| self.cells.get(&(cx, cy)))).flatten().copied()
    }
}

/// Projects landmarks through the predicted pose and matches each to the
/// closest-descriptor stereo point within `params.radius` pixels. A stereo
/// point is claimed by at most one landmark.
pub fn guided_match(
    predicted: &PoseSE3,
    landmarks: &[LandmarkRef],
    frame: &[StereoPoint],
    k: &CameraIntrinsics,
    params: &MatchParams,
) -> Vec<Correspondence3D> {
    let grid = PointGrid::new(frame);
    let inv = predicted.inverse();
    // (hamming, landmark index) per claimed stereo point.
    let mut claims: HashMap<usize, (u32, usize)> = HashMap::new();
    for (li, lm) in landmarks.iter().enumerate() {
        let pc = inv.transform_point(&lm.position);
        if pc.z <= 1e-6 {
            continue;
        }
        let uv = Vec2::new(k.f * pc.x / pc.z + k.cx, k.f * pc.y / pc.z + k.cy);
        if !k.contains(&uv) {
            continue;
        }
        let (mut best, mut second, mut best_i) = (u32::MAX, u32::MAX, usize::MAX);
        for fi in grid.within(uv, params.radius) {
            let kp = &frame[fi].feature.kp;
            if (kp.x - uv.x).hypot(kp.y - uv.y) > params.radius {
                continue;
            }
            let d = lm.descriptor.hamming(&frame[fi].feature.desc);
            if d < best || (d == best && fi < best_i) {
                second = best;
                best = d;
                best_i = fi;
            } else if d < second {
                second = d;
            }
        }
        if best_i == usize::MAX || best > params.max_hamming {
            continue;
        }
        if second != u32::MAX && best as f64 > params.ratio * second as f64 {
            continue;
        }
        match claims.get(&best_i) {
            Some(&(d, _)) if d <= best => {}
            _ => {
                claims.insert(best_i, (best, li));
            }
        }
    }
    let mut out: Vec<Correspondence3D> = claims
        .into_iter()
        .map(|(fi, (_, li))| Correspondence3D {
            p_t: landmarks[li].position,
            p_t1: frame[fi].camera_point,
            pixel: Vec2::new(frame[fi].feature.kp.x, frame[fi].feature.kp.y),
            landmark: landmarks[li].id,
            feature: fi,
        })
        .collect();
    out.sort_by_key(|c| (c.landmark, c.feature));
    out
}

/// Brute-force descriptor matching of landmarks against every stereo point,
/// used when no pose prediction can be trusted.
pub fn global_match(landmarks: &[LandmarkRef], frame: &[StereoPoint], params: &MatchParams) -> Vec<Correspondence3D> {
    let mut claims: HashMap<usize, (u32, usize)> = HashMap::new();
    for (li, lm) in landmarks.iter().enumerate() {
        let (mut best, mut second, mut best_i) = (u32::MAX, u32::MAX, usize::MAX);
        for (fi, sp) in frame.iter().enumerate() {
            let d = lm.descriptor.hamming(&sp.feature.desc);
            if d < best {
                second = best;
                best = d;
                best_i = fi;
            } else if d < second {
                second = d;
            }
        }
        if best_i == usize::MAX || best > params.max_hamming || (second != u32::MAX && best as f64 > 0.8 * second as f64) {
            continue;
        }
        match claims.get(&best_i) {
            Some(&(d, _)) if d <= best => {}
            _ => {
                claims.insert(best_i, (best, li));
            }
        }
    }
    let mut out: Vec<Correspondence3D> = claims
        .into_iter()
        .map(|(fi, (_, li))| Correspondence3D {
            p_t: landmarks[li].position,
            p_t1: frame[fi].camera_point,
            pixel: Vec2::new(frame[fi].feature.kp.x, frame[fi].feature.kp.y),
            landmark: landmarks[li].id,
            feature: fi,
        })
        .collect();
    out.sort_by_key(|c| (c.landmark, c.feature));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub matching: MatchParams,
    pub ransac: RansacParams,
    /// Fewest RANSAC inliers accepted as a tracked frame.
    pub min_inliers: usize,
    /// Keyframes whose landmarks form the local map.
    pub local_keyframes: usize,
    /// Keyframes searched when relocalising.
    pub relocalization_keyframes: usize,
    /// Lost frames tolerated before halting.
    pub max_lost_frames: usize,
    /// Radius of the search for further landmark observations around their
    /// reprojection under the estimated pose, pixels; 0 disables it.
    pub projection_radius: f64,
    /// Constant linear and angular accelerations of the motion model.
    pub acceleration: [f64; 3],
    pub angular_acceleration: [f64; 3],
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            matching: MatchParams::default(),
            ransac: RansacParams::default(),
            min_inliers: 15,
            local_keyframes: 10,
            relocalization_keyframes: 5,
            max_lost_frames: 30,
            projection_radius: 3.0,
            acceleration: [0.0; 3],
            angular_acceleration: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrackStatus {
    Tracking,
    Relocalized,
    /// Pose held at the last good estimate.
    Lost,
    /// Lost for longer than the recovery window.
    Halted,
}

#[derive(Debug, Clone)]
pub struct TrackOutcome {
    pub pose: PoseSE3,
    pub status: TrackStatus,
    /// Inlier correspondences (landmark to stereo point).
    pub inliers: Vec<Correspondence3D>,
    /// Further (landmark, left feature index) observations found by
    /// projection under the estimated pose.
    pub observed: Vec<(u64, usize)>,
    pub mean_reproj_error: f64,
}

impl TrackOutcome {
    /// Sorted ids of every landmark seen in this frame.
    pub fn tracked_landmarks(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.inliers.iter().map(|c| c.landmark).chain(self.observed.iter().map(|o| o.0)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Matches landmarks not in `skip` to left features within `radius` pixels
/// of their reprojection under `pose`, by smallest Hamming distance. Several
/// landmarks may share a feature: duplicates of one surface point are all
/// observed.
pub fn projection_search(
    pose: &PoseSE3,
    landmarks: &[LandmarkRef],
    skip: &HashSet<u64>,
    left: &[Feature],
    k: &CameraIntrinsics,
    radius: f64,
    max_hamming: u32,
) -> Vec<(u64, usize)> {
    let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, f) in left.iter().enumerate() {
        cells.entry(((f.kp.x / CELL).floor() as i64, (f.kp.y / CELL).floor() as i64)).or_default().push(i);
    }
    let inv = pose.inverse();
    let mut out = Vec::new();
    for lm in landmarks.iter().filter(|l| !skip.contains(&l.id)) {
        let pc = inv.transform_point(&lm.position);
        if pc.z <= 1e-6 {
            continue;
        }
        let uv = Vec2::new(k.f * pc.x / pc.z + k.cx, k.f * pc.y / pc.z + k.cy);
        if !k.contains(&uv) {
            continue;
        }
        let (x0, x1) = (((uv.x - radius) / CELL).floor() as i64, ((uv.x + radius) / CELL).floor() as i64);
        let (y0, y1) = (((uv.y - radius) / CELL).floor() as i64, ((uv.y + radius) / CELL).floor() as i64);
        let mut best: Option<(u32, usize)> = None;
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                for &fi in cells.get(&(cx, cy)).into_iter().flatten() {
                    let f = &left[fi];
                    if (f.kp.x - uv.x).hypot(f.kp.y - uv.y) > radius {
                        continue;
                    }
                    let d = lm.descriptor.hamming(&f.desc);
                    if d <= max_hamming && best.is_none_or(|b| (d, fi) < b) {
                        best = Some((d, fi));
                    }
                }
            }
        }
        if let Some((_, fi)) = best {
            out.push((lm.id, fi));
        }
    }
    out.sort_unstable();
    out
}

/// Sequential per-frame tracker against map snapshots.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub config: TrackerConfig,
    intrinsics: CameraIntrinsics,
    motion: MotionState,
    last_timestamp: f64,
    lost_frames: usize,
}

impl Tracker {
    pub fn new(config: TrackerConfig, intrinsics: CameraIntrinsics, initial: PoseSE3, timestamp: f64) -> Self {
        let mut motion = MotionState::at_rest(initial);
        motion.a = Vec3::from(config.acceleration);
        motion.alpha = Vec3::from(config.angular_acceleration);
        Self { config, intrinsics, motion, last_timestamp: timestamp, lost_frames: 0 }
    }

    pub fn pose(&self) -> PoseSE3 {
        self.motion.pose
    }

    pub fn lost_frames(&self) -> usize {
        self.lost_frames
    }

    fn landmarks_of(map: &MapState, keyframes: usize) -> Vec<LandmarkRef> {
        let ids: BTreeSet<u64> =
            map.keyframes.values().rev().take(keyframes).flat_map(|kf| kf.landmark_ids.iter().copied()).collect();
        ids.iter()
            .filter_map(|id| map.landmarks.get(id))
            .map(|l| LandmarkRef { id: l.id, position: l.position, descriptor: l.descriptor })
            .collect()
    }

    fn accept(&mut self, pose: PoseSE3, timestamp: f64) {
        let dt = timestamp - self.last_timestamp;
        let mut m = if dt > 0.0 { MotionState::from_poses(&self.motion.pose, &pose, dt) } else { MotionState::at_rest(pose) };
        m.a = self.motion.a;
        m.alpha = self.motion.alpha;
        self.motion = m;
        self.last_timestamp = timestamp;
        self.lost_frames = 0;
    }

    /// Estimates the pose of the frame at `timestamp`.
    pub fn track(&mut self, frame: &FrameFeatures, map: &MapState, timestamp: f64) -> TrackOutcome {
        let cfg = self.config;
        let dt = timestamp - self.last_timestamp;
        let predicted = if self.lost_frames == 0 && dt > 0.0 {
            predict_pose(&self.motion, dt).map(|m| m.pose).unwrap_or(self.motion.pose)
        } else {
            self.motion.pose
        };
        let local = Self::landmarks_of(map, cfg.local_keyframes);
        let intr = self.intrinsics;
        let attempt = |corrs: Vec<Correspondence3D>, seed: u64| -> Option<(RansacResult, Vec<Correspondence3D>)> {
            if corrs.len() < cfg.min_inliers {
                return None;
            }
            let params = RansacParams { seed, ..cfg.ransac };
            let res = ransac_pose(&corrs, &params, &intr).ok()?;
            (res.inlier_indices.len() >= cfg.min_inliers).then_some((res, corrs))
        };
        let seed = cfg.ransac.seed ^ (timestamp.to_bits());
        let mut result = None;
        if self.lost_frames == 0 {
            let corrs = guided_match(&predicted, &local, &frame.stereo, &intr, &cfg.matching);
            result = attempt(corrs, seed);
            if result.is_none() {
                let wide = MatchParams { radius: cfg.matching.radius * 3.0, ..cfg.matching };
                result = attempt(guided_match(&predicted, &local, &frame.stereo, &intr, &wide), seed ^ 1);
            }
        }
        let mut relocalized = false;
        if result.is_none() {
            let reloc = Self::landmarks_of(map, cfg.relocalization_keyframes);
            result = attempt(global_match(&reloc, &frame.stereo, &cfg.matching), seed ^ 2);
            relocalized = result.is_some() && self.lost_frames > 0;
        }
        match result {
            Some((res, corrs)) => {
                self.accept(res.pose, timestamp);
                let inliers: Vec<Correspondence3D> = res.inlier_indices.iter().map(|&i| corrs[i]).collect();
                let observed = if cfg.projection_radius > 0.0 {
                    let skip: HashSet<u64> = inliers.iter().map(|c| c.landmark).collect();
                    let r = cfg.projection_radius.min(cfg.ransac.inlier_tol_px);
                    projection_search(&res.pose, &local, &skip, &frame.left, &intr, r, cfg.matching.max_hamming)
                } else {
                    Vec::new()
                };
                TrackOutcome {
                    pose: res.pose,
                    status: if relocalized { TrackStatus::Relocalized } else { TrackStatus::Tracking },
                    inliers,
                    observed,
                    mean_reproj_error: res.mean_reproj_error,
                }
            }
            None => {
                self.lost_frames += 1;
                let status = if self.lost_frames > cfg.max_lost_frames { TrackStatus::Halted } else { TrackStatus::Lost };
                TrackOutcome { pose: self.motion.pose, status, inliers: Vec::new(), observed: Vec::new(), mean_reproj_error: f64::NAN }
            }
        }
    }
}

/// Splits a tracked frame into re-observations of existing landmarks and new
/// stereo points for keyframe insertion. Stereo points whose left feature
/// observes a landmark do not become new landmarks.
pub fn keyframe_points(frame: &FrameFeatures, outcome: &TrackOutcome) -> (Vec<TrackedPoint>, Vec<NewPoint>) {
    let right_of: HashMap<usize, f64> = frame.stereo.iter().map(|sp| (sp.left_index, sp.right_u)).collect();
    let mut seen: Vec<(u64, usize)> = outcome
        .inliers
        .iter()
        .map(|c| (c.landmark, frame.stereo[c.feature].left_index))
        .chain(outcome.observed.iter().copied())
        .collect();
    seen.sort_unstable();
    seen.dedup_by_key(|o| o.0);
    let used: HashSet<usize> = seen.iter().map(|o| o.1).collect();
    let tracked = seen
        .iter()
        .map(|&(landmark, li)| {
            let f = &frame.left[li];
            TrackedPoint { landmark, pixel: Vec2::new(f.kp.x, f.kp.y), right_u: right_of.get(&li).copied() }
        })
        .collect();
    let new_points = frame
        .stereo
        .iter()
        .filter(|sp| !used.contains(&sp.left_index))
        .map(|sp| NewPoint {
            camera_point: sp.camera_point,
            pixel: Vec2::new(sp.feature.kp.x, sp.feature.kp.y),
            right_u: sp.right_u,
            descriptor: sp.feature.desc,
        })
        .collect();
    (tracked, new_points)
}
