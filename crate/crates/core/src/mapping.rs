//! Keyframes, landmarks and windowed bundle adjustment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use image::GrayImage;
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{BinaryDescriptor, Feature};
use crate::geometry::{skew, PoseSE3, StereoRig, Vec2, Vec3};
use crate::tum::fmt_sig;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MapError {
    #[error("keyframe {0} already exists")]
    DuplicateKeyframe(u64),
    #[error("unknown landmark {0}")]
    UnknownLandmark(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u64,
    /// World position, meters.
    pub position: Vec3,
    pub descriptor: BinaryDescriptor,
    pub observations: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub keyframe: u64,
    pub landmark: u64,
    /// Left-image pixel.
    pub pixel: Vec2,
    /// Matching right-image column, when the point was seen in both views.
    pub right_u: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    /// Equal to the frame index it was created from.
    pub id: u64,
    pub timestamp: f64,
    /// World-from-camera.
    pub pose: PoseSE3,
    pub features: Vec<Feature>,
    pub landmark_ids: Vec<u64>,
    pub left: Arc<GrayImage>,
    pub right: Arc<GrayImage>,
}

/// A stereo point to be added as a new landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewPoint {
    /// Position in the keyframe's camera frame.
    pub camera_point: Vec3,
    pub pixel: Vec2,
    pub right_u: f64,
    pub descriptor: BinaryDescriptor,
}

/// An existing landmark re-observed by the new keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedPoint {
    pub landmark: u64,
    pub pixel: Vec2,
    pub right_u: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct NewKeyframe {
    pub id: u64,
    pub timestamp: f64,
    pub pose: PoseSE3,
    pub left: Arc<GrayImage>,
    pub right: Arc<GrayImage>,
    pub features: Vec<Feature>,
    pub tracked: Vec<TrackedPoint>,
    pub new_points: Vec<NewPoint>,
}

#[derive(Debug, Clone, Default)]
pub struct MapState {
    pub keyframes: BTreeMap<u64, Keyframe>,
    pub landmarks: BTreeMap<u64, Landmark>,
    pub observations: Vec<Observation>,
    pub version: u64,
    next_landmark: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframePolicy {
    pub max_shared_ratio: f64,
    pub min_tracked: usize,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self { max_shared_ratio: 0.8, min_tracked: 50 }
    }
}

/// Shared-with-reference ratio below the policy limit and more than
/// `min_tracked` landmarks currently tracked.
pub fn keyframe_decision(shared_ratio: f64, tracked: usize, policy: &KeyframePolicy) -> bool {
    shared_ratio < policy.max_shared_ratio && tracked > policy.min_tracked
}

/// [`keyframe_decision`] with the ratio taken over the reference keyframe's
/// landmarks.
pub fn should_insert_keyframe(tracked_landmark_ids: &[u64], reference: &Keyframe, policy: &KeyframePolicy) -> bool {
    let reference_ids: BTreeSet<u64> = reference.landmark_ids.iter().copied().collect();
    let shared = tracked_landmark_ids.iter().filter(|id| reference_ids.contains(id)).count();
    let ratio = if reference_ids.is_empty() { 0.0 } else { shared as f64 / reference_ids.len() as f64 };
    keyframe_decision(ratio, tracked_landmark_ids.len(), policy)
}

impl MapState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_keyframe(&self) -> Option<&Keyframe> {
        self.keyframes.values().next_back()
    }

    /// Stores the keyframe, creates landmarks for its new stereo points and
    /// records every observation. Rejects a repeated keyframe id.
    pub fn insert_keyframe(&mut self, kf: NewKeyframe) -> Result<Vec<u64>, MapError> {
        if self.keyframes.contains_key(&kf.id) {
            return Err(MapError::DuplicateKeyframe(kf.id));
        }
        if let Some(t) = kf.tracked.iter().find(|t| !self.landmarks.contains_key(&t.landmark)) {
            return Err(MapError::UnknownLandmark(t.landmark));
        }
        let mut ids = Vec::with_capacity(kf.tracked.len() + kf.new_points.len());
        let mut seen = BTreeSet::new();
        for t in &kf.tracked {
            if !seen.insert(t.landmark) {
                continue;
            }
            self.landmarks.get_mut(&t.landmark).expect("checked above").observations += 1;
            self.observations.push(Observation { keyframe: kf.id, landmark: t.landmark, pixel: t.pixel, right_u: t.right_u });
            ids.push(t.landmark);
        }
        let mut created = Vec::with_capacity(kf.new_points.len());
        for p in &kf.new_points {
            let id = self.next_landmark;
            self.next_landmark += 1;
            self.landmarks.insert(
                id,
                Landmark { id, position: kf.pose.transform_point(&p.camera_point), descriptor: p.descriptor, observations: 1 },
            );
            self.observations.push(Observation { keyframe: kf.id, landmark: id, pixel: p.pixel, right_u: Some(p.right_u) });
            ids.push(id);
            created.push(id);
        }
        self.keyframes.insert(
            kf.id,
            Keyframe {
                id: kf.id,
                timestamp: kf.timestamp,
                pose: kf.pose,
                features: kf.features,
                landmark_ids: ids,
                left: kf.left,
                right: kf.right,
            },
        );
        self.version += 1;
        Ok(created)
    }

    /// Checks that keyframes, landmarks and observations reference each other
    /// consistently.
    pub fn check_integrity(&self) -> Result<(), String> {
        let mut counts: HashMap<u64, u32> = HashMap::new();
        for o in &self.observations {
            let kf = self.keyframes.get(&o.keyframe).ok_or(format!("observation of missing keyframe {}", o.keyframe))?;
            if !self.landmarks.contains_key(&o.landmark) {
                return Err(format!("observation of missing landmark {}", o.landmark));
            }
            if !kf.landmark_ids.contains(&o.landmark) {
                return Err(format!("keyframe {} does not list landmark {}", o.keyframe, o.landmark));
            }
            let (w, h) = (kf.left.width() as f64, kf.left.height() as f64);
            if !(o.pixel.x >= 0.0 && o.pixel.y >= 0.0 && o.pixel.x < w && o.pixel.y < h) {
                return Err(format!("observation pixel {:?} outside keyframe {}", o.pixel, o.keyframe));
            }
            *counts.entry(o.landmark).or_default() += 1;
        }
        for kf in self.keyframes.values() {
            if let Some(id) = kf.landmark_ids.iter().find(|id| !self.landmarks.contains_key(id)) {
                return Err(format!("keyframe {} lists missing landmark {id}", kf.id));
            }
        }
        for lm in self.landmarks.values() {
            if !lm.position.iter().all(|v| v.is_finite()) {
                return Err(format!("landmark {} has non-finite position", lm.id));
            }
            let n = counts.get(&lm.id).copied().unwrap_or(0);
            if n == 0 || n != lm.observations {
                return Err(format!("landmark {} counts {} observations, found {n}", lm.id, lm.observations));
            }
        }
        Ok(())
    }

    /// Writes keyframe poses and landmark positions, one record per line.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# map version {}", self.version)?;
        writeln!(w, "# KF id timestamp tx ty tz qx qy qz qw")?;
        writeln!(w, "# LM id x y z observations")?;
        for kf in self.keyframes.values() {
            let [qw, qx, qy, qz] = kf.pose.wxyz();
            let r = kf.pose.r;
            let vals: Vec<String> = [kf.timestamp, r.x, r.y, r.z, qx, qy, qz, qw].iter().map(|v| fmt_sig(*v, 9)).collect();
            writeln!(w, "KF {} {}", kf.id, vals.join(" "))?;
        }
        for lm in self.landmarks.values() {
            let p = lm.position;
            writeln!(w, "LM {} {} {} {} {}", lm.id, fmt_sig(p.x, 9), fmt_sig(p.y, 9), fmt_sig(p.z, 9), lm.observations)?;
        }
        Ok(())
    }

    pub fn save_dump(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_dump(&mut w)?;
        w.flush()
    }
}

/// Huber penalty: quadratic up to `delta`, linear beyond.
pub fn huber_cost(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaParams {
    /// Number of most recent keyframes whose poses are refined.
    pub window: usize,
    pub huber_delta: f64,
    /// When false the cost is purely quadratic.
    pub robust: bool,
    /// Include the right-image column as a third residual component.
    pub stereo: bool,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
}

impl Default for BaParams {
    fn default() -> Self {
        Self { window: 7, huber_delta: 2.45, robust: true, stereo: true, max_iterations: 20, relative_tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BaStatus {
    Converged,
    MaxIterations,
    /// Damping grew without finding a descent step; best-so-far kept.
    DampingOverflow,
    /// Nothing to optimise.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaReport {
    pub status: BaStatus,
    pub iterations: usize,
    /// Cost after initialisation and after every accepted iteration.
    pub costs: Vec<f64>,
}

impl BaReport {
    pub fn initial_cost(&self) -> f64 {
        self.costs.first().copied().unwrap_or(0.0)
    }

    pub fn final_cost(&self) -> f64 {
        self.costs.last().copied().unwrap_or(0.0)
    }
}

/// Stereo projection `(u_left, v, u_right)` of a world point seen by a camera
/// with camera-from-world pose `t_cw`, with Jacobians with respect to a left
/// increment of `t_cw` (`rho`, `omega`) and to the world point.
pub fn camproj_jacobians(
    t_cw: &PoseSE3,
    p_w: &Vec3,
    rig: &StereoRig,
) -> (Vec3, SMatrix<f64, 3, 6>, Matrix3<f64>) {
    let k = &rig.intrinsics;
    let pc = t_cw.transform_point(p_w);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let proj = Vec3::new(k.f * x * iz + k.cx, k.f * y * iz + k.cy, k.f * (x - rig.baseline) * iz + k.cx);
    let dproj = Matrix3::new(
        k.f * iz,
        0.0,
        -k.f * x * iz * iz,
        0.0,
        k.f * iz,
        -k.f * y * iz * iz,
        k.f * iz,
        0.0,
        -k.f * (x - rig.baseline) * iz * iz,
    );
    let mut dpose = SMatrix::<f64, 3, 6>::zeros();
    dpose.fixed_view_mut::<3, 3>(0, 0).copy_from(&dproj);
    dpose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-dproj * skew(&pc)));
    let dpoint = dproj * t_cw.rotation_matrix();
    (proj, dpose, dpoint)
}

struct Problem<'a> {
    rig: &'a StereoRig,
    params: &'a BaParams,
    /// Camera-from-world pose per keyframe id involved.
    poses: BTreeMap<u64, PoseSE3>,
    /// Index into the pose parameter vector, for free poses.
    free: BTreeMap<u64, usize>,
    points: Vec<Vec3>,
    landmark_ids: Vec<u64>,
    /// (pose keyframe id, point index, observation).
    obs: Vec<(u64, usize, Observation)>,
}

impl Problem<'_> {
    fn residual(&self, pose: &PoseSE3, point: &Vec3, o: &Observation) -> (Vec3, usize) {
        let pc = pose.transform_point(point);
        let k = &self.rig.intrinsics;
        if pc.z <= 1e-9 {
            return (Vec3::repeat(1e6), 3);
        }
        let u = k.f * pc.x / pc.z + k.cx;
        let v = k.f * pc.y / pc.z + k.cy;
        let ur = k.f * (pc.x - self.rig.baseline) / pc.z + k.cx;
        match (self.params.stereo, o.right_u) {
            (true, Some(r)) => (Vec3::new(o.pixel.x - u, o.pixel.y - v, r - ur), 3),
            _ => (Vec3::new(o.pixel.x - u, o.pixel.y - v, 0.0), 2),
        }
    }

    fn rho(&self, r: f64) -> f64 {
        if self.params.robust {
            huber_cost(r, self.params.huber_delta)
        } else {
            0.5 * r * r
        }
    }

    fn cost(&self, poses: &BTreeMap<u64, PoseSE3>, points: &[Vec3]) -> f64 {
        self.obs.iter().map(|(kf, pi, o)| self.rho(self.residual(&poses[kf], &points[*pi], o).0.norm())).sum()
    }
}

/// Refines the poses of the last `params.window` keyframes and every landmark
/// they observe. The first keyframe and keyframes outside the window stay
/// fixed. Accepted iterations never increase the cost.
pub fn bundle_adjust(map: &mut MapState, rig: &StereoRig, params: &BaParams) -> BaReport {
    let skipped = BaReport { status: BaStatus::Skipped, iterations: 0, costs: Vec::new() };
    let Some(&first) = map.keyframes.keys().next() else {
        return skipped;
    };
    let window: Vec<u64> = map.keyframes.keys().rev().take(params.window.max(1)).copied().collect();
    let window_set: BTreeSet<u64> = window.iter().copied().collect();
    let mut free = BTreeMap::new();
    for id in window.iter().rev().filter(|&&id| id != first) {
        let n = free.len();
        free.insert(*id, n);
    }
    let landmark_set: BTreeSet<u64> =
        map.observations.iter().filter(|o| window_set.contains(&o.keyframe)).map(|o| o.landmark).collect();
    if landmark_set.is_empty() {
        return skipped;
    }
    let landmark_ids: Vec<u64> = landmark_set.iter().copied().collect();
    let index: HashMap<u64, usize> = landmark_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let points: Vec<Vec3> = landmark_ids.iter().map(|id| map.landmarks[id].position).collect();
    let obs: Vec<(u64, usize, Observation)> = map
        .observations
        .iter()
        .filter_map(|o| index.get(&o.landmark).map(|&pi| (o.keyframe, pi, *o)))
        .collect();
    let poses: BTreeMap<u64, PoseSE3> =
        obs.iter().map(|(kf, _, _)| *kf).collect::<BTreeSet<_>>().into_iter().map(|id| (id, map.keyframes[&id].pose.inverse())).collect();
    let problem = Problem { rig, params, poses, free, points, landmark_ids, obs };
    let (report, poses, points) = optimise(&problem);
    if report.status != BaStatus::Skipped {
        for id in problem.free.keys() {
            map.keyframes.get_mut(id).expect("free pose exists").pose = poses[id].inverse();
        }
        for (i, id) in problem.landmark_ids.iter().enumerate() {
            map.landmarks.get_mut(id).expect("landmark exists").position = points[i];
        }
        map.version += 1;
    }
    report
}

fn optimise(pb: &Problem) -> (BaReport, BTreeMap<u64, PoseSE3>, Vec<Vec3>) {
    let m = pb.free.len();
    let n = pb.points.len();
    let mut poses = pb.poses.clone();
    let mut points = pb.points.clone();
    let mut cost = pb.cost(&poses, &points);
    let mut costs = vec![cost];
    let mut lambda = 1e-4;
    let mut status = BaStatus::MaxIterations;
    let mut iterations = 0;
    if cost <= 1e-300 {
        return (BaReport { status: BaStatus::Converged, iterations: 0, costs }, poses, points);
    }
    'outer: for _ in 0..pb.params.max_iterations {
        iterations += 1;
        // Linearise with iteratively reweighted least squares.
        let mut hpp = DMatrix::<f64>::zeros(6 * m, 6 * m);
        let mut gp = DVector::<f64>::zeros(6 * m);
        let mut hll = vec![Matrix3::<f64>::zeros(); n];
        let mut gl = vec![Vec3::zeros(); n];
        let mut hpl: Vec<BTreeMap<usize, SMatrix<f64, 6, 3>>> = vec![BTreeMap::new(); n];
        for (kf, pi, o) in &pb.obs {
            let pose = &poses[kf];
            let (e, dims) = pb.residual(pose, &points[*pi], o);
            let r = e.norm();
            let w = if pb.params.robust && r > pb.params.huber_delta { pb.params.huber_delta / r } else { 1.0 };
            let (_, mut jp, mut jl) = camproj_jacobians(pose, &points[*pi], pb.rig);
            if dims == 2 {
                jp.row_mut(2).fill(0.0);
                jl.row_mut(2).fill(0.0);
            }
            hll[*pi] += w * jl.transpose() * jl;
            gl[*pi] += w * jl.transpose() * e;
            if let Some(&c) = pb.free.get(kf) {
                let jpt = jp.transpose();
                let block = w * jpt * jp;
                let mut view = hpp.view_mut((6 * c, 6 * c), (6, 6));
                view += block;
                let g = w * jpt * e;
                let mut gv = gp.rows_mut(6 * c, 6);
                gv += g;
                *hpl[*pi].entry(c).or_insert_with(SMatrix::<f64, 6, 3>::zeros) += w * jpt * jl;
            }
        }
        loop {
            let step = solve_damped(&hpp, &gp, &hll, &gl, &hpl, lambda);
            if let Some((dp, dl)) = step {
                let mut cand_poses = poses.clone();
                for (id, &c) in &pb.free {
                    let d = dp.fixed_rows::<6>(6 * c).into_owned();
                    let d: Vector6<f64> = d;
                    let rho = Vec3::new(d[0], d[1], d[2]);
                    let omega = Vec3::new(d[3], d[4], d[5]);
                    cand_poses.insert(*id, poses[id].retract_left(&rho, &omega));
                }
                let cand_points: Vec<Vec3> = points.iter().zip(&dl).map(|(p, d)| p + d).collect();
                let new_cost = pb.cost(&cand_poses, &cand_points);
                if new_cost.is_finite() && new_cost <= cost {
                    let rel = (cost - new_cost) / cost.max(1e-300);
                    poses = cand_poses;
                    points = cand_points;
                    cost = new_cost;
                    costs.push(cost);
                    lambda = (lambda * 0.1).max(1e-12);
                    if rel < pb.params.relative_tolerance || cost <= 1e-300 {
                        status = BaStatus::Converged;
                        break 'outer;
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                log::warn!("bundle adjustment damping overflow; keeping best-so-far");
                status = BaStatus::DampingOverflow;
                break 'outer;
            }
        }
    }
    (BaReport { status, iterations, costs }, poses, points)
}

type Step = (DVector<f64>, Vec<Vec3>);

/// Solves the damped normal equations by eliminating the landmark blocks.
fn solve_damped(
    hpp: &DMatrix<f64>,
    gp: &DVector<f64>,
    hll: &[Matrix3<f64>],
    gl: &[Vec3],
    hpl: &[BTreeMap<usize, SMatrix<f64, 6, 3>>],
    lambda: f64,
) -> Option<Step> {
    let dim = hpp.nrows();
    let mut s = hpp.clone();
    for i in 0..dim {
        s[(i, i)] += lambda * s[(i, i)] + 1e-12;
    }
    let mut b = gp.clone();
    let mut inv = Vec::with_capacity(hll.len());
    for (l, h) in hll.iter().enumerate() {
        let mut hd = *h;
        for i in 0..3 {
            hd[(i, i)] += lambda * hd[(i, i)] + 1e-12;
        }
        let hi = hd.try_inverse()?;
        for (&c, blk) in &hpl[l] {
            let t = blk * hi;
            let mut bv = b.rows_mut(6 * c, 6);
            bv -= t * gl[l];
            for (&c2, blk2) in &hpl[l] {
                let mut sv = s.view_mut((6 * c, 6 * c2), (6, 6));
                sv -= t * blk2.transpose();
            }
        }
        inv.push(hi);
    }
    let dp = if dim > 0 { s.cholesky()?.solve(&b) } else { DVector::zeros(0) };
    let dl = (0..hll.len())
        .map(|l| {
            let mut rhs = gl[l];
            for (&c, blk) in &hpl[l] {
                rhs -= blk.transpose() * dp.fixed_rows::<6>(6 * c);
            }
            inv[l] * rhs
        })
        .collect::<Vec<_>>();
    if dp.iter().chain(dl.iter().flat_map(|v| v.iter())).all(|v| v.is_finite()) {
        Some((dp, dl))
    } else {
        None
    }
}
