//! Camera models, rigid transforms and stereo triangulation.
//!
//! Conventions: right-handed frames, the camera looks down +z with x to the
//! right and y down. The world frame is the first camera frame. Disparity is
//! `x_left - x_right` and is nonnegative for points in front of a rectified
//! rig. All lengths are meters.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid disparity {0} px")]
    InvalidDisparity(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid stereo rig: {0}")]
    InvalidRig(String),
    #[error("calibration file: {0}")]
    Calibration(String),
}

/// Pinhole intrinsics shared by both rectified cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { f, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!("f = {}", self.f)));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!("cx = {}", self.cx)));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!("cy = {}", self.cy)));
        }
        Ok(())
    }

    /// Perspective projection of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> Result<Vec2, GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok(Vec2::new(self.f * p.x / p.z + self.cx, self.f * p.y / p.z + self.cy))
    }

    /// Inverse of [`project`](Self::project) at a known depth.
    pub fn backproject(&self, uv: &Vec2, z: f64) -> Result<Vec3, GeometryError> {
        if !(z > 0.0) || !z.is_finite() {
            return Err(GeometryError::InvalidDepth(z));
        }
        Ok(Vec3::new((uv.x - self.cx) * z / self.f, (uv.y - self.cy) * z / self.f, z))
    }

    pub fn contains(&self, uv: &Vec2) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }

    /// Same camera at a coarser image size (used by the fast CI profile).
    pub fn scaled(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self { f: self.f * sx, cx: self.cx * sx, cy: self.cy * sy, width, height }
    }
}

/// Free-function form of [`CameraIntrinsics::project`].
pub fn project_point(p: &Vec3, k: &CameraIntrinsics) -> Result<Vec2, GeometryError> {
    k.project(p)
}

/// Free-function form of [`CameraIntrinsics::backproject`].
pub fn backproject_pixel(uv: &Vec2, z: f64, k: &CameraIntrinsics) -> Result<Vec3, GeometryError> {
    k.backproject(uv, z)
}

/// A calibrated, rectified stereo pair. The right camera sits at `+baseline`
/// along the left camera's x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl StereoRig {
    pub fn new(intrinsics: CameraIntrinsics, baseline: f64, d_min: f64, d_max: f64) -> Result<Self, GeometryError> {
        let rig = Self { intrinsics, baseline, d_min, d_max };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return Err(GeometryError::InvalidRig(format!("baseline = {}", self.baseline)));
        }
        if !(self.d_min >= 0.0 && self.d_min < self.d_max && self.d_max < self.intrinsics.width as f64) {
            return Err(GeometryError::InvalidRig(format!(
                "disparity range [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// Depth from disparity, `Z = f * B / d`.
    pub fn triangulate_depth(&self, disparity: f64) -> Result<f64, GeometryError> {
        if !(disparity > 0.0) || disparity < self.d_min || disparity > self.d_max {
            return Err(GeometryError::InvalidDisparity(disparity));
        }
        Ok(self.intrinsics.f * self.baseline / disparity)
    }

    pub fn disparity_for_depth(&self, z: f64) -> f64 {
        self.intrinsics.f * self.baseline / z
    }

    /// Camera-frame point for a left pixel and its disparity.
    pub fn triangulate(&self, uv: &Vec2, disparity: f64) -> Result<Vec3, GeometryError> {
        let z = self.triangulate_depth(disparity)?;
        self.intrinsics.backproject(uv, z)
    }

    /// Parses the `key=value` calibration format. Blank lines and `#`
    /// comments are ignored; every key is mandatory.
    pub fn parse_calibration(text: &str) -> Result<Self, GeometryError> {
        let mut kv = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GeometryError::Calibration(format!("line {}: expected key=value", lineno + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| GeometryError::Calibration(format!("line {}: bad number {:?}", lineno + 1, v.trim())))?;
            kv.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| GeometryError::Calibration(format!("missing key `{k}`")));
        let width = get("width")?;
        let height = get("height")?;
        if width < 1.0 || height < 1.0 || width.fract() != 0.0 || height.fract() != 0.0 {
            return Err(GeometryError::Calibration("width/height must be positive integers".into()));
        }
        let k = CameraIntrinsics::new(get("f")?, get("cx")?, get("cy")?, width as u32, height as u32)?;
        Self::new(k, get("baseline")?, get("d_min")?, get("d_max")?)
    }

    pub fn load_calibration(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GeometryError::Calibration(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse_calibration(&text)
    }

    pub fn to_calibration_string(&self) -> String {
        let k = &self.intrinsics;
        format!(
            "f={}\ncx={}\ncy={}\nwidth={}\nheight={}\nbaseline={}\nd_min={}\nd_max={}\n",
            k.f, k.cx, k.cy, k.width, k.height, self.baseline, self.d_min, self.d_max
        )
    }
}

/// Free-function form of [`StereoRig::triangulate_depth`].
pub fn triangulate_depth(disparity: f64, rig: &StereoRig) -> Result<f64, GeometryError> {
    rig.triangulate_depth(disparity)
}

/// Rigid transform. Used as world-from-camera unless stated otherwise:
/// `x_world = q * x_cam + r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub r: Vec3,
    pub q: UnitQuaternion<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self { r: Vec3::zeros(), q: UnitQuaternion::identity() }
    }

    pub fn new(r: Vec3, q: UnitQuaternion<f64>) -> Self {
        let mut q = q;
        q.renormalize();
        Self { r, q }
    }

    pub fn from_translation(r: Vec3) -> Self {
        Self { r, q: UnitQuaternion::identity() }
    }

    pub fn from_rotation_matrix(rot: &Matrix3<f64>, r: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rot);
        Self::new(r, UnitQuaternion::from_rotation_matrix(&rot))
    }

    /// Quaternion components in (w, x, y, z) order.
    pub fn wxyz(&self) -> [f64; 4] {
        let c = self.q.quaternion().coords;
        [c.w, c.x, c.y, c.z]
    }

    pub fn from_wxyz(r: Vec3, wxyz: [f64; 4]) -> Self {
        let q = nalgebra::Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self::new(r, UnitQuaternion::from_quaternion(q))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.q * p + self.r
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.q * v
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let mut q = self.q * other.q;
        q.renormalize();
        PoseSE3 { r: self.q * other.r + self.r, q }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let qi = self.q.inverse();
        PoseSE3 { r: -(qi * self.r), q: qi }
    }

    /// Left-multiplies by the increment `(Exp(omega), rho)`:
    /// `R' = Exp(omega) R`, `t' = Exp(omega) t + rho`.
    pub fn retract_left(&self, rho: &Vec3, omega: &Vec3) -> PoseSE3 {
        let dq = UnitQuaternion::from_scaled_axis(*omega);
        let mut q = dq * self.q;
        q.renormalize();
        PoseSE3 { r: dq * self.r + rho, q }
    }

    /// Rotation angle between the two orientations, radians.
    pub fn rotation_distance(&self, other: &PoseSE3) -> f64 {
        self.q.angle_to(&other.q)
    }

    pub fn translation_distance(&self, other: &PoseSE3) -> f64 {
        (self.r - other.r).norm()
    }
}

/// Free-function form of [`PoseSE3::compose`].
pub fn compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    a.compose(b)
}

/// Free-function form of [`PoseSE3::inverse`].
pub fn invert(a: &PoseSE3) -> PoseSE3 {
    a.inverse()
}

impl fmt::Display for PoseSE3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.wxyz();
        write!(f, "r=({:.6}, {:.6}, {:.6}) q=({w:.6}, {x:.6}, {y:.6}, {z:.6})", self.r.x, self.r.y, self.r.z)
    }
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig() -> StereoRig {
        let k = CameraIntrinsics::new(100.0, 320.0, 240.0, 640, 480).unwrap();
        StereoRig::new(k, 0.010, 1.0, 64.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let r = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        PoseSE3::new(r, UnitQuaternion::from_scaled_axis(axis * 1.5))
    }

    #[test]
    fn depth_from_disparity() {
        // f=100 px, B=10 mm, d=5 px -> 200 mm
        let z = rig().triangulate_depth(5.0).unwrap();
        assert!((z - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_and_out_of_range_disparity_rejected() {
        let rig = rig();
        assert!(matches!(rig.triangulate_depth(0.0), Err(GeometryError::InvalidDisparity(_))));
        assert!(matches!(rig.triangulate_depth(-3.0), Err(GeometryError::InvalidDisparity(_))));
        assert!(matches!(rig.triangulate_depth(100.0), Err(GeometryError::InvalidDisparity(_))));
        assert!(matches!(rig.triangulate_depth(0.5), Err(GeometryError::InvalidDisparity(_))));
    }

    #[test]
    fn depth_round_trip_through_projection() {
        // The right camera sees the point shifted by the baseline.
        let rig = rig();
        let k = rig.intrinsics;
        for &z in &[0.05, 0.1, 0.37, 0.9] {
            let p = Vec3::new(0.013, -0.02, z);
            let ul = k.project(&p).unwrap();
            let ur = k.project(&(p - Vec3::new(rig.baseline, 0.0, 0.0))).unwrap();
            let z_hat = rig.triangulate_depth(ul.x - ur.x).unwrap();
            assert!(((z_hat - z) / z).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(100.0, 320.0, 240.0, 640, 480).unwrap();
        let uv = k.project(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((uv.x, uv.y), (320.0, 240.0));
        let uv = k.project(&Vec3::new(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(uv.x, 420.0);
        assert!(matches!(k.project(&Vec3::new(0.0, 0.0, 0.0)), Err(GeometryError::BehindCamera(_))));
        let p = k.backproject(&Vec2::new(320.0, 240.0), 1.0).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 1.0));
        assert!(matches!(k.backproject(&uv, -1.0), Err(GeometryError::InvalidDepth(_))));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 10.0, 1.0, 10, 10).is_err());
        let k = CameraIntrinsics::new(1.0, 5.0, 5.0, 10, 10).unwrap();
        assert!(StereoRig::new(k, 0.0, 0.0, 5.0).is_err());
        assert!(StereoRig::new(k, 0.1, 5.0, 5.0).is_err());
        assert!(StereoRig::new(k, 0.1, 0.0, 10.0).is_err());
    }

    #[test]
    fn pose_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let id = a.compose(&a.inverse());
            assert!(id.r.norm() < 1e-9 && id.q.angle() < 1e-9);
            let ii = a.inverse().inverse();
            assert!(ii.translation_distance(&a) < 1e-9 && ii.rotation_distance(&a) < 1e-9);
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            assert!(l.translation_distance(&r) < 1e-9 && l.rotation_distance(&r) < 1e-9);
            let e = PoseSE3::identity().compose(&a);
            assert!(e.translation_distance(&a) < 1e-15);
        }
    }

    #[test]
    fn composed_transform_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let ab = a.compose(&b);
        // Independent route: explicit rotation matrices.
        let (ra, rb) = (a.rotation_matrix(), b.rotation_matrix());
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let p = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let seq = ra * (rb * p + b.r) + a.r;
            worst = worst.max((ab.transform_point(&p) - seq).norm());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn quaternion_norm_survives_long_composition_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = PoseSE3::identity();
        for _ in 0..100_000 {
            let step = PoseSE3::new(Vec3::zeros(), UnitQuaternion::from_scaled_axis(Vec3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            )));
            acc = acc.compose(&step);
        }
        assert!((acc.q.quaternion().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn calibration_round_trip_and_missing_keys() {
        let rig = rig();
        let parsed = StereoRig::parse_calibration(&rig.to_calibration_string()).unwrap();
        assert_eq!(parsed, rig);
        let text = "f=100\ncx=320\ncy=240\nwidth=640\nheight=480\nbaseline=0.01\nd_min=1\n";
        let err = StereoRig::parse_calibration(text).unwrap_err();
        assert!(err.to_string().contains("d_max"));
        assert!(StereoRig::parse_calibration("f = abc").is_err());
    }

    proptest::proptest! {
        #[test]
        fn triangulation_is_exact(f in 10.0f64..2000.0, b in 0.001f64..0.5, d in 1.0f64..60.0) {
            let k = CameraIntrinsics::new(f, 320.0, 240.0, 640, 480).unwrap();
            let rig = StereoRig::new(k, b, 0.5, 63.0).unwrap();
            proptest::prop_assert_eq!(rig.triangulate_depth(d).unwrap(), f * b / d);
        }

        #[test]
        fn projection_inverts_backprojection(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.01f64..5.0) {
            let k = CameraIntrinsics::new(700.0, 420.0, 320.0, 840, 640).unwrap();
            let p = Vec3::new(x, y, z);
            let back = k.backproject(&k.project(&p).unwrap(), z).unwrap();
            proptest::prop_assert!((back - p).norm() < 1e-9);
        }
    }
}
