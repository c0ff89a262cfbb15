//! Deterministic synthetic stereo sequences with exact ground truth.
//!
//! The scene is a heightfield `z = g(x, y)` expressed in the world frame
//! (the first camera frame): a base plane at `base_depth` plus Gaussian
//! bumps, optionally intersected with sphere caps and raised slabs. Images
//! are produced by casting one ray per pixel against the heightfield and
//! shading the hit with a Lambertian + Phong model lit by a spot light at
//! the left camera centre.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use image::GrayImage;
use nalgebra::{Matrix3, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{FloatMap, StereoFrame};
use crate::geometry::{CameraIntrinsics, PoseSE3, StereoRig, Vec3};
use crate::tum::{self, StampedPose};

#[derive(Error, Debug)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("frame {frame}: camera view leaves the scene")]
    LeavesScene { frame: usize },
    #[error("point ({x}, {y}) is outside the scene extent")]
    OutOfExtent { x: f64, y: f64 },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBump {
    pub x: f64,
    pub y: f64,
    /// Positive values raise the surface toward the camera.
    pub amplitude: f64,
    pub sigma: f64,
}

/// Front half of a sphere; the surface takes the nearer of the sphere and the
/// rest of the heightfield.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereCap {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub radius: f64,
}

/// Axis-aligned raised block with a flat top at `depth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slab {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Value-noise octave wavelengths in meters, paired with `weights`.
    pub wavelengths: Vec<f64>,
    pub weights: Vec<f64>,
    /// Ridged-noise wavelength for the dark vessel pattern.
    pub vein_wavelength: f64,
    pub vein_strength: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            wavelengths: vec![0.006, 0.003, 0.0015, 0.0008, 0.0004],
            weights: vec![0.2, 0.2, 0.2, 0.2, 0.2],
            vein_wavelength: 0.006,
            vein_strength: 0.45,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo_min: f64,
    pub albedo_max: f64,
    pub ambient: f64,
    pub diffuse: f64,
    /// Specular strength as a fraction of full scale.
    pub specular: f64,
    pub shininess: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self { albedo_min: 0.2, albedo_max: 0.95, ambient: 0.1, diffuse: 0.6, specular: 0.8, shininess: 150.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightSpec {
    /// Exponent of the spot cone falloff around the left optical axis.
    pub spot_exponent: f64,
    /// Distance at which the inverse-square falloff equals one.
    pub reference_distance: f64,
}

impl Default for LightSpec {
    fn default() -> Self {
        Self { spot_exponent: 2.0, reference_distance: 0.08 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub base_depth: f64,
    pub center: [f64; 2],
    /// Side length of the square footprint, meters.
    pub extent: f64,
    pub bumps: Vec<GaussianBump>,
    #[serde(default)]
    pub spheres: Vec<SphereCap>,
    #[serde(default)]
    pub slabs: Vec<Slab>,
    pub texture: TextureSpec,
    pub material: Material,
    pub light: LightSpec,
    /// Additive Gaussian sensor noise, gray levels.
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    /// Organ-like surface at the 14 cm scale, centred under the hover orbit.
    fn default() -> Self {
        let (cx, cy) = (0.0, 0.02);
        let bump = |dx: f64, dy: f64, a: f64, s: f64| GaussianBump { x: cx + dx, y: cy + dy, amplitude: a, sigma: s };
        Self {
            base_depth: 0.09,
            center: [cx, cy],
            extent: 0.14,
            bumps: vec![
                bump(-0.020, -0.010, 0.014, 0.025),
                bump(0.030, 0.020, 0.010, 0.022),
                bump(0.000, 0.035, 0.008, 0.020),
                bump(-0.035, 0.030, -0.006, 0.022),
                bump(0.025, -0.035, 0.007, 0.018),
            ],
            spheres: Vec::new(),
            slabs: Vec::new(),
            texture: TextureSpec::default(),
            material: Material::default(),
            light: LightSpec::default(),
            noise_sigma: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn flat(depth: f64) -> Self {
        Self { base_depth: depth, center: [0.0, 0.0], bumps: Vec::new(), ..Self::default() }
    }

    /// Flat background with one sphere cap facing the camera.
    pub fn sphere(background_depth: f64, center_depth: f64, radius: f64) -> Self {
        Self {
            spheres: vec![SphereCap { x: 0.0, y: 0.0, z: center_depth, radius }],
            ..Self::flat(background_depth)
        }
    }

    /// Background plane with a raised slab covering `x < x_edge`.
    pub fn two_slab(back_depth: f64, front_depth: f64, x_edge: f64) -> Self {
        Self {
            slabs: vec![Slab { x_min: -1.0, x_max: x_edge, y_min: -1.0, y_max: 1.0, depth: front_depth }],
            ..Self::flat(back_depth)
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.extent > 0.0) {
            return Err(SynthError::InvalidScene("extent must be positive".into()));
        }
        if !(self.base_depth > 0.0) {
            return Err(SynthError::InvalidScene("base depth must be positive".into()));
        }
        let amp: f64 = self.bumps.iter().map(|b| b.amplitude.abs()).sum();
        if amp >= self.extent {
            return Err(SynthError::InvalidScene("height amplitude must be below the extent".into()));
        }
        if self.bumps.iter().any(|b| !(b.sigma > 0.0)) || self.spheres.iter().any(|s| !(s.radius > 0.0)) {
            return Err(SynthError::InvalidScene("non-positive bump sigma or sphere radius".into()));
        }
        if self.texture.wavelengths.len() != self.texture.weights.len() {
            return Err(SynthError::InvalidScene("texture octave lists differ in length".into()));
        }
        let (lo, _) = self.depth_bounds();
        if !(lo > 0.0) {
            return Err(SynthError::InvalidScene("surface crosses the z = 0 plane".into()));
        }
        Ok(())
    }

    pub fn in_extent(&self, x: f64, y: f64) -> bool {
        let h = 0.5 * self.extent;
        (x - self.center[0]).abs() <= h && (y - self.center[1]).abs() <= h
    }

    /// Heightfield value and gradient at (x, y), without extent checks.
    pub fn height(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let mut z = self.base_depth;
        let (mut gx, mut gy) = (0.0, 0.0);
        for b in &self.bumps {
            let (dx, dy) = (x - b.x, y - b.y);
            let s2 = b.sigma * b.sigma;
            let e = b.amplitude * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
            z -= e;
            gx += e * dx / s2;
            gy += e * dy / s2;
        }
        for s in &self.spheres {
            let (dx, dy) = (x - s.x, y - s.y);
            let rho2 = dx * dx + dy * dy;
            let r2 = s.radius * s.radius;
            if rho2 < r2 {
                let root = (r2 - rho2).sqrt();
                let zs = s.z - root;
                if zs < z {
                    z = zs;
                    gx = dx / root.max(1e-12);
                    gy = dy / root.max(1e-12);
                }
            }
        }
        for s in &self.slabs {
            if x >= s.x_min && x <= s.x_max && y >= s.y_min && y <= s.y_max && s.depth < z {
                z = s.depth;
                gx = 0.0;
                gy = 0.0;
            }
        }
        (z, gx, gy)
    }

    /// Exact surface depth at (x, y); errors outside the extent.
    pub fn sample_surface(&self, x: f64, y: f64) -> Result<f64, SynthError> {
        if !self.in_extent(x, y) {
            return Err(SynthError::OutOfExtent { x, y });
        }
        Ok(self.height(x, y).0)
    }

    /// Unit normal facing the camera side (toward -z).
    pub fn normal(&self, x: f64, y: f64) -> Vec3 {
        let (_, gx, gy) = self.height(x, y);
        Vec3::new(gx, gy, -1.0).normalize()
    }

    fn depth_bounds(&self) -> (f64, f64) {
        let mut lo = self.base_depth - self.bumps.iter().map(|b| b.amplitude.max(0.0)).sum::<f64>();
        let hi = self.base_depth + self.bumps.iter().map(|b| (-b.amplitude).max(0.0)).sum::<f64>();
        for s in &self.spheres {
            lo = lo.min(s.z - s.radius);
        }
        for s in &self.slabs {
            lo = lo.min(s.depth);
        }
        (lo, hi)
    }

    /// Maximum surface slope over the footprint when the heightfield is
    /// smooth, `None` when spheres or slabs make it discontinuous.
    fn slope_bound(&self) -> Option<f64> {
        if !self.spheres.is_empty() || !self.slabs.is_empty() {
            return None;
        }
        let n = 300;
        let h = 0.5 * self.extent * 1.2;
        let mut best: f64 = 0.0;
        for i in 0..=n {
            for j in 0..=n {
                let x = self.center[0] - h + 2.0 * h * i as f64 / n as f64;
                let y = self.center[1] - h + 2.0 * h * j as f64 / n as f64;
                let (_, gx, gy) = self.height(x, y);
                best = best.max((gx * gx + gy * gy).sqrt());
            }
        }
        Some(best * 1.1 + 1e-3)
    }

    /// Procedural albedo in [albedo_min, albedo_max].
    pub fn albedo(&self, x: f64, y: f64, seed: u64) -> f64 {
        let t = &self.texture;
        let mut v = 0.0;
        let mut wsum = 0.0;
        for (k, (&lambda, &w)) in t.wavelengths.iter().zip(&t.weights).enumerate() {
            v += w * value_noise(x / lambda, y / lambda, seed.wrapping_add(k as u64 * 0x9E37));
            wsum += w;
        }
        if wsum > 0.0 {
            v /= wsum;
        }
        // Contrast stretch around the mean of a sum of uniform octaves.
        v = (0.5 + 1.8 * (v - 0.5)).clamp(0.0, 1.0);
        if t.vein_strength > 0.0 {
            let n = value_noise(x / t.vein_wavelength, y / t.vein_wavelength, seed ^ 0xA5A5_5A5A);
            let ridge = 1.0 - (2.0 * n - 1.0).abs();
            v -= t.vein_strength * smoothstep(0.82, 0.96, ridge);
        }
        let m = &self.material;
        m.albedo_min + (m.albedo_max - m.albedo_min) * v.clamp(0.0, 1.0)
    }
}

fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut z = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ seed.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (x - fx, y - fy);
    let q = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (sx, sy) = (q(tx), q(ty));
    let a = hash2(ix, iy, seed);
    let b = hash2(ix + 1, iy, seed);
    let c = hash2(ix, iy + 1, seed);
    let d = hash2(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

/// Result of a ray/heightfield intersection.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    /// Ray parameter; equals camera-frame depth for rays with unit camera z.
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
}

/// Ray caster bound to a scene, caching its slope bound.
#[derive(Debug, Clone)]
pub struct Raycaster<'a> {
    scene: &'a SceneSpec,
    slope: Option<f64>,
    z_lo: f64,
    z_hi: f64,
}

impl<'a> Raycaster<'a> {
    pub fn new(scene: &'a SceneSpec) -> Self {
        let (z_lo, z_hi) = scene.depth_bounds();
        Self { scene, slope: scene.slope_bound(), z_lo, z_hi }
    }

    /// First intersection of `o + t d` (t > 0) with the surface inside the extent.
    /// `guess` seeds the root search for coherent neighbouring rays.
    pub fn cast(&self, o: &Vec3, d: &Vec3, guess: Option<f64>) -> Option<Hit> {
        if d.z <= 1e-12 {
            return None;
        }
        let t_lo = ((self.z_lo - o.z) / d.z).max(0.0);
        let t_hi = (self.z_hi - o.z) / d.z + 1e-9;
        if t_hi <= t_lo {
            return None;
        }
        let h = |t: f64| {
            let (z, gx, gy) = self.scene.height(o.x + t * d.x, o.y + t * d.y);
            (o.z + t * d.z - z, d.z - gx * d.x - gy * d.y)
        };
        let dxy = (d.x * d.x + d.y * d.y).sqrt();
        let (mut a, mut b) = match self.slope {
            Some(l) if d.z > l * dxy => (t_lo, t_hi),
            _ => {
                // March for the first sign change in 0.25 mm depth steps.
                let step = 2.5e-4 / d.z;
                let mut t0 = t_lo;
                let mut found = None;
                while t0 < t_hi {
                    let t1 = (t0 + step).min(t_hi);
                    if h(t1).0 >= 0.0 {
                        found = Some((t0, t1));
                        break;
                    }
                    t0 = t1;
                }
                found?
            }
        };
        let mut t = guess.filter(|g| *g > a && *g < b).unwrap_or(0.5 * (a + b));
        for _ in 0..100 {
            let (v, dv) = h(t);
            if v.abs() < 1e-14 {
                break;
            }
            if v < 0.0 {
                a = t;
            } else {
                b = t;
            }
            if b - a < 1e-13 {
                break;
            }
            let newton = t - v / dv;
            t = if dv > 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
        }
        let p = o + d * t;
        if !self.scene.in_extent(p.x, p.y) {
            return None;
        }
        Some(Hit { t, point: p, normal: self.scene.normal(p.x, p.y) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Radius of the hover circle, which starts at the world origin.
    pub radius: f64,
    /// Angle swept over the whole sequence, radians.
    pub angular_span: f64,
    /// Peak forward (zoom) excursion, meters.
    pub dolly: f64,
    /// How strongly the view turns toward the orbit centre (0 = always straight down).
    pub tilt_gain: f64,
    /// Peak roll about the optical axis, radians.
    pub roll_amplitude: f64,
    /// Depth of the plane the camera looks at.
    pub look_depth: f64,
    pub frame_count: usize,
    pub fps: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            radius: 0.02,
            angular_span: 2.0 * std::f64::consts::PI,
            dolly: 0.01,
            tilt_gain: 1.0,
            roll_amplitude: 5f64.to_radians(),
            look_depth: 0.09,
            frame_count: 900,
            fps: 30.0,
        }
    }
}

impl TrajectorySpec {
    /// The 300-frame hover used by the acceptance suite.
    pub fn acceptance() -> Self {
        Self { frame_count: 300, ..Self::default() }
    }

    /// A camera that never moves.
    pub fn stationary(frame_count: usize) -> Self {
        Self { radius: 0.0, dolly: 0.0, tilt_gain: 0.0, roll_amplitude: 0.0, frame_count, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frame_count < 2 {
            return Err(SynthError::InvalidTrajectory("frame count must be at least 2".into()));
        }
        if !(self.fps > 0.0) || !(self.look_depth > 0.0) {
            return Err(SynthError::InvalidTrajectory("fps and look depth must be positive".into()));
        }
        Ok(())
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        i as f64 / self.fps
    }

    /// World-from-left-camera pose of frame `i`; frame 0 is the identity.
    pub fn pose(&self, i: usize) -> PoseSE3 {
        let phi = self.angular_span * i as f64 / self.frame_count as f64;
        let r = self.radius;
        let p = Vec3::new(r * phi.sin(), r * (1.0 - phi.cos()), self.dolly * phi.sin().powi(2));
        let center = Vec3::new(0.0, r, self.look_depth);
        let below = Vec3::new(p.x, p.y, self.look_depth);
        let s = self.tilt_gain * 0.5 * (1.0 - phi.cos());
        let target = below + (center - below) * s;
        let z = (target - p).normalize();
        let x = Vec3::new(0.0, 1.0, 0.0).cross(&z).normalize();
        let y = z.cross(&x);
        let look = Matrix3::from_columns(&[x, y, z]);
        let roll = UnitQuaternion::from_scaled_axis(Vec3::new(0.0, 0.0, self.roll_amplitude * phi.sin()));
        let base = PoseSE3::from_rotation_matrix(&look, p);
        PoseSE3::new(p, base.q * roll)
    }

    /// Total camera path length (sum of inter-frame translations).
    pub fn path_length(&self) -> f64 {
        (1..self.frame_count).map(|i| self.pose(i).translation_distance(&self.pose(i - 1))).sum()
    }
}

/// One rendered camera view with auxiliary ground-truth layers.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: GrayImage,
    /// Camera-frame depth per pixel, NaN where the ray misses the scene.
    pub depth: FloatMap,
    /// Specular contribution in gray levels before clamping.
    pub specular: FloatMap,
}

/// Renders the view from `camera` (world-from-camera) with the spot light at
/// `light` (world-from-light, looking down its +z).
pub fn render_view(
    scene: &SceneSpec,
    k: &CameraIntrinsics,
    camera: &PoseSE3,
    light: &PoseSE3,
    noise_seed: u64,
    texture_seed: u64,
) -> RenderedView {
    let caster = Raycaster::new(scene);
    let (w, h) = (k.width as usize, k.height as usize);
    let rot = camera.rotation_matrix();
    let origin = camera.r;
    let light_pos = light.r;
    let light_axis = light.rotate(&Vec3::z());
    let m = scene.material;
    let rows: Vec<(Vec<u8>, Vec<f32>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ (v as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut px = vec![0u8; w];
            let mut depth = vec![f32::NAN; w];
            let mut spec_row = vec![0f32; w];
            let mut guess = None;
            for u in 0..w {
                let dc = Vec3::new((u as f64 - k.cx) / k.f, (v as f64 - k.cy) / k.f, 1.0);
                let d = rot * dc;
                let noise: f64 = StandardNormal.sample(&mut rng);
                let Some(hit) = caster.cast(&origin, &d, guess) else {
                    guess = None;
                    px[u] = (scene.noise_sigma * noise).round().clamp(0.0, 255.0) as u8;
                    continue;
                };
                guess = Some(hit.t);
                depth[u] = hit.t as f32;
                let to_light = light_pos - hit.point;
                let dist = to_light.norm();
                let l = to_light / dist;
                let n = hit.normal;
                let ndotl = n.dot(&l).max(0.0);
                let cone = (-l.dot(&light_axis)).max(0.0).powf(scene.light.spot_exponent);
                let falloff = (scene.light.reference_distance / dist).powi(2);
                let irradiance = cone * falloff;
                let albedo = scene.albedo(hit.point.x, hit.point.y, texture_seed);
                let diffuse = albedo * (m.ambient + m.diffuse * ndotl * irradiance);
                let view = (origin - hit.point).normalize();
                let refl = n * (2.0 * ndotl) - l;
                let spec = if ndotl > 0.0 {
                    m.specular * refl.dot(&view).max(0.0).powf(m.shininess) * irradiance
                } else {
                    0.0
                };
                spec_row[u] = (255.0 * spec) as f32;
                let value = 255.0 * (diffuse + spec) + scene.noise_sigma * noise;
                px[u] = value.round().clamp(0.0, 255.0) as u8;
            }
            (px, depth, spec_row)
        })
        .collect();
    let mut image = GrayImage::new(k.width, k.height);
    let mut depth = FloatMap::new(w, h, f32::NAN);
    let mut specular = FloatMap::new(w, h, 0.0);
    for (v, (px, d, s)) in rows.into_iter().enumerate() {
        image.as_mut()[v * w..(v + 1) * w].copy_from_slice(&px);
        depth.data[v * w..(v + 1) * w].copy_from_slice(&d);
        specular.data[v * w..(v + 1) * w].copy_from_slice(&s);
    }
    RenderedView { image, depth, specular }
}

/// Ground truth for a rendered sequence.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub poses: Vec<StampedPose>,
    /// Left-camera depth maps keyed by frame index.
    pub depths: BTreeMap<usize, FloatMap>,
    pub scene: SceneSpec,
}

impl GroundTruth {
    /// Exact world-frame surface depth at (x, y).
    pub fn sample_truth_surface(&self, x: f64, y: f64) -> Result<f64, SynthError> {
        self.scene.sample_surface(x, y)
    }
}

/// Free-function form of [`GroundTruth::sample_truth_surface`].
pub fn sample_truth_surface(truth: &GroundTruth, x: f64, y: f64) -> Result<f64, SynthError> {
    truth.sample_truth_surface(x, y)
}

/// A fully specified synthetic sequence; frames render lazily and independently.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub rig: StereoRig,
    pub seed: u64,
}

/// Default rig: 840×640 images, 5 mm baseline.
pub fn default_rig() -> StereoRig {
    let k = CameraIntrinsics { f: 700.0, cx: 419.5, cy: 319.5, width: 840, height: 640 };
    StereoRig { intrinsics: k, baseline: 0.005, d_min: 16.0, d_max: 80.0 }
}

/// 640×480 profile of [`default_rig`] for quick runs.
pub fn fast_rig() -> StereoRig {
    let k = CameraIntrinsics { f: 700.0 * 640.0 / 840.0, cx: 319.5, cy: 239.5, width: 640, height: 480 };
    StereoRig { intrinsics: k, baseline: 0.005, d_min: 12.0, d_max: 64.0 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub seed: u64,
    pub frame_count: usize,
    pub depth_every: usize,
}

impl SyntheticSequence {
    pub fn new(scene: SceneSpec, trajectory: TrajectorySpec, rig: StereoRig, seed: u64) -> Result<Self, SynthError> {
        scene.validate()?;
        trajectory.validate()?;
        rig.validate().map_err(|e| SynthError::InvalidScene(e.to_string()))?;
        let seq = Self { scene, trajectory, rig, seed };
        seq.check_coverage()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.trajectory.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every frame's view corners and centre must land on the scene.
    fn check_coverage(&self) -> Result<(), SynthError> {
        let caster = Raycaster::new(&self.scene);
        let k = &self.rig.intrinsics;
        let (w, h) = (k.width as f64, k.height as f64);
        let probes = [(0.05, 0.05), (0.95, 0.05), (0.05, 0.95), (0.95, 0.95), (0.5, 0.5)];
        for i in 0..self.len() {
            let pose = self.trajectory.pose(i);
            for (fx, fy) in probes {
                let dc = Vec3::new((fx * w - k.cx) / k.f, (fy * h - k.cy) / k.f, 1.0);
                if caster.cast(&pose.r, &pose.rotate(&dc), None).is_none() {
                    return Err(SynthError::LeavesScene { frame: i });
                }
            }
        }
        Ok(())
    }

    pub fn pose(&self, i: usize) -> PoseSE3 {
        self.trajectory.pose(i)
    }

    fn right_pose(&self, i: usize) -> PoseSE3 {
        self.pose(i).compose(&PoseSE3::from_translation(Vec3::new(self.rig.baseline, 0.0, 0.0)))
    }

    fn noise_seed(&self, i: usize, cam: u64) -> u64 {
        self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (i as u64).wrapping_mul(0x9E37_79B9) ^ (cam << 62)
    }

    pub fn render_left(&self, i: usize) -> RenderedView {
        let pose = self.pose(i);
        render_view(&self.scene, &self.rig.intrinsics, &pose, &pose, self.noise_seed(i, 0), self.seed)
    }

    pub fn render_right(&self, i: usize) -> RenderedView {
        render_view(&self.scene, &self.rig.intrinsics, &self.right_pose(i), &self.pose(i), self.noise_seed(i, 1), self.seed)
    }

    pub fn frame(&self, i: usize) -> StereoFrame {
        self.frame_with_depth(i).0
    }

    pub fn frame_with_depth(&self, i: usize) -> (StereoFrame, FloatMap) {
        let l = self.render_left(i);
        let r = self.render_right(i);
        let frame = StereoFrame {
            index: i,
            timestamp: self.trajectory.timestamp(i),
            left: Arc::new(l.image),
            right: Arc::new(r.image),
        };
        (frame, l.depth)
    }

    pub fn stamped_poses(&self) -> Vec<StampedPose> {
        (0..self.len()).map(|i| StampedPose { timestamp: self.trajectory.timestamp(i), pose: self.pose(i) }).collect()
    }

    /// Renders every frame (in memory) with a depth map every `depth_every` frames.
    pub fn render_all(&self, depth_every: usize) -> (Vec<StereoFrame>, GroundTruth) {
        let mut frames = Vec::with_capacity(self.len());
        let mut depths = BTreeMap::new();
        for i in 0..self.len() {
            let (f, d) = self.frame_with_depth(i);
            if depth_every > 0 && i % depth_every == 0 {
                depths.insert(i, d);
            }
            frames.push(f);
        }
        let truth = GroundTruth { poses: self.stamped_poses(), depths, scene: self.scene.clone() };
        (frames, truth)
    }

    /// Streams the sequence to `dir` in the on-disk layout read by the pipeline.
    pub fn write_to_dir(&self, dir: &Path, depth_every: usize) -> Result<(), SynthError> {
        for sub in ["left", "right", "depth"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        for i in 0..self.len() {
            let (f, d) = self.frame_with_depth(i);
            f.left.save(dir.join("left").join(format!("{i:06}.png")))?;
            f.right.save(dir.join("right").join(format!("{i:06}.png")))?;
            if depth_every > 0 && i % depth_every == 0 {
                d.write_pfm(dir.join("depth").join(format!("{i:06}.pfm")))?;
            }
        }
        tum::save_trajectory(dir.join("poses_gt.txt"), &self.stamped_poses())?;
        fs::write(dir.join("calib.txt"), self.rig.to_calibration_string())?;
        let manifest = SequenceManifest {
            scene: self.scene.clone(),
            trajectory: self.trajectory.clone(),
            seed: self.seed,
            frame_count: self.len(),
            depth_every,
        };
        fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Renders a whole sequence in memory.
pub fn render_sequence(
    scene: &SceneSpec,
    traj: &TrajectorySpec,
    rig: &StereoRig,
    seed: u64,
) -> Result<(Vec<StereoFrame>, GroundTruth), SynthError> {
    let seq = SyntheticSequence::new(scene.clone(), traj.clone(), *rig, seed)?;
    Ok(seq.render_all(1))
}

pub fn load_manifest(dir: &Path) -> Result<SequenceManifest, SynthError> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rig() -> StereoRig {
        let k = CameraIntrinsics { f: 200.0, cx: 79.5, cy: 59.5, width: 160, height: 120 };
        StereoRig { intrinsics: k, baseline: 0.005, d_min: 2.0, d_max: 40.0 }
    }

    #[test]
    fn flat_scene_is_constant() {
        let s = SceneSpec::flat(0.1);
        for &(x, y) in &[(0.0, 0.0), (0.05, -0.03), (-0.069, 0.069)] {
            assert_eq!(s.sample_surface(x, y).unwrap(), 0.1);
        }
        assert!(matches!(s.sample_surface(0.2, 0.0), Err(SynthError::OutOfExtent { .. })));
    }

    #[test]
    fn gaussian_peak_equals_amplitude() {
        let mut s = SceneSpec::flat(0.1);
        s.bumps.push(GaussianBump { x: 0.01, y: -0.02, amplitude: 0.012, sigma: 0.02 });
        let z = s.sample_surface(0.01, -0.02).unwrap();
        assert!((0.1 - z - 0.012).abs() < 1e-15);
    }

    #[test]
    fn scene_validation() {
        let mut s = SceneSpec::default();
        s.extent = 0.0;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::default();
        s.bumps.push(GaussianBump { x: 0.0, y: 0.0, amplitude: 0.2, sigma: 0.01 });
        assert!(s.validate().is_err());
        assert!(SceneSpec::default().validate().is_ok());
    }

    #[test]
    fn default_trajectory_starts_at_identity_and_has_900_frames() {
        let t = TrajectorySpec::default();
        assert_eq!(t.frame_count, 900);
        assert_eq!(t.fps, 30.0);
        let p0 = t.pose(0);
        assert!(p0.r.norm() < 1e-15 && p0.q.angle() < 1e-12);
        assert!(t.pose(450).q.angle() > 0.05);
    }

    #[test]
    fn trajectory_leaving_scene_is_rejected() {
        let traj = TrajectorySpec { radius: 0.5, ..TrajectorySpec::acceptance() };
        let err = SyntheticSequence::new(SceneSpec::default(), traj, default_rig(), 1).unwrap_err();
        assert!(matches!(err, SynthError::LeavesScene { .. }));
    }

    #[test]
    fn default_sequence_is_valid() {
        SyntheticSequence::new(SceneSpec::default(), TrajectorySpec::default(), default_rig(), 1).unwrap();
    }

    #[test]
    fn rendering_is_deterministic() {
        let traj = TrajectorySpec { frame_count: 10, ..TrajectorySpec::default() };
        let seq = SyntheticSequence::new(SceneSpec::default(), traj, small_rig(), 42).unwrap();
        let a = seq.frame(3);
        let b = seq.frame(3);
        assert_eq!(a.left.as_raw(), b.left.as_raw());
        assert_eq!(a.right.as_raw(), b.right.as_raw());
        let other = SyntheticSequence { seed: 43, ..seq.clone() }.frame(3);
        assert_ne!(a.left.as_raw(), other.left.as_raw());
    }

    #[test]
    fn rendered_depth_agrees_with_analytic_surface() {
        let traj = TrajectorySpec { frame_count: 20, ..TrajectorySpec::default() };
        let seq = SyntheticSequence::new(SceneSpec::default(), traj, small_rig(), 5).unwrap();
        let k = seq.rig.intrinsics;
        for i in [0, 7, 13] {
            let pose = seq.pose(i);
            let d = seq.render_left(i).depth;
            let mut checked = 0;
            for v in (0..k.height as usize).step_by(7) {
                for u in (0..k.width as usize).step_by(7) {
                    let z = d.get(u, v) as f64;
                    if z.is_nan() {
                        continue;
                    }
                    // f32 storage limits the round trip to ~1e-8 m.
                    let pc = k.backproject(&crate::geometry::Vec2::new(u as f64, v as f64), z).unwrap();
                    let pw = pose.transform_point(&pc);
                    let truth = seq.scene.sample_surface(pw.x, pw.y).unwrap();
                    assert!((truth - pw.z).abs() < 1e-6, "{} vs {}", truth, pw.z);
                    checked += 1;
                }
            }
            assert!(checked > 300);
        }
    }

    #[test]
    fn raycast_on_discontinuous_scenes() {
        let scene = SceneSpec::sphere(0.1, 0.09, 0.02);
        let caster = Raycaster::new(&scene);
        let hit = caster.cast(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.0), None).unwrap();
        assert!((hit.t - 0.07).abs() < 1e-9);
        assert!((hit.normal - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        let slab = SceneSpec::two_slab(0.1, 0.08, 0.0);
        let c = Raycaster::new(&slab);
        assert!((c.cast(&Vec3::zeros(), &Vec3::new(-0.1, 0.0, 1.0), None).unwrap().t - 0.08).abs() < 1e-9);
        assert!((c.cast(&Vec3::zeros(), &Vec3::new(0.1, 0.0, 1.0), None).unwrap().t - 0.1).abs() < 1e-9);
    }

    #[test]
    fn fronto_parallel_disparity_matches_triangulation() {
        // Locate the centre patch of the left image along the right row by
        // brute-force SSD and compare with f*B/Z.
        let z = 0.09;
        // A fronto-parallel mirror-like plane saturates the image centre, so
        // this check uses a matte material.
        let mut scene = SceneSpec::flat(z);
        scene.material.specular = 0.0;
        let seq = SyntheticSequence::new(scene, TrajectorySpec::stationary(2), default_rig(), 9).unwrap();
        let f = seq.frame(0);
        let (cu, cv) = (419i64, 319i64);
        let ssd = |d: i64| -> f64 {
            let mut s = 0.0;
            for dv in -6..=6 {
                for du in -6..=6 {
                    let a = f.left.get_pixel((cu + du) as u32, (cv + dv) as u32)[0] as f64;
                    let b = f.right.get_pixel((cu + du - d) as u32, (cv + dv) as u32)[0] as f64;
                    s += (a - b) * (a - b);
                }
            }
            s
        };
        let best = (10..70).min_by(|a, b| ssd(*a).partial_cmp(&ssd(*b)).unwrap()).unwrap();
        let (c0, c1, c2) = (ssd(best - 1), ssd(best), ssd(best + 1));
        let sub = best as f64 + 0.5 * (c0 - c2) / (c0 - 2.0 * c1 + c2);
        let expected = seq.rig.disparity_for_depth(z);
        assert!((sub - expected).abs() < 0.5, "{sub} vs {expected}");
    }

    #[test]
    fn specular_highlight_is_not_fixed_to_the_surface() {
        // The highlight is view dependent: its world position moves with the camera.
        let rig = small_rig();
        let traj = TrajectorySpec { frame_count: 40, ..TrajectorySpec::default() };
        let seq = SyntheticSequence::new(SceneSpec::flat(0.09), traj, rig, 3).unwrap();
        let peak = |i: usize| {
            let v = seq.render_left(i);
            let (mut best, mut at) = (-1.0f32, 0usize);
            for (j, s) in v.specular.data.iter().enumerate() {
                if *s > best {
                    best = *s;
                    at = j;
                }
            }
            (best, at % v.specular.width, at / v.specular.width, v.depth)
        };
        let (s0, u0, v0, d0) = peak(0);
        let (s1, u1, v1, d1) = peak(10);
        assert!(s0 > 50.0 && s1 > 50.0);
        let k = rig.intrinsics;
        let w0 = seq.pose(0).transform_point(&k.backproject(&crate::geometry::Vec2::new(u0 as f64, v0 as f64), d0.get(u0, v0) as f64).unwrap());
        let w1 = seq.pose(10).transform_point(&k.backproject(&crate::geometry::Vec2::new(u1 as f64, v1 as f64), d1.get(u1, v1) as f64).unwrap());
        assert!((w1 - w0).norm() > 0.002, "highlight stayed at {:?}", w0);
    }
}
