//! Oriented FAST corners with steered binary descriptors, stereo matching of
//! keypoints across a rectified pair, and rejection of specular keypoints.

mod fast;
mod stereo;

use std::sync::OnceLock;

use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stereo::{filter_specular, match_stereo, refine_stereo_subpixel, StereoMatch};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum FeatureError {
    #[error("image {0}x{1} is smaller than the 64x64 minimum")]
    ImageTooSmall(u32, u32),
}

/// Detector and matcher settings (`features.*` in the pipeline config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbConfig {
    pub max_features: usize,
    pub n_levels: usize,
    pub scale_factor: f64,
    /// Initial FAST threshold; cells with no corners retry at `min_fast_threshold`.
    pub fast_threshold: u8,
    pub min_fast_threshold: u8,
    /// Cells per side of the bucketing grid on each pyramid level.
    pub grid: usize,
    pub specular_threshold: f64,
    pub epipolar_tol: f64,
    pub ratio: f64,
    /// Largest Hamming distance accepted by the stereo matcher.
    pub max_hamming: u32,
}

impl Default for OrbConfig {
    fn default() -> Self {
        Self {
            max_features: 1000,
            n_levels: 8,
            scale_factor: 1.2,
            fast_threshold: 20,
            min_fast_threshold: 7,
            grid: 8,
            specular_threshold: 240.0,
            epipolar_tol: 2.0,
            ratio: 0.8,
            max_hamming: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Level-0 pixel coordinates.
    pub x: f64,
    pub y: f64,
    pub octave: u8,
    /// Orientation in radians.
    pub angle: f64,
    pub response: f64,
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct BinaryDescriptor(pub [u64; 4]);

impl BinaryDescriptor {
    #[inline]
    pub fn hamming(&self, other: &BinaryDescriptor) -> u32 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub kp: Keypoint,
    pub desc: BinaryDescriptor,
}

const PATCH_RADIUS: i32 = 15;
/// Pixels kept clear of each level's border so steered samples stay inside.
const BORDER: usize = 23;

/// Sampling pattern: 256 point pairs drawn from an isotropic Gaussian over
/// the 31×31 patch, fixed for the lifetime of the program.
fn pattern() -> &'static [[f64; 4]; 256] {
    static PATTERN: OnceLock<[[f64; 4]; 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0_5EED_0B);
        let normal = Normal::new(0.0, 31.0 / 5.0).unwrap();
        let mut out = [[0.0; 4]; 256];
        for pair in out.iter_mut() {
            loop {
                let mut p = [0.0; 4];
                for v in p.iter_mut() {
                    let s: f64 = normal.sample(&mut rng);
                    *v = s.clamp(-(PATCH_RADIUS as f64), PATCH_RADIUS as f64).round();
                }
                if (p[0], p[1]) != (p[2], p[3]) {
                    *pair = p;
                    break;
                }
                let _ = rng.gen::<u8>();
            }
        }
        out
    })
}

/// Image pyramid with Gaussian-smoothed copies for descriptor sampling.
pub struct Pyramid {
    pub levels: Vec<GrayImage>,
    smoothed: Vec<Vec<f32>>,
    pub scales: Vec<f64>,
}

impl Pyramid {
    pub fn build(img: &GrayImage, n_levels: usize, scale_factor: f64) -> Self {
        let mut levels = Vec::with_capacity(n_levels);
        let mut scales = Vec::with_capacity(n_levels);
        levels.push(img.clone());
        scales.push(1.0);
        for l in 1..n_levels {
            let s = scale_factor.powi(l as i32);
            let w = (img.width() as f64 / s).round() as u32;
            let h = (img.height() as f64 / s).round() as u32;
            if w < 2 * BORDER as u32 + 8 || h < 2 * BORDER as u32 + 8 {
                break;
            }
            levels.push(imageops::resize(img, w, h, FilterType::Triangle));
            scales.push(s);
        }
        let smoothed = levels.iter().map(gaussian_blur).collect();
        Self { levels, smoothed, scales }
    }
}

/// 7-tap separable Gaussian (sigma 2) with edge clamping.
fn gaussian_blur(img: &GrayImage) -> Vec<f32> {
    const K: [f32; 7] = [0.0702, 0.1311, 0.1907, 0.2161, 0.1907, 0.1311, 0.0702];
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.as_raw();
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in K.iter().enumerate() {
                let xx = (x as i64 + k as i64 - 3).clamp(0, w as i64 - 1) as usize;
                acc += kv * src[y * w + xx] as f32;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in K.iter().enumerate() {
                let yy = (y as i64 + k as i64 - 3).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Intensity-centroid orientation over a disc of radius 15.
fn orientation(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (cx, cy) = (x.round() as i32, y.round() as i32);
    let (mut m10, mut m01) = (0.0f64, 0.0f64);
    let r2 = PATCH_RADIUS * PATCH_RADIUS;
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            if dx * dx + dy * dy > r2 {
                continue;
            }
            let v = img.get_pixel((cx + dx) as u32, (cy + dy) as u32)[0] as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

#[inline]
fn bilinear(buf: &[f32], w: usize, x: f64, y: f64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let i = y0 * w + x0;
    let a = buf[i] + (buf[i + 1] - buf[i]) * fx;
    let b = buf[i + w] + (buf[i + w + 1] - buf[i + w]) * fx;
    a + (b - a) * fy
}

fn describe(smoothed: &[f32], w: usize, x: f64, y: f64, angle: f64) -> BinaryDescriptor {
    let (s, c) = angle.sin_cos();
    let mut d = [0u64; 4];
    for (i, p) in pattern().iter().enumerate() {
        let ax = x + c * p[0] - s * p[1];
        let ay = y + s * p[0] + c * p[1];
        let bx = x + c * p[2] - s * p[3];
        let by = y + s * p[2] + c * p[3];
        if bilinear(smoothed, w, ax, ay) < bilinear(smoothed, w, bx, by) {
            d[i / 64] |= 1 << (i % 64);
        }
    }
    BinaryDescriptor(d)
}

/// Harris corner measure over a 7×7 window of Sobel gradients.
fn harris(img: &GrayImage, x: usize, y: usize) -> f64 {
    let p = |xx: usize, yy: usize| img.get_pixel(xx as u32, yy as u32)[0] as f64;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for yy in y - 3..=y + 3 {
        for xx in x - 3..=x + 3 {
            let ix = (p(xx + 1, yy - 1) + 2.0 * p(xx + 1, yy) + p(xx + 1, yy + 1))
                - (p(xx - 1, yy - 1) + 2.0 * p(xx - 1, yy) + p(xx - 1, yy + 1));
            let iy = (p(xx - 1, yy + 1) + 2.0 * p(xx, yy + 1) + p(xx + 1, yy + 1))
                - (p(xx - 1, yy - 1) + 2.0 * p(xx, yy - 1) + p(xx + 1, yy - 1));
            a += ix * ix;
            b += iy * iy;
            c += ix * iy;
        }
    }
    let scale = 1.0 / (4.0 * 49.0 * 255.0);
    let (a, b, c) = (a * scale * scale, b * scale * scale, c * scale * scale);
    (a * b - c * c) - 0.04 * (a + b) * (a + b)
}

/// Subpixel corner position: the point minimising the squared projection of
/// `q - p` onto the image gradient at every pixel `p` of a 7×7 window.
fn refine_corner(img: &GrayImage, x: usize, y: usize) -> (f64, f64) {
    let px = |xx: i64, yy: i64| img.get_pixel(xx as u32, yy as u32)[0] as f64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (mut qx, mut qy) = (x as f64, y as f64);
    for _ in 0..3 {
        let (cx, cy) = (qx.round() as i64, qy.round() as i64);
        if cx < 4 || cy < 4 || cx >= w - 4 || cy >= h - 4 {
            break;
        }
        let (mut a, mut b, mut c, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for yy in cy - 3..=cy + 3 {
            for xx in cx - 3..=cx + 3 {
                let gx = 0.5 * (px(xx + 1, yy) - px(xx - 1, yy));
                let gy = 0.5 * (px(xx, yy + 1) - px(xx, yy - 1));
                let (fx, fy) = (xx as f64, yy as f64);
                a += gx * gx;
                b += gx * gy;
                c += gy * gy;
                bx += gx * gx * fx + gx * gy * fy;
                by += gx * gy * fx + gy * gy * fy;
            }
        }
        let det = a * c - b * b;
        let tr = a + c;
        // Edge-like or flat windows have no well-defined corner.
        if tr <= 0.0 || det < 1e-3 * tr * tr {
            break;
        }
        let nx = (c * bx - b * by) / det;
        let ny = (a * by - b * bx) / det;
        if (nx - x as f64).abs() > 1.5 || (ny - y as f64).abs() > 1.5 {
            break;
        }
        let moved = (nx - qx).hypot(ny - qy);
        (qx, qy) = (nx, ny);
        if moved < 0.01 {
            break;
        }
    }
    (qx, qy)
}

/// Candidates whose FAST score is maximal within a 7×7 neighbourhood, paired
/// with their Harris response. `margin` corners only suppress.
fn suppress_non_maxima(img: &GrayImage, corners: &[fast::Corner], margin: &[fast::Corner]) -> Vec<(usize, usize, f64)> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut grid = vec![-1i16; (w * h) as usize];
    for c in corners.iter().chain(margin) {
        grid[c.y * w as usize + c.x] = c.score;
    }
    corners
        .iter()
        .filter(|c| {
            let (x, y, r) = (c.x as i64, c.y as i64, c.score);
            for dy in -3i64..=3 {
                for dx in -3i64..=3 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let o = grid[(ny * w + nx) as usize];
                    // Ties resolve toward the earlier pixel in raster order.
                    if o > r || (o == r && (dy < 0 || (dy == 0 && dx < 0))) {
                        return false;
                    }
                }
            }
            true
        })
        .map(|c| (c.x, c.y, harris(img, c.x, c.y)))
        .collect()
}

/// Bucketed FAST detection on one level. Returns level coordinates.
fn detect_level(img: &GrayImage, budget: usize, cfg: &OrbConfig) -> Vec<(usize, usize, f64)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (x0, y0, x1, y1) = (BORDER, BORDER, w - BORDER, h - BORDER);
    let grid = cfg.grid.max(1);
    let per_cell = budget.div_ceil(grid * grid).max(1) * 2;
    let cell = |x: usize, y: usize| {
        let gx = ((x - x0) * grid / (x1 - x0)).min(grid - 1);
        let gy = ((y - y0) * grid / (y1 - y0)).min(grid - 1);
        gy * grid + gx
    };
    let mut candidates = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let cx0 = x0 + (x1 - x0) * gx / grid;
            let cx1 = x0 + (x1 - x0) * (gx + 1) / grid;
            let cy0 = y0 + (y1 - y0) * gy / grid;
            let cy1 = y0 + (y1 - y0) * (gy + 1) / grid;
            let mut corners = fast::detect_in_rect(img, cx0, cy0, cx1, cy1, cfg.fast_threshold);
            if corners.is_empty() && cfg.min_fast_threshold < cfg.fast_threshold {
                corners = fast::detect_in_rect(img, cx0, cy0, cx1, cy1, cfg.min_fast_threshold);
            }
            candidates.extend(corners);
        }
    }
    let order = |a: &(usize, usize, f64), b: &(usize, usize, f64)| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0)));
    // Corners just outside the usable area still suppress their neighbours.
    let inside = |c: &fast::Corner| c.x >= x0 && c.x < x1 && c.y >= y0 && c.y < y1;
    let margin: Vec<_> = fast::detect_in_rect(img, x0 - 3, y0 - 3, x1 + 3, y1 + 3, cfg.min_fast_threshold.min(cfg.fast_threshold))
        .into_iter()
        .filter(|c| !inside(c))
        .collect();
    let mut kept = suppress_non_maxima(img, &candidates, &margin);
    kept.sort_by(order);
    let mut used = vec![0usize; grid * grid];
    let mut all: Vec<_> = kept
        .into_iter()
        .filter(|&(x, y, _)| {
            let c = cell(x, y);
            used[c] += 1;
            used[c] <= per_cell
        })
        .collect();
    all.truncate(budget);
    all
}

/// Per-level feature budgets proportional to level area.
fn level_budgets(total: usize, levels: usize, scale: f64) -> Vec<usize> {
    let f = 1.0 / (scale * scale);
    let norm: f64 = (0..levels).map(|l| f.powi(l as i32)).sum();
    let mut out: Vec<usize> =
        (0..levels).map(|l| (total as f64 * f.powi(l as i32) / norm).round() as usize).collect();
    let assigned: usize = out.iter().sum();
    if assigned < total {
        out[0] += total - assigned;
    }
    out
}

/// Detects oriented corners and computes their descriptors. Keypoints are
/// sorted by decreasing response and capped at `cfg.max_features`.
pub fn detect_and_describe(img: &GrayImage, cfg: &OrbConfig) -> Result<Vec<Feature>, FeatureError> {
    if img.width() < 64 || img.height() < 64 {
        return Err(FeatureError::ImageTooSmall(img.width(), img.height()));
    }
    let pyr = Pyramid::build(img, cfg.n_levels.max(1), cfg.scale_factor);
    let budgets = level_budgets(cfg.max_features, pyr.levels.len(), cfg.scale_factor);
    let mut out = Vec::new();
    for (l, level) in pyr.levels.iter().enumerate() {
        let w = level.width() as usize;
        let s = pyr.scales[l];
        for (x, y, response) in detect_level(level, budgets[l], cfg) {
            let (xf, yf) = refine_corner(level, x, y);
            let angle = orientation(level, xf, yf);
            let desc = describe(&pyr.smoothed[l], w, xf, yf, angle);
            let kp = Keypoint { x: (xf + 0.5) * s - 0.5, y: (yf + 0.5) * s - 0.5, octave: l as u8, angle, response };
            out.push(Feature { kp, desc });
        }
    }
    out.sort_by(|a, b| b.kp.response.total_cmp(&a.kp.response).then(a.kp.y.total_cmp(&b.kp.y)).then(a.kp.x.total_cmp(&b.kp.x)));
    out.truncate(cfg.max_features);
    Ok(out)
}

/// Recomputes orientation and descriptor for given level-0 keypoints on a
/// (possibly different) image. Keypoints too close to the border are dropped.
pub fn describe_keypoints(img: &GrayImage, kps: &[Keypoint], cfg: &OrbConfig) -> Vec<Option<Feature>> {
    let pyr = Pyramid::build(img, cfg.n_levels.max(1), cfg.scale_factor);
    kps.iter()
        .map(|kp| {
            let l = (kp.octave as usize).min(pyr.levels.len() - 1);
            let s = pyr.scales[l];
            let level = &pyr.levels[l];
            let (x, y) = (((kp.x + 0.5) / s - 0.5).round(), ((kp.y + 0.5) / s - 0.5).round());
            let b = BORDER as f64;
            if x < b || y < b || x >= level.width() as f64 - b || y >= level.height() as f64 - b {
                return None;
            }
            let angle = orientation(level, x, y);
            let desc = describe(&pyr.smoothed[l], level.width() as usize, x, y, angle);
            Some(Feature { kp: Keypoint { angle, ..*kp }, desc })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_rig, SceneSpec, SyntheticSequence, TrajectorySpec};

    fn textured(seed: u64) -> GrayImage {
        let seq = SyntheticSequence::new(SceneSpec::default(), TrajectorySpec::stationary(2), default_rig(), seed).unwrap();
        (*seq.frame(0).left).clone()
    }

    fn rotate_about_center(img: &GrayImage, angle: f64) -> GrayImage {
        let (w, h) = (img.width(), img.height());
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (s, c) = angle.sin_cos();
        let mut out = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                // Inverse map: output pixel -> source pixel.
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cx + c * dx + s * dy;
                let sy = cy - s * dx + c * dy;
                if sx >= 0.0 && sy >= 0.0 && sx < w as f64 - 1.0 && sy < h as f64 - 1.0 {
                    let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let p = |xx, yy| img.get_pixel(xx, yy)[0] as f64;
                    let v = p(x0, y0) * (1.0 - fx) * (1.0 - fy)
                        + p(x0 + 1, y0) * fx * (1.0 - fy)
                        + p(x0, y0 + 1) * (1.0 - fx) * fy
                        + p(x0 + 1, y0 + 1) * fx * fy;
                    out.put_pixel(x, y, image::Luma([v.round() as u8]));
                }
            }
        }
        out
    }

    #[test]
    fn tiny_image_rejected() {
        let img = GrayImage::new(63, 100);
        assert_eq!(detect_and_describe(&img, &OrbConfig::default()).unwrap_err(), FeatureError::ImageTooSmall(63, 100));
    }

    #[test]
    fn uniform_image_yields_nothing() {
        let img = GrayImage::from_pixel(200, 160, image::Luma([128]));
        assert!(detect_and_describe(&img, &OrbConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn square_corners() {
        let mut img = GrayImage::from_pixel(160, 160, image::Luma([40]));
        let (a, b) = (60u32, 100u32);
        for y in a..b {
            for x in a..b {
                img.put_pixel(x, y, image::Luma([220]));
            }
        }
        let feats = detect_and_describe(&img, &OrbConfig::default()).unwrap();
        assert!(feats.len() >= 4, "{}", feats.len());
        // Corner pixels of the bright square, at its outer boundary.
        let corners = [(a as f64, a as f64), ((b - 1) as f64, a as f64), (a as f64, (b - 1) as f64), ((b - 1) as f64, (b - 1) as f64)];
        for f in &feats {
            let d = corners.iter().map(|(x, y)| ((f.kp.x - x).powi(2) + (f.kp.y - y).powi(2)).sqrt()).fold(f64::MAX, f64::min);
            assert!(d <= 1.5, "keypoint {:?} is {d} px from the nearest corner", f.kp);
        }
    }

    #[test]
    fn sorted_and_capped() {
        let img = textured(1);
        let cfg = OrbConfig { max_features: 300, ..OrbConfig::default() };
        let feats = detect_and_describe(&img, &cfg).unwrap();
        assert!(feats.len() <= 300 && feats.len() > 200);
        assert!(feats.windows(2).all(|w| w[0].kp.response >= w[1].kp.response));
        for f in &feats {
            assert!(f.kp.x >= 0.0 && f.kp.y >= 0.0 && f.kp.x < 840.0 && f.kp.y < 640.0);
            assert!((f.kp.octave as usize) < cfg.n_levels);
        }
    }

    #[test]
    fn descriptors_survive_rotation() {
        let img = textured(2);
        let angle = 30f64.to_radians();
        let rot = rotate_about_center(&img, angle);
        let cfg = OrbConfig::default();
        let a = detect_and_describe(&img, &cfg).unwrap();
        let b = detect_and_describe(&rot, &cfg).unwrap();
        let (cx, cy) = (419.5, 319.5);
        let (s, c) = angle.sin_cos();
        let (mut matched, mut good) = (0, 0);
        for fa in &a {
            let (dx, dy) = (fa.kp.x - cx, fa.kp.y - cy);
            let (px, py) = (cx + c * dx - s * dy, cy + s * dx + c * dy);
            let near = b
                .iter()
                .filter(|fb| fb.kp.octave == fa.kp.octave)
                .map(|fb| ((fb.kp.x - px).powi(2) + (fb.kp.y - py).powi(2), fb))
                .filter(|(d2, _)| *d2 <= 2.0f64.powi(2) * 1.2f64.powi(2 * fa.kp.octave as i32))
                .min_by(|x, y| x.0.total_cmp(&y.0));
            if let Some((_, fb)) = near {
                matched += 1;
                if fa.desc.hamming(&fb.desc) <= 64 {
                    good += 1;
                }
            }
        }
        assert!(matched > 100, "only {matched} keypoints re-detected");
        let frac = good as f64 / matched as f64;
        assert!(frac >= 0.7, "{good}/{matched}");
    }

    #[test]
    fn descriptors_tolerate_affine_intensity_changes() {
        let img = textured(3);
        let cfg = OrbConfig::default();
        let feats = detect_and_describe(&img, &cfg).unwrap();
        let kps: Vec<Keypoint> = feats.iter().map(|f| f.kp).collect();
        for (a, b) in [(0.5, 10.0), (2.0, -30.0), (1.3, 30.0), (0.8, -20.0)] {
            let mut t = img.clone();
            for p in t.pixels_mut() {
                p[0] = (a * p[0] as f64 + b).round().clamp(0.0, 255.0) as u8;
            }
            let redesc = describe_keypoints(&t, &kps, &cfg);
            let ok = feats
                .iter()
                .zip(&redesc)
                .filter(|(f, g)| g.map(|g| f.desc.hamming(&g.desc) <= 16).unwrap_or(false))
                .count();
            assert!(ok as f64 >= 0.9 * feats.len() as f64, "a={a} b={b}: {ok}/{}", feats.len());
        }
    }

    proptest::proptest! {
        #[test]
        fn hamming_is_a_metric(a in proptest::array::uniform4(proptest::num::u64::ANY),
                               b in proptest::array::uniform4(proptest::num::u64::ANY),
                               c in proptest::array::uniform4(proptest::num::u64::ANY)) {
            let (a, b, c) = (BinaryDescriptor(a), BinaryDescriptor(b), BinaryDescriptor(c));
            proptest::prop_assert_eq!(a.hamming(&a), 0);
            proptest::prop_assert_eq!(a.hamming(&b), b.hamming(&a));
            proptest::prop_assert!(a.hamming(&c) <= a.hamming(&b) + b.hamming(&c));
        }
    }
}
