//! Dense disparity for a rectified pair: ZNCC cost volume, winner-takes-all
//! with parabolic refinement, left-right check and variational smoothing.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::FloatMap;
use crate::geometry::StereoRig;

#[derive(Error, Debug)]
pub enum DenseError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("patch size {0} must be odd and within 5..=15")]
    BadPatch(usize),
    #[error("image write failed: {0}")]
    Image(#[from] image::ImageError),
}

/// Zero-mean normalised cross-correlation of two equal-size patches. `None`
/// when either patch has zero variance.
pub fn zncc_score(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "patches must have equal size");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// ZNCC scores `C(p, d)` for every pixel and integer disparity. Undefined
/// cells (patch outside either image, zero variance) hold NaN.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub d_min: i64,
    pub n_disp: usize,
    /// Row-major over pixels, disparity fastest.
    pub data: Vec<f64>,
}

impl CostVolume {
    #[inline]
    pub fn get(&self, x: usize, y: usize, di: usize) -> f64 {
        self.data[(y * self.width + x) * self.n_disp + di]
    }

    pub fn disparity(&self, di: usize) -> f64 {
        (self.d_min + di as i64) as f64
    }
}

/// Per-pixel window sums of intensity and squared intensity.
struct BoxSums {
    sum: Vec<i64>,
    sq: Vec<i64>,
}

fn box_sums(img: &[u8], w: usize, h: usize, r: usize) -> BoxSums {
    let mut sum = vec![0i64; w * h];
    let mut sq = vec![0i64; w * h];
    let mut hs = vec![0i64; w * h];
    let mut hq = vec![0i64; w * h];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        let (mut s, mut q) = (0i64, 0i64);
        for x in 0..w {
            let v = row[x] as i64;
            s += v;
            q += v * v;
            if x >= 2 * r + 1 {
                let o = row[x - 2 * r - 1] as i64;
                s -= o;
                q -= o * o;
            }
            if x >= 2 * r {
                hs[y * w + x - r] = s;
                hq[y * w + x - r] = q;
            }
        }
    }
    for x in r..w.saturating_sub(r) {
        let (mut s, mut q) = (0i64, 0i64);
        for y in 0..h {
            s += hs[y * w + x];
            q += hq[y * w + x];
            if y >= 2 * r + 1 {
                s -= hs[(y - 2 * r - 1) * w + x];
                q -= hq[(y - 2 * r - 1) * w + x];
            }
            if y >= 2 * r {
                sum[(y - r) * w + x] = s;
                sq[(y - r) * w + x] = q;
            }
        }
    }
    BoxSums { sum, sq }
}

struct Pair<'a> {
    l: &'a [u8],
    r: &'a [u8],
    w: usize,
    h: usize,
    rad: usize,
    d_min: i64,
    n_disp: usize,
    ls: BoxSums,
    rs: BoxSums,
}

impl<'a> Pair<'a> {
    fn new(left: &'a GrayImage, right: &'a GrayImage, rig: &StereoRig, patch: usize) -> Result<Self, DenseError> {
        if left.dimensions() != right.dimensions() {
            let (a, b) = left.dimensions();
            let (c, d) = right.dimensions();
            return Err(DenseError::DimensionMismatch(a, b, c, d));
        }
        if patch % 2 == 0 || !(5..=15).contains(&patch) {
            return Err(DenseError::BadPatch(patch));
        }
        let (w, h) = (left.width() as usize, left.height() as usize);
        let rad = patch / 2;
        let d_min = rig.d_min.ceil().max(0.0) as i64;
        let d_max = rig.d_max.floor() as i64;
        let n_disp = (d_max - d_min + 1).max(1) as usize;
        Ok(Self {
            l: left.as_raw(),
            r: right.as_raw(),
            w,
            h,
            rad,
            d_min,
            n_disp,
            ls: box_sums(left.as_raw(), w, h, rad),
            rs: box_sums(right.as_raw(), w, h, rad),
        })
    }

    /// Cost volume rows `[y0, y1)`.
    fn band(&self, y0: usize, y1: usize) -> Vec<f64> {
        let (w, h, r, nd) = (self.w, self.h, self.rad, self.n_disp);
        let n = ((2 * r + 1) * (2 * r + 1)) as i64;
        let mut vol = vec![f64::NAN; (y1 - y0) * w * nd];
        let ry0 = y0.max(r);
        let ry1 = y1.min(h.saturating_sub(r));
        if ry0 >= ry1 || w < 2 * r + 1 {
            return vol;
        }
        // Horizontal window sums of L(x) R(x - d) for rows ry0 - r .. ry1 + r.
        let (hy0, hy1) = (ry0 - r, ry1 + r);
        let mut hs = vec![0i64; (hy1 - hy0) * w];
        let mut col = vec![0i64; w];
        for di in 0..nd {
            let d = (self.d_min + di as i64) as usize;
            let x_lo = d + r;
            if x_lo + r >= w {
                continue;
            }
            for yy in hy0..hy1 {
                let lrow = &self.l[yy * w..(yy + 1) * w];
                let rrow = &self.r[yy * w..(yy + 1) * w];
                let out = &mut hs[(yy - hy0) * w..(yy - hy0 + 1) * w];
                let mut s = 0i64;
                for x in d..w {
                    s += lrow[x] as i64 * rrow[x - d] as i64;
                    if x >= d + 2 * r + 1 {
                        s -= lrow[x - 2 * r - 1] as i64 * rrow[x - d - 2 * r - 1] as i64;
                    }
                    if x >= d + 2 * r {
                        out[x - r] = s;
                    }
                }
            }
            col[x_lo..w - r].fill(0);
            for yy in hy0..hy0 + 2 * r {
                let row = &hs[(yy - hy0) * w..(yy - hy0 + 1) * w];
                for x in x_lo..w - r {
                    col[x] += row[x];
                }
            }
            for y in ry0..ry1 {
                let add = &hs[(y + r - hy0) * w..(y + r - hy0 + 1) * w];
                for x in x_lo..w - r {
                    col[x] += add[x];
                }
                let base = (y - y0) * w;
                for x in x_lo..w - r {
                    let p = y * w + x;
                    let q = p - d;
                    let (sl, sr) = (self.ls.sum[p], self.rs.sum[q]);
                    let vl = n * self.ls.sq[p] - sl * sl;
                    let vr = n * self.rs.sq[q] - sr * sr;
                    if vl > 0 && vr > 0 {
                        let num = n * col[x] - sl * sr;
                        let s = num as f64 / ((vl as f64) * (vr as f64)).sqrt();
                        vol[(base + x) * nd + di] = s.clamp(-1.0, 1.0);
                    }
                }
                let sub = &hs[(y - r - hy0) * w..(y - r - hy0 + 1) * w];
                for x in x_lo..w - r {
                    col[x] -= sub[x];
                }
            }
        }
        vol
    }
}

const BAND: usize = 16;

/// Full ZNCC cost volume over the rig's integer disparity range.
pub fn build_cost_volume(left: &GrayImage, right: &GrayImage, rig: &StereoRig, patch: usize) -> Result<CostVolume, DenseError> {
    let pair = Pair::new(left, right, rig, patch)?;
    let bands: Vec<(usize, usize)> = (0..pair.h).step_by(BAND).map(|y| (y, (y + BAND).min(pair.h))).collect();
    let parts: Vec<Vec<f64>> = bands.par_iter().map(|&(a, b)| pair.band(a, b)).collect();
    Ok(CostVolume { width: pair.w, height: pair.h, d_min: pair.d_min, n_disp: pair.n_disp, data: parts.concat() })
}

/// Per-pixel disparity (NaN when invalid) and best ZNCC score (NaN when
/// undefined).
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub disparity: FloatMap,
    pub confidence: FloatMap,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { disparity: FloatMap::new(width, height, f32::NAN), confidence: FloatMap::new(width, height, f32::NAN) }
    }

    pub fn valid_count(&self) -> usize {
        self.disparity.data.iter().filter(|v| v.is_finite()).count()
    }
}

/// Argmax over one pixel's scores with parabolic refinement.
fn pick(scores: impl Fn(usize) -> f64, nd: usize) -> Option<(f64, f64)> {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for di in 0..nd {
        let s = scores(di);
        if s.is_finite() && s > best.1 {
            best = (di, s);
        }
    }
    if best.0 == usize::MAX {
        return None;
    }
    let (di, c1) = best;
    let mut offset = 0.0;
    if di > 0 && di + 1 < nd {
        let (c0, c2) = (scores(di - 1), scores(di + 1));
        if c0.is_finite() && c2.is_finite() {
            let denom = c0 - 2.0 * c1 + c2;
            if denom < 0.0 {
                offset = (0.5 * (c0 - c2) / denom).clamp(-0.5, 0.5);
            }
        }
    }
    Some((di as f64 + offset, c1))
}

fn fill_row(
    disp: &mut [f32],
    conf: &mut [f32],
    w: usize,
    nd: usize,
    d_min: i64,
    min_score: f64,
    score: impl Fn(usize, usize) -> f64,
) {
    for x in 0..w {
        if let Some((di, c)) = pick(|d| score(x, d), nd) {
            conf[x] = c as f32;
            if c >= min_score {
                disp[x] = (d_min as f64 + di) as f32;
            }
        }
    }
}

/// Left-view winner-takes-all. Pixels whose best score is below `min_score`
/// or undefined are invalid.
pub fn wta_disparity(vol: &CostVolume, min_score: f64) -> DisparityMap {
    let (w, h, nd) = (vol.width, vol.height, vol.n_disp);
    let mut out = DisparityMap::new(w, h);
    out.disparity.data.par_chunks_mut(w).zip(out.confidence.data.par_chunks_mut(w)).enumerate().for_each(|(y, (d, c))| {
        fill_row(d, c, w, nd, vol.d_min, min_score, |x, di| vol.get(x, y, di));
    });
    out
}

/// Right-view winner-takes-all from the same volume:
/// `C_R(x, d) = C(x + d, d)`.
pub fn wta_right(vol: &CostVolume, min_score: f64) -> DisparityMap {
    let (w, h, nd) = (vol.width, vol.height, vol.n_disp);
    let mut out = DisparityMap::new(w, h);
    out.disparity.data.par_chunks_mut(w).zip(out.confidence.data.par_chunks_mut(w)).enumerate().for_each(|(y, (d, c))| {
        fill_row(d, c, w, nd, vol.d_min, min_score, |x, di| {
            let xl = x as i64 + vol.d_min + di as i64;
            if xl < w as i64 {
                vol.get(xl as usize, y, di)
            } else {
                f64::NAN
            }
        });
    });
    out
}

/// Invalidates left pixels whose right-view disparity disagrees by more than
/// `tol` pixels.
pub fn lr_consistency(left: &DisparityMap, right: &DisparityMap, tol: f64) -> DisparityMap {
    let mut out = left.clone();
    if tol.is_infinite() {
        return out;
    }
    let (w, h) = (left.disparity.width, left.disparity.height);
    for y in 0..h {
        for x in 0..w {
            let d = left.disparity.get(x, y);
            if !d.is_finite() {
                continue;
            }
            let xr = (x as f64 - d as f64).round();
            let ok = xr >= 0.0 && {
                let dr = right.disparity.get(xr as usize, y);
                dr.is_finite() && ((d - dr) as f64).abs() <= tol
            };
            if !ok {
                out.disparity.set(x, y, f32::NAN);
            }
        }
    }
    out
}

/// Invalidates pixels where a disparity more than one step away from the
/// winner scores within `margin` of it. Returns the number removed.
pub fn reject_ambiguous(vol: &CostVolume, map: &mut DisparityMap, margin: f64) -> usize {
    let (w, nd) = (vol.width, vol.n_disp);
    map.disparity
        .data
        .par_chunks_mut(w)
        .enumerate()
        .map(|(y, row)| {
            let mut removed = 0;
            for (x, d) in row.iter_mut().enumerate() {
                if !d.is_finite() {
                    continue;
                }
                let mut best = (0, f64::NEG_INFINITY);
                for di in 0..nd {
                    let c = vol.get(x, y, di);
                    if c > best.1 {
                        best = (di, c);
                    }
                }
                let rival = (0..nd)
                    .filter(|&di| di + 1 < best.0 || di > best.0 + 1)
                    .map(|di| vol.get(x, y, di))
                    .filter(|c| c.is_finite())
                    .fold(f64::NEG_INFINITY, f64::max);
                if rival > best.1 - margin {
                    *d = f32::NAN;
                    removed += 1;
                }
            }
            removed
        })
        .sum()
}

/// Invalidates connected regions (4-neighbours whose disparities differ by
/// at most `max_diff`) smaller than `min_size` pixels. Returns the number
/// removed.
pub fn remove_speckles(map: &mut DisparityMap, min_size: usize, max_diff: f32) -> usize {
    let (w, h) = (map.disparity.width, map.disparity.height);
    let d = &mut map.disparity.data;
    let mut label = vec![u32::MAX; w * h];
    let mut stack = Vec::new();
    let mut region = Vec::new();
    let mut removed = 0;
    for start in 0..w * h {
        if label[start] != u32::MAX || !d[start].is_finite() {
            continue;
        }
        label[start] = start as u32;
        stack.push(start);
        region.clear();
        while let Some(i) = stack.pop() {
            region.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if label[j] == u32::MAX && d[j].is_finite() && (d[j] - d[i]).abs() <= max_diff {
                    label[j] = start as u32;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if region.len() < min_size {
            for &i in &region {
                d[i] = f32::NAN;
            }
            removed += region.len();
        }
    }
    removed
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Regularizer {
    /// Huber penalty on the gradient norm with knee `epsilon` (pixels).
    Huber { epsilon: f64 },
    /// `alpha/2 |∇u|²`.
    Quadratic { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothParams {
    pub regularizer: Regularizer,
    /// Weight of the confidence-weighted L1 fidelity term. The isotropic
    /// regulariser's divergence is bounded by 2 + √2, so a pixel with
    /// `lambda * confidence` above that never leaves its input value.
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for SmoothParams {
    fn default() -> Self {
        Self { regularizer: Regularizer::Huber { epsilon: 0.2 }, lambda: 4.0, iterations: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothResult {
    pub disparity: FloatMap,
    /// Energy at iteration 0 and after every 10 iterations.
    pub energies: Vec<f64>,
}

/// Energy of `u`: regulariser over forward differences plus
/// `lambda * Σ w |u - f|`.
pub fn smoothing_energy(u: &[f64], f: &[f64], wt: &[f64], w: usize, h: usize, params: &SmoothParams) -> f64 {
    let mut e = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let gx = if x + 1 < w { u[i + 1] - u[i] } else { 0.0 };
            let gy = if y + 1 < h { u[i + w] - u[i] } else { 0.0 };
            let g = gx.hypot(gy);
            e += match params.regularizer {
                Regularizer::Huber { epsilon } => {
                    if g <= epsilon {
                        g * g / (2.0 * epsilon)
                    } else {
                        g - epsilon / 2.0
                    }
                }
                Regularizer::Quadratic { alpha } => 0.5 * alpha * g * g,
            };
            e += params.lambda * wt[i] * (u[i] - f[i]).abs();
        }
    }
    e
}

/// Initial guess: invalid pixels take the mean of the nearest valid values
/// to their left and right on the same row (or the map mean).
fn inpaint_rows(f: &FloatMap) -> Vec<f64> {
    let (w, h) = (f.width, f.height);
    let valid: Vec<f64> = f.data.iter().filter(|v| v.is_finite()).map(|v| *v as f64).collect();
    let mean = if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &f.data[y * w..(y + 1) * w];
        let mut left = vec![f64::NAN; w];
        let mut last = f64::NAN;
        for x in 0..w {
            if row[x].is_finite() {
                last = row[x] as f64;
            }
            left[x] = last;
        }
        let mut next = f64::NAN;
        for x in (0..w).rev() {
            if row[x].is_finite() {
                next = row[x] as f64;
            }
            out[y * w + x] = if row[x].is_finite() {
                row[x] as f64
            } else {
                match (left[x].is_finite(), next.is_finite()) {
                    (true, true) => 0.5 * (left[x] + next),
                    (true, false) => left[x],
                    (false, true) => next,
                    _ => mean,
                }
            };
        }
    }
    out
}

/// First-order primal-dual minimisation of the smoothing energy. Invalid
/// pixels and pixels in `exclude` get zero fidelity weight and are filled by
/// the regulariser.
pub fn smooth_disparity(disp: &DisparityMap, exclude: Option<&[bool]>, params: &SmoothParams) -> SmoothResult {
    let (w, h) = (disp.disparity.width, disp.disparity.height);
    let n = w * h;
    let f = inpaint_rows(&disp.disparity);
    let wt: Vec<f64> = (0..n)
        .map(|i| {
            let d = disp.disparity.data[i];
            let c = disp.confidence.data[i];
            if !d.is_finite() || !c.is_finite() || exclude.map(|m| m[i]).unwrap_or(false) {
                0.0
            } else {
                (c as f64).max(0.0)
            }
        })
        .collect();
    let (tau, sigma) = (0.35, 0.35);
    let mut u = f.clone();
    let mut ubar = u.clone();
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    let mut energies = vec![smoothing_energy(&u, &f, &wt, w, h, params)];
    for it in 1..=params.iterations {
        // Dual ascent.
        px.par_chunks_mut(w).zip(py.par_chunks_mut(w)).enumerate().for_each(|(y, (pxr, pyr))| {
            for x in 0..w {
                let i = y * w + x;
                let gx = if x + 1 < w { ubar[i + 1] - ubar[i] } else { 0.0 };
                let gy = if y + 1 < h { ubar[i + w] - ubar[i] } else { 0.0 };
                let (mut a, mut b) = (pxr[x] + sigma * gx, pyr[x] + sigma * gy);
                match params.regularizer {
                    Regularizer::Huber { epsilon } => {
                        a /= 1.0 + sigma * epsilon;
                        b /= 1.0 + sigma * epsilon;
                        let norm = a.hypot(b).max(1.0);
                        a /= norm;
                        b /= norm;
                    }
                    Regularizer::Quadratic { alpha } => {
                        a /= 1.0 + sigma / alpha;
                        b /= 1.0 + sigma / alpha;
                    }
                }
                pxr[x] = a;
                pyr[x] = b;
            }
        });
        // Primal descent with the weighted L1 proximal step.
        let lambda = params.lambda;
        ubar.par_chunks_mut(w).zip(u.par_chunks_mut(w)).enumerate().for_each(|(y, (ubr, ur))| {
            for x in 0..w {
                let i = y * w + x;
                let dx = (if x + 1 < w { px[i] } else { 0.0 }) - (if x > 0 { px[i - 1] } else { 0.0 });
                let dy = (if y + 1 < h { py[i] } else { 0.0 }) - (if y > 0 { py[i - w] } else { 0.0 });
                let v = ur[x] + tau * (dx + dy);
                let t = tau * lambda * wt[i];
                let diff = v - f[i];
                let next = if diff > t {
                    v - t
                } else if diff < -t {
                    v + t
                } else {
                    f[i]
                };
                ubr[x] = 2.0 * next - ur[x];
                ur[x] = next;
            }
        });
        if it % 10 == 0 {
            energies.push(smoothing_energy(&u, &f, &wt, w, h, params));
        }
    }
    SmoothResult { disparity: FloatMap { width: w, height: h, data: u.iter().map(|v| *v as f32).collect() }, energies }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseParams {
    pub patch_size: usize,
    pub min_score: f64,
    pub lr_tol: f64,
    /// Intensities above this mark specular highlights.
    pub specular_threshold: u8,
    /// Score margin a non-adjacent disparity must fall below the winner by.
    pub uniqueness: f64,
    /// Connected disparity regions smaller than this are dropped.
    pub speckle_size: usize,
    pub smoothing: SmoothParams,
}

impl Default for DenseParams {
    fn default() -> Self {
        Self {
            patch_size: 7,
            min_score: 0.3,
            lr_tol: 1.0,
            specular_threshold: 240,
            uniqueness: 0.05,
            speckle_size: 100,
            smoothing: SmoothParams::default(),
        }
    }
}

/// Intermediate and final maps of one dense run.
#[derive(Debug, Clone)]
pub struct DenseResult {
    pub wta: DisparityMap,
    pub checked: DisparityMap,
    pub smoothed: FloatMap,
    /// Smoothed values restricted to pixels that were valid before smoothing,
    /// not specular and within the disparity range.
    pub output: FloatMap,
    /// Pixels excluded as specular.
    pub specular: Vec<bool>,
    pub energies: Vec<f64>,
}

/// Pixels whose `(2r+1)²` patch contains an intensity above `threshold`.
pub fn specular_mask(img: &GrayImage, threshold: u8, r: usize) -> Vec<bool> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut rows = vec![false; w * h];
    for y in 0..h {
        let mut last: Option<usize> = None;
        for x in 0..w + r {
            if x < w && raw[y * w + x] > threshold {
                last = Some(x);
            }
            if x >= r {
                rows[y * w + x - r] = last.is_some_and(|l| l + 2 * r >= x);
            }
        }
    }
    let mut out = vec![false; w * h];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h + r {
            if y < h && rows[y * w + x] {
                last = Some(y);
            }
            if y >= r {
                out[(y - r) * w + x] = last.is_some_and(|l| l + 2 * r >= y);
            }
        }
    }
    out
}

/// Full dense pipeline for one rectified pair. Pixels whose left or matched
/// right patch touches a specular highlight are excluded from fidelity and
/// output.
pub fn compute_disparity(left: &GrayImage, right: &GrayImage, rig: &StereoRig, params: &DenseParams) -> Result<DenseResult, DenseError> {
    let vol = build_cost_volume(left, right, rig, params.patch_size)?;
    let wta = wta_disparity(&vol, params.min_score);
    let right_map = wta_right(&vol, params.min_score);
    let mut checked = lr_consistency(&wta, &right_map, params.lr_tol);
    reject_ambiguous(&vol, &mut checked, params.uniqueness);
    drop(vol);
    remove_speckles(&mut checked, params.speckle_size, 1.0);
    let r = params.patch_size / 2;
    let spec_l = specular_mask(left, params.specular_threshold, r);
    let spec_r = specular_mask(right, params.specular_threshold, r);
    let w = checked.disparity.width;
    let specular: Vec<bool> = (0..spec_l.len())
        .map(|i| {
            let d = checked.disparity.data[i];
            spec_l[i] || (d.is_finite() && {
                let xr = (i % w) as f64 - d as f64;
                xr >= 0.0 && spec_r[i - (i % w) + xr.round() as usize]
            })
        })
        .collect();
    let sm = smooth_disparity(&checked, Some(&specular), &params.smoothing);
    let mut output = sm.disparity.clone();
    for (i, v) in output.data.iter_mut().enumerate() {
        let d = checked.disparity.data[i];
        if !d.is_finite() || specular[i] || (*v as f64) < rig.d_min || (*v as f64) > rig.d_max {
            *v = f32::NAN;
        }
    }
    Ok(DenseResult { wta, checked, smoothed: sm.disparity, output, specular, energies: sm.energies })
}

/// Writes disparity as 16-bit grayscale: `round(d * 256)`, 0 for invalid.
pub fn write_disparity_png(map: &FloatMap, path: impl AsRef<Path>) -> Result<(), DenseError> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(map.width as u32, map.height as u32, |x, y| {
        let d = map.get(x as usize, y as usize);
        Luma([if d.is_finite() && d > 0.0 { (d as f64 * 256.0).round().min(65535.0) as u16 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Reads a map written by [`write_disparity_png`].
pub fn read_disparity_png(path: impl AsRef<Path>) -> Result<FloatMap, DenseError> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| if v == 0 { f32::NAN } else { v as f32 / 256.0 }).collect();
    Ok(FloatMap { width: w, height: h, data })
}

/// Writes confidence as 8-bit grayscale: `round((c + 1) * 127.5)`, 0 for
/// undefined.
pub fn write_confidence_png(map: &FloatMap, path: impl AsRef<Path>) -> Result<(), DenseError> {
    let img = GrayImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let c = map.get(x as usize, y as usize);
        Luma([if c.is_finite() { ((c.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}
