use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::{Feature, Keypoint, OrbConfig};
use crate::frame::window_mean;
use crate::geometry::StereoRig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoMatch {
    pub left_index: usize,
    pub right_index: usize,
    pub left: Keypoint,
    pub right: Keypoint,
    /// `left.x - right.x`, pixels.
    pub disparity: f64,
    pub hamming: u32,
}

struct Best {
    idx: usize,
    dist: u32,
    second: u32,
}

fn accept(b: &Best, cfg: &OrbConfig) -> bool {
    if b.dist > cfg.max_hamming {
        return false;
    }
    if b.second == u32::MAX {
        return true;
    }
    b.dist < b.second && b.dist as f64 <= cfg.ratio * b.second as f64
}

fn compatible(l: &Keypoint, r: &Keypoint, rig: &StereoRig, tol: f64) -> bool {
    let d = l.x - r.x;
    (l.y - r.y).abs() <= tol && d >= rig.d_min && d <= rig.d_max && (l.octave as i32 - r.octave as i32).abs() <= 1
}

fn row_index(feats: &[Feature], height: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); height.max(1)];
    for (i, f) in feats.iter().enumerate() {
        let r = (f.kp.y.round().max(0.0) as usize).min(rows.len() - 1);
        rows[r].push(i);
    }
    rows
}

fn best_in_rows(
    query: &Feature,
    others: &[Feature],
    rows: &[Vec<usize>],
    tol: f64,
    ok: impl Fn(&Keypoint) -> bool,
) -> Option<Best> {
    let lo = (query.kp.y - tol).floor().max(0.0) as usize;
    let hi = ((query.kp.y + tol).ceil().max(0.0) as usize).min(rows.len() - 1);
    let mut best = Best { idx: usize::MAX, dist: u32::MAX, second: u32::MAX };
    for row in rows.iter().take(hi + 1).skip(lo) {
        for &j in row {
            let o = &others[j];
            if !ok(&o.kp) {
                continue;
            }
            let d = query.desc.hamming(&o.desc);
            if d < best.dist || (d == best.dist && j < best.idx) {
                best.second = best.second.min(best.dist);
                best.dist = d;
                best.idx = j;
            } else if d < best.second {
                best.second = d;
            }
        }
    }
    (best.idx != usize::MAX).then_some(best)
}

/// One-to-one stereo matches between rectified left and right features:
/// epipolar row gate, disparity range, best/second-best ratio test and
/// mutual consistency.
pub fn match_stereo(left: &[Feature], right: &[Feature], rig: &StereoRig, cfg: &OrbConfig) -> Vec<StereoMatch> {
    if left.is_empty() || right.is_empty() {
        return Vec::new();
    }
    let tol = cfg.epipolar_tol;
    let height = rig.intrinsics.height as usize;
    let right_rows = row_index(right, height);
    let left_rows = row_index(left, height);
    let mut out = Vec::new();
    for (i, lf) in left.iter().enumerate() {
        let Some(b) = best_in_rows(lf, right, &right_rows, tol, |r| compatible(&lf.kp, r, rig, tol)) else {
            continue;
        };
        if !accept(&b, cfg) {
            continue;
        }
        let rf = &right[b.idx];
        let Some(back) = best_in_rows(rf, left, &left_rows, tol, |l| compatible(l, &rf.kp, rig, tol)) else {
            continue;
        };
        if back.idx != i || !accept(&back, cfg) {
            continue;
        }
        out.push(StereoMatch {
            left_index: i,
            right_index: b.idx,
            left: lf.kp,
            right: rf.kp,
            disparity: lf.kp.x - rf.kp.x,
            hamming: b.dist,
        });
    }
    out
}

/// Refines each match's right x coordinate to subpixel precision by a
/// zero-mean SAD search along the row on the full-resolution images.
/// Matches whose cost minimum sits on the search boundary are dropped.
pub fn refine_stereo_subpixel(
    matches: &[StereoMatch],
    left: &GrayImage,
    right: &GrayImage,
    rig: &StereoRig,
    scale_factor: f64,
) -> Vec<StereoMatch> {
    const R: i64 = 5;
    let (w, h) = (left.width() as i64, left.height() as i64);
    let lp = left.as_raw();
    let rp = right.as_raw();
    let mut out = Vec::with_capacity(matches.len());
    for m in matches {
        let (ul, vl) = (m.left.x.round() as i64, m.left.y.round() as i64);
        let search = (2.0 * scale_factor.powi(m.left.octave as i32)).ceil() as i64 + 1;
        let ur0 = m.right.x.round() as i64;
        if vl - R < 0 || vl + R >= h || ul - R < 0 || ul + R >= w || ur0 - search - R < 0 || ur0 + search + R >= w {
            continue;
        }
        let mut lpatch = [0f32; (2 * R as usize + 1) * (2 * R as usize + 1)];
        let mut k = 0;
        for dv in -R..=R {
            for du in -R..=R {
                lpatch[k] = lp[((vl + dv) * w + ul + du) as usize] as f32;
                k += 1;
            }
        }
        let lmean = lpatch.iter().sum::<f32>() / lpatch.len() as f32;
        let costs: Vec<f32> = (-search..=search)
            .map(|s| {
                let ur = ur0 + s;
                let mut rpatch = [0f32; (2 * R as usize + 1) * (2 * R as usize + 1)];
                let mut k = 0;
                for dv in -R..=R {
                    for du in -R..=R {
                        rpatch[k] = rp[((vl + dv) * w + ur + du) as usize] as f32;
                        k += 1;
                    }
                }
                let rmean = rpatch.iter().sum::<f32>() / rpatch.len() as f32;
                lpatch.iter().zip(&rpatch).map(|(a, b)| ((a - lmean) - (b - rmean)).abs()).sum()
            })
            .collect();
        let (bi, _) = costs.iter().enumerate().fold((0, f32::MAX), |acc, (i, c)| if *c < acc.1 { (i, *c) } else { acc });
        if bi == 0 || bi == costs.len() - 1 {
            continue;
        }
        let (c0, c1, c2) = (costs[bi - 1] as f64, costs[bi] as f64, costs[bi + 1] as f64);
        let denom = c0 - 2.0 * c1 + c2;
        let delta = if denom > 1e-9 { (0.5 * (c0 - c2) / denom).clamp(-1.0, 1.0) } else { 0.0 };
        let xr = (ur0 + bi as i64 - search) as f64 + delta;
        // Disparity is measured at the rounded pixel the patch was centred on.
        let disparity = ul as f64 - xr;
        if disparity < rig.d_min || disparity > rig.d_max || disparity <= 0.0 {
            continue;
        }
        let mut refined = *m;
        refined.right.x = m.left.x - disparity;
        refined.right.y = m.left.y;
        refined.disparity = disparity;
        out.push(refined);
    }
    out
}

/// Drops features whose 5×5 neighbourhood mean exceeds `threshold`; order of
/// the survivors is preserved.
pub fn filter_specular(feats: Vec<Feature>, image: &GrayImage, threshold: f64) -> Vec<Feature> {
    feats
        .into_iter()
        .filter(|f| window_mean(image, f.kp.x.round() as i64, f.kp.y.round() as i64, 5) <= threshold)
        .collect()
}
