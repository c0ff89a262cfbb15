//! FAST-9 segment test corners.

use image::GrayImage;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
pub(crate) const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const ARC: usize = 9;

#[inline]
fn ring(img: &[u8], stride: usize, x: usize, y: usize) -> [i16; 16] {
    let mut out = [0i16; 16];
    for (k, (dx, dy)) in CIRCLE.iter().enumerate() {
        let xx = (x as i32 + dx) as usize;
        let yy = (y as i32 + dy) as usize;
        out[k] = img[yy * stride + xx] as i16;
    }
    out
}

/// True when at least `ARC` contiguous ring pixels are all brighter than
/// `p + t` or all darker than `p - t`.
#[inline]
fn is_corner(p: i16, ring: &[i16; 16], t: i16) -> bool {
    let (hi, lo) = (p + t, p - t);
    // Any 9-arc covers at least two of the four compass points.
    let compass = [ring[0], ring[4], ring[8], ring[12]];
    let nb = compass.iter().filter(|&&v| v > hi).count();
    let nd = compass.iter().filter(|&&v| v < lo).count();
    if nb < 2 && nd < 2 {
        return false;
    }
    let mut run_b = 0;
    let mut run_d = 0;
    for k in 0..16 + ARC {
        let v = ring[k % 16];
        if v > hi {
            run_b += 1;
            run_d = 0;
        } else if v < lo {
            run_d += 1;
            run_b = 0;
        } else {
            run_b = 0;
            run_d = 0;
        }
        if run_b >= ARC || run_d >= ARC {
            return true;
        }
    }
    false
}

/// Sum of absolute differences beyond `t` over the brighter or darker ring
/// pixels, whichever is larger. Peaks at the apex of a corner.
fn corner_score(p: i16, ring: &[i16; 16], t: i16) -> i16 {
    let (mut sb, mut sd) = (0i16, 0i16);
    for &v in ring {
        if v > p + t {
            sb += v - p - t;
        } else if v < p - t {
            sd += p - t - v;
        }
    }
    sb.max(sd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Corner {
    pub x: usize,
    pub y: usize,
    pub score: i16,
}

/// Detects corner candidates (before non-maximum suppression) inside the rectangle `[x0, x1) × [y0, y1)`; the rectangle
/// must keep 3 pixels clear of the image border.
pub(crate) fn detect_in_rect(img: &GrayImage, x0: usize, y0: usize, x1: usize, y1: usize, t: u8) -> Vec<Corner> {
    let stride = img.width() as usize;
    let raw = img.as_raw();
    let t = t as i16;
    let (w, h) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let mut scores = vec![0i16; w * h];
    for y in y0..y1 {
        for x in x0..x1 {
            let p = raw[y * stride + x] as i16;
            let r = ring(raw, stride, x, y);
            if is_corner(p, &r, t) {
                scores[(y - y0) * w + (x - x0)] = corner_score(p, &r, t);
            }
        }
    }
    let mut out = Vec::new();
    for yy in 0..h {
        for xx in 0..w {
            let s = scores[yy * w + xx];
            if s > 0 {
                out.push(Corner { x: x0 + xx, y: y0 + yy, score: s });
            }
        }
    }
    out
}
