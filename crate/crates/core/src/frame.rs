//! Image containers shared by the pipeline stages.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

pub use image::GrayImage;

/// One rectified stereo frame.
#[derive(Debug, Clone)]
pub struct StereoFrame {
    pub index: usize,
    /// Seconds since the first frame.
    pub timestamp: f64,
    pub left: Arc<GrayImage>,
    pub right: Arc<GrayImage>,
}

/// Dense per-pixel float map, row-major. Invalid cells hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Writes a little-endian PFM (single channel, rows stored bottom-up).
    pub fn write_pfm(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "Pf\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                w.write_all(&self.get(x, y).to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim() != "Pf" {
            return Err(bad("not a single-channel PFM"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let dims: Vec<usize> = line.split_whitespace().filter_map(|s| s.parse().ok()).collect();
        if dims.len() != 2 {
            return Err(bad("bad PFM dimensions"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let scale: f32 = line.trim().parse().map_err(|_| bad("bad PFM scale"))?;
        let little = scale < 0.0;
        let (width, height) = (dims[0], dims[1]);
        let mut bytes = vec![0u8; width * height * 4];
        r.read_exact(&mut bytes)?;
        let mut map = FloatMap::new(width, height, 0.0);
        for (i, c) in bytes.chunks_exact(4).enumerate() {
            let b = [c[0], c[1], c[2], c[3]];
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (x, yb) = (i % width, i / width);
            map.set(x, height - 1 - yb, v);
        }
        Ok(map)
    }
}

/// Mean intensity of the `size`×`size` window centred on (x, y), clipped to the image.
pub fn window_mean(img: &GrayImage, x: i64, y: i64, size: i64) -> f64 {
    let h = size / 2;
    let (w, hgt) = (img.width() as i64, img.height() as i64);
    let mut sum = 0u32;
    let mut n = 0u32;
    for yy in (y - h).max(0)..=(y + h).min(hgt - 1) {
        for xx in (x - h).max(0)..=(x + h).min(w - 1) {
            sum += img.get_pixel(xx as u32, yy as u32)[0] as u32;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = FloatMap::new(5, 3, 0.0);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = i as f32 * 0.25 - 1.0;
        }
        m.set(2, 1, f32::NAN);
        let p = dir.path().join("d.pfm");
        m.write_pfm(&p).unwrap();
        let back = FloatMap::read_pfm(&p).unwrap();
        assert_eq!(back.width, 5);
        for (a, b) in m.data.iter().zip(&back.data) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }
}
