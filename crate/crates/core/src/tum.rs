//! TUM-style trajectory files: `timestamp tx ty tz qx qy qz qw` per line.

use std::io::{self, BufRead, Write};
use std::path::Path;

use crate::geometry::{PoseSE3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: PoseSE3,
}

/// Formats `x` with `sig` significant digits in positional notation.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { format!("{x}") };
    }
    let mag = x.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        if t == "-0" { "0".into() } else { t.to_string() }
    } else {
        s
    }
}

pub fn format_line(p: &StampedPose) -> String {
    let [w, x, y, z] = p.pose.wxyz();
    let r = p.pose.r;
    [p.timestamp, r.x, r.y, r.z, x, y, z, w].iter().map(|v| fmt_sig(*v, 9)).collect::<Vec<_>>().join(" ")
}

pub fn write_trajectory<W: Write>(mut w: W, poses: &[StampedPose]) -> io::Result<()> {
    for p in poses {
        writeln!(w, "{}", format_line(p))?;
    }
    Ok(())
}

pub fn save_trajectory(path: impl AsRef<Path>, poses: &[StampedPose]) -> io::Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(f);
    write_trajectory(&mut w, poses)?;
    w.flush()
}

pub fn parse_line(line: &str) -> Option<StampedPose> {
    let v: Vec<f64> = line.split_whitespace().map(|s| s.parse().ok()).collect::<Option<_>>()?;
    if v.len() != 8 {
        return None;
    }
    Some(StampedPose {
        timestamp: v[0],
        pose: PoseSE3::from_wxyz(Vec3::new(v[1], v[2], v[3]), [v[7], v[4], v[5], v[6]]),
    })
}

pub fn read_trajectory<R: BufRead>(r: R) -> io::Result<Vec<StampedPose>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(parse_line(t).ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidData, format!("trajectory line {}: malformed", i + 1))
        })?);
    }
    Ok(out)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> io::Result<Vec<StampedPose>> {
    read_trajectory(io::BufReader::new(std::fs::File::open(path)?))
}
