//! Per-keyframe grid meshes from dense disparity, stitched into one world
//! mesh by voxel coverage.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::FloatMap;
use crate::geometry::{PoseSE3, StereoRig, Vec3};

#[derive(Error, Debug)]
pub enum FusionError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed mesh file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    /// Pixel step of the lifting grid.
    pub stride: usize,
    /// Largest relative depth jump allowed along a triangle edge.
    pub disc_threshold: f64,
    /// Coverage voxel edge, meters.
    pub voxel_size: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { stride: 2, disc_threshold: 0.02, voxel_size: 0.002 }
    }
}

/// Grid mesh of one keyframe, in camera or world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSurface {
    pub keyframe: u64,
    pub points: Vec<Vec3>,
    /// Source pixel of each point.
    pub pixels: Vec<[u32; 2]>,
    pub triangles: Vec<[u32; 3]>,
    /// Camera centre in the same frame as `points`.
    pub viewpoint: Vec3,
}

impl LocalSurface {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

fn depth_jump_ok(z: [f64; 3], tau: f64) -> bool {
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= tau * lo
}

/// Backprojects every `stride`-th valid pixel and connects grid neighbours.
/// Triangles are wound counter-clockwise seen from the camera, so their
/// normals face it.
pub fn lift_keyframe(disparity: &FloatMap, rig: &StereoRig, params: &FusionParams, keyframe: u64) -> LocalSurface {
    let s = params.stride.max(1);
    let (gw, gh) = (disparity.width.div_ceil(s), disparity.height.div_ceil(s));
    let k = &rig.intrinsics;
    let mut grid = vec![None; gw * gh];
    let mut cam = Vec::new();
    let mut pixels = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let (x, y) = (gx * s, gy * s);
            let d = disparity.get(x, y) as f64;
            if !d.is_finite() || d <= 0.0 {
                continue;
            }
            let z = k.f * rig.baseline / d;
            grid[gy * gw + gx] = Some(cam.len());
            cam.push(Vec3::new((x as f64 - k.cx) * z / k.f, (y as f64 - k.cy) * z / k.f, z));
            pixels.push([x as u32, y as u32]);
        }
    }
    let mut triangles = Vec::new();
    let mut push = |ids: [Option<usize>; 3]| {
        if let [Some(a), Some(b), Some(c)] = ids {
            let (pa, pb, pc) = (cam[a], cam[b], cam[c]);
            if depth_jump_ok([pa.z, pb.z, pc.z], params.disc_threshold) && triangle_area(&pa, &pb, &pc) > 1e-14 {
                triangles.push([a as u32, b as u32, c as u32]);
            }
        }
    };
    for gy in 0..gh.saturating_sub(1) {
        for gx in 0..gw.saturating_sub(1) {
            let at = |dx: usize, dy: usize| grid[(gy + dy) * gw + gx + dx];
            push([at(0, 0), at(0, 1), at(1, 0)]);
            push([at(1, 0), at(0, 1), at(1, 1)]);
        }
    }
    // Keep only points used by a triangle.
    let mut remap = vec![u32::MAX; cam.len()];
    let mut points = Vec::new();
    let mut kept_pixels = Vec::new();
    let mut used = vec![false; cam.len()];
    for t in &triangles {
        for &i in t {
            used[i as usize] = true;
        }
    }
    for i in 0..cam.len() {
        if used[i] {
            remap[i] = points.len() as u32;
            points.push(cam[i]);
            kept_pixels.push(pixels[i]);
        }
    }
    for t in &mut triangles {
        for i in t.iter_mut() {
            *i = remap[*i as usize];
        }
    }
    LocalSurface { keyframe, points, pixels: kept_pixels, triangles, viewpoint: Vec3::zeros() }
}

/// Maps a camera-frame surface through world-from-camera `pose`.
pub fn to_world(surface: &LocalSurface, pose: &PoseSE3) -> LocalSurface {
    LocalSurface {
        points: surface.points.iter().map(|p| pose.transform_point(p)).collect(),
        viewpoint: pose.transform_point(&surface.viewpoint),
        ..surface.clone()
    }
}

fn voxel_of(p: &Vec3, h: f64) -> [i64; 3] {
    [(p.x / h).floor() as i64, (p.y / h).floor() as i64, (p.z / h).floor() as i64]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeStats {
    pub vertices_added: usize,
    pub triangles_added: usize,
    pub voxels_added: usize,
}

/// Global mesh in the world frame with its coverage index.
#[derive(Debug, Clone, Default)]
pub struct WorldMesh {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Keyframe that contributed each vertex.
    pub vertex_keyframe: Vec<u64>,
    /// Camera centre that observed each vertex.
    pub vertex_viewpoint: Vec<Vec3>,
    pub occupied: HashSet<[i64; 3]>,
    pub voxel_size: f64,
    /// Incremented on every merge that changes the mesh.
    pub version: u64,
}

impl WorldMesh {
    pub fn new(voxel_size: f64) -> Self {
        Self { voxel_size, ..Self::default() }
    }

    pub fn occupied_voxels(&self) -> usize {
        self.occupied.len()
    }

    /// Appends the triangles of `surface` (world frame) that reach at least
    /// one voxel not yet covered. Coverage is judged against the mesh before
    /// this call, so a surface never suppresses its own triangles.
    pub fn merge(&mut self, surface: &LocalSurface) -> MergeStats {
        let h = self.voxel_size;
        let vox: Vec<[i64; 3]> = surface.points.iter().map(|p| voxel_of(p, h)).collect();
        let kept: Vec<&[u32; 3]> = surface
            .triangles
            .iter()
            .filter(|t| !t.iter().all(|&i| self.occupied.contains(&vox[i as usize])))
            .collect();
        if kept.is_empty() {
            return MergeStats::default();
        }
        let mut used = vec![false; surface.points.len()];
        for t in &kept {
            for &i in t.iter() {
                used[i as usize] = true;
            }
        }
        let mut remap = vec![u32::MAX; surface.points.len()];
        let base = self.vertices.len();
        let mut voxels_added = 0;
        for (i, slot) in remap.iter_mut().enumerate() {
            if used[i] {
                *slot = self.vertices.len() as u32;
                self.vertices.push(surface.points[i]);
                self.vertex_keyframe.push(surface.keyframe);
                self.vertex_viewpoint.push(surface.viewpoint);
                voxels_added += self.occupied.insert(vox[i]) as usize;
            }
        }
        let first_tri = self.triangles.len();
        for t in &kept {
            self.triangles.push([remap[t[0] as usize], remap[t[1] as usize], remap[t[2] as usize]]);
        }
        self.normals.resize(self.vertices.len(), Vec3::zeros());
        let mut acc = vec![Vec3::zeros(); self.vertices.len() - base];
        for t in &self.triangles[first_tri..] {
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            let n = (b - a).cross(&(c - a));
            for &i in t {
                acc[i as usize - base] += n;
            }
        }
        for (j, n) in acc.into_iter().enumerate() {
            let i = base + j;
            self.normals[i] = n
                .try_normalize(1e-18)
                .unwrap_or_else(|| (self.vertex_viewpoint[i] - self.vertices[i]).normalize());
        }
        self.version += 1;
        MergeStats { vertices_added: self.vertices.len() - base, triangles_added: kept.len(), voxels_added }
    }

    /// ASCII PLY with vertex positions, normals and triangle faces.
    pub fn write_ply<W: Write>(&self, w: W) -> io::Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "ply\nformat ascii 1.0")?;
        writeln!(w, "element vertex {}", self.vertices.len())?;
        writeln!(w, "property float x\nproperty float y\nproperty float z")?;
        writeln!(w, "property float nx\nproperty float ny\nproperty float nz")?;
        writeln!(w, "element face {}", self.triangles.len())?;
        writeln!(w, "property list uchar int vertex_indices\nend_header")?;
        for (v, n) in self.vertices.iter().zip(&self.normals) {
            writeln!(w, "{} {} {} {} {} {}", v.x, v.y, v.z, n.x, n.y, n.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        w.flush()
    }

    pub fn write_obj<W: Write>(&self, w: W) -> io::Result<()> {
        let mut w = BufWriter::new(w);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for n in &self.normals {
            writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
        }
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            writeln!(w, "f {a}//{a} {b}//{b} {c}//{c}")?;
        }
        w.flush()
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        Ok(self.write_ply(File::create(path)?)?)
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        Ok(self.write_obj(File::create(path)?)?)
    }

    /// Reads an ASCII PLY with `x y z` and optional `nx ny nz` vertex
    /// properties. Missing normals are recomputed; coverage is rebuilt with
    /// `voxel_size`.
    pub fn read_ply<R: BufRead>(r: R, voxel_size: f64) -> Result<Self, FusionError> {
        let bad = |m: &str| FusionError::Parse(m.to_string());
        let mut lines = r.lines();
        let mut next = || -> Result<String, FusionError> { lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(Into::into) };
        if next()?.trim() != "ply" {
            return Err(bad("missing ply magic"));
        }
        let (mut n_vert, mut n_face) = (0usize, 0usize);
        let mut props: Vec<String> = Vec::new();
        let mut in_vertex = false;
        loop {
            let line = next()?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => return Err(bad("only ascii PLY is supported")),
                ["element", "vertex", n] => {
                    n_vert = n.parse().map_err(|_| bad("vertex count"))?;
                    in_vertex = true;
                }
                ["element", "face", n] => {
                    n_face = n.parse().map_err(|_| bad("face count"))?;
                    in_vertex = false;
                }
                ["element", ..] => in_vertex = false,
                ["property", _, name] if in_vertex => props.push(name.to_string()),
                ["end_header"] => break,
                _ => {}
            }
        }
        let col = |name: &str| props.iter().position(|p| p == name);
        let (ix, iy, iz) = (col("x").ok_or_else(|| bad("no x"))?, col("y").ok_or_else(|| bad("no y"))?, col("z").ok_or_else(|| bad("no z"))?);
        let normal_cols = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        let mut mesh = WorldMesh::new(voxel_size);
        let mut normals = Vec::new();
        for _ in 0..n_vert {
            let line = next()?;
            let vals: Vec<f64> = line.split_whitespace().map(|t| t.parse().map_err(|_| bad("vertex value"))).collect::<Result<_, _>>()?;
            if vals.len() < props.len() {
                return Err(bad("short vertex line"));
            }
            mesh.vertices.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
            if let Some((a, b, c)) = normal_cols {
                normals.push(Vec3::new(vals[a], vals[b], vals[c]));
            }
        }
        for _ in 0..n_face {
            let line = next()?;
            let idx: Vec<u32> = line.split_whitespace().map(|t| t.parse().map_err(|_| bad("face index"))).collect::<Result<_, _>>()?;
            if idx.len() != 4 || idx[0] != 3 {
                return Err(bad("only triangle faces are supported"));
            }
            if idx[1..].iter().any(|&i| i as usize >= n_vert) {
                return Err(bad("face index out of range"));
            }
            mesh.triangles.push([idx[1], idx[2], idx[3]]);
        }
        mesh.normals = if normals.len() == n_vert { normals } else { vertex_normals(&mesh.vertices, &mesh.triangles) };
        mesh.vertex_keyframe = vec![0; n_vert];
        mesh.vertex_viewpoint = mesh.vertices.iter().zip(&mesh.normals).map(|(v, n)| v + n).collect();
        mesh.occupied = mesh.vertices.iter().map(|p| voxel_of(p, voxel_size)).collect();
        Ok(mesh)
    }

    pub fn load_ply(path: impl AsRef<Path>, voxel_size: f64) -> Result<Self, FusionError> {
        Self::read_ply(BufReader::new(File::open(path)?), voxel_size)
    }
}

/// Area-weighted vertex normals; isolated vertices get +z.
pub fn vertex_normals(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let [a, b, c] = t.map(|i| vertices[i as usize]);
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i as usize] += n;
        }
    }
    acc.into_iter().map(|n| n.try_normalize(1e-18).unwrap_or_else(Vec3::z)).collect()
}
