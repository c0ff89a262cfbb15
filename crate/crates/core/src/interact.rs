//! Geometric queries on a world mesh snapshot: picking, surface labels,
//! geodesic measurement, area highlight and 2D overlay reprojection.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::WorldMesh;
use crate::geometry::{CameraIntrinsics, PoseSE3, Vec3};

#[derive(Error, Debug, PartialEq)]
pub enum InteractError {
    #[error("face {0} does not exist")]
    BadFace(u32),
    #[error("barycentric coordinates {0:?} are not a convex combination")]
    BadBarycentric([f64; 3]),
    #[error("no surface path between the points")]
    NoPath,
    #[error("radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("annotation file line {0}: {1}")]
    Parse(usize, String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
}

/// A point on a mesh face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub face: u32,
    pub bary: [f64; 3],
    pub position: Vec3,
}

impl SurfacePoint {
    pub fn new(mesh: &WorldMesh, face: u32, bary: [f64; 3]) -> Result<Self, InteractError> {
        let t = mesh.triangles.get(face as usize).ok_or(InteractError::BadFace(face))?;
        let sum: f64 = bary.iter().sum();
        if bary.iter().any(|b| !(*b >= -1e-12)) || (sum - 1.0).abs() > 1e-9 {
            return Err(InteractError::BadBarycentric(bary));
        }
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        Ok(Self { face, bary, position: a * bary[0] + b * bary[1] + c * bary[2] })
    }
}

fn intersect(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<(f64, f64, f64)> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() <= 1e-14 * e1.norm() * e2.norm() {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some((t, u, v))
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    face: u32,
    u: f64,
    v: f64,
}

fn closer(h: &Hit, best: &Option<Hit>) -> bool {
    match best {
        None => true,
        Some(b) => h.t < b.t || (h.t == b.t && h.face < b.face),
    }
}

fn test_face(mesh: &WorldMesh, ray: &Ray, f: u32, best: &mut Option<Hit>) {
    let [a, b, c] = mesh.triangles[f as usize].map(|i| mesh.vertices[i as usize]);
    if let Some((t, u, v)) = intersect(&ray.origin, &ray.dir, &a, &b, &c) {
        let h = Hit { t, face: f, u, v };
        if closer(&h, best) {
            *best = Some(h);
        }
    }
}

fn hit_to_point(mesh: &WorldMesh, h: Hit) -> SurfacePoint {
    let bary = [1.0 - h.u - h.v, h.u, h.v];
    let [a, b, c] = mesh.triangles[h.face as usize].map(|i| mesh.vertices[i as usize]);
    SurfacePoint { face: h.face, bary, position: a * bary[0] + b * bary[1] + c * bary[2] }
}

/// Nearest hit by testing every triangle.
pub fn pick_brute_force(ray: &Ray, mesh: &WorldMesh) -> Option<SurfacePoint> {
    let mut best = None;
    for f in 0..mesh.triangles.len() as u32 {
        test_face(mesh, ray, f, &mut best);
    }
    best.map(|h| hit_to_point(mesh, h))
}

#[derive(Debug, Clone)]
struct BvhNode {
    min: Vec3,
    max: Vec3,
    /// Leaf: first index into `faces`; inner: index of the left child.
    first: u32,
    /// Leaf face count, 0 for inner nodes (right child is `first + 1`).
    count: u32,
}

/// Bounding-volume hierarchy over a mesh's triangles.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    faces: Vec<u32>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(mesh: &WorldMesh) -> Self {
        let n = mesh.triangles.len();
        let mut faces: Vec<u32> = (0..n as u32).collect();
        let bounds: Vec<(Vec3, Vec3, Vec3)> = mesh
            .triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
                (a.inf(&b).inf(&c), a.sup(&b).sup(&c), (a + b + c) / 3.0)
            })
            .collect();
        let mut nodes = vec![BvhNode { min: Vec3::zeros(), max: Vec3::zeros(), first: 0, count: 0 }];
        if n > 0 {
            Self::split(&mut nodes, 0, &mut faces, 0, &bounds);
        }
        Self { nodes, faces }
    }

    fn split(nodes: &mut Vec<BvhNode>, node: usize, faces: &mut [u32], offset: usize, bounds: &[(Vec3, Vec3, Vec3)]) {
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        let (mut clo, mut chi) = (lo, hi);
        for &f in faces.iter() {
            let (a, b, c) = &bounds[f as usize];
            lo = lo.inf(a);
            hi = hi.sup(b);
            clo = clo.inf(c);
            chi = chi.sup(c);
        }
        nodes[node].min = lo;
        nodes[node].max = hi;
        let extent = chi - clo;
        if faces.len() <= LEAF_SIZE || extent.max() <= 0.0 {
            nodes[node].first = offset as u32;
            nodes[node].count = faces.len() as u32;
            return;
        }
        let axis = extent.imax();
        let mid = faces.len() / 2;
        faces.select_nth_unstable_by(mid, |&a, &b| bounds[a as usize].2[axis].total_cmp(&bounds[b as usize].2[axis]).then(a.cmp(&b)));
        let left = nodes.len();
        nodes.push(BvhNode { min: lo, max: hi, first: 0, count: 0 });
        nodes.push(BvhNode { min: lo, max: hi, first: 0, count: 0 });
        nodes[node].first = left as u32;
        nodes[node].count = 0;
        let (l, r) = faces.split_at_mut(mid);
        Self::split(nodes, left, l, offset, bounds);
        Self::split(nodes, left + 1, r, offset + mid, bounds);
    }

    fn box_entry(node: &BvhNode, o: &Vec3, inv: &Vec3) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for i in 0..3 {
            let a = (node.min[i] - o[i]) * inv[i];
            let b = (node.max[i] - o[i]) * inv[i];
            let (near, far) = if a <= b { (a, b) } else { (b, a) };
            // NaN (origin on a slab plane with a parallel ray) leaves the
            // interval unchanged.
            t0 = t0.max(near);
            t1 = t1.min(far);
        }
        (t0 <= t1).then_some(t0)
    }

    /// Nearest ray/triangle hit; ties go to the lower face id.
    pub fn pick(&self, ray: &Ray, mesh: &WorldMesh) -> Option<SurfacePoint> {
        if self.faces.is_empty() {
            return None;
        }
        let inv = ray.dir.map(|v| 1.0 / v);
        let mut best: Option<Hit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            match Self::box_entry(node, &ray.origin, &inv) {
                Some(t) if best.is_none_or(|b| t <= b.t) => {}
                _ => continue,
            }
            if node.count > 0 {
                for &f in &self.faces[node.first as usize..(node.first + node.count) as usize] {
                    test_face(mesh, ray, f, &mut best);
                }
            } else {
                stack.push(node.first as usize + 1);
                stack.push(node.first as usize);
            }
        }
        best.map(|h| hit_to_point(mesh, h))
    }
}

/// Oriented frame of a surface annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub normal: Vec3,
    pub tangent: Vec3,
    pub bitangent: Vec3,
}

/// Image-up direction of the world frame (the first camera's -y).
pub const WORLD_UP: Vec3 = Vec3::new(0.0, -1.0, 0.0);

/// Interpolated vertex normal at `p`, completed to a right-handed frame
/// whose tangent is world-up projected onto the tangent plane.
pub fn surface_frame(p: &SurfacePoint, mesh: &WorldMesh) -> Orientation {
    let t = mesh.triangles[p.face as usize];
    let n = t.iter().zip(&p.bary).map(|(&i, &b)| mesh.normals[i as usize] * b).fold(Vec3::zeros(), |a, v| a + v);
    let normal = n.try_normalize(1e-300).unwrap_or_else(|| {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        (b - a).cross(&(c - a)).normalize()
    });
    let mut up = WORLD_UP;
    if up.dot(&normal).abs() > 1.0 - 1e-9 {
        up = Vec3::x();
    }
    let tangent = (up - normal * up.dot(&normal)).normalize();
    Orientation { normal, tangent, bitangent: normal.cross(&tangent) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    Label,
    Plane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub anchor: SurfacePoint,
    pub orientation: Orientation,
    pub kind: AnnotationKind,
    pub text: String,
    pub mesh_version: u64,
}

/// Label anchored at `p` and aligned with the surface.
pub fn place_label(p: &SurfacePoint, mesh: &WorldMesh, text: &str) -> Annotation {
    Annotation {
        id: 0,
        anchor: *p,
        orientation: surface_frame(p, mesh),
        kind: AnnotationKind::Label,
        text: text.to_string(),
        mesh_version: mesh.version,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodesicParams {
    /// Steiner points inserted on every edge.
    pub steiner: usize,
    /// Boundary vertices of separate mesh pieces closer than this are linked.
    pub bridge: f64,
}

impl Default for GeodesicParams {
    fn default() -> Self {
        Self { steiner: 3, bridge: 0.002 }
    }
}

/// Node graph over mesh vertices and Steiner points. Every pair of nodes on
/// the boundary of a common face is connected by a straight in-face segment;
/// neighbours are generated on the fly.
#[derive(Debug, Clone)]
pub struct SurfaceGraph {
    k: usize,
    nv: usize,
    edges: Vec<[u32; 2]>,
    edge_face_start: Vec<u32>,
    edge_face_list: Vec<u32>,
    face_edges: Vec<[u32; 3]>,
    vertex_face_start: Vec<u32>,
    vertex_face_list: Vec<u32>,
    bridges: HashMap<u32, Vec<u32>>,
}

fn csr(n: usize, pairs: impl Iterator<Item = (u32, u32)> + Clone) -> (Vec<u32>, Vec<u32>) {
    let mut start = vec![0u32; n + 1];
    for (a, _) in pairs.clone() {
        start[a as usize + 1] += 1;
    }
    for i in 0..n {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut list = vec![0u32; start[n] as usize];
    for (a, b) in pairs {
        list[fill[a as usize] as usize] = b;
        fill[a as usize] += 1;
    }
    (start, list)
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

const SOURCE: u32 = u32::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry(f64, u32);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Search {
    dist: HashMap<u32, f64>,
    prev: HashMap<u32, u32>,
}

impl SurfaceGraph {
    pub fn build(mesh: &WorldMesh, params: &GeodesicParams) -> Self {
        let nv = mesh.vertices.len();
        let mut edges = Vec::new();
        let mut edge_index: HashMap<(u32, u32), u32> = HashMap::new();
        let mut face_edges = Vec::with_capacity(mesh.triangles.len());
        for t in &mesh.triangles {
            let mut fe = [0u32; 3];
            for (j, (a, b)) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])].into_iter().enumerate() {
                let key = (a.min(b), a.max(b));
                fe[j] = *edge_index.entry(key).or_insert_with(|| {
                    edges.push([key.0, key.1]);
                    edges.len() as u32 - 1
                });
            }
            face_edges.push(fe);
        }
        let ef = face_edges.iter().enumerate().flat_map(|(f, fe)| fe.iter().map(move |&e| (e, f as u32)));
        let (edge_face_start, edge_face_list) = csr(edges.len(), ef);
        let vf = mesh.triangles.iter().enumerate().flat_map(|(f, t)| t.iter().map(move |&v| (v, f as u32)));
        let (vertex_face_start, vertex_face_list) = csr(nv, vf);

        // Seam bridges: each boundary vertex links to the nearest vertex of
        // every other connected piece within `bridge`.
        let mut bridges: HashMap<u32, Vec<u32>> = HashMap::new();
        if params.bridge > 0.0 && nv > 0 {
            let mut parent: Vec<u32> = (0..nv as u32).collect();
            for t in &mesh.triangles {
                let r0 = find(&mut parent, t[0]);
                for &v in &t[1..] {
                    let r = find(&mut parent, v);
                    parent[r as usize] = r0;
                }
            }
            let comp: Vec<u32> = (0..nv as u32).map(|v| find(&mut parent, v)).collect();
            let h = params.bridge;
            let cell = |p: &Vec3| [(p.x / h).floor() as i64, (p.y / h).floor() as i64, (p.z / h).floor() as i64];
            let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
            for (i, p) in mesh.vertices.iter().enumerate() {
                grid.entry(cell(p)).or_default().push(i as u32);
            }
            let boundary: HashSet<u32> = (0..edges.len())
                .filter(|&e| edge_face_start[e + 1] - edge_face_start[e] == 1)
                .flat_map(|e| edges[e])
                .collect();
            let mut sorted: Vec<u32> = boundary.into_iter().collect();
            sorted.sort_unstable();
            for v in sorted {
                let p = mesh.vertices[v as usize];
                let c = cell(&p);
                let mut best: HashMap<u32, (f64, u32)> = HashMap::new();
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else { continue };
                            for &u in list {
                                if comp[u as usize] == comp[v as usize] {
                                    continue;
                                }
                                let d = (mesh.vertices[u as usize] - p).norm();
                                if d <= h {
                                    let e = best.entry(comp[u as usize]).or_insert((d, u));
                                    if d < e.0 || (d == e.0 && u < e.1) {
                                        *e = (d, u);
                                    }
                                }
                            }
                        }
                    }
                }
                for (_, (_, u)) in best {
                    bridges.entry(v).or_default().push(u);
                    bridges.entry(u).or_default().push(v);
                }
            }
            for list in bridges.values_mut() {
                list.sort_unstable();
                list.dedup();
            }
        }
        Self {
            k: params.steiner,
            nv,
            edges,
            edge_face_start,
            edge_face_list,
            face_edges,
            vertex_face_start,
            vertex_face_list,
            bridges,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nv + self.edges.len() * self.k
    }

    fn position(&self, mesh: &WorldMesh, n: u32) -> Vec3 {
        let n = n as usize;
        if n < self.nv {
            return mesh.vertices[n];
        }
        let (e, j) = ((n - self.nv) / self.k, (n - self.nv) % self.k);
        let [a, b] = self.edges[e].map(|i| mesh.vertices[i as usize]);
        a + (b - a) * ((j + 1) as f64 / (self.k + 1) as f64)
    }

    fn face_nodes(&self, mesh: &WorldMesh, f: u32, out: &mut Vec<u32>) {
        out.clear();
        out.extend_from_slice(&mesh.triangles[f as usize]);
        for &e in &self.face_edges[f as usize] {
            let base = self.nv + e as usize * self.k;
            out.extend((base..base + self.k).map(|n| n as u32));
        }
    }

    fn node_faces(&self, n: u32) -> &[u32] {
        let n = n as usize;
        if n < self.nv {
            &self.vertex_face_list[self.vertex_face_start[n] as usize..self.vertex_face_start[n + 1] as usize]
        } else {
            let e = (n - self.nv) / self.k;
            &self.edge_face_list[self.edge_face_start[e] as usize..self.edge_face_start[e + 1] as usize]
        }
    }

    /// Dijkstra from `src` over nodes with distance at most `cutoff`; stops
    /// early once `stop` reports that no shorter completion is possible.
    fn search(&self, mesh: &WorldMesh, src: &SurfacePoint, cutoff: f64, mut stop: impl FnMut(u32, f64, Vec3) -> bool) -> Search {
        let mut dist: HashMap<u32, f64> = HashMap::new();
        let mut prev: HashMap<u32, u32> = HashMap::new();
        let mut heap = BinaryHeap::new();
        let mut nodes = Vec::new();
        self.face_nodes(mesh, src.face, &mut nodes);
        for &n in &nodes {
            let d = (self.position(mesh, n) - src.position).norm();
            if d <= cutoff && dist.get(&n).is_none_or(|&old| d < old) {
                dist.insert(n, d);
                prev.insert(n, SOURCE);
                heap.push(Entry(d, n));
            }
        }
        let mut done: HashSet<u32> = HashSet::new();
        while let Some(Entry(d, n)) = heap.pop() {
            if !done.insert(n) {
                continue;
            }
            let pn = self.position(mesh, n);
            if stop(n, d, pn) {
                break;
            }
            let mut relax = |m: u32, pm: Vec3, heap: &mut BinaryHeap<Entry>| {
                let nd = d + (pm - pn).norm();
                if nd <= cutoff && dist.get(&m).is_none_or(|&old| nd < old) {
                    dist.insert(m, nd);
                    prev.insert(m, n);
                    heap.push(Entry(nd, m));
                }
            };
            for &f in self.node_faces(n) {
                self.face_nodes(mesh, f, &mut nodes);
                for &m in &nodes {
                    if m != n && !done.contains(&m) {
                        relax(m, self.position(mesh, m), &mut heap);
                    }
                }
            }
            if let Some(list) = self.bridges.get(&n) {
                for &m in list {
                    if !done.contains(&m) {
                        relax(m, mesh.vertices[m as usize], &mut heap);
                    }
                }
            }
        }
        Search { dist, prev }
    }
}

/// Surface polyline between two points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurePath {
    pub a: SurfacePoint,
    pub b: SurfacePoint,
    pub polyline: Vec<Vec3>,
    /// Meters.
    pub length: f64,
}

fn polyline_length(p: &[Vec3]) -> f64 {
    p.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Length in millimetres with two decimals.
pub fn format_length_mm(meters: f64) -> String {
    format!("{:.2}", meters * 1e3)
}

fn face_normal(mesh: &WorldMesh, f: u32) -> Vec3 {
    let [a, b, c] = mesh.triangles[f as usize].map(|i| mesh.vertices[i as usize]);
    (b - a).cross(&(c - a)).normalize()
}

/// Straight segment from `a` to `b` walked across coplanar faces. `None`
/// when the segment leaves the plane or the mesh.
fn straight_walk(mesh: &WorldMesh, graph: &SurfaceGraph, a: &SurfacePoint, b: &SurfacePoint) -> Option<Vec<Vec3>> {
    let n0 = face_normal(mesh, a.face);
    let d = b.position - a.position;
    let scale = d.norm().max(1e-300);
    if (d.dot(&n0) / scale).abs() > 1e-9 {
        return None;
    }
    let mut pts = vec![a.position];
    let mut face = a.face;
    let mut s_cur = 0.0;
    let mut entry_edge = u32::MAX;
    for _ in 0..=mesh.triangles.len() {
        if face == b.face {
            pts.push(b.position);
            return Some(pts);
        }
        // Leave the face through the edge the segment crosses first.
        let t = mesh.triangles[face as usize];
        let mut exit: Option<(f64, u32)> = None;
        for (j, (u, v)) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])].into_iter().enumerate() {
            let e = graph.face_edges[face as usize][j];
            if e == entry_edge {
                continue;
            }
            let (pu, pv) = (mesh.vertices[u as usize], mesh.vertices[v as usize]);
            // Solve a + s d = pu + r (pv - pu) in the face plane.
            let ev = pv - pu;
            let m = d.cross(&ev);
            let mm = m.norm_squared();
            if mm <= 1e-30 * d.norm_squared() * ev.norm_squared() {
                continue;
            }
            let w = pu - a.position;
            let s = w.cross(&ev).dot(&m) / mm;
            let r = w.cross(&d).dot(&m) / mm;
            if s > s_cur - 1e-12 && (-1e-12..=1.0 + 1e-12).contains(&r) && exit.is_none_or(|(bs, _)| s < bs) {
                exit = Some((s, e));
            }
        }
        let (s, e) = exit?;
        if s > 1.0 + 1e-12 {
            return None;
        }
        let fs = &graph.edge_face_list[graph.edge_face_start[e as usize] as usize..graph.edge_face_start[e as usize + 1] as usize];
        let next = fs.iter().copied().find(|&g| g != face && face_normal(mesh, g).dot(&n0) > 1.0 - 1e-12)?;
        pts.push(a.position + d * s);
        s_cur = s;
        entry_edge = e;
        face = next;
    }
    None
}

/// Lazily built query structures for one mesh version.
#[derive(Debug)]
pub struct MeshIndex {
    pub mesh: Arc<WorldMesh>,
    pub params: GeodesicParams,
    bvh: OnceLock<Bvh>,
    graph: OnceLock<SurfaceGraph>,
}

impl MeshIndex {
    pub fn new(mesh: Arc<WorldMesh>, params: GeodesicParams) -> Self {
        Self { mesh, params, bvh: OnceLock::new(), graph: OnceLock::new() }
    }

    pub fn version(&self) -> u64 {
        self.mesh.version
    }

    pub fn bvh(&self) -> &Bvh {
        self.bvh.get_or_init(|| Bvh::build(&self.mesh))
    }

    pub fn graph(&self) -> &SurfaceGraph {
        self.graph.get_or_init(|| SurfaceGraph::build(&self.mesh, &self.params))
    }

    pub fn pick(&self, ray: &Ray) -> Option<SurfacePoint> {
        self.bvh().pick(ray, &self.mesh)
    }

    pub fn place_label(&self, p: &SurfacePoint, text: &str) -> Annotation {
        place_label(p, &self.mesh, text)
    }

    /// Shortest surface path: the straight segment when it stays on a planar
    /// strip of faces, otherwise the Steiner-graph shortest path.
    pub fn measure_geodesic(&self, a: &SurfacePoint, b: &SurfacePoint) -> Result<MeasurePath, InteractError> {
        let mesh = &*self.mesh;
        for p in [a, b] {
            if p.face as usize >= mesh.triangles.len() {
                return Err(InteractError::BadFace(p.face));
            }
        }
        let graph = self.graph();
        if let Some(polyline) = straight_walk(mesh, graph, a, b) {
            let length = polyline_length(&polyline);
            return Ok(MeasurePath { a: *a, b: *b, polyline, length });
        }
        let mut targets = Vec::new();
        graph.face_nodes(mesh, b.face, &mut targets);
        let mut best: Option<(f64, u32)> = (a.face == b.face).then(|| ((b.position - a.position).norm(), SOURCE));
        let search = graph.search(mesh, a, f64::INFINITY, |n, d, pn| {
            if best.is_some_and(|(bd, _)| d >= bd) {
                return true;
            }
            if targets.contains(&n) {
                let total = d + (b.position - pn).norm();
                if best.is_none_or(|(bd, _)| total < bd) {
                    best = Some((total, n));
                }
            }
            false
        });
        let (_, last) = best.ok_or(InteractError::NoPath)?;
        let mut chain = Vec::new();
        let mut n = last;
        while n != SOURCE {
            chain.push(graph.position(mesh, n));
            n = search.prev[&n];
        }
        chain.reverse();
        let mut polyline = vec![a.position];
        polyline.extend(chain);
        polyline.push(b.position);
        let length = polyline_length(&polyline);
        Ok(MeasurePath { a: *a, b: *b, polyline, length })
    }

    /// Faces whose centroid lies within geodesic distance `radius` of the
    /// seed. The seed face is always included.
    pub fn highlight(&self, seed: &SurfacePoint, radius: f64) -> Result<HighlightRegion, InteractError> {
        if !(radius > 0.0) {
            return Err(InteractError::BadRadius(radius));
        }
        let mesh = &*self.mesh;
        if seed.face as usize >= mesh.triangles.len() {
            return Err(InteractError::BadFace(seed.face));
        }
        let graph = self.graph();
        let search = graph.search(mesh, seed, radius, |_, _, _| false);
        let mut faces: HashSet<u32> = HashSet::from([seed.face]);
        let centroid = |f: u32| {
            let [a, b, c] = mesh.triangles[f as usize].map(|i| mesh.vertices[i as usize]);
            (a + b + c) / 3.0
        };
        if (centroid(seed.face) - seed.position).norm() > radius {
            // Seed face only contributes itself.
        }
        let mut nodes = Vec::new();
        let mut seen: HashSet<u32> = HashSet::new();
        for &n in search.dist.keys() {
            for &f in graph.node_faces(n) {
                if !seen.insert(f) {
                    continue;
                }
                let c = centroid(f);
                let mut d = if f == seed.face { (c - seed.position).norm() } else { f64::INFINITY };
                graph.face_nodes(mesh, f, &mut nodes);
                for m in &nodes {
                    if let Some(dm) = search.dist.get(m) {
                        d = d.min(dm + (graph.position(mesh, *m) - c).norm());
                    }
                }
                if d <= radius {
                    faces.insert(f);
                }
            }
        }
        let mut faces: Vec<u32> = faces.into_iter().collect();
        faces.sort_unstable();
        let area = faces
            .iter()
            .map(|&f| {
                let [a, b, c] = mesh.triangles[f as usize].map(|i| mesh.vertices[i as usize]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum();
        Ok(HighlightRegion { seed: *seed, radius, faces, area })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightRegion {
    pub seed: SurfacePoint,
    pub radius: f64,
    pub faces: Vec<u32>,
    /// Square meters.
    pub area: f64,
}

/// Boundary loops of a face set as vertex index chains.
pub fn region_boundary(mesh: &WorldMesh, faces: &[u32]) -> Vec<Vec<u32>> {
    let mut count: HashMap<(u32, u32), (u32, u32, usize)> = HashMap::new();
    for &f in faces {
        let t = mesh.triangles[f as usize];
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            count.entry((a.min(b), a.max(b))).or_insert((a, b, 0)).2 += 1;
        }
    }
    let mut next: HashMap<u32, Vec<u32>> = HashMap::new();
    let mut directed: Vec<(u32, u32)> = count.values().filter(|(_, _, c)| *c == 1).map(|&(a, b, _)| (a, b)).collect();
    directed.sort_unstable();
    for &(a, b) in &directed {
        next.entry(a).or_default().push(b);
    }
    let mut used: HashSet<(u32, u32)> = HashSet::new();
    let mut loops = Vec::new();
    for &(a, b) in &directed {
        if used.contains(&(a, b)) {
            continue;
        }
        let mut chain = vec![a];
        let (mut u, mut v) = (a, b);
        loop {
            used.insert((u, v));
            chain.push(v);
            if v == a {
                break;
            }
            let Some(w) = next.get(&v).and_then(|l| l.iter().copied().find(|&w| !used.contains(&(v, w)))) else { break };
            u = v;
            v = w;
        }
        let _ = u;
        loops.push(chain);
    }
    loops
}

/// Per-pixel nearest camera depth of the mesh.
#[derive(Debug, Clone)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

/// Rasterises `mesh` seen from world-from-camera `pose`.
pub fn render_depth(mesh: &WorldMesh, pose: &PoseSE3, k: &CameraIntrinsics) -> DepthBuffer {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut depth = vec![f64::INFINITY; w * h];
    let inv = pose.inverse();
    let cam: Vec<Vec3> = mesh.vertices.iter().map(|v| inv.transform_point(v)).collect();
    for t in &mesh.triangles {
        let p = t.map(|i| cam[i as usize]);
        if p.iter().any(|q| q.z <= 1e-9) {
            continue;
        }
        let s = p.map(|q| (k.f * q.x / q.z + k.cx, k.f * q.y / q.z + k.cy));
        let area = (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[2].0 - s[0].0) * (s[1].1 - s[0].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let x0 = s.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let x1 = s.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
        let y0 = s.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let y1 = s.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let (px, py) = (x as f64, y as f64);
                let e = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (px - a.0) * (b.1 - a.1);
                let l0 = e(s[1], s[2]) / area;
                let l1 = e(s[2], s[0]) / area;
                let l2 = 1.0 - l0 - l1;
                if l0 < -1e-9 || l1 < -1e-9 || l2 < -1e-9 {
                    continue;
                }
                let z = 1.0 / (l0 / p[0].z + l1 / p[1].z + l2 / p[2].z);
                let slot = &mut depth[y * w + x];
                if z < *slot {
                    *slot = z;
                }
            }
        }
    }
    DepthBuffer { width: w, height: h, depth }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayKind {
    Measure,
    Highlight,
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayPolyline {
    pub id: u64,
    pub kind: OverlayKind,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayText {
    pub id: u64,
    pub pixel: [f64; 2],
    pub text: String,
}

/// 2D primitives for one frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DrawList {
    pub polylines: Vec<OverlayPolyline>,
    pub texts: Vec<OverlayText>,
    /// Closed highlight boundaries that are fully visible.
    pub polygons: Vec<OverlayPolyline>,
}

/// Relative depth slack of the occlusion test.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

struct Projector<'a> {
    inv: PoseSE3,
    k: &'a CameraIntrinsics,
    depth: &'a DepthBuffer,
}

impl Projector<'_> {
    /// Pixel of `p` when it is in view and not behind the mesh.
    fn visible(&self, p: &Vec3) -> Option<[f64; 2]> {
        let q = self.inv.transform_point(p);
        let uv = self.k.project(&q).ok()?;
        if !self.k.contains(&uv) {
            return None;
        }
        let (x, y) = (uv.x.round() as usize, uv.y.round() as usize);
        let zb = self.depth.depth[y.min(self.depth.height - 1) * self.depth.width + x.min(self.depth.width - 1)];
        (q.z <= zb * (1.0 + OCCLUSION_TOLERANCE)).then_some([uv.x, uv.y])
    }

    fn runs(&self, pts: &[Vec3]) -> Vec<Vec<[f64; 2]>> {
        let mut out = Vec::new();
        let mut cur: Vec<[f64; 2]> = Vec::new();
        for p in pts {
            match self.visible(p) {
                Some(px) => cur.push(px),
                None => {
                    if cur.len() >= 2 {
                        out.push(std::mem::take(&mut cur));
                    }
                    cur.clear();
                }
            }
        }
        if cur.len() >= 2 {
            out.push(cur);
        }
        out
    }
}

/// Projects annotations, measurement paths and highlight boundaries into the
/// image of world-from-camera `pose`, dropping parts hidden by the mesh.
pub fn reproject_overlay(
    mesh: &WorldMesh,
    annotations: &[Annotation],
    paths: &[(u64, MeasurePath)],
    highlights: &[(u64, HighlightRegion)],
    pose: &PoseSE3,
    k: &CameraIntrinsics,
) -> DrawList {
    let depth = render_depth(mesh, pose, k);
    let pr = Projector { inv: pose.inverse(), k, depth: &depth };
    let mut out = DrawList::default();
    for a in annotations {
        if let Some(px) = pr.visible(&a.anchor.position) {
            out.texts.push(OverlayText { id: a.id, pixel: px, text: a.text.clone() });
        }
    }
    for (id, p) in paths {
        for points in pr.runs(&p.polyline) {
            out.polylines.push(OverlayPolyline { id: *id, kind: OverlayKind::Measure, points });
        }
    }
    for (id, h) in highlights {
        for chain in region_boundary(mesh, &h.faces) {
            let pts: Vec<Vec3> = chain.iter().map(|&v| mesh.vertices[v as usize]).collect();
            let runs = pr.runs(&pts);
            if runs.len() == 1 && runs[0].len() == pts.len() {
                out.polygons.push(OverlayPolyline { id: *id, kind: OverlayKind::Highlight, points: runs.into_iter().next().unwrap() });
            } else {
                for points in runs {
                    out.polylines.push(OverlayPolyline { id: *id, kind: OverlayKind::Highlight, points });
                }
            }
        }
    }
    out
}

/// Persistent interaction records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Label(Annotation),
    Measure { id: u64, mesh_version: u64, a: SurfacePoint, b: SurfacePoint, length_mm: String },
    Highlight { id: u64, mesh_version: u64, seed: SurfacePoint, radius: f64, area: f64, faces: usize },
}

impl Record {
    pub fn id(&self) -> u64 {
        match self {
            Record::Label(a) => a.id,
            Record::Measure { id, .. } | Record::Highlight { id, .. } => *id,
        }
    }
}

/// Ordered annotation store with a plain-text file format, one record per
/// line, whitespace separated:
///
/// ```text
/// label     id version face b0 b1 b2 x y z nx ny nz tx ty tz kind text...
/// measure   id version faceA a0 a1 a2 ax ay az faceB b0 b1 b2 bx by bz length_mm
/// highlight id version face b0 b1 b2 x y z radius_m area_m2 face_count
/// ```
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationStore {
    pub records: Vec<Record>,
    next_id: u64,
}

fn write_point(s: &mut String, p: &SurfacePoint) {
    let _ = write!(s, " {} {} {} {} {} {} {}", p.face, p.bary[0], p.bary[1], p.bary[2], p.position.x, p.position.y, p.position.z);
}

impl AnnotationStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `record` under a fresh id and returns the id.
    pub fn add(&mut self, mut record: Record) -> u64 {
        self.next_id += 1;
        let id = self.next_id;
        match &mut record {
            Record::Label(a) => a.id = id,
            Record::Measure { id: i, .. } | Record::Highlight { id: i, .. } => *i = id,
        }
        self.records.push(record);
        id
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            match r {
                Record::Label(a) => {
                    let _ = write!(s, "label {} {}", a.id, a.mesh_version);
                    write_point(&mut s, &a.anchor);
                    let (n, t) = (a.orientation.normal, a.orientation.tangent);
                    let kind = match a.kind {
                        AnnotationKind::Label => "label",
                        AnnotationKind::Plane => "plane",
                    };
                    let _ = writeln!(s, " {} {} {} {} {} {} {} {}", n.x, n.y, n.z, t.x, t.y, t.z, kind, a.text.replace('\n', " "));
                }
                Record::Measure { id, mesh_version, a, b, length_mm } => {
                    let _ = write!(s, "measure {id} {mesh_version}");
                    write_point(&mut s, a);
                    write_point(&mut s, b);
                    let _ = writeln!(s, " {length_mm}");
                }
                Record::Highlight { id, mesh_version, seed, radius, area, faces } => {
                    let _ = write!(s, "highlight {id} {mesh_version}");
                    write_point(&mut s, seed);
                    let _ = writeln!(s, " {radius} {area} {faces}");
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, InteractError> {
        let mut store = Self::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| InteractError::Parse(ln + 1, m.to_string());
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64, InteractError> { tok.get(i).ok_or_else(|| err("missing field"))?.parse().map_err(|_| err("bad number")) };
            let int = |i: usize| -> Result<u64, InteractError> { tok.get(i).ok_or_else(|| err("missing field"))?.parse().map_err(|_| err("bad integer")) };
            let point = |i: usize| -> Result<SurfacePoint, InteractError> {
                Ok(SurfacePoint {
                    face: int(i)? as u32,
                    bary: [num(i + 1)?, num(i + 2)?, num(i + 3)?],
                    position: Vec3::new(num(i + 4)?, num(i + 5)?, num(i + 6)?),
                })
            };
            let (id, mesh_version) = (int(1)?, int(2)?);
            let record = match tok[0] {
                "label" => {
                    let normal = Vec3::new(num(10)?, num(11)?, num(12)?);
                    let tangent = Vec3::new(num(13)?, num(14)?, num(15)?);
                    let kind = match tok.get(16) {
                        Some(&"label") => AnnotationKind::Label,
                        Some(&"plane") => AnnotationKind::Plane,
                        _ => return Err(err("bad annotation kind")),
                    };
                    let text = line.splitn(18, char::is_whitespace).nth(17).unwrap_or("").to_string();
                    Record::Label(Annotation {
                        id,
                        anchor: point(3)?,
                        orientation: Orientation { normal, tangent, bitangent: normal.cross(&tangent) },
                        kind,
                        text,
                        mesh_version,
                    })
                }
                "measure" => Record::Measure {
                    id,
                    mesh_version,
                    a: point(3)?,
                    b: point(10)?,
                    length_mm: tok.get(17).ok_or_else(|| err("missing length"))?.to_string(),
                },
                "highlight" => Record::Highlight { id, mesh_version, seed: point(3)?, radius: num(10)?, area: num(11)?, faces: int(12)? as usize },
                other => return Err(err(&format!("unknown record type {other}"))),
            };
            store.next_id = store.next_id.max(id);
            store.records.push(record);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), InteractError> {
        fs::write(path, self.to_text()).map_err(|e| InteractError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, InteractError> {
        let text = fs::read_to_string(path).map_err(|e| InteractError::Io(e.to_string()))?;
        Self::from_text(&text)
    }
}

/// Test and demo meshes.
pub mod shapes {
    use super::*;
    use crate::fusion::vertex_normals;

    fn finish(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> WorldMesh {
        let normals = vertex_normals(&vertices, &triangles);
        let n = vertices.len();
        WorldMesh {
            vertex_viewpoint: vertices.iter().zip(&normals).map(|(v, n)| v + n).collect(),
            vertex_keyframe: vec![0; n],
            occupied: Default::default(),
            voxel_size: 0.002,
            version: 1,
            vertices,
            normals,
            triangles,
        }
    }

    /// `n × n` quads of side `step` in the z = 0 plane, normals +z.
    pub fn flat_grid(n: usize, step: f64) -> WorldMesh {
        let mut v = Vec::new();
        for y in 0..=n {
            for x in 0..=n {
                v.push(Vec3::new(x as f64 * step, y as f64 * step, 0.0));
            }
        }
        let id = |x: usize, y: usize| (y * (n + 1) + x) as u32;
        let mut t = Vec::new();
        for y in 0..n {
            for x in 0..n {
                t.push([id(x, y), id(x + 1, y), id(x, y + 1)]);
                t.push([id(x + 1, y), id(x + 1, y + 1), id(x, y + 1)]);
            }
        }
        finish(v, t)
    }

    /// Icosphere of radius `r` after `level` subdivisions, outward normals.
    /// With `upper_only`, only faces with centroid z ≥ 0 are kept.
    pub fn icosphere(r: f64, level: usize, upper_only: bool) -> WorldMesh {
        let g = (1.0 + 5f64.sqrt()) / 2.0;
        let mut v: Vec<Vec3> = [
            (-1.0, g, 0.0),
            (1.0, g, 0.0),
            (-1.0, -g, 0.0),
            (1.0, -g, 0.0),
            (0.0, -1.0, g),
            (0.0, 1.0, g),
            (0.0, -1.0, -g),
            (0.0, 1.0, -g),
            (g, 0.0, -1.0),
            (g, 0.0, 1.0),
            (-g, 0.0, -1.0),
            (-g, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        // Put a vertex on the +z pole.
        let rot = nalgebra::Rotation3::rotation_between(&v[5], &Vec3::z()).unwrap();
        for p in v.iter_mut() {
            *p = rot * *p;
        }
        let mut t: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..level {
            let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
            let mut next = Vec::with_capacity(t.len() * 4);
            let mut m = |a: u32, b: u32, v: &mut Vec<Vec3>| {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    v.push(((v[a as usize] + v[b as usize]) * 0.5).normalize());
                    v.len() as u32 - 1
                })
            };
            for [a, b, c] in t {
                let ab = m(a, b, &mut v);
                let bc = m(b, c, &mut v);
                let ca = m(c, a, &mut v);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            t = next;
        }
        // Outward winding.
        for tri in t.iter_mut() {
            let [a, b, c] = tri.map(|i| v[i as usize]);
            if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
                tri.swap(1, 2);
            }
        }
        if upper_only {
            t.retain(|tri| tri.iter().map(|&i| v[i as usize].z).sum::<f64>() >= 0.0);
            let mut remap = vec![u32::MAX; v.len()];
            let mut kept = Vec::new();
            for tri in t.iter_mut() {
                for i in tri.iter_mut() {
                    if remap[*i as usize] == u32::MAX {
                        remap[*i as usize] = kept.len() as u32;
                        kept.push(v[*i as usize]);
                    }
                    *i = remap[*i as usize];
                }
            }
            v = kept;
        }
        finish(v.into_iter().map(|p| p * r).collect(), t)
    }
}
