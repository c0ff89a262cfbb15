//! Session service: newline-delimited JSON requests over TCP, answered from
//! the current mesh snapshot. See PROTOCOL.md for the message reference.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use base64::Engine;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::fusion::WorldMesh;
use crate::geometry::{PoseSE3, StereoRig, Vec3};
use crate::interact::{
    format_length_mm, region_boundary, reproject_overlay, Annotation, AnnotationKind, AnnotationStore, GeodesicParams, HighlightRegion,
    InteractError, MeasurePath, MeshIndex, Ray, Record, SurfacePoint,
};
use crate::pipeline::{files, DirSource, FrameSource, Published, SessionInfo};
use crate::tum;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum ServeError {
    #[error("cannot listen on {0}: {1}")]
    Bind(String, io::Error),
    #[error("session error: {0}")]
    Session(String),
}

/// Where the service gets its mesh.
#[derive(Clone)]
pub enum MeshSource {
    /// A finished reconstruction.
    Fixed(Arc<WorldMesh>),
    /// Versions published by a running pipeline.
    Live(Arc<Published<WorldMesh>>),
}

impl MeshSource {
    fn current(&self) -> Arc<WorldMesh> {
        match self {
            MeshSource::Fixed(m) => m.clone(),
            MeshSource::Live(p) => p.load(),
        }
    }
}

/// State shared by all connections.
pub struct Session {
    mesh: MeshSource,
    params: GeodesicParams,
    index: Mutex<Option<Arc<MeshIndex>>>,
    rig: StereoRig,
    frames: Option<Arc<dyn FrameSource>>,
    poses: Vec<PoseSE3>,
    store: Mutex<AnnotationStore>,
    store_path: Option<PathBuf>,
}

impl Session {
    pub fn new(mesh: MeshSource, rig: StereoRig, params: GeodesicParams) -> Self {
        Self {
            mesh,
            params,
            index: Mutex::new(None),
            rig,
            frames: None,
            poses: Vec::new(),
            store: Mutex::new(AnnotationStore::new()),
            store_path: None,
        }
    }

    pub fn with_frames(mut self, frames: Arc<dyn FrameSource>) -> Self {
        self.frames = Some(frames);
        self
    }

    /// Per-frame world-from-camera poses, used for overlays.
    pub fn with_poses(mut self, poses: Vec<PoseSE3>) -> Self {
        self.poses = poses;
        self
    }

    /// Loads existing annotations from `path` and saves every change there.
    pub fn with_store(mut self, path: PathBuf) -> Result<Self, ServeError> {
        if path.exists() {
            *self.store.get_mut().expect("store lock") = AnnotationStore::load(&path).map_err(|e| ServeError::Session(e.to_string()))?;
        }
        self.store_path = Some(path);
        Ok(self)
    }

    /// Opens the outputs of a finished run.
    pub fn open_outputs(dir: &Path, params: GeodesicParams) -> Result<Self, ServeError> {
        let err = |e: String| ServeError::Session(e);
        let info: SessionInfo = serde_json::from_str(&std::fs::read_to_string(dir.join(files::SESSION)).map_err(|e| err(format!("{}: {e}", dir.join(files::SESSION).display())))?)
            .map_err(|e| err(e.to_string()))?;
        let rig = StereoRig::parse_calibration(&info.calibration).map_err(|e| err(e.to_string()))?;
        let mesh = WorldMesh::load_ply(dir.join(files::MESH_PLY), info.voxel_size).map_err(|e| err(e.to_string()))?;
        let mut mesh = mesh;
        mesh.version = info.mesh_version;
        let poses = tum::load_trajectory(dir.join(files::TRAJECTORY)).map_err(|e| err(e.to_string()))?.into_iter().map(|p| p.pose).collect();
        let mut session = Session::new(MeshSource::Fixed(Arc::new(mesh)), rig, params).with_poses(poses);
        match DirSource::open(&info.input_dir, 30.0) {
            Ok(src) => session = session.with_frames(Arc::new(src)),
            Err(e) => warn!("frames unavailable: {e}"),
        }
        session.with_store(dir.join(files::ANNOTATIONS))
    }

    /// Query structures for the current mesh version.
    pub fn index(&self) -> Arc<MeshIndex> {
        let mesh = self.mesh.current();
        let mut slot = self.index.lock().expect("index lock");
        match &*slot {
            Some(ix) if Arc::ptr_eq(&ix.mesh, &mesh) => ix.clone(),
            _ => {
                let ix = Arc::new(MeshIndex::new(mesh, self.params));
                *slot = Some(ix.clone());
                ix
            }
        }
    }

    fn store_record(&self, record: Record) -> Result<u64, ReqError> {
        let mut store = self.store.lock().expect("store lock");
        let id = store.add(record);
        if let Some(path) = &self.store_path {
            store.save(path).map_err(|e| ReqError::new("io", e.to_string()))?;
        }
        Ok(id)
    }
}

/// A surface point as sent by clients; the position is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMsg {
    pub face: u32,
    pub bary: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayMsg {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    #[default]
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Hello,
    GetMesh,
    GetFrame {
        n: usize,
        #[serde(default)]
        side: Side,
    },
    Pick {
        ray: RayMsg,
    },
    Measure {
        point_a: PointMsg,
        point_b: PointMsg,
    },
    Highlight {
        seed: PointMsg,
        radius: f64,
    },
    Label {
        point: PointMsg,
        text: String,
        #[serde(default)]
        kind: Option<AnnotationKind>,
    },
    ListAnnotations,
    Overlay {
        n: usize,
    },
}

#[derive(Debug)]
struct ReqError {
    code: &'static str,
    message: String,
}

impl ReqError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<InteractError> for ReqError {
    fn from(e: InteractError) -> Self {
        let code = match e {
            InteractError::NoPath => "no_path",
            InteractError::BadFace(_) | InteractError::BadBarycentric(_) => "invalid_point",
            InteractError::BadRadius(_) => "invalid_radius",
            _ => "internal",
        };
        Self::new(code, e.to_string())
    }
}

fn point(ix: &MeshIndex, p: &PointMsg) -> Result<SurfacePoint, ReqError> {
    Ok(SurfacePoint::new(&ix.mesh, p.face, p.bary)?)
}

fn measure_json(m: &MeasurePath, id: u64) -> Value {
    json!({
        "record_id": id,
        "length_m": m.length,
        "length_mm": format_length_mm(m.length),
        "polyline": m.polyline.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>(),
        "point_a": m.a,
        "point_b": m.b,
    })
}

fn highlight_json(ix: &MeshIndex, h: &HighlightRegion, id: u64) -> Value {
    let loops: Vec<Vec<[f64; 3]>> = region_boundary(&ix.mesh, &h.faces)
        .iter()
        .map(|l| l.iter().map(|&v| ix.mesh.vertices[v as usize]).map(|p| [p.x, p.y, p.z]).collect())
        .collect();
    json!({ "record_id": id, "seed": h.seed, "radius": h.radius, "faces": h.faces, "area_m2": h.area, "boundary": loops })
}

fn dispatch(session: &Session, ix: &MeshIndex, req: Request) -> Result<Value, ReqError> {
    let version = ix.version();
    Ok(match req {
        Request::Hello => {
            let k = session.rig.intrinsics;
            json!({
                "protocol_version": PROTOCOL_VERSION,
                "calibration": {
                    "f": k.f, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height,
                    "baseline": session.rig.baseline, "d_min": session.rig.d_min, "d_max": session.rig.d_max,
                },
                "frames": session.frames.as_ref().map_or(0, |f| f.len()),
                "vertices": ix.mesh.vertices.len(),
                "triangles": ix.mesh.triangles.len(),
            })
        }
        Request::GetMesh => {
            let mut buf = Vec::new();
            ix.mesh.write_ply(&mut buf).map_err(|e| ReqError::new("internal", e.to_string()))?;
            json!({ "format": "ply", "encoding": "utf8", "payload": String::from_utf8_lossy(&buf) })
        }
        Request::GetFrame { n, side } => {
            let frames = session.frames.as_ref().ok_or_else(|| ReqError::new("unavailable", "no frames in this session"))?;
            if n >= frames.len() {
                return Err(ReqError::new("out_of_range", format!("frame {n} of {}", frames.len())));
            }
            let f = frames.frame(n).map_err(|e| ReqError::new("io", e.to_string()))?;
            let img = match side {
                Side::Left => f.left,
                Side::Right => f.right,
            };
            let mut png = Vec::new();
            img.write_to(&mut io::Cursor::new(&mut png), image::ImageFormat::Png).map_err(|e| ReqError::new("internal", e.to_string()))?;
            json!({
                "n": n, "side": side, "timestamp": f.timestamp, "width": img.width(), "height": img.height(),
                "format": "png", "encoding": "base64", "payload": base64::engine::general_purpose::STANDARD.encode(&png),
            })
        }
        Request::Pick { ray } => {
            let dir = Vec3::from(ray.dir);
            let dir = dir.try_normalize(1e-300).ok_or_else(|| ReqError::new("bad_request", "ray direction is zero"))?;
            match ix.pick(&Ray { origin: Vec3::from(ray.origin), dir }) {
                Some(p) => json!({ "hit": true, "point": p }),
                None => json!({ "hit": false }),
            }
        }
        Request::Measure { point_a, point_b } => {
            let (a, b) = (point(ix, &point_a)?, point(ix, &point_b)?);
            let m = ix.measure_geodesic(&a, &b)?;
            let id = session.store_record(Record::Measure { id: 0, mesh_version: version, a, b, length_mm: format_length_mm(m.length) })?;
            measure_json(&m, id)
        }
        Request::Highlight { seed, radius } => {
            let s = point(ix, &seed)?;
            let h = ix.highlight(&s, radius)?;
            let id = session.store_record(Record::Highlight { id: 0, mesh_version: version, seed: s, radius, area: h.area, faces: h.faces.len() })?;
            highlight_json(ix, &h, id)
        }
        Request::Label { point: p, text, kind } => {
            let sp = point(ix, &p)?;
            let mut a: Annotation = ix.place_label(&sp, &text);
            a.kind = kind.unwrap_or(AnnotationKind::Label);
            a.id = session.store_record(Record::Label(a.clone()))?;
            json!({ "annotation": a })
        }
        Request::ListAnnotations => {
            let store = session.store.lock().expect("store lock");
            json!({ "annotations": store.records })
        }
        Request::Overlay { n } => {
            let pose = session.poses.get(n).ok_or_else(|| ReqError::new("out_of_range", format!("no pose for frame {n}")))?;
            let store = session.store.lock().expect("store lock").clone();
            let labels: Vec<Annotation> = store
                .records
                .iter()
                .filter_map(|r| match r {
                    Record::Label(a) => Some(a.clone()),
                    _ => None,
                })
                .collect();
            let mut paths = Vec::new();
            let mut regions = Vec::new();
            for r in &store.records {
                match r {
                    Record::Measure { id, a, b, .. } if a.face < ix.mesh.triangles.len() as u32 && b.face < ix.mesh.triangles.len() as u32 => {
                        if let Ok(m) = ix.measure_geodesic(a, b) {
                            paths.push((*id, m));
                        }
                    }
                    Record::Highlight { id, seed, radius, .. } if seed.face < ix.mesh.triangles.len() as u32 => {
                        if let Ok(h) = ix.highlight(seed, *radius) {
                            regions.push((*id, h));
                        }
                    }
                    _ => {}
                }
            }
            json!({ "n": n, "draw": reproject_overlay(&ix.mesh, &labels, &paths, &regions, pose, &session.rig.intrinsics) })
        }
    })
}

fn type_of(v: &Value) -> Value {
    v.get("type").cloned().unwrap_or(Value::Null)
}

/// Answers one request line. Never fails: problems become error responses.
pub fn handle_line(session: &Session, line: &str) -> Value {
    let ix = session.index();
    let version = ix.version();
    let parsed: Result<Value, _> = serde_json::from_str(line);
    let (id, kind, result) = match parsed {
        Err(e) => (Value::Null, Value::Null, Err(ReqError::new("malformed", e.to_string()))),
        Ok(v) => {
            let id = v.get("id").cloned().unwrap_or(Value::Null);
            let kind = type_of(&v);
            let result = serde_json::from_value::<Request>(v).map_err(|e| ReqError::new("bad_request", e.to_string())).and_then(|r| dispatch(session, &ix, r));
            (id, kind, result)
        }
    };
    let mut resp = match result {
        Ok(Value::Object(body)) => {
            let mut m = body;
            m.insert("ok".into(), Value::Bool(true));
            Value::Object(m)
        }
        Ok(other) => json!({ "ok": true, "result": other }),
        Err(e) => json!({ "ok": false, "error": { "code": e.code, "message": e.message } }),
    };
    resp["id"] = id;
    resp["type"] = kind;
    resp["mesh_version"] = json!(version);
    resp
}

fn serve_connection(session: Arc<Session>, stream: TcpStream) -> io::Result<()> {
    let peer = stream.peer_addr().ok();
    let mut out = io::BufWriter::new(stream.try_clone()?);
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(&session, &line);
        serde_json::to_writer(&mut out, &resp)?;
        out.write_all(b"\n")?;
        out.flush()?;
    }
    info!("connection {peer:?} closed");
    Ok(())
}

/// A running service.
pub struct Server {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds `addr` and serves each connection on its own thread.
    pub fn start(session: Arc<Session>, addr: impl ToSocketAddrs + std::fmt::Debug) -> Result<Self, ServeError> {
        let name = format!("{addr:?}");
        let listener = TcpListener::bind(addr).map_err(|e| ServeError::Bind(name.clone(), e))?;
        let local = listener.local_addr().map_err(|e| ServeError::Bind(name, e))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::Relaxed) {
                    break;
                }
                match stream {
                    Ok(s) => {
                        let session = session.clone();
                        std::thread::spawn(move || {
                            if let Err(e) = serve_connection(session, s) {
                                warn!("connection error: {e}");
                            }
                        });
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        });
        info!("serving protocol version {PROTOCOL_VERSION} on {local}");
        Ok(Self { addr: local, stop, handle: Some(handle) })
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Blocking line-oriented client, used by tests and `geoar measure`.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> io::Result<Self> {
        let s = TcpStream::connect(addr)?;
        Ok(Self { reader: BufReader::new(s.try_clone()?), writer: s, next_id: 0 })
    }

    /// Sends `request` (an object) with a fresh id and returns the response.
    pub fn call(&mut self, mut request: Value) -> io::Result<Value> {
        self.next_id += 1;
        request["id"] = json!(self.next_id);
        self.send_raw(&request.to_string())
    }

    pub fn send_raw(&mut self, line: &str) -> io::Result<Value> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut resp = String::new();
        if self.reader.read_line(&mut resp)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"));
        }
        serde_json::from_str(&resp).map_err(io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interact::shapes::{flat_grid, icosphere};
    use crate::synth::default_rig;

    fn session(mesh: WorldMesh) -> Session {
        Session::new(MeshSource::Fixed(Arc::new(mesh)), default_rig(), GeodesicParams::default())
    }

    #[test]
    fn hello_and_errors() {
        let s = session(flat_grid(4, 0.01));
        let r = handle_line(&s, r#"{"id": 7, "type": "hello"}"#);
        assert_eq!(r["ok"], true);
        assert_eq!(r["id"], 7);
        assert_eq!(r["protocol_version"], 1);
        assert_eq!(r["mesh_version"], 1);
        assert_eq!(r["calibration"]["width"], 840);
        let r = handle_line(&s, "{not json");
        assert_eq!((r["ok"].clone(), r["error"]["code"].clone()), (json!(false), json!("malformed")));
        assert_eq!(r["mesh_version"], 1);
        let r = handle_line(&s, r#"{"type": "teleport"}"#);
        assert_eq!(r["error"]["code"], "bad_request");
        let r = handle_line(&s, r#"{"type": "measure", "point_a": {"face": 999, "bary": [1,0,0]}, "point_b": {"face": 0, "bary": [1,0,0]}}"#);
        assert_eq!(r["error"]["code"], "invalid_point");
        let r = handle_line(&s, r#"{"type": "get_frame", "n": 0}"#);
        assert_eq!(r["error"]["code"], "unavailable");
    }

    #[test]
    fn pick_hit_and_miss() {
        let s = session(flat_grid(4, 0.01));
        let r = handle_line(&s, r#"{"type": "pick", "ray": {"origin": [0.015, 0.012, -1], "dir": [0, 0, 2]}}"#);
        assert_eq!(r["hit"], true);
        let p: SurfacePoint = serde_json::from_value(r["point"].clone()).unwrap();
        assert!((p.position - Vec3::new(0.015, 0.012, 0.0)).norm() < 1e-12);
        let r = handle_line(&s, r#"{"type": "pick", "ray": {"origin": [1, 1, -1], "dir": [0, 0, 1]}}"#);
        assert_eq!((r["ok"].clone(), r["hit"].clone()), (json!(true), json!(false)));
    }

    #[test]
    fn measure_matches_library_and_is_stored() {
        let s = session(icosphere(0.02, 3, true));
        let ix = s.index();
        let (a, b) = (SurfacePoint::new(&ix.mesh, 3, [0.2, 0.3, 0.5]).unwrap(), SurfacePoint::new(&ix.mesh, 200, [0.6, 0.2, 0.2]).unwrap());
        let req = json!({"type": "measure", "point_a": {"face": 3, "bary": [0.2, 0.3, 0.5]}, "point_b": {"face": 200, "bary": [0.6, 0.2, 0.2]}});
        let r = handle_line(&s, &req.to_string());
        let direct = ix.measure_geodesic(&a, &b).unwrap().length;
        assert!((r["length_m"].as_f64().unwrap() - direct).abs() < 1e-9);
        assert_eq!(r["length_mm"], format_length_mm(direct));
        handle_line(&s, r#"{"type": "label", "point": {"face": 3, "bary": [0.2, 0.3, 0.5]}, "text": "x"}"#);
        let h = handle_line(&s, r#"{"type": "highlight", "seed": {"face": 3, "bary": [0.2, 0.3, 0.5]}, "radius": 0.004}"#);
        assert!(h["area_m2"].as_f64().unwrap() > 0.0);
        let list = handle_line(&s, r#"{"type": "list_annotations"}"#);
        let recs = list["annotations"].as_array().unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0]["type"], "measure");
        assert_eq!(recs[1]["type"], "label");
    }

    #[test]
    fn live_versions_are_reported() {
        let slot = Arc::new(Published::new(flat_grid(2, 0.01)));
        let s = Session::new(MeshSource::Live(slot.clone()), default_rig(), GeodesicParams::default());
        assert_eq!(handle_line(&s, r#"{"type": "hello"}"#)["mesh_version"], 1);
        let mut next = flat_grid(3, 0.01);
        next.version = 2;
        slot.store(Arc::new(next));
        let r = handle_line(&s, r#"{"type": "hello"}"#);
        assert_eq!((r["mesh_version"].clone(), r["triangles"].clone()), (json!(2), json!(18)));
    }

    #[test]
    fn tcp_round_trip_and_busy_port() {
        let s = Arc::new(session(flat_grid(4, 0.01)));
        let server = Server::start(s.clone(), "127.0.0.1:0").unwrap();
        assert!(matches!(Server::start(s, server.addr), Err(ServeError::Bind(..))));
        let mut c = Client::connect(server.addr).unwrap();
        let r = c.call(json!({"type": "get_mesh"})).unwrap();
        let mesh = WorldMesh::read_ply(io::Cursor::new(r["payload"].as_str().unwrap().as_bytes()), 0.002).unwrap();
        assert_eq!(mesh.triangles.len(), 32);
        let bad = c.send_raw("garbage").unwrap();
        assert_eq!(bad["ok"], false);
        let again = c.call(json!({"type": "hello"})).unwrap();
        assert_eq!(again["ok"], true);
        server.shutdown();
    }
}
