use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use geoar::interact::shapes::icosphere;
use geoar::interact::{GeodesicParams, MeshIndex, SurfacePoint};
use geoar::pipeline::Published;
use geoar::serve::{Client, MeshSource, Server, Session};
use geoar::synth::default_rig;
use serde_json::json;

#[test]
fn concurrent_measures_against_a_changing_mesh() {
    // Versions differ in radius, so each length identifies its snapshot.
    let versions: Vec<_> = (1..=4u64)
        .map(|v| {
            let mut m = icosphere(0.02 + 0.002 * v as f64, 3, true);
            m.version = v;
            Arc::new(m)
        })
        .collect();
    let (a, b) = ((5u32, [0.2, 0.3, 0.5]), (300u32, [0.6, 0.2, 0.2]));
    let expected: BTreeMap<u64, f64> = versions
        .iter()
        .map(|m| {
            let ix = MeshIndex::new(m.clone(), GeodesicParams::default());
            let (pa, pb) = (SurfacePoint::new(&ix.mesh, a.0, a.1).unwrap(), SurfacePoint::new(&ix.mesh, b.0, b.1).unwrap());
            (m.version, ix.measure_geodesic(&pa, &pb).unwrap().length)
        })
        .collect();

    let slot = Arc::new(Published::new((*versions[0]).clone()));
    let session = Arc::new(Session::new(MeshSource::Live(slot.clone()), default_rig(), GeodesicParams::default()));
    let server = Server::start(session, "127.0.0.1:0").unwrap();
    let addr = server.addr;
    let done = Arc::new(AtomicBool::new(false));
    let publisher = {
        let (done, slot, versions) = (done.clone(), slot.clone(), versions.clone());
        std::thread::spawn(move || {
            let mut i = 0;
            while !done.load(Ordering::Relaxed) {
                i = (i + 1) % versions.len();
                slot.store(versions[i].clone());
                std::thread::sleep(std::time::Duration::from_millis(2));
            }
        })
    };
    let req = json!({"type": "measure", "point_a": {"face": a.0, "bary": a.1}, "point_b": {"face": b.0, "bary": b.1}});
    let workers: Vec<_> = (0..100)
        .map(|_| {
            let req = req.clone();
            std::thread::spawn(move || {
                let mut c = Client::connect(addr).unwrap();
                c.call(req).unwrap()
            })
        })
        .collect();
    let responses: Vec<_> = workers.into_iter().map(|w| w.join().unwrap()).collect();
    done.store(true, Ordering::Relaxed);
    publisher.join().unwrap();
    server.shutdown();

    let mut seen = BTreeMap::new();
    for r in &responses {
        assert_eq!(r["ok"], true, "{r}");
        let v = r["mesh_version"].as_u64().unwrap();
        let len = r["length_m"].as_f64().unwrap();
        assert!((len - expected[&v]).abs() < 1e-9, "version {v}: {len} vs {}", expected[&v]);
        *seen.entry(v).or_insert(0) += 1;
    }
    assert_eq!(responses.len(), 100);
    println!("responses per mesh version: {seen:?}");
}
