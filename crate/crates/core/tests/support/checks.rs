//! End-to-end property checks, sized by the caller. Each returns a one-line
//! summary on success or the first counterexample on failure.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

use ldm_core::config::{LdmConfig, Ttl};
use ldm_core::feed;
use ldm_core::geo::{enu_to_wgs84, haversine_m, wgs84_to_enu, wgs84_to_enu_unchecked, EnuPoint};
use ldm_core::ingest::cpm::{object_name, station_name, STATION_TYPE};
use ldm_core::ingest::{cpm_to_openlabel, CpmMessage, ObjectClass, PerceivedObject};
use ldm_core::map::{map_match_with, parse_osm, MapWarning, MatchParams, RoadGraph, RoadWay};
use ldm_core::model::{
    ElementId, ElementKind, FrameRecord, GeoPoint, GeoPose, LdmLayer, Relation, SceneElement, TimeInterval, Timestamp,
};
use ldm_core::par::Execution;
use ldm_core::query::{Ldm, LdmError, DEFAULT_STATIONARY_EPS_MPS, DEFAULT_STATIONARY_WINDOW};
use ldm_core::store::GraphStore;

use super::gen::{self, random_cpm, random_road_graph, random_scene, SceneParams};
use super::oracle::{self, Match};
use super::{committed, compare_roundtrip};

pub type Outcome = Result<String, String>;

fn export_all(ldm: &Ldm) -> Vec<u8> {
    let mut out = Vec::new();
    ldm.export(TimeInterval::all(), &mut out).expect("export to memory");
    out
}

pub fn roundtrip(scenes: usize, seed: u64) -> Outcome {
    let mut r = gen::rng(seed);
    let params = SceneParams {
        max_frames_per_object: 200,
        ..SceneParams::default()
    };
    let mut frames = 0;
    for i in 0..scenes {
        let scene = random_scene(&mut r, &params);
        let ldm = committed(&scene);
        let doc = String::from_utf8(export_all(&ldm)).map_err(|e| e.to_string())?;
        compare_roundtrip(&scene, &doc).map_err(|e| format!("scene {i}: {e}"))?;
        frames += scene.frame_count();
    }
    Ok(format!("{scenes} scenes, {frames} frames reproduced"))
}

pub fn cpm_conversion(messages: usize, seed: u64) -> Outcome {
    let mut r = gen::rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..messages {
        let m = random_cpm(&mut r);
        let p = cpm_to_openlabel(&m).map_err(|e| format!("message {i}: {e}"))?;
        if p.elements.len() != m.perceived_objects.len() + 1 {
            return Err(format!("message {i}: {} elements for {} objects", p.elements.len(), m.perceived_objects.len()));
        }
        let ldm = Ldm::default();
        ldm.add_cpm(&m).map_err(|e| format!("message {i}: {e}"))?;
        let store = ldm.store();
        if store.element_count() != m.perceived_objects.len() + 1 {
            return Err(format!("message {i}: store holds {} elements", store.element_count()));
        }
        let reference = m.reference_position.position();
        for o in &m.perceived_objects {
            let name = object_name(m.station_id, o.object_id);
            let id = store
                .find(ElementKind::Object, &name, o.object_class.semantic_type())
                .ok_or_else(|| format!("message {i}: {name} missing"))?;
            let got = store.element(id).unwrap().latest_frame().and_then(|f| f.pose).ok_or("no pose")?;
            let want = oracle::enu_to_wgs84_dd(reference, o.x_distance as f64 / 100.0, o.y_distance as f64 / 100.0);
            let err = oracle::ground_error_m(got.position(), want, reference.lat);
            worst = worst.max(err);
            if !(err < 0.01) {
                return Err(format!("message {i}: {name} off by {err} m"));
            }
        }
        if store.find(ElementKind::Object, &station_name(m.station_id), STATION_TYPE).is_none() {
            return Err(format!("message {i}: station element missing"));
        }
    }
    Ok(format!("{messages} messages, worst position error {worst:.2e} m"))
}

fn ids(v: &[ldm_core::query::ObjectReport]) -> Vec<(ElementId, f64)> {
    v.iter()
        .map(|r| (r.element_id, r.distance_to_ego.or(r.distance_to_node).unwrap_or(f64::NAN)))
        .collect()
}

fn same<T: PartialEq + std::fmt::Debug>(what: &str, got: T, want: T) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: got {got:?}, want {want:?}"))
    }
}

/// Every geo-query and map_match against the brute-force oracle.
pub fn query_equivalence(scenes: usize, max_segments: usize, max_objects: usize, seed: u64, exec: Execution) -> Outcome {
    let mut r = gen::rng(seed);
    let mut checks = 0usize;
    let mut nonempty = 0usize;
    for s in 0..scenes {
        let origin = GeoPoint::new(r.gen_range(-60.0..60.0), r.gen_range(-170.0..170.0));
        let segments = r.gen_range(50..=max_segments);
        let (nodes, ways) = random_road_graph(&mut r, origin, segments);
        let table = oracle::node_table(&nodes);
        let anchors: Vec<EnuPoint> = nodes.iter().map(|n| wgs84_to_enu_unchecked(origin, n.position)).collect();
        let extent = anchors.iter().map(|a| a.east.abs().max(a.north.abs())).fold(100.0, f64::max);
        let params = SceneParams {
            max_objects,
            max_frames: 40,
            max_frames_per_object: 8,
            origin,
            extent_m: extent,
            poseless: 0.05,
            anchors,
        };
        let scene = random_scene(&mut r, &params);
        let ldm = committed(&scene).with_execution(exec);
        let g = RoadGraph::from_parts(nodes.clone(), ways.clone());
        ldm.load_map(&g).map_err(|e| e.to_string())?;
        let tracks = oracle::tracks(&scene, &ldm.store());
        let before = ldm.stats();
        let times = scene.timestamps();
        let mut ats: Vec<Timestamp> = (0..2).map(|_| *times.choose(&mut r).unwrap()).collect();
        ats.push(Timestamp(times[0].0 + r.gen_range(0..5_000_000)));
        let cache: RefCell<HashMap<(u64, u64), Option<Match>>> = RefCell::default();
        let mut matcher = |p: GeoPoint| {
            *cache
                .borrow_mut()
                .entry((p.lat.to_bits(), p.lon.to_bits()))
                .or_insert_with(|| oracle::map_match(&table, &ways, p))
        };
        let ctx = |what: &str, at: Timestamp| format!("scene {s} ({segments} segments) {what} at {}", at.0);
        for &at in &ats {
            for t in &tracks {
                let Some(pose) = oracle::pose_of(&tracks, t.id, at) else { continue };
                let got = map_match_with(&g, pose.position(), &MatchParams::default(), exec)
                    .map(|m| (m.way, m.segment, m.distance_m));
                let want = matcher(pose.position()).map(|m| (m.way, m.segment, m.distance_m));
                same(&ctx("map_match", at), got, want)?;
                checks += 1;
            }
            for _ in 0..3 {
                let ego = tracks.choose(&mut r).unwrap().id;
                let radius = r.gen_range(20.0..1_500.0);
                let want = oracle::objects_within(&tracks, ego, radius, at);
                match (ldm.objects_within(ego, radius, at), want) {
                    (Ok(got), Some(want)) => {
                        nonempty += usize::from(!want.is_empty());
                        same(&ctx("objects_within", at), ids(&got), want)?
                    }
                    (Err(LdmError::NoPose(_)), None) => {}
                    (got, want) => return Err(format!("{}: got {got:?}, want {want:?}", ctx("objects_within", at))),
                }
                let want = oracle::same_way(&tracks, &mut matcher, ego, at);
                match (ldm.objects_on_same_way(ego, at), want) {
                    (Ok(got), Some(want)) => {
                        let got: Vec<_> = got
                            .iter()
                            .map(|r| (r.element_id, r.distance_to_ego.unwrap(), r.matched_way.unwrap()))
                            .collect();
                        same(&ctx("objects_on_same_way", at), got, want)?
                    }
                    (Err(LdmError::NoPose(_)), None) => {}
                    (got, want) => return Err(format!("{}: got {got:?}, want {want:?}", ctx("same_way", at))),
                }
                let k = r.gen_range(0..=6);
                let want = oracle::pose_of(&tracks, ego, at).map(|p| oracle::next_road_nodes(&table, &ways, p, k));
                match (ldm.next_road_nodes(ego, k, at), want) {
                    (Ok(got), Some(Some(want))) => same(&ctx("next_road_nodes", at), got, want)?,
                    (Err(LdmError::Unmatched(_)), Some(None)) => {}
                    (Err(LdmError::NoPose(_)), None) => {}
                    (got, want) => return Err(format!("{}: got {got:?}, want {want:?}", ctx("next_road_nodes", at))),
                }
                let node = nodes.choose(&mut r).unwrap();
                let radius = r.gen_range(10.0..500.0);
                let got = ldm.objects_near_node(node.osm_id, radius, at).map_err(|e| e.to_string())?;
                same(&ctx("objects_near_node", at), ids(&got), oracle::objects_near(&tracks, node.position, radius, at))?;
                checks += 4;
            }
            for (window, eps) in [(DEFAULT_STATIONARY_WINDOW, DEFAULT_STATIONARY_EPS_MPS), (Duration::from_millis(700), 5.0)] {
                let got: Vec<_> = ldm
                    .stationary_objects(at, window, eps)
                    .map_err(|e| e.to_string())?
                    .iter()
                    .map(|r| r.element_id)
                    .collect();
                let want = oracle::stationary(&tracks, at, window.as_micros() as i64, eps);
                same(&ctx("stationary_objects", at), got, want)?;
                checks += 1;
            }
        }
        same(&format!("scene {s}: stats after queries"), ldm.stats(), before)?;
    }
    Ok(format!("{scenes} scenes, {checks} query results equal to brute force ({nonempty} non-empty radius hits)"))
}

/// Random insert / advance / evict sequences against short TTLs.
pub fn eviction(steps: usize, seed: u64) -> Outcome {
    let mut r = gen::rng(seed);
    let mut cfg = LdmConfig::default()
        .with_ttl(LdmLayer::QuasiStatic, Ttl::secs(20))
        .with_ttl(LdmLayer::Transient, Ttl::secs(5))
        .with_ttl(LdmLayer::Dynamic, Ttl::secs(2));
    cfg.eviction_period = Duration::from_millis(500);
    let ttl_us = |l: LdmLayer| cfg.ttl(l).as_micros();
    let mut s = GraphStore::new(cfg.clone());
    let mut now = Timestamp::from_secs(1_000);
    let mut frame = 0u64;
    let mut evictions = 0;
    let mut removed = 0usize;
    for step in 0..steps {
        match r.gen_range(0..10) {
            0..=5 => {
                let layer = LdmLayer::ALL[r.gen_range(0..4)];
                let name = format!("e{}", r.gen_range(0..40));
                let id = s
                    .upsert_element(SceneElement::new(ElementKind::Object, name, format!("t{}", layer.label()), layer))
                    .map_err(|e| format!("step {step}: {e}"))?;
                frame += 1;
                let ts = Timestamp(now.0 - r.gen_range(0..3_000_000));
                let newest = s.element(id).unwrap().latest_frame().map(|f| f.timestamp);
                if newest.map_or(true, |t| t < ts) {
                    let rec = FrameRecord::new(id, frame, ts).with_pose(GeoPose::new(43.0, -2.0));
                    s.insert_frame(rec).map_err(|e| format!("step {step}: {e}"))?;
                }
            }
            6 => {
                let ids: Vec<_> = s.elements().map(|e| e.id).collect();
                if let (Some(&a), Some(&b)) = (ids.choose(&mut r), ids.choose(&mut r)) {
                    s.add_relation(Relation::new(a, "near", b)).map_err(|e| format!("step {step}: {e}"))?;
                }
            }
            7 | 8 => now = Timestamp(now.0 + r.gen_range(0..1_500_000)),
            _ => {
                let statics: Vec<_> = s.elements().filter(|e| e.layer == LdmLayer::Static).cloned().collect();
                let frames_before = s.stats().frame_count;
                let evicted = s.evict_expired(now);
                removed += evicted;
                evictions += 1;
                same(&format!("step {step}: frame accounting"), s.stats().frame_count, frames_before - evicted)?;
                for e in s.elements() {
                    let Some(ttl) = ttl_us(e.layer) else { continue };
                    if let Some(f) = e.frames.values().find(|f| now.0 - f.timestamp.0 > ttl) {
                        return Err(format!("step {step}: {} keeps frame at {} past its TTL", e.name, f.timestamp.0));
                    }
                }
                let statics_after: Vec<_> = s.elements().filter(|e| e.layer == LdmLayer::Static).cloned().collect();
                same(&format!("step {step}: layer 1 untouched"), statics_after, statics)?;
                let problems = s.check_invariants();
                if !problems.is_empty() {
                    return Err(format!("step {step}: {problems:?}"));
                }
                let dump = serde_json::to_string(&s.dump()).unwrap();
                let again = s.evict_expired(now);
                if again != 0 || serde_json::to_string(&s.dump()).unwrap() != dump {
                    return Err(format!("step {step}: second eviction at the same time changed the store"));
                }
            }
        }
    }
    Ok(format!("{steps} steps, {evictions} eviction passes, {removed} frames evicted"))
}

pub fn geodesy(triples: usize, seed: u64) -> Outcome {
    let mut r = gen::rng(seed);
    let point = |r: &mut rand_chacha::ChaCha8Rng| GeoPoint::new(r.gen_range(-90.0..=90.0), r.gen_range(-180.0..180.0));
    for i in 0..triples {
        let (a, b, c) = (point(&mut r), point(&mut r), point(&mut r));
        let (ab, ba, bc, ac) = (haversine_m(a, b), haversine_m(b, a), haversine_m(b, c), haversine_m(a, c));
        if (ab - ba).abs() > 1e-6 * ab.max(1.0) {
            return Err(format!("triple {i}: asymmetric {ab} vs {ba}"));
        }
        if ac > (ab + bc) * (1.0 + 1e-6) {
            return Err(format!("triple {i}: triangle inequality broken {ac} > {ab} + {bc}"));
        }
    }
    let mut worst_rt: f64 = 0.0;
    let mut round_trips = 0;
    for i in 0..triples {
        let o = GeoPoint::new(r.gen_range(-85.0..85.0), r.gen_range(-180.0..180.0));
        let p = enu_to_wgs84(o, EnuPoint::planar(r.gen_range(-35_000.0..35_000.0), r.gen_range(-35_000.0..35_000.0)));
        let Ok(enu) = wgs84_to_enu(o, p) else { continue };
        round_trips += 1;
        let back = enu_to_wgs84(o, enu);
        let dlon = (back.lon - p.lon + 540.0).rem_euclid(360.0) - 180.0;
        let err = (back.lat - p.lat).abs().max(dlon.abs());
        worst_rt = worst_rt.max(err);
        if err >= 1e-9 {
            return Err(format!("round trip {i} at {o:?}: {err:e} deg"));
        }
    }
    let mut worst_rel: f64 = 0.0;
    for i in 0..triples {
        let o = GeoPoint::new(r.gen_range(-70.0..70.0), r.gen_range(-180.0..180.0));
        let d = r.gen_range(1.0..1_000.0);
        let bearing = r.gen_range(0.0..std::f64::consts::TAU);
        let p = enu_to_wgs84(o, EnuPoint::planar(d * bearing.sin(), d * bearing.cos()));
        let h = haversine_m(o, p);
        if h > 1_000.0 {
            continue;
        }
        let e = wgs84_to_enu(o, p).map_err(|e| e.to_string())?;
        let rel = (e.east.hypot(e.north) - h).abs() / h;
        worst_rel = worst_rel.max(rel);
        if rel >= 1e-4 {
            return Err(format!("pair {i} at {o:?}: haversine {h} vs ENU differ by {rel:e}"));
        }
    }
    Ok(format!(
        "{triples} triples; worst ENU round trip {worst_rt:.1e} deg over {round_trips} points; worst haversine/ENU gap {worst_rel:.1e}"
    ))
}

fn mutate(r: &mut impl Rng, base: &[String]) -> Vec<u8> {
    let pick = base.choose(r).unwrap().as_bytes().to_vec();
    let mut line = match r.gen_range(0..8) {
        0 => (0..r.gen_range(0..300)).map(|_| r.gen()).collect(),
        1 => {
            let mut l = pick;
            for _ in 0..r.gen_range(1..8) {
                let i = r.gen_range(0..l.len());
                l[i] = r.gen();
            }
            l
        }
        2 => pick[..r.gen_range(0..pick.len())].to_vec(),
        3 => {
            let other = base.choose(r).unwrap().as_bytes();
            let (i, j) = (r.gen_range(0..pick.len()), r.gen_range(0..other.len()));
            [&pick[..i], &other[j..]].concat()
        }
        4 => {
            let mut v: Value = serde_json::from_slice(&pick).unwrap();
            let wild = [
                json!(null),
                json!(-1),
                json!(1e308),
                json!(-9.3e18),
                json!(18446744073709551615u64),
                json!("x"),
                json!([]),
                json!({}),
                json!(true),
                json!(f64::MIN_POSITIVE),
            ];
            corrupt_leaf(r, &mut v, &wild);
            serde_json::to_vec(&v).unwrap()
        }
        5 => {
            let depth = r.gen_range(1..2_000);
            ["[".repeat(depth), "]".repeat(depth)].concat().into_bytes()
        }
        6 => {
            let mut v: Value = serde_json::from_slice(&pick).unwrap();
            if let Some(o) = v.as_object_mut() {
                let keys: Vec<String> = o.keys().cloned().collect();
                o.remove(keys.choose(r).unwrap());
            }
            serde_json::to_vec(&v).unwrap()
        }
        _ => pick,
    };
    line.retain(|&b| b != b'\n');
    line
}

fn corrupt_leaf(r: &mut impl Rng, v: &mut Value, wild: &[Value]) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            let keys: Vec<String> = m.keys().cloned().collect();
            let k = keys.choose(r).unwrap().clone();
            if r.gen_bool(0.3) {
                m[&k] = wild.choose(r).unwrap().clone();
            } else {
                corrupt_leaf(r, m.get_mut(&k).unwrap(), wild);
            }
        }
        Value::Array(a) if !a.is_empty() => {
            let i = r.gen_range(0..a.len());
            corrupt_leaf(r, &mut a[i], wild);
        }
        _ => *v = wild.choose(r).unwrap().clone(),
    }
}

fn sample_lines(r: &mut impl Rng) -> Vec<String> {
    let mut lines = Vec::new();
    for _ in 0..5 {
        let m = random_cpm(r);
        lines.push(json!({"type": "cpm", "payload": m}).to_string());
    }
    let scene = random_scene(r, &SceneParams { max_objects: 5, max_frames: 5, ..SceneParams::default() });
    lines.push(json!({"type": "openlabel", "payload": gen::scene_document(&scene)}).to_string());
    lines
}

/// Sends fuzzed lines over one socket and checks the listener and the store afterwards.
pub fn fuzz(lines: usize, seed: u64) -> Outcome {
    let mut r = gen::rng(seed);
    let base = sample_lines(&mut r);
    let corpus: Vec<Vec<u8>> = (0..lines).map(|_| mutate(&mut r, &base)).collect();
    let ldm = Arc::new(Ldm::default());
    let h = feed::serve("127.0.0.1:0", ldm.clone()).map_err(|e| e.to_string())?;
    let stream = TcpStream::connect(h.local_addr()).map_err(|e| e.to_string())?;
    stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    let mut w = stream.try_clone().unwrap();
    let writer = thread::spawn(move || {
        for l in &corpus {
            w.write_all(l).and_then(|_| w.write_all(b"\n"))?;
        }
        w.flush()
    });
    let mut reader = BufReader::new(stream);
    let (mut ok, mut rejected) = (0, 0);
    for i in 0..lines {
        let mut reply = String::new();
        reader.read_line(&mut reply).map_err(|e| format!("reply {i}: {e}"))?;
        let v: Value = serde_json::from_str(&reply).map_err(|e| format!("reply {i} is not JSON: {e}"))?;
        match v["ok"].as_bool() {
            Some(true) => ok += 1,
            Some(false) => rejected += 1,
            None => return Err(format!("reply {i} has no ok field: {reply}")),
        }
    }
    writer.join().unwrap().map_err(|e| e.to_string())?;
    let problems = ldm.store().check_invariants();
    if !problems.is_empty() {
        return Err(format!("store invariants broken: {problems:?}"));
    }
    let mut fresh = TcpStream::connect(h.local_addr()).map_err(|e| format!("listener gone: {e}"))?;
    writeln!(fresh, "{}", base[0]).unwrap();
    let mut reply = String::new();
    BufReader::new(fresh).read_line(&mut reply).map_err(|e| e.to_string())?;
    if !reply.starts_with("{\"ok\":") {
        return Err(format!("listener unhealthy after fuzzing: {reply}"));
    }
    h.shutdown();
    Ok(format!("{lines} lines: {ok} committed, {rejected} rejected, invariants hold"))
}

pub const DANGLING_OSM: &str = r#"<?xml version="1.0"?>
<osm version="0.6">
  <node id="1" lat="43.000" lon="-2.000"/>
  <node id="2" lat="43.001" lon="-2.000"/>
  <node id="3" lat="43.002" lon="-2.000"/>
  <node id="4" lat="43.003" lon="-2.000"/>
  <way id="10"><nd ref="1"/><nd ref="99"/><nd ref="2"/><tag k="highway" v="primary"/></way>
  <way id="11"><nd ref="3"/><nd ref="98"/><tag k="highway" v="primary"/></way>
  <way id="12"><nd ref="97"/><nd ref="96"/><tag k="highway" v="primary"/></way>
  <way id="13"><nd ref="2"/><nd ref="3"/><tag k="highway" v="service"/></way>
  <way id="14"><nd ref="1"/><nd ref="3"/><tag k="building" v="yes"/></way>
  <way id="15"><nd ref="4"/><nd ref="4"/><tag k="highway" v="track"/></way>
  <way id="16"><nd ref="4"/><tag k="highway" v="track"/></way>
</osm>"#;

/// Ways with dangling references are dropped with a warning, as are ways left
/// with fewer than two distinct nodes; the rest of the document still loads.
pub fn osm_dangling() -> Outcome {
    let g = parse_osm(DANGLING_OSM.as_bytes()).map_err(|e| e.to_string())?;
    let ways: Vec<(i64, Vec<i64>)> = g.ways().map(|w| (w.osm_id, w.node_refs.clone())).collect();
    same("kept ways", ways, vec![(13, vec![2, 3])])?;
    let nodes: Vec<i64> = g.nodes().map(|n| n.osm_id).collect();
    same("kept nodes", nodes, vec![2, 3])?;
    same(
        "warnings",
        g.warnings().to_vec(),
        vec![
            MapWarning::DanglingNodeRef { way: 10, node: 99 },
            MapWarning::DanglingNodeRef { way: 11, node: 98 },
            MapWarning::DanglingNodeRef { way: 12, node: 97 },
            MapWarning::DegenerateWay { way: 15 },
            MapWarning::DegenerateWay { way: 16 },
        ],
    )?;
    same("segment count", g.segment_count(), 1)?;
    Ok(format!("{} of 7 ways kept, {} warnings", g.way_count(), g.warnings().len()))
}

/// Identical stores export identical bytes; parse_osm output is stable.
pub fn determinism(scenes: usize, seed: u64) -> Outcome {
    let mut r = gen::rng(seed);
    for i in 0..scenes {
        let scene = random_scene(&mut r, &SceneParams::default());
        let a = committed(&scene);
        let b = committed(&scene).with_execution(Execution::Sequential);
        let (ea, eb) = (export_all(&a), export_all(&b));
        if ea != eb {
            return Err(format!("scene {i}: two identical stores exported different bytes"));
        }
        if export_all(&a) != ea {
            return Err(format!("scene {i}: repeated export differs"));
        }
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        a.save_state(dir.path()).map_err(|e| e.to_string())?;
        let c = Ldm::load_state(LdmConfig::default(), dir.path()).map_err(|e| e.to_string())?;
        if export_all(&c) != ea {
            return Err(format!("scene {i}: reloaded store exports different bytes"));
        }
    }
    let (nodes, ways) = random_road_graph(&mut r, GeoPoint::new(43.3, -2.0), 500);
    let xml = osm_document(&nodes, &ways);
    let one = serde_json::to_vec(&parse_osm(xml.as_bytes()).map_err(|e| e.to_string())?).unwrap();
    for _ in 0..3 {
        let again = serde_json::to_vec(&parse_osm(xml.as_bytes()).map_err(|e| e.to_string())?).unwrap();
        if again != one {
            return Err("parse_osm produced different graphs for the same bytes".into());
        }
    }
    let mut s1 = GraphStore::default();
    let mut s2 = GraphStore::default();
    let g = parse_osm(xml.as_bytes()).unwrap();
    ldm_core::map::load_into_store(&g, &mut s1).unwrap();
    ldm_core::map::load_into_store(&parse_osm(xml.as_bytes()).unwrap(), &mut s2).unwrap();
    if serde_json::to_vec(&s1.dump()).unwrap() != serde_json::to_vec(&s2.dump()).unwrap() {
        return Err("loading the same map twice gave different stores".into());
    }
    Ok(format!("{scenes} scene exports byte-identical; parse_osm stable over {} nodes", g.node_count()))
}

pub fn osm_document(nodes: &[ldm_core::map::RoadNode], ways: &[RoadWay]) -> String {
    let mut s = String::from("<?xml version=\"1.0\"?>\n<osm version=\"0.6\">\n");
    for n in nodes {
        s += &format!("  <node id=\"{}\" lat=\"{}\" lon=\"{}\"/>\n", n.osm_id, n.position.lat, n.position.lon);
    }
    for w in ways {
        s += &format!("  <way id=\"{}\">", w.osm_id);
        for r in &w.node_refs {
            s += &format!("<nd ref=\"{r}\"/>");
        }
        for (k, v) in &w.tags {
            s += &format!("<tag k=\"{k}\" v=\"{v}\"/>");
        }
        s += "</way>\n";
    }
    s + "</osm>\n"
}

/// Live-feed load figures.
#[derive(Clone, Debug, Default)]
pub struct FeedLoad {
    pub sent: usize,
    pub failed: usize,
    pub elapsed: Duration,
    pub commit_p99: Duration,
    pub commit_max: Duration,
    pub query_p99: Duration,
    pub query_max: Duration,
    pub queries: usize,
    pub frames_at_start: usize,
    pub frames_at_end: usize,
}

fn percentile(mut v: Vec<Duration>, p: f64) -> Duration {
    if v.is_empty() {
        return Duration::ZERO;
    }
    v.sort();
    let i = ((v.len() as f64 * p).ceil() as usize).clamp(1, v.len()) - 1;
    v[i]
}

const STATIONS: u32 = 10;
const OBJECTS_PER_MESSAGE: u32 = 20;
const STATION_PERIOD_MS: i64 = 100;

fn station_message(station: u32, k: i64) -> CpmMessage {
    let base = GeoPoint::new(43.3 + station as f64 * 0.001, -2.0);
    let t = k as f64 * STATION_PERIOD_MS as f64 / 1000.0;
    let at = enu_to_wgs84(base, EnuPoint::planar((t * 3.0) % 500.0, 0.0));
    CpmMessage {
        station_id: station,
        generation_time: Timestamp::from_millis(1_700_000_000_000 + k * STATION_PERIOD_MS + station as i64),
        reference_position: GeoPose::new(at.lat, at.lon).with_heading(90.0).with_speed(3.0),
        perceived_objects: (0..OBJECTS_PER_MESSAGE)
            .map(|o| PerceivedObject {
                object_id: o,
                x_distance: (o as i64 * 350 + k * 7) % 20_000 - 10_000,
                y_distance: (o as i64 * 910) % 30_000 - 15_000,
                x_speed: 100,
                y_speed: -50,
                object_class: ObjectClass::Vehicle,
                confidence: 80,
            })
            .collect(),
    }
}

/// Prefills a store with at least `prefill_frames` frames, then pushes
/// `rate` CPMs per second over TCP for `duration` while a reader thread runs
/// objects_within against the live store.
pub fn feed_load(duration: Duration, rate: u32, prefill_frames: usize) -> Result<FeedLoad, String> {
    let cfg = LdmConfig::default().with_ttl(LdmLayer::Dynamic, Ttl::secs(3_600));
    let ldm = Arc::new(Ldm::new(cfg).map_err(|e| e.to_string())?);
    let per_message = (OBJECTS_PER_MESSAGE + 1) as usize;
    let prefill_rounds = prefill_frames.div_ceil(per_message * STATIONS as usize) as i64;
    for k in 0..prefill_rounds {
        for s in 0..STATIONS {
            ldm.add_cpm(&station_message(s, k)).map_err(|e| e.to_string())?;
        }
    }
    let frames_at_start = ldm.stats().frame_count;
    let ego = ldm
        .store()
        .find(ElementKind::Object, &station_name(0), STATION_TYPE)
        .ok_or("station 0 missing")?;
    let h = feed::serve("127.0.0.1:0", ldm.clone()).map_err(|e| e.to_string())?;

    let connections = 5u32;
    let per_conn_period = Duration::from_secs_f64(connections as f64 / rate as f64);
    let stop = Arc::new(AtomicBool::new(false));
    let reader = {
        let (ldm, stop) = (ldm.clone(), stop.clone());
        thread::spawn(move || {
            let mut lat = Vec::new();
            while !stop.load(Ordering::Relaxed) {
                let at = ldm.store().last_update();
                let t = Instant::now();
                let hits = ldm.objects_within(ego, 2_000.0, at).map(|v| v.len());
                lat.push(t.elapsed());
                assert!(hits.is_ok(), "objects_within failed: {hits:?}");
                thread::sleep(Duration::from_millis(10));
            }
            lat
        })
    };
    let started = Instant::now();
    let total_rounds = (duration.as_secs_f64() * rate as f64 / STATIONS as f64).round() as i64;
    let senders: Vec<_> = (0..connections)
        .map(|c| {
            let addr = h.local_addr();
            thread::spawn(move || -> Result<(Vec<Duration>, usize), String> {
                let stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
                stream.set_nodelay(true).ok();
                let mut w = stream.try_clone().unwrap();
                let mut r = BufReader::new(stream);
                let stations: Vec<u32> = (0..STATIONS).filter(|s| s % connections == c).collect();
                let mut lat = Vec::new();
                let mut failed = 0;
                let mut n = 0u32;
                for k in prefill_rounds..prefill_rounds + total_rounds {
                    for &s in &stations {
                        // stations are not synchronized: each connection gets its own phase
                        let due = started + per_conn_period * n + per_conn_period * c / connections;
                        n += 1;
                        if let Some(wait) = due.checked_duration_since(Instant::now()) {
                            thread::sleep(wait);
                        }
                        let line = json!({"type": "cpm", "payload": station_message(s, k)}).to_string();
                        let t = Instant::now();
                        writeln!(w, "{line}").map_err(|e| e.to_string())?;
                        let mut reply = String::new();
                        r.read_line(&mut reply).map_err(|e| e.to_string())?;
                        lat.push(t.elapsed());
                        if !reply.starts_with("{\"ok\":true") {
                            failed += 1;
                        }
                    }
                }
                Ok((lat, failed))
            })
        })
        .collect();
    let mut commit = Vec::new();
    let mut failed = 0;
    for s in senders {
        let (lat, f) = s.join().map_err(|_| "sender panicked")??;
        commit.extend(lat);
        failed += f;
    }
    let elapsed = started.elapsed();
    stop.store(true, Ordering::Relaxed);
    let queries = reader.join().map_err(|_| "query thread panicked".to_string())?;
    h.shutdown();
    Ok(FeedLoad {
        sent: commit.len(),
        failed,
        elapsed,
        commit_p99: percentile(commit.clone(), 0.99),
        commit_max: commit.iter().max().copied().unwrap_or_default(),
        query_p99: percentile(queries.clone(), 0.99),
        query_max: queries.iter().max().copied().unwrap_or_default(),
        queries: queries.len(),
        frames_at_start,
        frames_at_end: ldm.stats().frame_count,
    })
}
