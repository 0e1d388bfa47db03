//! Random scenes, road graphs and CPM messages.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use ldm_core::geo::{enu_to_wgs84, EnuPoint};
use ldm_core::ingest::{CpmMessage, ObjectClass, PerceivedObject};
use ldm_core::map::{RoadNode, RoadWay};
use ldm_core::model::{AttributeValue, Attributes, GeoPoint, GeoPose, LdmLayer, Timestamp};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct GenFrame {
    pub index: u64,
    pub ts: Timestamp,
    pub pose: Option<GeoPose>,
    pub attrs: Attributes,
}

#[derive(Clone, Debug)]
pub struct GenObject {
    pub name: String,
    pub semantic_type: String,
    pub layer: LdmLayer,
    pub statics: Attributes,
    pub frames: Vec<GenFrame>,
}

#[derive(Clone, Debug, Default)]
pub struct GenScene {
    pub objects: Vec<GenObject>,
}

impl GenScene {
    pub fn frame_count(&self) -> usize {
        self.objects.iter().map(|o| o.frames.len()).sum()
    }

    pub fn timestamps(&self) -> Vec<Timestamp> {
        let mut ts: Vec<_> = self.objects.iter().flat_map(|o| o.frames.iter().map(|f| f.ts)).collect();
        ts.sort();
        ts.dedup();
        ts
    }
}

#[derive(Clone, Debug)]
pub struct SceneParams {
    pub max_objects: usize,
    /// Upper bound on distinct frame indices in the scene.
    pub max_frames: usize,
    /// Upper bound on frames per object.
    pub max_frames_per_object: usize,
    pub origin: GeoPoint,
    pub extent_m: f64,
    /// Share of frames without a pose.
    pub poseless: f64,
    /// Points to place objects near, in local metres around `origin`.
    pub anchors: Vec<EnuPoint>,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            max_objects: 50,
            max_frames: 200,
            max_frames_per_object: 20,
            origin: GeoPoint::new(43.3, -2.0),
            extent_m: 2_000.0,
            poseless: 0.05,
            anchors: Vec::new(),
        }
    }
}

const TYPES: [&str; 5] = ["vehicle.car", "vehicle.truck", "cyclist", "pedestrian", "sign"];
const FRAME_PERIOD_US: i64 = 100_000;
pub const SCENE_EPOCH_US: i64 = 1_700_000_000_000_000;

fn random_value(r: &mut impl Rng) -> AttributeValue {
    match r.gen_range(0..4) {
        0 => AttributeValue::Boolean(r.gen()),
        1 => AttributeValue::Number(r.gen_range(-1e6..1e6)),
        2 => AttributeValue::Text(format!("t{}", r.gen::<u16>())),
        _ => AttributeValue::Vector((0..r.gen_range(0..4)).map(|_| r.gen_range(-10.0..10.0)).collect()),
    }
}

fn random_attrs(r: &mut impl Rng, prefix: &str, max: usize) -> Attributes {
    (0..r.gen_range(0..=max))
        .map(|i| (format!("{prefix}{i}"), random_value(r)))
        .collect()
}

/// Frame timestamp of `index` for an object with per-object jitter `jitter_us`.
pub fn frame_time(index: u64, jitter_us: i64) -> Timestamp {
    Timestamp(SCENE_EPOCH_US + index as i64 * FRAME_PERIOD_US + jitter_us)
}

pub fn random_scene(r: &mut impl Rng, p: &SceneParams) -> GenScene {
    let n_objects = r.gen_range(1..=p.max_objects);
    let n_frames = r.gen_range(1..=p.max_frames) as u64;
    let mut objects = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let start = match p.anchors.choose(r) {
            Some(a) if r.gen_bool(0.6) => {
                EnuPoint::planar(a.east + r.gen_range(-40.0..40.0), a.north + r.gen_range(-40.0..40.0))
            }
            _ => EnuPoint::planar(
                r.gen_range(-p.extent_m..p.extent_m),
                r.gen_range(-p.extent_m..p.extent_m),
            ),
        };
        let (vx, vy) = if r.gen_bool(0.4) {
            (r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2))
        } else {
            (r.gen_range(-20.0..20.0), r.gen_range(-20.0..20.0))
        };
        let with_speed = r.gen_bool(0.5);
        let heading = (vx as f64).atan2(vy).to_degrees().rem_euclid(360.0);
        let jitter = r.gen_range(0..FRAME_PERIOD_US / 2);
        let count = r.gen_range(1..=p.max_frames_per_object.min(n_frames as usize));
        let mut indices: Vec<u64> = (0..n_frames).collect();
        indices.shuffle(r);
        indices.truncate(count);
        indices.sort();
        let frames = indices
            .into_iter()
            .map(|index| {
                let t = index as f64 * FRAME_PERIOD_US as f64 / 1e6;
                let pos = enu_to_wgs84(p.origin, EnuPoint::planar(start.east + vx * t, start.north + vy * t));
                let mut pose = GeoPose::new(pos.lat, pos.lon).with_heading(heading);
                if with_speed {
                    pose = pose.with_speed(vx.hypot(vy));
                }
                GenFrame {
                    index,
                    ts: frame_time(index, jitter),
                    pose: (!r.gen_bool(p.poseless)).then_some(pose),
                    attrs: random_attrs(r, "d", 2),
                }
            })
            .collect();
        objects.push(GenObject {
            name: format!("obj-{i}"),
            semantic_type: TYPES.choose(r).unwrap().to_string(),
            layer: if r.gen_bool(0.8) { LdmLayer::Dynamic } else { LdmLayer::Transient },
            statics: random_attrs(r, "s", 3),
            frames,
        });
    }
    GenScene { objects }
}

fn attribute_data(attrs: &Attributes) -> Option<Value> {
    if attrs.is_empty() {
        return None;
    }
    let mut families: BTreeMap<&str, Vec<Value>> = BTreeMap::new();
    for (name, v) in attrs {
        let (family, val) = match v {
            AttributeValue::Boolean(b) => ("boolean", json!(b)),
            AttributeValue::Number(n) => ("num", json!(n)),
            AttributeValue::Text(t) => ("text", json!(t)),
            AttributeValue::Vector(v) => ("vec", json!(v)),
        };
        families.entry(family).or_default().push(json!({"name": name, "val": val}));
    }
    Some(json!(families))
}

/// The scene as a JSON document, object uids in vector order.
pub fn scene_document(s: &GenScene) -> Value {
    let mut objects = Map::new();
    let mut frames: BTreeMap<u64, Map<String, Value>> = BTreeMap::new();
    for (uid, o) in s.objects.iter().enumerate() {
        let mut entry = json!({"name": o.name, "type": o.semantic_type, "ldm_layer": o.layer.label()});
        if let Some(d) = attribute_data(&o.statics) {
            entry["object_data"] = d;
        }
        objects.insert(uid.to_string(), entry);
        for f in &o.frames {
            let mut fe = json!({"timestamp": f.ts.0});
            if let Some(pose) = f.pose {
                fe["geo_pose"] = json!(pose);
            }
            if let Some(d) = attribute_data(&f.attrs) {
                fe["object_data"] = d;
            }
            frames.entry(f.index).or_default().insert(uid.to_string(), fe);
        }
    }
    let frames: Map<String, Value> = frames
        .into_iter()
        .map(|(i, objs)| (i.to_string(), json!({"objects": objs})))
        .collect();
    json!({"openlabel": {"metadata": {"schema_version": "1.0.0"}, "objects": objects, "frames": frames}})
}

/// A jittered grid of nodes joined by random-walk ways, roughly `target_segments` segments.
pub fn random_road_graph(r: &mut impl Rng, origin: GeoPoint, target_segments: usize) -> (Vec<RoadNode>, Vec<RoadWay>) {
    let side = ((target_segments as f64 / 2.0).sqrt().ceil() as i64).max(2) + 1;
    let spacing = r.gen_range(60.0..150.0);
    let half = side as f64 * spacing / 2.0;
    let id = |x: i64, y: i64| 1_000 + y * side + x;
    let mut nodes = Vec::new();
    for y in 0..side {
        for x in 0..side {
            let e = x as f64 * spacing - half + r.gen_range(-0.2..0.2) * spacing;
            let n = y as f64 * spacing - half + r.gen_range(-0.2..0.2) * spacing;
            nodes.push(RoadNode {
                osm_id: id(x, y),
                position: enu_to_wgs84(origin, EnuPoint::planar(e, n)),
            });
        }
    }
    let mut ways = Vec::new();
    let mut segments = 0;
    let mut way_id = 1;
    while segments < target_segments {
        let (mut x, mut y) = (r.gen_range(0..side), r.gen_range(0..side));
        let mut refs = vec![id(x, y)];
        let len = r.gen_range(2..=20).min(target_segments - segments + 1);
        while refs.len() < len {
            let (dx, dy) = *[(1, 0), (-1, 0), (0, 1), (0, -1)].choose(r).unwrap();
            let (nx, ny) = (x + dx, y + dy);
            if !(0..side).contains(&nx) || !(0..side).contains(&ny) {
                continue;
            }
            let next = id(nx, ny);
            if refs.len() >= 2 && refs[refs.len() - 2] == next {
                continue;
            }
            (x, y) = (nx, ny);
            refs.push(next);
        }
        segments += refs.len() - 1;
        let mut w = RoadWay::new(way_id, refs);
        if r.gen_bool(0.15) {
            w.oneway = true;
            w.tags.insert("oneway".into(), "yes".into());
        }
        ways.push(w);
        way_id += r.gen_range(1..4);
    }
    (nodes, ways)
}

pub fn random_cpm(r: &mut impl Rng) -> CpmMessage {
    let lat = r.gen_range(-70.0..70.0);
    let lon = r.gen_range(-179.0..179.0);
    let n = r.gen_range(0..=20);
    let mut ids: Vec<u32> = (0..1000).collect();
    ids.shuffle(r);
    let classes = [ObjectClass::Unknown, ObjectClass::Pedestrian, ObjectClass::Cyclist, ObjectClass::Vehicle];
    CpmMessage {
        station_id: r.gen(),
        generation_time: Timestamp::from_millis(r.gen_range(0..4_000_000_000_000)),
        reference_position: GeoPose::new(lat, lon).with_heading(r.gen_range(0.0..360.0)),
        perceived_objects: ids[..n]
            .iter()
            .map(|&object_id| PerceivedObject {
                object_id,
                x_distance: r.gen_range(-1_000_000..=1_000_000),
                y_distance: r.gen_range(-1_000_000..=1_000_000),
                x_speed: r.gen_range(-5_000..=5_000),
                y_speed: r.gen_range(-5_000..=5_000),
                object_class: *classes.choose(r).unwrap(),
                confidence: r.gen_range(0..=100),
            })
            .collect(),
    }
}
