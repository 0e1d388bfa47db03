//! Layer-1 road graph: OSM XML ingestion, traversal and map matching.

use std::collections::{BTreeMap, BTreeSet};

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    angle_diff_deg, haversine_m, initial_bearing_deg, project_to_segment, wgs84_to_enu_unchecked,
    GeoBox, EnuPoint,
};
use crate::model::{AttributeValue, ElementKind, GeoPoint, LdmLayer, Relation, SceneElement};
use crate::par::{self, Execution};
use crate::store::{GraphStore, StoreError};

pub type OsmId = i64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("malformed OSM document at line {line}: {message}")]
    MalformedDocument { line: usize, message: String },
    #[error("unknown road node {0}")]
    UnknownNode(OsmId),
}

/// Non-fatal findings while building a graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapWarning {
    /// The way references a node absent from the document and was dropped.
    DanglingNodeRef { way: OsmId, node: OsmId },
    /// Fewer than two distinct consecutive nodes; the way was dropped.
    DegenerateWay { way: OsmId },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadNode {
    pub osm_id: OsmId,
    pub position: GeoPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadWay {
    pub osm_id: OsmId,
    pub node_refs: Vec<OsmId>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    #[serde(default)]
    pub oneway: bool,
}

impl RoadWay {
    pub fn new(osm_id: OsmId, node_refs: Vec<OsmId>) -> Self {
        RoadWay {
            osm_id,
            node_refs,
            tags: BTreeMap::from([("highway".to_owned(), "road".to_owned())]),
            oneway: false,
        }
    }

    pub fn segment_count(&self) -> usize {
        self.node_refs.len().saturating_sub(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Edge {
    pub to: OsmId,
    pub way: OsmId,
    pub length_m: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    nodes: Vec<RoadNode>,
    ways: Vec<RoadWay>,
    #[serde(default)]
    warnings: Vec<MapWarning>,
}

/// Road nodes, ways and their adjacency. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawGraph", into = "RawGraph")]
pub struct RoadGraph {
    nodes: BTreeMap<OsmId, RoadNode>,
    ways: BTreeMap<OsmId, RoadWay>,
    adjacency: BTreeMap<OsmId, Vec<Edge>>,
    way_boxes: Vec<(OsmId, GeoBox)>,
    warnings: Vec<MapWarning>,
}

impl From<RawGraph> for RoadGraph {
    fn from(raw: RawGraph) -> Self {
        let mut g = RoadGraph::from_parts(raw.nodes, raw.ways);
        let mut warnings = raw.warnings;
        warnings.append(&mut g.warnings);
        g.warnings = warnings;
        g
    }
}

impl From<RoadGraph> for RawGraph {
    fn from(g: RoadGraph) -> Self {
        RawGraph {
            nodes: g.nodes.into_values().collect(),
            ways: g.ways.into_values().collect(),
            warnings: g.warnings,
        }
    }
}

impl Default for RoadGraph {
    fn default() -> Self {
        RoadGraph::from_parts(Vec::new(), Vec::new())
    }
}

impl RoadGraph {
    /// Builds a graph, dropping ways with unresolved nodes or fewer than two
    /// distinct nodes. Consecutive repeated node refs are collapsed.
    pub fn from_parts(nodes: Vec<RoadNode>, ways: Vec<RoadWay>) -> Self {
        let nodes: BTreeMap<OsmId, RoadNode> = nodes.into_iter().map(|n| (n.osm_id, n)).collect();
        let mut warnings = Vec::new();
        let mut kept = BTreeMap::new();
        for mut way in ways {
            if let Some(&missing) = way.node_refs.iter().find(|r| !nodes.contains_key(r)) {
                warnings.push(MapWarning::DanglingNodeRef {
                    way: way.osm_id,
                    node: missing,
                });
                continue;
            }
            way.node_refs.dedup();
            if way.node_refs.len() < 2 {
                warnings.push(MapWarning::DegenerateWay { way: way.osm_id });
                continue;
            }
            kept.insert(way.osm_id, way);
        }
        let mut adjacency: BTreeMap<OsmId, Vec<Edge>> =
            nodes.keys().map(|&id| (id, Vec::new())).collect();
        let mut way_boxes = Vec::with_capacity(kept.len());
        for way in kept.values() {
            for pair in way.node_refs.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let length_m = haversine_m(nodes[&a].position, nodes[&b].position);
                let edge = |to| Edge {
                    to,
                    way: way.osm_id,
                    length_m,
                };
                adjacency.get_mut(&a).expect("resolved").push(edge(b));
                if !way.oneway {
                    adjacency.get_mut(&b).expect("resolved").push(edge(a));
                }
            }
            let bbox = GeoBox::around(way.node_refs.iter().map(|r| nodes[r].position))
                .expect("at least two nodes");
            way_boxes.push((way.osm_id, bbox));
        }
        RoadGraph {
            nodes,
            ways: kept,
            adjacency,
            way_boxes,
            warnings,
        }
    }

    /// Union of two graphs; on id clashes `other` wins.
    pub fn merged(&self, other: &RoadGraph) -> RoadGraph {
        let mut nodes = self.nodes.clone();
        nodes.extend(other.nodes.iter().map(|(k, v)| (*k, *v)));
        let mut ways = self.ways.clone();
        ways.extend(other.ways.iter().map(|(k, v)| (*k, v.clone())));
        let mut g = RoadGraph::from_parts(nodes.into_values().collect(), ways.into_values().collect());
        let mut warnings = self.warnings.clone();
        warnings.extend(other.warnings.iter().cloned());
        warnings.append(&mut g.warnings);
        g.warnings = warnings;
        g
    }

    pub fn nodes(&self) -> impl Iterator<Item = &RoadNode> {
        self.nodes.values()
    }

    pub fn ways(&self) -> impl Iterator<Item = &RoadWay> {
        self.ways.values()
    }

    pub fn node(&self, id: OsmId) -> Option<&RoadNode> {
        self.nodes.get(&id)
    }

    pub fn way(&self, id: OsmId) -> Option<&RoadWay> {
        self.ways.get(&id)
    }

    pub fn edges(&self, from: OsmId) -> &[Edge] {
        self.adjacency.get(&from).map_or(&[], Vec::as_slice)
    }

    pub fn warnings(&self) -> &[MapWarning] {
        &self.warnings
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn way_count(&self) -> usize {
        self.ways.len()
    }

    pub fn segment_count(&self) -> usize {
        self.ways.values().map(RoadWay::segment_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.ways.is_empty()
    }

    pub fn position(&self, id: OsmId) -> Option<GeoPoint> {
        self.nodes.get(&id).map(|n| n.position)
    }

    /// Endpoints of segment `index` of `way`.
    pub fn segment(&self, way: OsmId, index: usize) -> Option<(OsmId, OsmId)> {
        let w = self.ways.get(&way)?;
        Some((*w.node_refs.get(index)?, *w.node_refs.get(index + 1)?))
    }
}

fn line_of(doc: &[u8], pos: usize) -> usize {
    doc[..pos.min(doc.len())].iter().filter(|&&b| b == b'\n').count() + 1
}

fn attr(e: &BytesStart<'_>, key: &[u8]) -> Result<Option<String>, String> {
    for a in e.attributes() {
        let a = a.map_err(|err| err.to_string())?;
        if a.key.as_ref() == key {
            return a
                .unescape_value()
                .map(|v| Some(v.into_owned()))
                .map_err(|err| err.to_string());
        }
    }
    Ok(None)
}

fn required<T: std::str::FromStr>(e: &BytesStart<'_>, key: &str) -> Result<T, String> {
    let raw = attr(e, key.as_bytes())?.ok_or_else(|| {
        format!(
            "<{}> without {key}",
            String::from_utf8_lossy(e.name().as_ref())
        )
    })?;
    raw.trim()
        .parse()
        .map_err(|_| format!("bad {key} value {raw:?}"))
}

fn is_oneway(tags: &BTreeMap<String, String>) -> bool {
    matches!(
        tags.get("oneway").map(String::as_str),
        Some("yes" | "true" | "1")
    )
}

/// Parses an OSM XML document into a road graph.
///
/// Only ways tagged `highway` are kept, together with the nodes they
/// reference. Ways referencing nodes absent from the document are dropped
/// and reported in [`RoadGraph::warnings`].
pub fn parse_osm(document: &[u8]) -> Result<RoadGraph, MapError> {
    let mut reader = Reader::from_reader(document);
    reader.config_mut().check_end_names = true;
    let mut buf = Vec::new();
    let mut all_nodes: BTreeMap<OsmId, RoadNode> = BTreeMap::new();
    let mut ways: Vec<RoadWay> = Vec::new();
    let mut current: Option<RoadWay> = None;
    let mut depth = 0usize;
    let mut seen_root = false;

    loop {
        let pos = reader.buffer_position() as usize;
        let event = reader.read_event_into(&mut buf).map_err(|e| MapError::MalformedDocument {
            line: line_of(document, reader.error_position() as usize),
            message: e.to_string(),
        })?;
        let fail = |message: String| MapError::MalformedDocument {
            line: line_of(document, pos),
            message,
        };
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_start = matches!(event, Event::Start(_));
                if depth == 0 {
                    if seen_root {
                        return Err(fail("more than one root element".into()));
                    }
                    seen_root = true;
                }
                match e.name().as_ref() {
                    b"node" => {
                        let id: OsmId = required(e, "id").map_err(fail)?;
                        let lat: f64 = required(e, "lat").map_err(fail)?;
                        let lon: f64 = required(e, "lon").map_err(fail)?;
                        let position = GeoPoint::new(lat, lon);
                        if !position.is_valid() {
                            return Err(fail(format!("node {id} position out of range")));
                        }
                        all_nodes.insert(id, RoadNode { osm_id: id, position });
                    }
                    b"way" => {
                        let id: OsmId = required(e, "id").map_err(fail)?;
                        let way = RoadWay {
                            osm_id: id,
                            node_refs: Vec::new(),
                            tags: BTreeMap::new(),
                            oneway: false,
                        };
                        if is_start {
                            current = Some(way);
                        }
                        // an empty <way/> has no nodes and is dropped
                    }
                    b"nd" => {
                        if let Some(w) = current.as_mut() {
                            w.node_refs.push(required(e, "ref").map_err(fail)?);
                        }
                    }
                    b"tag" => {
                        if let Some(w) = current.as_mut() {
                            let k = attr(e, b"k").map_err(fail)?.unwrap_or_default();
                            let v = attr(e, b"v").map_err(fail)?.unwrap_or_default();
                            w.tags.insert(k, v);
                        }
                    }
                    _ => {}
                }
                if is_start {
                    depth += 1;
                }
            }
            Event::End(ref e) => {
                depth = depth.saturating_sub(1);
                if e.name().as_ref() == b"way" {
                    if let Some(mut w) = current.take() {
                        if w.tags.contains_key("highway") {
                            w.oneway = is_oneway(&w.tags);
                            ways.push(w);
                        }
                    }
                }
            }
            Event::Text(ref t) => {
                if depth == 0 && !t.iter().all(u8::is_ascii_whitespace) {
                    return Err(fail("text outside the root element".into()));
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    if depth != 0 {
        return Err(MapError::MalformedDocument {
            line: line_of(document, document.len()),
            message: "unexpected end of document inside an element".into(),
        });
    }
    if !seen_root {
        return Err(MapError::MalformedDocument {
            line: 1,
            message: "no root element".into(),
        });
    }

    let referenced: BTreeSet<OsmId> = ways.iter().flat_map(|w| w.node_refs.iter().copied()).collect();
    let nodes: Vec<RoadNode> = all_nodes
        .into_values()
        .filter(|n| referenced.contains(&n.osm_id))
        .collect();
    let first = RoadGraph::from_parts(nodes, ways);
    // nodes only reachable through dropped ways go with them
    let used: BTreeSet<OsmId> = first.ways().flat_map(|w| w.node_refs.iter().copied()).collect();
    let mut graph = RoadGraph::from_parts(
        first.nodes().filter(|n| used.contains(&n.osm_id)).copied().collect(),
        first.ways().cloned().collect(),
    );
    graph.warnings = first.warnings;
    for w in graph.warnings() {
        log::warn!("osm: {w:?}");
    }
    Ok(graph)
}

pub fn node_element_name(id: OsmId) -> String {
    format!("node/{id}")
}

pub fn way_element_name(id: OsmId) -> String {
    format!("way/{id}")
}

pub const ROAD_NODE_TYPE: &str = "road.node";
pub const ROAD_WAY_TYPE: &str = "road.way";
pub const HAS_NODE: &str = "hasNode";

/// Element counts written by [`load_into_store`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LoadCounts {
    pub nodes: usize,
    pub ways: usize,
}

/// Writes the graph into the store as layer-1 context elements.
///
/// Nodes become `road.node` elements named `node/<id>`, ways become
/// `road.way` elements named `way/<id>` with one `hasNode` relation per
/// referenced node. Loading the same graph again leaves the store unchanged.
pub fn load_into_store(g: &RoadGraph, store: &mut GraphStore) -> Result<LoadCounts, StoreError> {
    store.transaction(|store| {
        let mut node_ids = BTreeMap::new();
        for n in g.nodes() {
            let e = SceneElement::new(
                ElementKind::Context,
                node_element_name(n.osm_id),
                ROAD_NODE_TYPE,
                LdmLayer::Static,
            )
            .with_attr("osm_id", AttributeValue::Number(n.osm_id as f64))
            .with_attr("lat", AttributeValue::Number(n.position.lat))
            .with_attr("lon", AttributeValue::Number(n.position.lon));
            node_ids.insert(n.osm_id, store.upsert_element(e)?);
        }
        for w in g.ways() {
            let mut e = SceneElement::new(
                ElementKind::Context,
                way_element_name(w.osm_id),
                ROAD_WAY_TYPE,
                LdmLayer::Static,
            )
            .with_attr("osm_id", AttributeValue::Number(w.osm_id as f64))
            .with_attr("oneway", AttributeValue::Boolean(w.oneway));
            for (k, v) in &w.tags {
                e = e.with_attr(format!("tag:{k}"), AttributeValue::Text(v.clone()));
            }
            let way_id = store.upsert_element(e)?;
            for r in &w.node_refs {
                store.add_relation(Relation::new(way_id, HAS_NODE, node_ids[r]))?;
            }
        }
        Ok(LoadCounts {
            nodes: g.node_count(),
            ways: g.way_count(),
        })
    })
}

/// Up to `k` nodes reached from `from`, in breadth-first order.
///
/// The expansion starts along the outgoing edge whose initial bearing is
/// closest to `heading` (ties: lower neighbor id, then lower way id) and never
/// passes back through `from`. Within one hop distance nodes are ordered by
/// ascending id. Oneway edges are only followed forward.
pub fn next_nodes(g: &RoadGraph, from: OsmId, heading: f64, k: usize) -> Result<Vec<OsmId>, MapError> {
    let origin = g.position(from).ok_or(MapError::UnknownNode(from))?;
    let seed = g
        .edges(from)
        .iter()
        .filter(|e| e.to != from)
        .min_by(|a, b| {
            let da = angle_diff_deg(initial_bearing_deg(origin, g.nodes[&a.to].position), heading);
            let db = angle_diff_deg(initial_bearing_deg(origin, g.nodes[&b.to].position), heading);
            da.total_cmp(&db).then(a.to.cmp(&b.to)).then(a.way.cmp(&b.way))
        });
    let Some(seed) = seed else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    if k == 0 {
        return Ok(out);
    }
    let mut visited = BTreeSet::from([from, seed.to]);
    let mut layer = vec![seed.to];
    out.push(seed.to);
    while out.len() < k && !layer.is_empty() {
        let next: BTreeSet<OsmId> = layer
            .iter()
            .flat_map(|&n| g.edges(n).iter().map(|e| e.to))
            .filter(|n| !visited.contains(n))
            .collect();
        visited.extend(next.iter().copied());
        out.extend(next.iter().copied());
        layer = next.into_iter().collect();
    }
    out.truncate(k);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    /// Matches farther than this are discarded.
    pub max_distance_m: f64,
    /// Ways whose bounding box, grown by this margin, misses the point are skipped.
    pub candidate_margin_m: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            max_distance_m: 50.0,
            candidate_margin_m: 100.0,
        }
    }
}

/// Distances within this tolerance count as ties.
pub const MATCH_TIE_EPS_M: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MapMatch {
    pub way: OsmId,
    pub segment: usize,
    pub distance_m: f64,
    /// Position of the foot along the segment, in `[0, 1]`.
    pub t: f64,
}

/// Closest segment of `way` to `p`, measured in the local plane at `p`.
pub fn best_segment_of_way(g: &RoadGraph, way: &RoadWay, p: GeoPoint) -> Option<MapMatch> {
    let here = EnuPoint::default();
    let mut best: Option<MapMatch> = None;
    let mut prev = wgs84_to_enu_unchecked(p, g.nodes[&way.node_refs[0]].position);
    for (i, r) in way.node_refs.iter().enumerate().skip(1) {
        let cur = wgs84_to_enu_unchecked(p, g.nodes[r].position);
        let proj = project_to_segment(here, prev, cur);
        let candidate = MapMatch {
            way: way.osm_id,
            segment: i - 1,
            distance_m: proj.distance,
            t: proj.t,
        };
        best = Some(prefer(best, candidate));
        prev = cur;
    }
    best
}

/// Keeps `current` unless `candidate` is closer by more than the tie tolerance.
/// Candidates must arrive in ascending (way, segment) order.
pub fn prefer(current: Option<MapMatch>, candidate: MapMatch) -> MapMatch {
    match current {
        Some(c) if candidate.distance_m >= c.distance_m - MATCH_TIE_EPS_M => c,
        _ => candidate,
    }
}

/// Nearest road segment to `p` within the match radius.
pub fn map_match(g: &RoadGraph, p: GeoPoint) -> Option<MapMatch> {
    map_match_with(g, p, &MatchParams::default(), Execution::default())
}

pub fn map_match_with(
    g: &RoadGraph,
    p: GeoPoint,
    params: &MatchParams,
    exec: Execution,
) -> Option<MapMatch> {
    let candidates: Vec<&RoadWay> = g
        .way_boxes
        .iter()
        .filter(|(_, b)| b.inflate(params.candidate_margin_m).contains(p))
        .map(|(id, _)| &g.ways[id])
        .collect();
    let per_way = par::filter_map(exec, &candidates, |w| best_segment_of_way(g, w, p));
    per_way
        .into_iter()
        .fold(None, |best, m| Some(prefer(best, m)))
        .filter(|m| m.distance_m <= params.max_distance_m)
}
