//! The LDM facade: configuration, ingestion, map loading, export and geo-queries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, LdmConfig};
use crate::geo::{angle_diff_deg, haversine_m, initial_bearing_deg};
use crate::ingest::openlabel::{PayloadElement, PayloadFrame, PayloadRelation, SCHEMA_VERSION};
use crate::ingest::{commit_payload, cpm_to_openlabel, CommitCounts, CpmMessage, IngestError, OpenLabelPayload};
use crate::map::{self, load_into_store, map_match_with, LoadCounts, MapError, MatchParams, OsmId, RoadGraph};
use crate::model::{
    ElementId, ElementKind, FrameRecord, FrameSource, GeoPose, LdmLayer, SceneElement, TimeInterval,
    Timestamp,
};
use crate::par::{self, Execution};
use crate::store::{GraphStore, Snapshot, StoreDump, StoreError, StoreStats};

pub const DEFAULT_STATIONARY_WINDOW: Duration = Duration::from_secs(5);
pub const DEFAULT_STATIONARY_EPS_MPS: f64 = 0.5;

const STORE_FILE: &str = "store.json";
const MAP_FILE: &str = "map.json";

#[derive(Debug, Error)]
pub enum LdmError {
    #[error("UnknownElement: {0:?}")]
    UnknownElement(ElementId),
    #[error("NoPose: element {0:?} has no pose at the requested time")]
    NoPose(ElementId),
    #[error("NoMap: no road graph loaded")]
    NoMap,
    #[error("Unmatched: element {0:?} is not on any road")]
    Unmatched(ElementId),
    #[error("UnknownNode: {0}")]
    UnknownNode(OsmId),
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
    #[error("SinkError: {0}")]
    Sink(#[source] std::io::Error),
    #[error("state file {path}: {message}")]
    State { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One query hit. Distances are great-circle metres.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectReport {
    pub element_id: ElementId,
    pub name: String,
    pub semantic_type: String,
    pub layer: LdmLayer,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose: Option<GeoPose>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_to_ego: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_to_node: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_way: Option<OsmId>,
    pub timestamp: Timestamp,
}

impl ObjectReport {
    fn new(e: &SceneElement, f: &FrameRecord) -> Self {
        ObjectReport {
            element_id: e.id,
            name: e.name.clone(),
            semantic_type: e.semantic_type.clone(),
            layer: e.layer,
            pose: f.pose,
            distance_to_ego: None,
            distance_to_node: None,
            matched_way: None,
            timestamp: f.timestamp,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExportCounts {
    pub elements: usize,
    pub frames: usize,
    pub relations: usize,
    pub streams: usize,
}

/// What one archive pass wrote and evicted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArchiveOutcome {
    pub file: Option<PathBuf>,
    pub exported: ExportCounts,
    pub evicted: usize,
}

/// A shareable LDM instance. Queries take the read lock; commits, map loads
/// and eviction take the write lock, so readers never see half a payload.
pub struct Ldm {
    store: RwLock<GraphStore>,
    map: RwLock<Option<Arc<RoadGraph>>>,
    archived_until: Mutex<Timestamp>,
    exec: Execution,
}

impl std::fmt::Debug for Ldm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ldm")
            .field("stats", &self.stats())
            .field("exec", &self.exec)
            .finish_non_exhaustive()
    }
}

impl Default for Ldm {
    fn default() -> Self {
        Ldm::from_store(GraphStore::default())
    }
}

impl Ldm {
    pub fn new(config: LdmConfig) -> Result<Self, LdmError> {
        config.validate()?;
        Ok(Ldm::from_store(GraphStore::new(config)))
    }

    pub fn from_store(store: GraphStore) -> Self {
        Ldm {
            store: RwLock::new(store),
            map: RwLock::new(None),
            archived_until: Mutex::new(Timestamp::MIN),
            exec: Execution::default(),
        }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    /// Read access to the underlying store.
    pub fn store(&self) -> RwLockReadGuard<'_, GraphStore> {
        self.store.read()
    }

    pub fn road_graph(&self) -> Option<Arc<RoadGraph>> {
        self.map.read().clone()
    }

    pub fn config(&self) -> LdmConfig {
        self.store.read().config().clone()
    }

    pub fn configure(&self, config: LdmConfig) -> Result<(), LdmError> {
        Ok(self.store.write().configure(config)?)
    }

    /// Commits a parsed scene atomically.
    pub fn add_objects(&self, p: &OpenLabelPayload, source: FrameSource) -> Result<CommitCounts, LdmError> {
        Ok(commit_payload(p, &mut self.store.write(), source)?)
    }

    pub fn add_cpm(&self, m: &CpmMessage) -> Result<CommitCounts, LdmError> {
        let p = cpm_to_openlabel(m)?;
        self.add_objects(&p, FrameSource::V2x)
    }

    /// Merges `g` into the current road graph and mirrors it into layer 1.
    pub fn load_map(&self, g: &RoadGraph) -> Result<LoadCounts, LdmError> {
        let mut slot = self.map.write();
        let merged = match slot.as_deref() {
            Some(current) => current.merged(g),
            None => g.clone(),
        };
        let counts = load_into_store(g, &mut self.store.write())?;
        *slot = Some(Arc::new(merged));
        Ok(counts)
    }

    pub fn load_osm(&self, document: &[u8]) -> Result<LoadCounts, LdmError> {
        let g = map::parse_osm(document)?;
        self.load_map(&g)
    }

    pub fn query_frames(&self, id: ElementId, interval: TimeInterval) -> Result<Vec<FrameRecord>, LdmError> {
        Ok(self.store.read().query_frames(id, interval)?)
    }

    pub fn snapshot(&self, at: Timestamp) -> Snapshot {
        self.store.read().snapshot(at)
    }

    pub fn stats(&self) -> StoreStats {
        self.store.read().stats()
    }

    pub fn evict(&self, now: Timestamp) -> usize {
        self.store.write().evict_expired(now)
    }

    /// Flat, ordered list of store figures. Absent values read as zero.
    pub fn get_info(&self) -> Vec<(String, Value)> {
        let store = self.store.read();
        let stats = store.stats();
        let mut out = Vec::new();
        for layer in LdmLayer::ALL {
            let n = stats.element_count_per_layer.get(&layer).copied().unwrap_or(0);
            out.push((format!("elements_{}", layer.label()), json!(n)));
        }
        out.push(("elements_total".into(), json!(store.element_count())));
        out.push(("objects_at_latest_frame".into(), json!(store.objects_at_latest_frame())));
        let (first, last) = stats.frame_range.unwrap_or((0, 0));
        out.push(("frame_first".into(), json!(first)));
        out.push(("frame_last".into(), json!(last)));
        out.push(("frame_count".into(), json!(stats.frame_count)));
        out.push(("relation_count".into(), json!(stats.relation_count)));
        out.push(("stream_count".into(), json!(store.streams().count())));
        out.push(("last_update".into(), json!(stats.last_update.0)));
        out.push(("evicted_total".into(), json!(stats.evicted_total)));
        let (nodes, ways) = self
            .map
            .read()
            .as_deref()
            .map_or((0, 0), |g| (g.node_count(), g.way_count()));
        out.push(("map_nodes".into(), json!(nodes)));
        out.push(("map_ways".into(), json!(ways)));
        out
    }

    /// The scene that [`Ldm::export`] writes for `interval`.
    ///
    /// Holds every element with frames in the interval together with those
    /// frames, the layer-1 elements its relations point at, all streams, and
    /// the relations between exported elements. Payload uids are store ids.
    pub fn export_payload(&self, interval: TimeInterval) -> Result<OpenLabelPayload, LdmError> {
        if interval.is_empty() {
            return Err(LdmError::InvalidArgument("export interval is empty".into()));
        }
        let store = self.store.read();
        Ok(build_export(&store, interval))
    }

    /// Writes one JSON document for `interval` to `sink`.
    pub fn export(&self, interval: TimeInterval, sink: &mut impl Write) -> Result<ExportCounts, LdmError> {
        let p = self.export_payload(interval)?;
        write_payload(&p, sink)
    }

    /// Writes everything that the next eviction at `now` may remove into
    /// `archive_dir`, then evicts. Without an archive directory this only evicts.
    pub fn archive_and_evict(&self, now: Timestamp) -> Result<ArchiveOutcome, LdmError> {
        let mut store = self.store.write();
        let mut outcome = ArchiveOutcome::default();
        let dir = store.config().archive_dir.clone();
        if let (Some(dir), Some(ttl)) = (dir, store.config().min_finite_ttl()) {
            let mut until = self.archived_until.lock();
            let cutoff = Timestamp(now.0.saturating_sub(ttl.as_micros() as i64));
            let interval = TimeInterval::new(*until, cutoff);
            if !interval.is_empty() {
                let p = build_export(&store, interval);
                if !p.frames.is_empty() {
                    fs::create_dir_all(&dir).map_err(LdmError::Sink)?;
                    let start = p.frames.iter().map(|f| f.timestamp).min().expect("non-empty");
                    let path = dir.join(format!("ldm-{}-{}.json", start.0, cutoff.0));
                    let mut file = fs::File::create(&path).map_err(LdmError::Sink)?;
                    outcome.exported = write_payload(&p, &mut file)?;
                    outcome.file = Some(path);
                }
                *until = cutoff;
            }
        }
        outcome.evicted = store.evict_expired(now);
        Ok(outcome)
    }

    /// Non-ego objects within `radius` metres of the ego at `at`, nearest first.
    pub fn objects_within(&self, ego: ElementId, radius: f64, at: Timestamp) -> Result<Vec<ObjectReport>, LdmError> {
        check_radius(radius)?;
        let store = self.store.read();
        let ego_pos = ego_pose(&store, ego, at)?.position();
        let candidates = positioned_objects(&store, at, Some(ego));
        let mut out = par::filter_map(self.exec, &candidates, |(e, f)| {
            let d = haversine_m(ego_pos, f.pose?.position());
            (d <= radius).then(|| ObjectReport {
                distance_to_ego: Some(d),
                ..ObjectReport::new(e, f)
            })
        });
        sort_by_distance(&mut out, |r| r.distance_to_ego);
        Ok(out)
    }

    /// Objects map-matched to the same way as the ego. Empty when the ego is off-road.
    pub fn objects_on_same_way(&self, ego: ElementId, at: Timestamp) -> Result<Vec<ObjectReport>, LdmError> {
        let g = self.road_graph().ok_or(LdmError::NoMap)?;
        let store = self.store.read();
        let ego_pos = ego_pose(&store, ego, at)?.position();
        let params = MatchParams::default();
        let Some(ego_match) = map_match_with(&g, ego_pos, &params, self.exec) else {
            return Ok(Vec::new());
        };
        let candidates = positioned_objects(&store, at, Some(ego));
        // the outer loop is already parallel, so each match runs sequentially
        let mut out = par::filter_map(self.exec, &candidates, |(e, f)| {
            let p = f.pose?.position();
            let m = map_match_with(&g, p, &params, Execution::Sequential)?;
            (m.way == ego_match.way).then(|| ObjectReport {
                distance_to_ego: Some(haversine_m(ego_pos, p)),
                matched_way: Some(m.way),
                ..ObjectReport::new(e, f)
            })
        });
        sort_by_distance(&mut out, |r| r.distance_to_ego);
        Ok(out)
    }

    /// Objects that stood still during `(at - window, at]`, by element id.
    ///
    /// A frame's speed is its `speed` field, or else the displacement from the
    /// previous frame in the window over the elapsed time. An object qualifies
    /// with at least two frames in the window, at least one known speed, and
    /// every known speed at most `speed_eps`.
    pub fn stationary_objects(
        &self,
        at: Timestamp,
        window: Duration,
        speed_eps: f64,
    ) -> Result<Vec<ObjectReport>, LdmError> {
        if window.is_zero() {
            return Err(LdmError::InvalidArgument("window must be positive".into()));
        }
        if !(speed_eps >= 0.0) {
            return Err(LdmError::InvalidArgument("speed_eps must be non-negative".into()));
        }
        let w = i64::try_from(window.as_micros()).unwrap_or(i64::MAX);
        let interval = TimeInterval::new(
            Timestamp(at.0.saturating_sub(w).saturating_add(1)),
            Timestamp(at.0.saturating_add(1)),
        );
        let store = self.store.read();
        let objects: Vec<&SceneElement> = store.elements().filter(|e| e.kind == ElementKind::Object).collect();
        Ok(par::filter_map(self.exec, &objects, |e| {
            let frames = store.query_frames(e.id, interval).expect("element listed by the store");
            if frames.len() < 2 {
                return None;
            }
            let mut known = 0;
            for (i, f) in frames.iter().enumerate() {
                let speed = f.pose.and_then(|p| p.speed).or_else(|| {
                    let prev = frames[..i].last()?;
                    let (a, b) = (prev.pose?.position(), f.pose?.position());
                    let dt = (f.timestamp.0 - prev.timestamp.0) as f64 / 1e6;
                    Some(haversine_m(a, b) / dt)
                });
                match speed {
                    Some(v) if v > speed_eps || v.is_nan() => return None,
                    Some(_) => known += 1,
                    None => {}
                }
            }
            (known > 0).then(|| ObjectReport::new(e, frames.last().expect("two or more frames")))
        }))
    }

    /// Up to `k` road nodes ahead of the ego: the end of its matched segment
    /// that it is heading towards, then the nodes beyond it.
    pub fn next_road_nodes(&self, ego: ElementId, k: usize, at: Timestamp) -> Result<Vec<OsmId>, LdmError> {
        let g = self.road_graph().ok_or(LdmError::NoMap)?;
        let pose = ego_pose(&self.store.read(), ego, at)?;
        let m = map_match_with(&g, pose.position(), &MatchParams::default(), self.exec)
            .ok_or(LdmError::Unmatched(ego))?;
        if k == 0 {
            return Ok(Vec::new());
        }
        let (a, b) = g.segment(m.way, m.segment).expect("matched segment exists");
        let endpoint = |n| g.position(n).expect("segment endpoints are resolved nodes");
        let (pa, pb) = (endpoint(a), endpoint(b));
        let forward = if angle_diff_deg(initial_bearing_deg(pa, pb), pose.heading) <= 90.0 {
            b
        } else {
            a
        };
        let mut out = vec![forward];
        out.extend(map::next_nodes(&g, forward, pose.heading, k - 1)?);
        Ok(out)
    }

    /// Objects within `radius` metres of road node `node`, nearest first.
    pub fn objects_near_node(&self, node: OsmId, radius: f64, at: Timestamp) -> Result<Vec<ObjectReport>, LdmError> {
        check_radius(radius)?;
        let g = self.road_graph().ok_or(LdmError::NoMap)?;
        let anchor = g.position(node).ok_or(LdmError::UnknownNode(node))?;
        let store = self.store.read();
        let candidates = positioned_objects(&store, at, None);
        let mut out = par::filter_map(self.exec, &candidates, |(e, f)| {
            let d = haversine_m(anchor, f.pose?.position());
            (d <= radius).then(|| ObjectReport {
                distance_to_node: Some(d),
                ..ObjectReport::new(e, f)
            })
        });
        sort_by_distance(&mut out, |r| r.distance_to_node);
        Ok(out)
    }

    /// Writes the store and road graph as `store.json` and `map.json` under `dir`.
    pub fn save_state(&self, dir: &Path) -> Result<(), LdmError> {
        fs::create_dir_all(dir).map_err(|e| state_error(dir, e))?;
        let dump = self.store.read().dump();
        write_json(&dir.join(STORE_FILE), &dump)?;
        match self.road_graph() {
            Some(g) => write_json(&dir.join(MAP_FILE), &*g)?,
            None => {
                let path = dir.join(MAP_FILE);
                if path.exists() {
                    fs::remove_file(&path).map_err(|e| state_error(&path, e))?;
                }
            }
        }
        Ok(())
    }

    /// Restores state written by [`Ldm::save_state`]. Missing files mean empty state.
    pub fn load_state(config: LdmConfig, dir: &Path) -> Result<Self, LdmError> {
        config.validate()?;
        let store = match read_json::<StoreDump>(&dir.join(STORE_FILE))? {
            Some(dump) => GraphStore::from_dump(config, dump)?,
            None => GraphStore::new(config),
        };
        let ldm = Ldm::from_store(store);
        if let Some(g) = read_json::<RoadGraph>(&dir.join(MAP_FILE))? {
            *ldm.map.write() = Some(Arc::new(g));
        }
        Ok(ldm)
    }
}

fn build_export(store: &GraphStore, interval: TimeInterval) -> OpenLabelPayload {
    let mut frames = Vec::new();
    let mut exported = BTreeSet::new();
    for e in store.elements() {
        let fs = store.query_frames(e.id, interval).expect("element listed by the store");
        if fs.is_empty() {
            continue;
        }
        exported.insert(e.id);
        frames.extend(fs.into_iter().map(|f| PayloadFrame {
            element: (e.kind, e.id.0),
            frame_index: f.frame_index,
            timestamp: f.timestamp,
            pose: f.pose,
            dynamic_attributes: f.dynamic_attributes,
            source: Some(f.source),
        }));
    }
    let is_static = |id: ElementId| store.element(id).is_some_and(|e| e.layer == LdmLayer::Static);
    let referenced: Vec<ElementId> = store
        .relations()
        .flat_map(|r| [(r.subject, r.object), (r.object, r.subject)])
        .filter(|&(from, to)| exported.contains(&from) && !exported.contains(&to) && is_static(to))
        .map(|(_, to)| to)
        .collect();
    exported.extend(referenced);
    let uid = |id: ElementId| {
        let e = store.element(id).expect("exported element exists");
        (e.kind, e.id.0)
    };
    let elements: BTreeMap<_, _> = exported
        .iter()
        .map(|&id| {
            let e = store.element(id).expect("exported element exists");
            let p = PayloadElement {
                kind: e.kind,
                name: e.name.clone(),
                semantic_type: e.semantic_type.clone(),
                layer: e.layer,
                static_attributes: e.static_attributes.clone(),
            };
            ((e.kind, e.id.0), p)
        })
        .collect();
    let relations = store
        .relations()
        .filter(|r| exported.contains(&r.subject) && exported.contains(&r.object))
        .map(|r| PayloadRelation {
            subject: uid(r.subject),
            predicate: r.predicate.clone(),
            object: uid(r.object),
            frame_span: r.frame_span,
        })
        .collect();
    frames.sort_by(|a, b| (a.frame_index, a.element).cmp(&(b.frame_index, b.element)));
    OpenLabelPayload {
        schema_version: SCHEMA_VERSION.to_owned(),
        elements,
        frames,
        streams: store.streams().cloned().collect(),
        coordinate_systems: BTreeMap::new(),
        relations,
    }
}

fn write_payload(p: &OpenLabelPayload, sink: &mut impl Write) -> Result<ExportCounts, LdmError> {
    let mut text = p.to_json_pretty();
    text.push('\n');
    sink.write_all(text.as_bytes()).map_err(LdmError::Sink)?;
    sink.flush().map_err(LdmError::Sink)?;
    Ok(ExportCounts {
        elements: p.elements.len(),
        frames: p.frames.len(),
        relations: p.relations.len(),
        streams: p.streams.len(),
    })
}

fn check_radius(radius: f64) -> Result<(), LdmError> {
    if radius > 0.0 && radius.is_finite() {
        Ok(())
    } else {
        Err(LdmError::InvalidArgument(format!("radius must be positive, got {radius}")))
    }
}

fn ego_pose(store: &GraphStore, ego: ElementId, at: Timestamp) -> Result<GeoPose, LdmError> {
    store.element(ego).ok_or(LdmError::UnknownElement(ego))?;
    store
        .latest_frame_at(ego, at)
        .and_then(|f| f.pose)
        .ok_or(LdmError::NoPose(ego))
}

/// Objects other than `skip` whose latest frame at `at` carries a pose.
fn positioned_objects(
    store: &GraphStore,
    at: Timestamp,
    skip: Option<ElementId>,
) -> Vec<(&SceneElement, &FrameRecord)> {
    store
        .latest_at(at)
        .filter(|(e, _)| e.kind == ElementKind::Object && Some(e.id) != skip)
        .filter_map(|(e, f)| f.filter(|f| f.pose.is_some()).map(|f| (e, f)))
        .collect()
}

fn sort_by_distance(reports: &mut [ObjectReport], key: impl Fn(&ObjectReport) -> Option<f64>) {
    reports.sort_by(|a, b| {
        let (da, db) = (key(a).unwrap_or(f64::INFINITY), key(b).unwrap_or(f64::INFINITY));
        da.total_cmp(&db).then(a.element_id.cmp(&b.element_id))
    });
}

fn state_error(path: &Path, e: impl std::fmt::Display) -> LdmError {
    LdmError::State {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), LdmError> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_vec(value).map_err(|e| state_error(path, e))?;
    fs::write(&tmp, text).map_err(|e| state_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| state_error(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, LdmError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| state_error(path, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(state_error(path, e)),
    }
}
