//! Embedded temporal property-graph store.
//!
//! Elements are graph nodes holding their static attributes and a
//! frame-indexed log of dynamic records; relations are directed named edges.
//! Frames of one element are indexed both by frame index and by timestamp
//! (the two orders coincide, see [`crate::model::merge_dynamic`]).
//!
//! All mutation goes through `&mut self`; the caller provides the
//! reader-writer discipline (see [`crate::query::Ldm`]). A mutation batch can
//! be made all-or-nothing with [`GraphStore::transaction`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, LdmConfig};
use crate::model::{
    check_frame_against, validate_element, Attributes, ElementId, ElementKind, FrameRecord,
    LdmLayer, MergeError, Relation, SceneElement, StreamDescriptor, TimeInterval, Timestamp,
    Violation,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("invalid element: {}", join_violations(.0))]
    InvalidElement(Vec<Violation>),
    #[error("unknown element {0}")]
    UnknownElement(ElementId),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; ")
}

/// What happened to a frame handed to the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameOutcome {
    Inserted,
    Updated,
    /// Identical record already stored.
    Unchanged,
    /// Posed outside the spatial filter; nothing stored.
    FilteredOut,
}

impl FrameOutcome {
    pub fn accepted(self) -> bool {
        self != FrameOutcome::FilteredOut
    }

    pub fn changed(self) -> bool {
        matches!(self, FrameOutcome::Inserted | FrameOutcome::Updated)
    }
}

/// Outcome of [`GraphStore::upsert_element`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Upserted {
    pub id: ElementId,
    pub created: bool,
    /// New static attributes were added or existing ones changed.
    pub changed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    /// Layers without elements are absent.
    pub element_count_per_layer: BTreeMap<LdmLayer, usize>,
    /// Lowest and highest stored frame index.
    pub frame_range: Option<(u64, u64)>,
    pub frame_count: usize,
    pub relation_count: usize,
    pub last_update: Timestamp,
    pub evicted_total: u64,
}

/// All elements with their latest frame at or before `at`, plus every relation.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub at: Timestamp,
    /// Ascending by id. Each element holds at most its one selected frame.
    pub elements: Vec<SceneElement>,
    pub relations: Vec<Relation>,
}

impl Snapshot {
    pub fn element(&self, id: ElementId) -> Option<&SceneElement> {
        self.elements
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.elements[i])
    }
}

#[derive(Clone, Debug)]
struct StoredElement {
    element: SceneElement,
    by_time: BTreeMap<Timestamp, u64>,
    /// Store time of the last upsert; static-only elements age from here.
    touched: Timestamp,
}

type ElementKey = (ElementKind, String, String);

enum Undo {
    Created(ElementId),
    Statics {
        id: ElementId,
        old: Attributes,
        touched: Timestamp,
    },
    Frame {
        id: ElementId,
        index: u64,
        old: Option<FrameRecord>,
    },
    Relation(Relation),
    Stream {
        name: String,
        old: Option<StreamDescriptor>,
    },
}

/// Serializable image of a store, used to persist state between processes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreDump {
    pub next_id: u64,
    pub last_update: Timestamp,
    pub evicted_total: u64,
    pub elements: Vec<DumpedElement>,
    pub relations: Vec<Relation>,
    pub streams: Vec<StreamDescriptor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpedElement {
    pub element: SceneElement,
    pub touched: Timestamp,
}

pub struct GraphStore {
    config: LdmConfig,
    elements: BTreeMap<ElementId, StoredElement>,
    keys: HashMap<ElementKey, ElementId>,
    relations: BTreeSet<Relation>,
    streams: BTreeMap<String, StreamDescriptor>,
    /// Multiset of stored frame indices over all elements.
    frame_indices: BTreeMap<u64, usize>,
    frame_count: usize,
    next_id: u64,
    last_update: Timestamp,
    evicted_total: u64,
    journal: Option<Vec<Undo>>,
}

impl Default for GraphStore {
    fn default() -> Self {
        GraphStore::new(LdmConfig::default())
    }
}

impl GraphStore {
    pub fn new(config: LdmConfig) -> Self {
        GraphStore {
            config,
            elements: BTreeMap::new(),
            keys: HashMap::new(),
            relations: BTreeSet::new(),
            streams: BTreeMap::new(),
            frame_indices: BTreeMap::new(),
            frame_count: 0,
            next_id: 0,
            last_update: Timestamp(0),
            evicted_total: 0,
            journal: None,
        }
    }

    pub fn config(&self) -> &LdmConfig {
        &self.config
    }

    /// Replaces the configuration. TTL changes apply from the next eviction on.
    pub fn configure(&mut self, config: LdmConfig) -> Result<(), StoreError> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn last_update(&self) -> Timestamp {
        self.last_update
    }

    pub fn element(&self, id: ElementId) -> Option<&SceneElement> {
        self.elements.get(&id).map(|s| &s.element)
    }

    pub fn elements(&self) -> impl Iterator<Item = &SceneElement> {
        self.elements.values().map(|s| &s.element)
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn find(&self, kind: ElementKind, name: &str, semantic_type: &str) -> Option<ElementId> {
        self.keys
            .get(&(kind, name.to_owned(), semantic_type.to_owned()))
            .copied()
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.iter()
    }

    pub fn streams(&self) -> impl Iterator<Item = &StreamDescriptor> {
        self.streams.values()
    }

    fn record(&mut self, undo: Undo) {
        if let Some(j) = self.journal.as_mut() {
            j.push(undo);
        }
    }

    /// Runs `f` so that either all of its mutations stay or none do.
    ///
    /// Nested calls roll back only their own part.
    pub fn transaction<T, E>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, E>) -> Result<T, E> {
        let outer = self.journal.is_some();
        if !outer {
            self.journal = Some(Vec::new());
        }
        let mark = self.journal.as_ref().map_or(0, Vec::len);
        let counters = (self.next_id, self.last_update, self.evicted_total);
        let result = f(self);
        if result.is_err() {
            self.rollback_to(mark);
            (self.next_id, self.last_update, self.evicted_total) = counters;
        }
        if !outer {
            self.journal = None;
        }
        result
    }

    fn rollback_to(&mut self, mark: usize) {
        let Some(mut journal) = self.journal.take() else {
            return;
        };
        while journal.len() > mark {
            match journal.pop().expect("non-empty journal") {
                Undo::Created(id) => {
                    if let Some(s) = self.elements.remove(&id) {
                        let e = s.element;
                        self.keys.remove(&(e.kind, e.name, e.semantic_type));
                    }
                }
                Undo::Statics { id, old, touched } => {
                    if let Some(s) = self.elements.get_mut(&id) {
                        s.element.static_attributes = old;
                        s.touched = touched;
                    }
                }
                Undo::Frame { id, index, old } => {
                    self.take_frame(id, index);
                    if let Some(rec) = old {
                        self.put_frame(id, rec);
                    }
                }
                Undo::Relation(r) => {
                    self.relations.remove(&r);
                }
                Undo::Stream { name, old } => match old {
                    Some(d) => {
                        self.streams.insert(name, d);
                    }
                    None => {
                        self.streams.remove(&name);
                    }
                },
            }
        }
        self.journal = Some(journal);
    }

    /// Inserts or merges an element, keyed by (kind, name, semantic type).
    ///
    /// Frames carried by `e` are inserted as by [`GraphStore::insert_frame`].
    pub fn upsert_element(&mut self, e: SceneElement) -> Result<ElementId, StoreError> {
        let touched = self.last_update;
        self.upsert_element_at(e, touched).map(|u| u.id)
    }

    /// [`GraphStore::upsert_element`] with an explicit store time for the element's age.
    pub fn upsert_element_at(
        &mut self,
        mut e: SceneElement,
        touched: Timestamp,
    ) -> Result<Upserted, StoreError> {
        let violations = validate_element(&e);
        let frames = std::mem::take(&mut e.frames);
        if !violations.is_empty() {
            return Err(StoreError::InvalidElement(violations));
        }
        self.transaction(|store| {
            let up = store.upsert_static(e, touched)?;
            for (_, mut rec) in frames {
                rec.element_id = up.id;
                store.insert_frame_outcome(rec)?;
            }
            Ok(up)
        })
    }

    fn upsert_static(&mut self, e: SceneElement, touched: Timestamp) -> Result<Upserted, StoreError> {
        let key = (e.kind, e.name.clone(), e.semantic_type.clone());
        let Some(&id) = self.keys.get(&key) else {
            let id = ElementId(self.next_id);
            self.next_id += 1;
            let element = SceneElement { id, ..e };
            self.keys.insert(key, id);
            self.elements.insert(
                id,
                StoredElement {
                    element,
                    by_time: BTreeMap::new(),
                    touched,
                },
            );
            self.record(Undo::Created(id));
            return Ok(Upserted {
                id,
                created: true,
                changed: true,
            });
        };
        let stored = &self.elements[&id];
        if stored.element.layer != e.layer {
            return Err(StoreError::InvalidElement(vec![Violation {
                field: "layer".into(),
                message: format!(
                    "layer of {} is {} and cannot become {}",
                    e.name, stored.element.layer, e.layer
                ),
            }]));
        }
        let fresh: Vec<&String> = e
            .static_attributes
            .keys()
            .filter(|k| !stored.element.static_attributes.contains_key(*k))
            .collect();
        if let Some(clash) = stored.element.frames.values().find_map(|f| {
            fresh
                .iter()
                .find(|k| f.dynamic_attributes.contains_key(k.as_str()))
        }) {
            return Err(StoreError::InvalidElement(vec![Violation {
                field: (*clash).clone(),
                message: format!("attribute overlap: {clash}"),
            }]));
        }
        let changed = e
            .static_attributes
            .iter()
            .any(|(k, v)| stored.element.static_attributes.get(k) != Some(v));
        let old_touched = stored.touched;
        if changed || touched > old_touched {
            let slot = self.elements.get_mut(&id).expect("indexed element");
            let old = slot.element.static_attributes.clone();
            slot.element.static_attributes.extend(e.static_attributes);
            slot.touched = slot.touched.max(touched);
            self.record(Undo::Statics {
                id,
                old,
                touched: old_touched,
            });
        }
        Ok(Upserted {
            id,
            created: false,
            changed,
        })
    }

    /// Stores a frame unless the spatial filter rejects its pose.
    ///
    /// Returns whether the frame was accepted.
    pub fn insert_frame(&mut self, rec: FrameRecord) -> Result<bool, StoreError> {
        self.insert_frame_outcome(rec).map(FrameOutcome::accepted)
    }

    pub fn insert_frame_outcome(&mut self, rec: FrameRecord) -> Result<FrameOutcome, StoreError> {
        let id = rec.element_id;
        let stored = self
            .elements
            .get(&id)
            .ok_or(StoreError::UnknownElement(id))?;
        if let (Some(filter), Some(pose)) = (&self.config.spatial_filter, &rec.pose) {
            if !filter.contains(pose.position()) {
                return Ok(FrameOutcome::FilteredOut);
            }
        }
        check_frame_against(
            id,
            &stored.element.static_attributes,
            &stored.element.frames,
            &rec,
        )?;
        let index = rec.frame_index;
        let timestamp = rec.timestamp;
        let outcome = match stored.element.frames.get(&index) {
            Some(old) if *old == rec => return Ok(FrameOutcome::Unchanged),
            Some(_) => FrameOutcome::Updated,
            None => FrameOutcome::Inserted,
        };
        let old = self.put_frame(id, rec);
        self.record(Undo::Frame { id, index, old });
        self.last_update = self.last_update.max(timestamp);
        if let Some(cap) = self.config.max_frames_per_element {
            while self.elements[&id].element.frames.len() > cap {
                let oldest = *self.elements[&id]
                    .element
                    .frames
                    .keys()
                    .next()
                    .expect("over cap");
                let old = self.take_frame(id, oldest);
                self.record(Undo::Frame {
                    id,
                    index: oldest,
                    old,
                });
                self.evicted_total += 1;
            }
        }
        Ok(outcome)
    }

    fn put_frame(&mut self, id: ElementId, rec: FrameRecord) -> Option<FrameRecord> {
        let slot = self.elements.get_mut(&id).expect("element checked by caller");
        let index = rec.frame_index;
        slot.by_time.insert(rec.timestamp, index);
        let old = slot.element.frames.insert(index, rec);
        match &old {
            Some(prev) => {
                if slot.by_time.get(&prev.timestamp) == Some(&index)
                    && slot.element.frames[&index].timestamp != prev.timestamp
                {
                    slot.by_time.remove(&prev.timestamp);
                }
            }
            None => {
                *self.frame_indices.entry(index).or_default() += 1;
                self.frame_count += 1;
            }
        }
        old
    }

    fn take_frame(&mut self, id: ElementId, index: u64) -> Option<FrameRecord> {
        let slot = self.elements.get_mut(&id)?;
        let rec = slot.element.frames.remove(&index)?;
        slot.by_time.remove(&rec.timestamp);
        if let Some(n) = self.frame_indices.get_mut(&index) {
            *n -= 1;
            if *n == 0 {
                self.frame_indices.remove(&index);
            }
        }
        self.frame_count -= 1;
        Some(rec)
    }

    /// Adds a relation. Returns `false` when the identical relation already exists.
    pub fn add_relation(&mut self, r: Relation) -> Result<bool, StoreError> {
        for end in [r.subject, r.object] {
            if !self.elements.contains_key(&end) {
                return Err(StoreError::UnknownElement(end));
            }
        }
        if self.relations.contains(&r) {
            return Ok(false);
        }
        self.relations.insert(r.clone());
        self.record(Undo::Relation(r));
        Ok(true)
    }

    /// Registers or replaces a stream by name. Returns whether anything changed.
    pub fn upsert_stream(&mut self, s: StreamDescriptor) -> bool {
        if self.streams.get(&s.name) == Some(&s) {
            return false;
        }
        let old = self.streams.insert(s.name.clone(), s.clone());
        self.record(Undo::Stream { name: s.name, old });
        true
    }

    /// Deletes an element with its frames and relations.
    pub fn remove_element(&mut self, id: ElementId) -> Result<SceneElement, StoreError> {
        if self.journal.is_some() {
            // Removal is not journaled; it never runs inside a transaction.
            panic!("remove_element inside a transaction");
        }
        let s = self.elements.get(&id).ok_or(StoreError::UnknownElement(id))?;
        let indices: Vec<u64> = s.element.frames.keys().copied().collect();
        let mut frames = BTreeMap::new();
        for i in indices {
            if let Some(f) = self.take_frame(id, i) {
                frames.insert(i, f);
            }
        }
        let mut e = self.elements.remove(&id).expect("present").element;
        self.keys
            .remove(&(e.kind, e.name.clone(), e.semantic_type.clone()));
        self.relations.retain(|r| r.subject != id && r.object != id);
        e.frames = frames;
        Ok(e)
    }

    /// Drops every frame older than its layer's TTL at `now` and returns how many.
    ///
    /// A finite-TTL element left without frames is removed together with its
    /// relations when frames were evicted from it in this pass, or when it has
    /// not been upserted for longer than its TTL. Infinite-TTL layers are never
    /// touched.
    pub fn evict_expired(&mut self, now: Timestamp) -> usize {
        assert!(self.journal.is_none(), "eviction inside a transaction");
        let mut evicted = 0usize;
        let mut dead = Vec::new();
        let ids: Vec<ElementId> = self.elements.keys().copied().collect();
        for id in ids {
            let stored = &self.elements[&id];
            let Some(ttl) = self.config.ttl(stored.element.layer).as_micros() else {
                continue;
            };
            // expired iff now - ts > ttl, i.e. ts < now - ttl
            let horizon = Timestamp(now.0.saturating_sub(ttl));
            let expired: Vec<u64> = stored.by_time.range(..horizon).map(|(_, &i)| i).collect();
            let lost_frames = !expired.is_empty();
            for i in expired {
                self.take_frame(id, i);
                evicted += 1;
            }
            let stored = &self.elements[&id];
            if stored.element.frames.is_empty() && (lost_frames || stored.touched.age_at(now) > ttl) {
                dead.push(id);
            }
        }
        if !dead.is_empty() {
            let dead_set: BTreeSet<ElementId> = dead.iter().copied().collect();
            for id in &dead {
                let e = self.elements.remove(id).expect("present").element;
                self.keys.remove(&(e.kind, e.name, e.semantic_type));
            }
            self.relations
                .retain(|r| !dead_set.contains(&r.subject) && !dead_set.contains(&r.object));
        }
        self.evicted_total += evicted as u64;
        evicted
    }

    /// Frames of `id` with timestamps in `interval`, ascending by frame index.
    pub fn query_frames(
        &self,
        id: ElementId,
        interval: TimeInterval,
    ) -> Result<Vec<FrameRecord>, StoreError> {
        let s = self.elements.get(&id).ok_or(StoreError::UnknownElement(id))?;
        if interval.is_empty() {
            return Ok(Vec::new());
        }
        Ok(s.by_time
            .range(interval.start..interval.end)
            .map(|(_, i)| s.element.frames[i].clone())
            .collect())
    }

    /// Latest frame of `id` stamped at or before `at`.
    pub fn latest_frame_at(&self, id: ElementId, at: Timestamp) -> Option<&FrameRecord> {
        let s = self.elements.get(&id)?;
        s.by_time
            .range(..=at)
            .next_back()
            .map(|(_, i)| &s.element.frames[i])
    }

    /// Borrowing form of [`GraphStore::snapshot`]: every element with its latest frame `<= at`.
    pub fn latest_at(
        &self,
        at: Timestamp,
    ) -> impl Iterator<Item = (&SceneElement, Option<&FrameRecord>)> + '_ {
        self.elements.values().map(move |s| {
            let frame = s
                .by_time
                .range(..=at)
                .next_back()
                .map(|(_, i)| &s.element.frames[i]);
            (&s.element, frame)
        })
    }

    pub fn snapshot(&self, at: Timestamp) -> Snapshot {
        let elements = self
            .latest_at(at)
            .map(|(e, f)| {
                let mut out = SceneElement {
                    frames: BTreeMap::new(),
                    ..e.clone()
                };
                if let Some(f) = f {
                    out.frames.insert(f.frame_index, f.clone());
                }
                out
            })
            .collect();
        Snapshot {
            at,
            elements,
            relations: self.relations.iter().cloned().collect(),
        }
    }

    pub fn stats(&self) -> StoreStats {
        let mut per_layer = BTreeMap::new();
        for s in self.elements.values() {
            *per_layer.entry(s.element.layer).or_insert(0) += 1;
        }
        let frame_range = match (
            self.frame_indices.keys().next(),
            self.frame_indices.keys().next_back(),
        ) {
            (Some(&lo), Some(&hi)) => Some((lo, hi)),
            _ => None,
        };
        StoreStats {
            element_count_per_layer: per_layer,
            frame_range,
            frame_count: self.frame_count,
            relation_count: self.relations.len(),
            last_update: self.last_update,
            evicted_total: self.evicted_total,
        }
    }

    /// Number of elements holding a frame at the highest stored frame index.
    pub fn objects_at_latest_frame(&self) -> usize {
        self.frame_indices.values().next_back().copied().unwrap_or(0)
    }

    /// Checks every structural invariant. Returns human-readable problems; empty means sound.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut indices: BTreeMap<u64, usize> = BTreeMap::new();
        let mut total = 0;
        for (&id, s) in &self.elements {
            let e = &s.element;
            if e.id != id {
                problems.push(format!("element keyed {id} carries id {}", e.id));
            }
            if id.0 >= self.next_id {
                problems.push(format!("element id {id} not below next id {}", self.next_id));
            }
            for v in validate_element(e) {
                problems.push(format!("element {id}: {v}"));
            }
            if self.keys.get(&(e.kind, e.name.clone(), e.semantic_type.clone())) != Some(&id) {
                problems.push(format!("element {id} missing from key index"));
            }
            if s.by_time.len() != e.frames.len()
                || s.by_time.iter().any(|(t, i)| e.frames.get(i).map(|f| f.timestamp) != Some(*t))
            {
                problems.push(format!("element {id}: time index out of sync"));
            }
            for &i in e.frames.keys() {
                *indices.entry(i).or_default() += 1;
                total += 1;
            }
        }
        if self.keys.len() != self.elements.len() {
            problems.push("key index size differs from element count".into());
        }
        if indices != self.frame_indices || total != self.frame_count {
            problems.push("frame index multiset out of sync".into());
        }
        for r in &self.relations {
            if !self.elements.contains_key(&r.subject) || !self.elements.contains_key(&r.object) {
                problems.push(format!("dangling relation {r:?}"));
            }
        }
        problems
    }

    pub fn dump(&self) -> StoreDump {
        StoreDump {
            next_id: self.next_id,
            last_update: self.last_update,
            evicted_total: self.evicted_total,
            elements: self
                .elements
                .values()
                .map(|s| DumpedElement {
                    element: s.element.clone(),
                    touched: s.touched,
                })
                .collect(),
            relations: self.relations.iter().cloned().collect(),
            streams: self.streams.values().cloned().collect(),
        }
    }

    /// Rebuilds a store from a dump, re-checking every invariant on the way in.
    pub fn from_dump(config: LdmConfig, dump: StoreDump) -> Result<Self, StoreError> {
        config.validate()?;
        let mut store = GraphStore::new(config);
        for d in dump.elements {
            let violations = validate_element(&d.element);
            if !violations.is_empty() {
                return Err(StoreError::InvalidElement(violations));
            }
            let mut e = d.element;
            let id = e.id;
            let frames = std::mem::take(&mut e.frames);
            store
                .keys
                .insert((e.kind, e.name.clone(), e.semantic_type.clone()), id);
            store.elements.insert(
                id,
                StoredElement {
                    element: e,
                    by_time: BTreeMap::new(),
                    touched: d.touched,
                },
            );
            for (_, f) in frames {
                store.put_frame(id, f);
            }
            store.next_id = store.next_id.max(id.0 + 1);
        }
        store.next_id = store.next_id.max(dump.next_id);
        for r in dump.relations {
            store.add_relation(r)?;
        }
        for s in dump.streams {
            store.upsert_stream(s);
        }
        store.last_update = dump.last_update;
        store.evicted_total = dump.evicted_total;
        Ok(store)
    }
}
