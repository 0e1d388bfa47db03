//! Layered scene data model: elements, frames, streams and relations.
//!
//! Every element carries a static part (attributes that hold for its whole
//! lifetime) and a dynamic part (one [`FrameRecord`] per frame index). The two
//! attribute namespaces of an element are disjoint.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Layer of the local dynamic map, from permanent map data to highly dynamic objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LdmLayer {
    /// Permanent static data: road topology.
    #[serde(rename = "L1")]
    Static,
    /// Transient static data: signs, buildings, roadside infrastructure.
    #[serde(rename = "L2")]
    QuasiStatic,
    /// Transient dynamic data: congestion, signal phases.
    #[serde(rename = "L3")]
    Transient,
    /// Highly dynamic data: vehicles, pedestrians, the ego-vehicle.
    #[serde(rename = "L4")]
    Dynamic,
}

impl LdmLayer {
    pub const ALL: [LdmLayer; 4] = [
        LdmLayer::Static,
        LdmLayer::QuasiStatic,
        LdmLayer::Transient,
        LdmLayer::Dynamic,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LdmLayer::Static => "L1",
            LdmLayer::QuasiStatic => "L2",
            LdmLayer::Transient => "L3",
            LdmLayer::Dynamic => "L4",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        LdmLayer::ALL.into_iter().find(|l| l.label() == s)
    }
}

impl fmt::Display for LdmLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Identifier of a stored element. Assigned by the store, never reused.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ElementId(pub u64);

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Microseconds since the Unix epoch.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const MIN: Timestamp = Timestamp(i64::MIN);
    pub const MAX: Timestamp = Timestamp(i64::MAX);

    pub fn from_millis(ms: i64) -> Self {
        Timestamp(ms.saturating_mul(1_000))
    }

    pub fn from_secs(s: i64) -> Self {
        Timestamp(s.saturating_mul(1_000_000))
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    /// Age of `self` seen from `now`, saturating at the i64 range.
    pub fn age_at(self, now: Timestamp) -> i64 {
        now.0.saturating_sub(self.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Half-open time interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeInterval {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        TimeInterval { start, end }
    }

    pub fn all() -> Self {
        TimeInterval::new(Timestamp::MIN, Timestamp::MAX)
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Half-open interval of frame indices `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct FrameSpan {
    pub start: u64,
    pub end: u64,
}

impl FrameSpan {
    pub const EMPTY: FrameSpan = FrameSpan { start: 0, end: 0 };

    pub fn new(start: u64, end: u64) -> Self {
        FrameSpan { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, frame: u64) -> bool {
        self.start <= frame && frame < self.end
    }
}

/// Typed attribute value. The four families mirror boolean/num/text/vec attribute data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttributeValue {
    Boolean(bool),
    Number(f64),
    Text(String),
    Vector(Vec<f64>),
}

pub type Attributes = BTreeMap<String, AttributeValue>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Object,
    Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    LocalPerception,
    V2x,
    Synthetic,
}

/// Horizontal WGS84 position plus altitude.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub alt: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { lat, lon, alt: 0.0 }
    }

    pub fn with_alt(lat: f64, lon: f64, alt: f64) -> Self {
        GeoPoint { lat, lon, alt }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && self.alt.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..180.0).contains(&self.lon)
    }
}

/// Geo-located pose of an element at one frame.
///
/// `heading` is in degrees clockwise from true north and is normalized into
/// `[0, 360)` by [`GeoPose::new`] and [`GeoPose::with_heading`]. `speed` is
/// optional; consumers derive it from consecutive poses when absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPose {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub alt: f64,
    #[serde(default)]
    pub heading: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
}

impl GeoPose {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPose {
            lat,
            lon,
            alt: 0.0,
            heading: 0.0,
            speed: None,
        }
    }

    pub fn at(p: GeoPoint) -> Self {
        GeoPose {
            alt: p.alt,
            ..GeoPose::new(p.lat, p.lon)
        }
    }

    pub fn with_heading(mut self, heading: f64) -> Self {
        self.heading = normalize_heading(heading);
        self
    }

    pub fn with_speed(mut self, speed: f64) -> Self {
        self.speed = Some(speed);
        self
    }

    pub fn with_alt(mut self, alt: f64) -> Self {
        self.alt = alt;
        self
    }

    pub fn position(&self) -> GeoPoint {
        GeoPoint::with_alt(self.lat, self.lon, self.alt)
    }

    /// Range violations of this pose, as field names with a reason.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.lat.is_finite() || !(-90.0..=90.0).contains(&self.lat) {
            out.push("lat out of range".to_owned());
        }
        if !self.lon.is_finite() || !(-180.0..180.0).contains(&self.lon) {
            out.push("lon out of range".to_owned());
        }
        if !self.alt.is_finite() {
            out.push("alt not finite".to_owned());
        }
        if !self.heading.is_finite() || !(0.0..360.0).contains(&self.heading) {
            out.push("heading out of range".to_owned());
        }
        if let Some(s) = self.speed {
            if !s.is_finite() || s < 0.0 {
                out.push("speed out of range".to_owned());
            }
        }
        out
    }
}

/// Wraps any finite angle into `[0, 360)`.
pub fn normalize_heading(deg: f64) -> f64 {
    if !deg.is_finite() {
        return deg;
    }
    let h = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// Dynamic data of one element at one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub timestamp: Timestamp,
    pub element_id: ElementId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<GeoPose>,
    #[serde(default)]
    pub dynamic_attributes: Attributes,
    pub source: FrameSource,
}

impl FrameRecord {
    pub fn new(element_id: ElementId, frame_index: u64, timestamp: Timestamp) -> Self {
        FrameRecord {
            frame_index,
            timestamp,
            element_id,
            pose: None,
            dynamic_attributes: Attributes::new(),
            source: FrameSource::Synthetic,
        }
    }

    pub fn with_pose(mut self, pose: GeoPose) -> Self {
        self.pose = Some(pose);
        self
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: AttributeValue) -> Self {
        self.dynamic_attributes.insert(name.into(), value);
        self
    }

    pub fn with_source(mut self, source: FrameSource) -> Self {
        self.source = source;
        self
    }
}

/// A graph node: one object or map entity with its static descriptor and frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneElement {
    pub id: ElementId,
    pub kind: ElementKind,
    pub name: String,
    pub semantic_type: String,
    pub layer: LdmLayer,
    #[serde(default)]
    pub static_attributes: Attributes,
    #[serde(default)]
    pub frames: BTreeMap<u64, FrameRecord>,
}

impl SceneElement {
    pub fn new(
        kind: ElementKind,
        name: impl Into<String>,
        semantic_type: impl Into<String>,
        layer: LdmLayer,
    ) -> Self {
        SceneElement {
            id: ElementId::default(),
            kind,
            name: name.into(),
            semantic_type: semantic_type.into(),
            layer,
            static_attributes: Attributes::new(),
            frames: BTreeMap::new(),
        }
    }

    /// Convenience for a perception object on layer 4.
    pub fn object(name: impl Into<String>, semantic_type: impl Into<String>) -> Self {
        SceneElement::new(ElementKind::Object, name, semantic_type, LdmLayer::Dynamic)
    }

    pub fn with_id(mut self, id: ElementId) -> Self {
        self.id = id;
        self
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: AttributeValue) -> Self {
        self.static_attributes.insert(name.into(), value);
        self
    }

    /// `[min frame index, max frame index + 1)`, empty for purely static elements.
    pub fn frame_span(&self) -> FrameSpan {
        match (self.frames.keys().next(), self.frames.keys().next_back()) {
            (Some(&lo), Some(&hi)) => FrameSpan::new(lo, hi + 1),
            _ => FrameSpan::EMPTY,
        }
    }

    pub fn latest_frame(&self) -> Option<&FrameRecord> {
        self.frames.values().next_back()
    }
}

/// Directed, named edge between two elements.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub subject: ElementId,
    pub predicate: String,
    pub object: ElementId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_span: Option<FrameSpan>,
}

impl Relation {
    pub fn new(subject: ElementId, predicate: impl Into<String>, object: ElementId) -> Self {
        Relation {
            subject,
            predicate: predicate.into(),
            object,
            frame_span: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamType {
    Camera,
    Lidar,
    Gnss,
    V2x,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDescriptor {
    pub name: String,
    pub stream_type: StreamType,
    #[serde(default)]
    pub source_uri: String,
}

/// A violated element invariant, naming the offending field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every [`SceneElement`] invariant. Returns all violations; empty means valid.
pub fn validate_element(e: &SceneElement) -> Vec<Violation> {
    let mut out = Vec::new();
    if e.name.is_empty() {
        out.push(Violation {
            field: "name".into(),
            message: "empty name".into(),
        });
    }
    for (name, value) in &e.static_attributes {
        if !value_is_finite(value) {
            out.push(Violation {
                field: format!("static_attributes.{name}"),
                message: "non-finite number".into(),
            });
        }
    }
    let mut overlap = std::collections::BTreeSet::new();
    let mut prev: Option<&FrameRecord> = None;
    for (&index, rec) in &e.frames {
        if rec.frame_index != index {
            out.push(Violation {
                field: format!("frames[{index}].frame_index"),
                message: format!("keyed at {index} but records {}", rec.frame_index),
            });
        }
        if rec.element_id != e.id {
            out.push(Violation {
                field: format!("frames[{index}].element_id"),
                message: format!("belongs to {} not {}", rec.element_id, e.id),
            });
        }
        for name in rec.dynamic_attributes.keys() {
            if e.static_attributes.contains_key(name) {
                overlap.insert(name.clone());
            }
        }
        if let Some(pose) = &rec.pose {
            for v in pose.violations() {
                out.push(Violation {
                    field: format!("frames[{index}].pose"),
                    message: v,
                });
            }
        }
        if let Some(p) = prev {
            if rec.timestamp <= p.timestamp {
                out.push(Violation {
                    field: format!("frames[{index}].timestamp"),
                    message: format!(
                        "timestamp {} not after frame {} at {}",
                        rec.timestamp, p.frame_index, p.timestamp
                    ),
                });
            }
        }
        prev = Some(rec);
    }
    for name in overlap {
        out.push(Violation {
            field: name.clone(),
            message: format!("attribute overlap: {name}"),
        });
    }
    out
}

fn value_is_finite(v: &AttributeValue) -> bool {
    match v {
        AttributeValue::Number(x) => x.is_finite(),
        AttributeValue::Vector(xs) => xs.iter().all(|x| x.is_finite()),
        _ => true,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MergeError {
    #[error("frame for element {record} merged into element {element}")]
    ElementMismatch { element: ElementId, record: ElementId },
    #[error("attribute overlap: {0} is held statically")]
    AttributeOverlap(String),
    #[error(
        "timestamp regression: frame {frame_index} at {timestamp} conflicts with frame {neighbor_index} at {neighbor_timestamp}"
    )]
    TimestampRegression {
        frame_index: u64,
        timestamp: Timestamp,
        neighbor_index: u64,
        neighbor_timestamp: Timestamp,
    },
    #[error("invalid pose in frame {frame_index}: {reason}")]
    InvalidPose { frame_index: u64, reason: String },
}

/// Checks whether `rec` may be merged into `existing` without applying it.
pub fn check_dynamic(existing: &SceneElement, rec: &FrameRecord) -> Result<(), MergeError> {
    check_frame_against(
        existing.id,
        &existing.static_attributes,
        &existing.frames,
        rec,
    )
}

pub(crate) fn check_frame_against(
    id: ElementId,
    static_attributes: &Attributes,
    frames: &BTreeMap<u64, FrameRecord>,
    rec: &FrameRecord,
) -> Result<(), MergeError> {
    if rec.element_id != id {
        return Err(MergeError::ElementMismatch {
            element: id,
            record: rec.element_id,
        });
    }
    if let Some(name) = rec
        .dynamic_attributes
        .keys()
        .find(|k| static_attributes.contains_key(*k))
    {
        return Err(MergeError::AttributeOverlap(name.clone()));
    }
    if let Some(pose) = &rec.pose {
        if let Some(reason) = pose.violations().into_iter().next() {
            return Err(MergeError::InvalidPose {
                frame_index: rec.frame_index,
                reason,
            });
        }
    }
    if let Some((&i, before)) = frames.range(..rec.frame_index).next_back() {
        if before.timestamp >= rec.timestamp {
            return Err(MergeError::TimestampRegression {
                frame_index: rec.frame_index,
                timestamp: rec.timestamp,
                neighbor_index: i,
                neighbor_timestamp: before.timestamp,
            });
        }
    }
    if let Some((&i, after)) = frames.range(rec.frame_index.saturating_add(1)..).next() {
        if after.timestamp <= rec.timestamp {
            return Err(MergeError::TimestampRegression {
                frame_index: rec.frame_index,
                timestamp: rec.timestamp,
                neighbor_index: i,
                neighbor_timestamp: after.timestamp,
            });
        }
    }
    Ok(())
}

/// Returns `existing` with `rec` stored at its frame index. A record at an
/// already-present index replaces the old one.
pub fn merge_dynamic(existing: &SceneElement, rec: FrameRecord) -> Result<SceneElement, MergeError> {
    check_dynamic(existing, &rec)?;
    let mut out = existing.clone();
    out.frames.insert(rec.frame_index, rec);
    Ok(out)
}
