//! OpenLABEL-style scene documents.
//!
//! A document has a single root key `openlabel` holding `objects`,
//! `contexts`, `frames`, `streams`, `coordinate_systems` and `relations`.
//! Element uids are decimal strings, unique per element kind. Attribute data
//! follows the boolean/num/text/vec families. Two LDM extensions are used:
//! `ldm_layer` on elements and a per-entry `geo_pose` and `timestamp`
//! (microseconds) inside frames. Unknown keys are ignored on input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::IngestError;
use crate::model::{
    normalize_heading, AttributeValue, Attributes, ElementKind, FrameSource, FrameSpan, GeoPose,
    LdmLayer, StreamDescriptor, StreamType, Timestamp,
};

pub const ROOT_KEY: &str = "openlabel";
pub const SCHEMA_VERSION: &str = "1.0.0";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Named<T> {
    pub name: String,
    pub val: T,
}

/// Attribute data grouped by value family.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeData {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boolean: Vec<Named<bool>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub num: Vec<Named<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub text: Vec<Named<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vec: Vec<Named<Vec<f64>>>,
}

impl AttributeData {
    pub fn is_empty(&self) -> bool {
        self.boolean.is_empty() && self.num.is_empty() && self.text.is_empty() && self.vec.is_empty()
    }

    pub fn from_attributes(attrs: &Attributes) -> Option<Self> {
        if attrs.is_empty() {
            return None;
        }
        let mut d = AttributeData::default();
        for (name, v) in attrs {
            let name = name.clone();
            match v {
                AttributeValue::Boolean(val) => d.boolean.push(Named { name, val: *val }),
                AttributeValue::Number(val) => d.num.push(Named { name, val: *val }),
                AttributeValue::Text(val) => d.text.push(Named { name, val: val.clone() }),
                AttributeValue::Vector(val) => d.vec.push(Named { name, val: val.clone() }),
            }
        }
        Some(d)
    }

    fn into_attributes(self, path: &str) -> Result<Attributes, IngestError> {
        let mut out = Attributes::new();
        let entries = self
            .boolean
            .into_iter()
            .map(|n| (n.name, AttributeValue::Boolean(n.val)))
            .chain(self.num.into_iter().map(|n| (n.name, AttributeValue::Number(n.val))))
            .chain(self.text.into_iter().map(|n| (n.name, AttributeValue::Text(n.val))))
            .chain(self.vec.into_iter().map(|n| (n.name, AttributeValue::Vector(n.val))));
        for (name, value) in entries {
            if out.insert(name.clone(), value).is_some() {
                return Err(schema(path, format!("duplicate attribute {name:?}")));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElementEntry {
    pub name: String,
    #[serde(rename = "type")]
    pub semantic_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldm_layer: Option<LdmLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_data: Option<AttributeData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_data: Option<AttributeData>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameProperties {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameElementEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo_pose: Option<GeoPose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<FrameSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_data: Option<AttributeData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_data: Option<AttributeData>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_properties: Option<FrameProperties>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub objects: BTreeMap<u64, FrameElementEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub contexts: BTreeMap<u64, FrameElementEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    #[serde(rename = "type")]
    pub stream_type: StreamType,
    #[serde(default)]
    pub uri: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RdfRef {
    #[serde(rename = "type")]
    pub kind: ElementKind,
    pub uid: String,
}

/// Inclusive frame interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameInterval {
    pub frame_start: u64,
    pub frame_end: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationEntry {
    #[serde(default)]
    pub name: String,
    #[serde(rename = "type")]
    pub predicate: String,
    pub rdf_subjects: Vec<RdfRef>,
    pub rdf_objects: Vec<RdfRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frame_intervals: Vec<FrameInterval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub schema_version: String,
}

impl Default for Metadata {
    fn default() -> Self {
        Metadata {
            schema_version: SCHEMA_VERSION.to_owned(),
        }
    }
}

/// Wire form of the scene body under the root key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneBody {
    #[serde(default)]
    pub metadata: Metadata,
    #[serde(default)]
    pub objects: BTreeMap<u64, ElementEntry>,
    #[serde(default)]
    pub contexts: BTreeMap<u64, ElementEntry>,
    #[serde(default)]
    pub frames: BTreeMap<u64, FrameEntry>,
    #[serde(default)]
    pub streams: BTreeMap<String, StreamEntry>,
    #[serde(default)]
    pub coordinate_systems: BTreeMap<String, Value>,
    #[serde(default)]
    pub relations: BTreeMap<u64, RelationEntry>,
}

#[derive(Serialize)]
struct Document<'a> {
    openlabel: &'a SceneBody,
}

/// Payload-local reference to an element: kind plus uid.
pub type PayloadUid = (ElementKind, u64);

#[derive(Clone, Debug, PartialEq)]
pub struct PayloadElement {
    pub kind: ElementKind,
    pub name: String,
    pub semantic_type: String,
    pub layer: LdmLayer,
    pub static_attributes: Attributes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PayloadFrame {
    pub element: PayloadUid,
    pub frame_index: u64,
    pub timestamp: Timestamp,
    pub pose: Option<GeoPose>,
    pub dynamic_attributes: Attributes,
    pub source: Option<FrameSource>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PayloadRelation {
    pub subject: PayloadUid,
    pub predicate: String,
    pub object: PayloadUid,
    pub frame_span: Option<FrameSpan>,
}

/// A parsed scene with every reference resolved.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpenLabelPayload {
    pub schema_version: String,
    pub elements: BTreeMap<PayloadUid, PayloadElement>,
    /// Ascending by (frame index, element).
    pub frames: Vec<PayloadFrame>,
    pub streams: Vec<StreamDescriptor>,
    pub coordinate_systems: BTreeMap<String, Value>,
    pub relations: Vec<PayloadRelation>,
}

fn schema(path: &str, message: impl Into<String>) -> IngestError {
    IngestError::Schema {
        path: path.to_owned(),
        message: message.into(),
    }
}

fn kind_section(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::Object => "objects",
        ElementKind::Context => "contexts",
    }
}

/// Parses a JSON scene document.
pub fn parse_openlabel(text: &str) -> Result<OpenLabelPayload, IngestError> {
    let value: Value = serde_json::from_str(text).map_err(IngestError::syntax)?;
    parse_openlabel_value(value)
}

/// [`parse_openlabel`] for an already-decoded JSON value.
pub fn parse_openlabel_value(value: Value) -> Result<OpenLabelPayload, IngestError> {
    let Value::Object(mut root) = value else {
        return Err(schema("$", "document is not a JSON object"));
    };
    let body = root
        .remove(ROOT_KEY)
        .ok_or_else(|| schema("$", "missing root scene key"))?;
    let body: SceneBody = serde_path_to_error::deserialize(body).map_err(|e| {
        let path = e.path().to_string();
        schema(&format!("{ROOT_KEY}.{path}"), e.into_inner().to_string())
    })?;
    OpenLabelPayload::from_body(body)
}

impl OpenLabelPayload {
    pub fn from_body(body: SceneBody) -> Result<Self, IngestError> {
        let mut elements = BTreeMap::new();
        for (kind, section) in [
            (ElementKind::Object, body.objects),
            (ElementKind::Context, body.contexts),
        ] {
            for (uid, entry) in section {
                let path = format!("{ROOT_KEY}.{}.{uid}", kind_section(kind));
                if entry.name.is_empty() {
                    return Err(schema(&path, "empty name"));
                }
                let mut attrs = Attributes::new();
                for data in [entry.object_data, entry.context_data].into_iter().flatten() {
                    for (k, v) in data.into_attributes(&path)? {
                        if attrs.insert(k.clone(), v).is_some() {
                            return Err(schema(&path, format!("duplicate attribute {k:?}")));
                        }
                    }
                }
                elements.insert(
                    (kind, uid),
                    PayloadElement {
                        kind,
                        name: entry.name,
                        semantic_type: entry.semantic_type,
                        layer: entry.ldm_layer.unwrap_or(LdmLayer::Dynamic),
                        static_attributes: attrs,
                    },
                );
            }
        }

        let mut frames = Vec::new();
        for (index, frame) in body.frames {
            let frame_ts = frame.frame_properties.and_then(|p| p.timestamp);
            for (kind, section) in [
                (ElementKind::Object, frame.objects),
                (ElementKind::Context, frame.contexts),
            ] {
                for (uid, entry) in section {
                    let path = format!("{ROOT_KEY}.frames.{index}.{}.{uid}", kind_section(kind));
                    if !elements.contains_key(&(kind, uid)) {
                        return Err(schema(
                            &path,
                            format!("undeclared {} uid {uid}", kind_section(kind).trim_end_matches('s')),
                        ));
                    }
                    let timestamp = entry
                        .timestamp
                        .or(frame_ts)
                        .ok_or_else(|| schema(&path, "frame without timestamp"))?;
                    let mut attrs = Attributes::new();
                    for data in [entry.object_data, entry.context_data].into_iter().flatten() {
                        for (k, v) in data.into_attributes(&path)? {
                            if attrs.insert(k.clone(), v).is_some() {
                                return Err(schema(&path, format!("duplicate attribute {k:?}")));
                            }
                        }
                    }
                    let pose = entry.geo_pose.map(|mut p| {
                        p.heading = normalize_heading(p.heading);
                        p
                    });
                    frames.push(PayloadFrame {
                        element: (kind, uid),
                        frame_index: index,
                        timestamp: Timestamp(timestamp),
                        pose,
                        dynamic_attributes: attrs,
                        source: entry.source,
                    });
                }
            }
        }

        let streams = body
            .streams
            .into_iter()
            .map(|(name, s)| StreamDescriptor {
                name,
                stream_type: s.stream_type,
                source_uri: s.uri,
            })
            .collect();

        let mut relations = Vec::new();
        for (rid, r) in body.relations {
            let path = format!("{ROOT_KEY}.relations.{rid}");
            let resolve = |side: &str, refs: &[RdfRef]| -> Result<Vec<PayloadUid>, IngestError> {
                if refs.is_empty() {
                    return Err(schema(&path, format!("{side} is empty")));
                }
                refs.iter()
                    .map(|r| {
                        let uid: u64 = r
                            .uid
                            .parse()
                            .map_err(|_| schema(&path, format!("bad uid {:?}", r.uid)))?;
                        if elements.contains_key(&(r.kind, uid)) {
                            Ok((r.kind, uid))
                        } else {
                            Err(schema(
                                &path,
                                format!("undeclared {} uid {uid}", kind_section(r.kind).trim_end_matches('s')),
                            ))
                        }
                    })
                    .collect()
            };
            let subjects = resolve("rdf_subjects", &r.rdf_subjects)?;
            let objects = resolve("rdf_objects", &r.rdf_objects)?;
            let frame_span = match r.frame_intervals.as_slice() {
                [] => None,
                [fi] if fi.frame_start <= fi.frame_end => {
                    Some(FrameSpan::new(fi.frame_start, fi.frame_end + 1))
                }
                [_] => return Err(schema(&path, "frame_start after frame_end")),
                _ => return Err(schema(&path, "more than one frame interval")),
            };
            for s in &subjects {
                for o in &objects {
                    relations.push(PayloadRelation {
                        subject: *s,
                        predicate: r.predicate.clone(),
                        object: *o,
                        frame_span,
                    });
                }
            }
        }

        Ok(OpenLabelPayload {
            schema_version: body.metadata.schema_version,
            elements,
            frames,
            streams,
            coordinate_systems: body.coordinate_systems,
            relations,
        })
    }

    pub fn to_body(&self) -> SceneBody {
        let mut body = SceneBody {
            metadata: Metadata {
                schema_version: self.schema_version.clone(),
            },
            coordinate_systems: self.coordinate_systems.clone(),
            ..SceneBody::default()
        };
        for (&(kind, uid), e) in &self.elements {
            let data = AttributeData::from_attributes(&e.static_attributes);
            let entry = ElementEntry {
                name: e.name.clone(),
                semantic_type: e.semantic_type.clone(),
                ldm_layer: Some(e.layer),
                object_data: if kind == ElementKind::Object { data.clone() } else { None },
                context_data: if kind == ElementKind::Context { data } else { None },
            };
            match kind {
                ElementKind::Object => body.objects.insert(uid, entry),
                ElementKind::Context => body.contexts.insert(uid, entry),
            };
        }
        for f in &self.frames {
            let (kind, uid) = f.element;
            let data = AttributeData::from_attributes(&f.dynamic_attributes);
            let entry = FrameElementEntry {
                timestamp: Some(f.timestamp.0),
                geo_pose: f.pose,
                source: f.source,
                object_data: if kind == ElementKind::Object { data.clone() } else { None },
                context_data: if kind == ElementKind::Context { data } else { None },
            };
            let frame = body.frames.entry(f.frame_index).or_default();
            match kind {
                ElementKind::Object => frame.objects.insert(uid, entry),
                ElementKind::Context => frame.contexts.insert(uid, entry),
            };
        }
        for s in &self.streams {
            body.streams.insert(
                s.name.clone(),
                StreamEntry {
                    stream_type: s.stream_type,
                    uri: s.source_uri.clone(),
                },
            );
        }
        for (i, r) in self.relations.iter().enumerate() {
            let rdf = |(kind, uid): PayloadUid| RdfRef {
                kind,
                uid: uid.to_string(),
            };
            body.relations.insert(
                i as u64,
                RelationEntry {
                    name: String::new(),
                    predicate: r.predicate.clone(),
                    rdf_subjects: vec![rdf(r.subject)],
                    rdf_objects: vec![rdf(r.object)],
                    frame_intervals: r
                        .frame_span
                        .filter(|s| !s.is_empty())
                        .map(|s| FrameInterval {
                            frame_start: s.start,
                            frame_end: s.end - 1,
                        })
                        .into_iter()
                        .collect(),
                },
            );
        }
        body
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(Document {
            openlabel: &self.to_body(),
        })
        .expect("scene bodies always serialize")
    }

    /// Pretty-printed document. Keys and entries come out in a fixed order.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&Document {
            openlabel: &self.to_body(),
        })
        .expect("scene bodies always serialize")
    }

    pub fn max_timestamp(&self) -> Option<Timestamp> {
        self.frames.iter().map(|f| f.timestamp).max()
    }
}
