//! Cooperative perception messages in a JSON profile.
//!
//! Field names and units follow the ETSI CPM conventions: offsets in
//! centimeters east (`x_distance`) and north (`y_distance`) of the sender's
//! reference position, speeds in centimeters per second, confidence in
//! percent. Times are microseconds since the Unix epoch.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::openlabel::{OpenLabelPayload, PayloadElement, PayloadFrame, PayloadRelation, SCHEMA_VERSION};
use super::IngestError;
use crate::geo::{enu_to_wgs84, EnuPoint};
use crate::model::{
    normalize_heading, AttributeValue, Attributes, ElementKind, FrameSource, GeoPose, LdmLayer,
    Timestamp,
};

/// Bound on |x_distance| and |y_distance|, in centimeters.
pub const MAX_DISTANCE_CM: i64 = 13_107_100;
pub const STATION_TYPE: &str = "v2x.station";
pub const PERCEIVED_BY: &str = "perceivedBy";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    #[default]
    Unknown,
    Pedestrian,
    Cyclist,
    Vehicle,
}

impl ObjectClass {
    pub fn semantic_type(self) -> &'static str {
        match self {
            ObjectClass::Unknown => "unknown",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
            ObjectClass::Vehicle => "vehicle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceivedObject {
    pub object_id: u32,
    pub x_distance: i64,
    pub y_distance: i64,
    #[serde(default)]
    pub x_speed: i64,
    #[serde(default)]
    pub y_speed: i64,
    #[serde(default)]
    pub object_class: ObjectClass,
    pub confidence: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpmMessage {
    pub station_id: u32,
    pub generation_time: Timestamp,
    pub reference_position: GeoPose,
    #[serde(default)]
    pub perceived_objects: Vec<PerceivedObject>,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> IngestError {
    IngestError::InvalidMessage {
        field: field.into(),
        reason: reason.into(),
    }
}

pub fn parse_cpm(text: &str) -> Result<CpmMessage, IngestError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let msg = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            IngestError::syntax(inner)
        } else {
            IngestError::Schema {
                path,
                message: inner.to_string(),
            }
        }
    })?;
    de.end().map_err(IngestError::syntax)?;
    Ok(msg)
}

pub fn parse_cpm_value(value: serde_json::Value) -> Result<CpmMessage, IngestError> {
    serde_path_to_error::deserialize(value).map_err(|e| IngestError::Schema {
        path: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

impl CpmMessage {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.generation_time.0 < 0 {
            return Err(invalid("generation_time", "negative"));
        }
        let mut ref_pose = self.reference_position;
        ref_pose.heading = normalize_heading(ref_pose.heading);
        if let Some(v) = ref_pose.violations().into_iter().next() {
            return Err(invalid("reference_position", v));
        }
        let mut ids = BTreeSet::new();
        for (i, o) in self.perceived_objects.iter().enumerate() {
            let field = |f: &str| format!("perceived_objects[{i}].{f}");
            if o.x_distance.abs() > MAX_DISTANCE_CM {
                return Err(invalid(field("x_distance"), format!("|{}| > {MAX_DISTANCE_CM}", o.x_distance)));
            }
            if o.y_distance.abs() > MAX_DISTANCE_CM {
                return Err(invalid(field("y_distance"), format!("|{}| > {MAX_DISTANCE_CM}", o.y_distance)));
            }
            if !(0..=100).contains(&o.confidence) {
                return Err(invalid(field("confidence"), format!("{} not in [0, 100]", o.confidence)));
            }
            if !ids.insert(o.object_id) {
                return Err(invalid(field("object_id"), format!("duplicate object id {}", o.object_id)));
            }
        }
        Ok(())
    }

    /// Frame index used for this message: generation time in milliseconds.
    pub fn frame_index(&self) -> u64 {
        (self.generation_time.0 / 1_000) as u64
    }
}

pub fn station_name(station_id: u32) -> String {
    format!("station-{station_id}")
}

pub fn object_name(station_id: u32, object_id: u32) -> String {
    format!("cpm-{station_id}-{object_id}")
}

/// Absolute pose of a perceived object.
pub fn perceived_pose(reference: &GeoPose, o: &PerceivedObject) -> GeoPose {
    let offset = EnuPoint::planar(o.x_distance as f64 / 100.0, o.y_distance as f64 / 100.0);
    let (vx, vy) = (o.x_speed as f64, o.y_speed as f64);
    GeoPose::at(enu_to_wgs84(reference.position(), offset))
        .with_heading(vx.atan2(vy).to_degrees())
        .with_speed(vx.hypot(vy) / 100.0)
}

/// Converts a message into a one-frame scene.
///
/// The sender becomes object uid 0 named `station-<id>` at the reference
/// position; perceived objects follow as uids 1.. named
/// `cpm-<station>-<object>`, each related to the sender by `perceivedBy`.
pub fn cpm_to_openlabel(m: &CpmMessage) -> Result<OpenLabelPayload, IngestError> {
    m.validate()?;
    let frame_index = m.frame_index();
    let station = (ElementKind::Object, 0u64);
    let mut elements = BTreeMap::new();
    let mut frames = Vec::with_capacity(m.perceived_objects.len() + 1);
    let mut relations = Vec::with_capacity(m.perceived_objects.len());

    elements.insert(
        station,
        PayloadElement {
            kind: ElementKind::Object,
            name: station_name(m.station_id),
            semantic_type: STATION_TYPE.to_owned(),
            layer: LdmLayer::Dynamic,
            static_attributes: Attributes::from([(
                "station_id".to_owned(),
                AttributeValue::Number(m.station_id as f64),
            )]),
        },
    );
    let reference = m.reference_position.with_heading(m.reference_position.heading);
    frames.push(PayloadFrame {
        element: station,
        frame_index,
        timestamp: m.generation_time,
        pose: Some(reference),
        dynamic_attributes: Attributes::new(),
        source: Some(FrameSource::V2x),
    });

    for (i, o) in m.perceived_objects.iter().enumerate() {
        let uid = (ElementKind::Object, i as u64 + 1);
        elements.insert(
            uid,
            PayloadElement {
                kind: ElementKind::Object,
                name: object_name(m.station_id, o.object_id),
                semantic_type: o.object_class.semantic_type().to_owned(),
                layer: LdmLayer::Dynamic,
                static_attributes: Attributes::from([
                    ("station_id".to_owned(), AttributeValue::Number(m.station_id as f64)),
                    ("object_id".to_owned(), AttributeValue::Number(o.object_id as f64)),
                ]),
            },
        );
        frames.push(PayloadFrame {
            element: uid,
            frame_index,
            timestamp: m.generation_time,
            pose: Some(perceived_pose(&reference, o)),
            dynamic_attributes: Attributes::from([(
                "confidence".to_owned(),
                AttributeValue::Number(o.confidence as f64),
            )]),
            source: Some(FrameSource::V2x),
        });
        relations.push(PayloadRelation {
            subject: uid,
            predicate: PERCEIVED_BY.to_owned(),
            object: station,
            frame_span: None,
        });
    }

    Ok(OpenLabelPayload {
        schema_version: SCHEMA_VERSION.to_owned(),
        elements,
        frames,
        streams: Vec::new(),
        coordinate_systems: BTreeMap::new(),
        relations,
    })
}
