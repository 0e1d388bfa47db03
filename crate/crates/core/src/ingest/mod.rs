//! Input adapters for perception scenes and V2X messages.

pub mod cpm;
pub mod openlabel;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::model::{FrameRecord, FrameSource, Relation, SceneElement};
use crate::store::{GraphStore, StoreError};

pub use cpm::{cpm_to_openlabel, parse_cpm, CpmMessage, ObjectClass, PerceivedObject};
pub use openlabel::{parse_openlabel, OpenLabelPayload};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestError {
    #[error("SyntaxError at line {line} column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("SchemaError at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("InvalidMessage: {field}: {reason}")]
    InvalidMessage { field: String, reason: String },
    #[error("{context}: {source}")]
    Store {
        context: String,
        #[source]
        source: StoreError,
    },
}

impl IngestError {
    pub(crate) fn syntax(e: serde_json::Error) -> Self {
        IngestError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// Number of new or changed entities written by one commit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CommitCounts {
    pub elements: usize,
    pub frames: usize,
    pub relations: usize,
}

/// Writes a payload into the store, all or nothing.
///
/// Elements are matched by (kind, name, type); frames go through the
/// spatial filter. Frames without their own source are tagged `source`.
/// Counts only cover entities that were created or changed, so committing
/// the same payload twice yields zero counts the second time.
pub fn commit_payload(
    p: &OpenLabelPayload,
    store: &mut GraphStore,
    source: FrameSource,
) -> Result<CommitCounts, IngestError> {
    store.transaction(|store| {
        let mut counts = CommitCounts::default();
        let touched = p
            .max_timestamp()
            .map_or(store.last_update(), |t| t.max(store.last_update()));
        let mut ids = BTreeMap::new();
        for (&(kind, uid), e) in &p.elements {
            let element = SceneElement {
                static_attributes: e.static_attributes.clone(),
                ..SceneElement::new(kind, e.name.clone(), e.semantic_type.clone(), e.layer)
            };
            let up = store
                .upsert_element_at(element, touched)
                .map_err(|source| IngestError::Store {
                    context: format!("element {} ({})", e.name, uid),
                    source,
                })?;
            if up.changed {
                counts.elements += 1;
            }
            ids.insert((kind, uid), up.id);
        }
        for f in &p.frames {
            let rec = FrameRecord {
                frame_index: f.frame_index,
                timestamp: f.timestamp,
                element_id: ids[&f.element],
                pose: f.pose,
                dynamic_attributes: f.dynamic_attributes.clone(),
                source: f.source.unwrap_or(source),
            };
            let outcome = store
                .insert_frame_outcome(rec)
                .map_err(|source| IngestError::Store {
                    context: format!(
                        "frame {} of {}",
                        f.frame_index, p.elements[&f.element].name
                    ),
                    source,
                })?;
            if outcome.changed() {
                counts.frames += 1;
            }
        }
        for s in &p.streams {
            store.upsert_stream(s.clone());
        }
        for r in &p.relations {
            let rel = Relation {
                subject: ids[&r.subject],
                predicate: r.predicate.clone(),
                object: ids[&r.object],
                frame_span: r.frame_span,
            };
            let added = store.add_relation(rel).map_err(|source| IngestError::Store {
                context: format!("relation {}", r.predicate),
                source,
            })?;
            if added {
                counts.relations += 1;
            }
        }
        Ok(counts)
    })
}
