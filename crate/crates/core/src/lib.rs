//! Embedded Local Dynamic Map: a layered, time-indexed scene store with map
//! matching, geo-queries, JSON scene I/O and a live feed.

pub mod config;
pub mod feed;
pub mod geo;
pub mod ingest;
pub mod map;
pub mod model;
pub mod par;
pub mod query;
pub mod store;
