//! Store configuration and its key-value text format.
//!
//! ```text
//! # durations: inf, or a number with us/ms/s/m/h (bare numbers are seconds)
//! ttl.L1 = inf
//! ttl.L2 = 24h
//! ttl.L3 = 10m
//! ttl.L4 = 30s
//! eviction_period = 1s
//! spatial_filter = 43.0, -2.5, 43.5, -1.5   # min_lat, min_lon, max_lat, max_lon
//! archive_dir = /var/lib/ldm/archive
//! max_frames_per_element = 1000
//! ```

use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::geo::GeoBox;
use crate::model::LdmLayer;

/// Time-to-live of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ttl {
    Infinite,
    Finite(Duration),
}

impl Ttl {
    pub fn secs(s: u64) -> Self {
        Ttl::Finite(Duration::from_secs(s))
    }

    pub fn as_micros(self) -> Option<i64> {
        match self {
            Ttl::Infinite => None,
            Ttl::Finite(d) => Some(i64::try_from(d.as_micros()).unwrap_or(i64::MAX)),
        }
    }
}

impl fmt::Display for Ttl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ttl::Infinite => f.write_str("inf"),
            Ttl::Finite(d) => write!(f, "{}us", d.as_micros()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid config field {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidConfig {
        field: field.to_owned(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdmConfig {
    ttl_per_layer: [Ttl; 4],
    pub eviction_period: Duration,
    /// Frames posed outside this box are dropped on ingest.
    pub spatial_filter: Option<GeoBox>,
    pub archive_dir: Option<PathBuf>,
    /// Oldest frames of an element are dropped beyond this many.
    pub max_frames_per_element: Option<usize>,
}

impl Default for LdmConfig {
    fn default() -> Self {
        LdmConfig {
            ttl_per_layer: [
                Ttl::Infinite,
                Ttl::secs(24 * 3600),
                Ttl::secs(10 * 60),
                Ttl::secs(30),
            ],
            eviction_period: Duration::from_secs(1),
            spatial_filter: None,
            archive_dir: None,
            max_frames_per_element: None,
        }
    }
}

fn layer_slot(layer: LdmLayer) -> usize {
    match layer {
        LdmLayer::Static => 0,
        LdmLayer::QuasiStatic => 1,
        LdmLayer::Transient => 2,
        LdmLayer::Dynamic => 3,
    }
}

impl LdmConfig {
    pub fn ttl(&self, layer: LdmLayer) -> Ttl {
        self.ttl_per_layer[layer_slot(layer)]
    }

    pub fn set_ttl(&mut self, layer: LdmLayer, ttl: Ttl) {
        self.ttl_per_layer[layer_slot(layer)] = ttl;
    }

    pub fn with_ttl(mut self, layer: LdmLayer, ttl: Ttl) -> Self {
        self.set_ttl(layer, ttl);
        self
    }

    pub fn with_spatial_filter(mut self, b: GeoBox) -> Self {
        self.spatial_filter = Some(b);
        self
    }

    /// Shortest finite TTL over all layers.
    pub fn min_finite_ttl(&self) -> Option<Duration> {
        self.ttl_per_layer
            .iter()
            .filter_map(|t| match t {
                Ttl::Finite(d) => Some(*d),
                Ttl::Infinite => None,
            })
            .min()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for layer in LdmLayer::ALL {
            if self.ttl(layer) == Ttl::Finite(Duration::ZERO) {
                return Err(invalid(&format!("ttl.{layer}"), "must be positive"));
            }
        }
        if self.eviction_period.is_zero() {
            return Err(invalid("eviction_period", "must be positive"));
        }
        if let Some(min) = self.min_finite_ttl() {
            if self.eviction_period > min {
                return Err(invalid(
                    "eviction_period",
                    format!("{:?} exceeds the shortest TTL {:?}", self.eviction_period, min),
                ));
            }
        }
        if let Some(b) = &self.spatial_filter {
            if !b.is_valid() {
                return Err(invalid("spatial_filter", "min must not exceed max"));
            }
        }
        if self.max_frames_per_element == Some(0) {
            return Err(invalid("max_frames_per_element", "must be at least 1"));
        }
        Ok(())
    }

    /// Parses the key-value format. Unset keys keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = LdmConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| ConfigError::Syntax { line: n + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "eviction_period" => {
                    cfg.eviction_period = match parse_ttl(value).map_err(syntax)? {
                        Ttl::Finite(d) => d,
                        Ttl::Infinite => return Err(invalid(key, "must be finite")),
                    }
                }
                "spatial_filter" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| syntax(format!("spatial_filter: {e}")))?;
                    let [a, b, c, d] = parts[..] else {
                        return Err(syntax("spatial_filter needs 4 numbers".into()));
                    };
                    cfg.spatial_filter = Some(GeoBox::new(a, b, c, d));
                }
                "archive_dir" => cfg.archive_dir = Some(PathBuf::from(value)),
                "max_frames_per_element" => {
                    cfg.max_frames_per_element = Some(
                        value
                            .parse()
                            .map_err(|e| syntax(format!("max_frames_per_element: {e}")))?,
                    )
                }
                _ => {
                    let layer = key
                        .strip_prefix("ttl.")
                        .and_then(LdmLayer::from_label)
                        .ok_or_else(|| syntax(format!("unknown key {key:?}")))?;
                    cfg.set_ttl(layer, parse_ttl(value).map_err(syntax)?);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_ttl(s: &str) -> Result<Ttl, String> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(Ttl::Infinite);
    }
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let num: f64 = num.parse().map_err(|_| format!("bad duration {s:?}"))?;
    let scale = match unit.trim() {
        "us" => 1e-6,
        "ms" => 1e-3,
        "" | "s" => 1.0,
        "m" => 60.0,
        "h" => 3600.0,
        other => return Err(format!("unknown duration unit {other:?}")),
    };
    Duration::try_from_secs_f64(num * scale)
        .map(Ttl::Finite)
        .map_err(|e| format!("bad duration {s:?}: {e}"))
}
