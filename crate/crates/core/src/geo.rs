//! Geodesy kernel on a spherical earth.
//!
//! Distances use the haversine law on a sphere of radius [`EARTH_RADIUS_M`].
//! Local Cartesian frames are equirectangular east/north/up planes anchored at
//! a WGS84 origin; they are accurate to well below a decimetre at the few
//! kilometre scale of a local dynamic map. Altitude never enters horizontal
//! distances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GeoPoint;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Largest origin distance for which [`wgs84_to_enu`] is defined.
pub const LOCAL_RANGE_M: f64 = 50_000.0;

/// Segments shorter than this are treated as a single point.
const DEGENERATE_SEGMENT_M: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("point is {distance_m:.1} m from the local origin (limit {LOCAL_RANGE_M} m)")]
    OutOfLocalRange { distance_m: f64 },
}

/// Position in meters relative to a declared WGS84 origin.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl EnuPoint {
    pub fn new(east: f64, north: f64, up: f64) -> Self {
        EnuPoint { east, north, up }
    }

    pub fn planar(east: f64, north: f64) -> Self {
        EnuPoint::new(east, north, 0.0)
    }

    /// Horizontal distance to `other`.
    pub fn distance_2d(&self, other: &EnuPoint) -> f64 {
        (self.east - other.east).hypot(self.north - other.north)
    }
}

/// Great-circle distance in meters. Symmetric and non-negative.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `a` to `b`, degrees clockwise from north in `[0, 360)`.
pub fn initial_bearing_deg(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    crate::model::normalize_heading(y.atan2(x).to_degrees())
}

/// Smallest absolute difference between two compass angles, in `[0, 180]`.
pub fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Longitude difference `to - from` wrapped into `(-180, 180]`.
fn wrapped_dlon_deg(from: f64, to: f64) -> f64 {
    let d = to - from;
    if d > -180.0 && d <= 180.0 {
        return d;
    }
    let d = d.rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Projects `p` into the local plane at `origin` without the range check.
///
/// Map matching uses this for long road segments whose far endpoint lies
/// beyond [`LOCAL_RANGE_M`]; the projection stays well defined there, it is
/// just no longer metrically faithful.
pub fn wgs84_to_enu_unchecked(origin: GeoPoint, p: GeoPoint) -> EnuPoint {
    let dphi = (p.lat - origin.lat).to_radians();
    let dlambda = wrapped_dlon_deg(origin.lon, p.lon).to_radians();
    EnuPoint {
        east: EARTH_RADIUS_M * dlambda * origin.lat.to_radians().cos(),
        north: EARTH_RADIUS_M * dphi,
        up: p.alt - origin.alt,
    }
}

/// Equirectangular projection of `p` into the east/north/up plane at `origin`.
pub fn wgs84_to_enu(origin: GeoPoint, p: GeoPoint) -> Result<EnuPoint, GeoError> {
    let d = haversine_m(origin, p);
    if d >= LOCAL_RANGE_M {
        return Err(GeoError::OutOfLocalRange { distance_m: d });
    }
    Ok(wgs84_to_enu_unchecked(origin, p))
}

/// Inverse of [`wgs84_to_enu`]. Longitude is wrapped into `[-180, 180)`.
pub fn enu_to_wgs84(origin: GeoPoint, p: EnuPoint) -> GeoPoint {
    let lat = origin.lat + (p.north / EARTH_RADIUS_M).to_degrees();
    let dlon = (p.east / (EARTH_RADIUS_M * origin.lat.to_radians().cos())).to_degrees();
    let mut lon = origin.lon + dlon;
    if !(-180.0..180.0).contains(&lon) {
        lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
    }
    GeoPoint::with_alt(lat, lon, origin.alt + p.up)
}

/// Result of projecting a point onto a segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentProjection {
    pub distance: f64,
    /// Position of the foot along the segment, clamped to `[0, 1]`.
    pub t: f64,
    pub foot: EnuPoint,
}

/// Closest point of segment `a`–`b` to `p`, in the east/north plane.
pub fn project_to_segment(p: EnuPoint, a: EnuPoint, b: EnuPoint) -> SegmentProjection {
    let (dx, dy) = (b.east - a.east, b.north - a.north);
    let len2 = dx * dx + dy * dy;
    let t = if len2.sqrt() <= DEGENERATE_SEGMENT_M {
        0.0
    } else {
        (((p.east - a.east) * dx + (p.north - a.north) * dy) / len2).clamp(0.0, 1.0)
    };
    let foot = EnuPoint::new(a.east + t * dx, a.north + t * dy, a.up + t * (b.up - a.up));
    SegmentProjection {
        distance: p.distance_2d(&foot),
        t,
        foot,
    }
}

/// Axis-aligned latitude/longitude box. Does not handle antimeridian crossing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl GeoBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Self {
        GeoBox {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        }
    }

    /// Smallest box holding every point, or `None` for no points.
    pub fn around(points: impl IntoIterator<Item = GeoPoint>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = GeoBox::new(first.lat, first.lon, first.lat, first.lon);
        for p in it {
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lat = b.max_lat.max(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lon = b.max_lon.max(p.lon);
        }
        Some(b)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat) && (self.min_lon..=self.max_lon).contains(&p.lon)
    }

    /// Grows the box by `meters` on every side.
    pub fn inflate(&self, meters: f64) -> Self {
        let dlat = (meters / EARTH_RADIUS_M).to_degrees();
        let worst_lat = self.min_lat.abs().max(self.max_lat.abs()).min(89.999);
        let dlon = (meters / (EARTH_RADIUS_M * worst_lat.to_radians().cos())).to_degrees();
        GeoBox::new(
            (self.min_lat - dlat).max(-90.0),
            self.min_lon - dlon,
            (self.max_lat + dlat).min(90.0),
            self.max_lon + dlon,
        )
    }

    pub fn is_valid(&self) -> bool {
        [self.min_lat, self.min_lon, self.max_lat, self.max_lon]
            .iter()
            .all(|v| v.is_finite())
            && self.min_lat <= self.max_lat
            && self.min_lon <= self.max_lon
    }
}
