//! Geodesic distance and geohash cells.
//!
//! Everything spatial in the crate goes through [`haversine`] and the
//! base-32 geohash codec below. Functions are pure.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Geohash precision used for corpus tokens (~4.9 km cells).
pub const DEFAULT_GEOHASH_PRECISION: usize = 5;

const BASE32: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lon={lon}, lat={lat}")]
    OutOfRange { lon: f64, lat: f64 },
    #[error("geohash precision {0} outside 1..=12")]
    Precision(usize),
    #[error("invalid geohash character {0:?}")]
    InvalidChar(char),
    #[error("empty geohash")]
    Empty,
}

/// A validated longitude/latitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lon: f64,
    lat: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lon: f64,
    lat: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;
    fn try_from(r: RawPoint) -> Result<Self, GeoError> {
        GeoPoint::new(r.lon, r.lat)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lon: p.lon, lat: p.lat }
    }
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeoError> {
        if !lon.is_finite() || !lat.is_finite() || !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat)
        {
            return Err(GeoError::OutOfRange { lon, lat });
        }
        Ok(Self { lon, lat })
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }
}

/// Great-circle distance in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// A geohash cell code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GeohashCell(String);

impl TryFrom<String> for GeohashCell {
    type Error = GeoError;
    fn try_from(s: String) -> Result<Self, GeoError> {
        GeohashCell::parse(&s)
    }
}

impl From<GeohashCell> for String {
    fn from(c: GeohashCell) -> Self {
        c.0
    }
}

impl GeohashCell {
    pub fn parse(code: &str) -> Result<Self, GeoError> {
        if code.is_empty() {
            return Err(GeoError::Empty);
        }
        if code.len() > 12 {
            return Err(GeoError::Precision(code.len()));
        }
        for c in code.chars() {
            if !c.is_ascii() || !BASE32.contains(&(c as u8)) {
                return Err(GeoError::InvalidChar(c));
            }
        }
        Ok(Self(code.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn precision(&self) -> usize {
        self.0.len()
    }

    /// Corpus token form, e.g. `<wm6j0>`.
    pub fn token(&self) -> String {
        format!("<{}>", self.0)
    }
}

impl fmt::Display for GeohashCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Bounding box of a decoded cell, inclusive on all edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl BoundingBox {
    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lon: (self.lon_min + self.lon_max) / 2.0,
            lat: (self.lat_min + self.lat_max) / 2.0,
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lon_min..=self.lon_max).contains(&p.lon) && (self.lat_min..=self.lat_max).contains(&p.lat)
    }
}

pub fn geohash_encode(p: GeoPoint, precision: usize) -> Result<GeohashCell, GeoError> {
    if !(1..=12).contains(&precision) {
        return Err(GeoError::Precision(precision));
    }
    let (mut lon_lo, mut lon_hi) = (-180.0f64, 180.0f64);
    let (mut lat_lo, mut lat_hi) = (-90.0f64, 90.0f64);
    let mut code = String::with_capacity(precision);
    let mut even = true;
    for _ in 0..precision {
        let mut idx = 0usize;
        for _ in 0..5 {
            let (lo, hi, v) = if even {
                (&mut lon_lo, &mut lon_hi, p.lon)
            } else {
                (&mut lat_lo, &mut lat_hi, p.lat)
            };
            let mid = (*lo + *hi) / 2.0;
            idx <<= 1;
            if v >= mid {
                idx |= 1;
                *lo = mid;
            } else {
                *hi = mid;
            }
            even = !even;
        }
        code.push(BASE32[idx] as char);
    }
    Ok(GeohashCell(code))
}

pub fn geohash_decode(cell: &GeohashCell) -> Result<BoundingBox, GeoError> {
    let mut b = BoundingBox { lon_min: -180.0, lon_max: 180.0, lat_min: -90.0, lat_max: 90.0 };
    let mut even = true;
    for c in cell.0.chars() {
        let idx = BASE32.iter().position(|&x| x as char == c).ok_or(GeoError::InvalidChar(c))?;
        for shift in (0..5).rev() {
            let bit = (idx >> shift) & 1 == 1;
            let (lo, hi) = if even { (&mut b.lon_min, &mut b.lon_max) } else { (&mut b.lat_min, &mut b.lat_max) };
            let mid = (*lo + *hi) / 2.0;
            if bit {
                *lo = mid;
            } else {
                *hi = mid;
            }
            even = !even;
        }
    }
    Ok(b)
}
