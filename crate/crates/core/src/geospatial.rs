//! Hexagonal cell ids, municipality lookup and geospatial keys.

use std::fmt;

use h3o::{LatLng, Resolution};
use serde::{Deserialize, Serialize};

use crate::domain::GeoPoint;
use crate::error::{Error, Result};
use crate::ingest::PostalTable;

pub const DEFAULT_RESOLUTION: u8 = 8;

/// Canonical 15-digit lowercase hex H3 cell id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CellId(String);

impl CellId {
    pub fn parse(s: &str) -> Result<Self> {
        let ok = s.len() == 15 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if !ok {
            return Err(Error::InvalidValue(format!("malformed cell id {s:?}")));
        }
        Ok(Self(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Resolution encoded in the second hex digit.
    pub fn resolution(&self) -> u8 {
        u8::from_str_radix(&self.0[1..2], 16).expect("validated hex")
    }
}

impl TryFrom<String> for CellId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        CellId::parse(&s)
    }
}

impl From<CellId> for String {
    fn from(c: CellId) -> String {
        c.0
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Point → cell at a fixed resolution.
#[derive(Debug, Clone, Copy)]
pub struct CellIndexer {
    resolution: Resolution,
}

impl CellIndexer {
    /// Accepts only the default resolution 8.
    pub fn new(resolution: u8) -> Result<Self> {
        if resolution != DEFAULT_RESOLUTION {
            return Err(Error::Config(format!(
                "resolution {resolution} is disabled; use CellIndexer::with_any_resolution"
            )));
        }
        Self::with_any_resolution(resolution)
    }

    pub fn with_any_resolution(resolution: u8) -> Result<Self> {
        let resolution = Resolution::try_from(resolution)
            .map_err(|e| Error::Config(format!("invalid resolution: {e}")))?;
        Ok(Self { resolution })
    }

    pub fn cell(&self, point: &GeoPoint) -> Result<CellId> {
        let ll = LatLng::new(point.lat(), point.lon())
            .map_err(|e| Error::InvalidValue(format!("invalid coordinate: {e}")))?;
        CellId::parse(&ll.to_cell(self.resolution).to_string())
    }

    /// Center of a cell, as a point.
    pub fn center(cell: &CellId) -> Result<GeoPoint> {
        let idx: h3o::CellIndex = cell
            .as_str()
            .parse()
            .map_err(|e| Error::InvalidValue(format!("invalid cell {cell}: {e}")))?;
        let ll = LatLng::from(idx);
        GeoPoint::new(ll.lat(), ll.lng())
    }
}

impl Default for CellIndexer {
    fn default() -> Self {
        Self::new(DEFAULT_RESOLUTION).expect("default resolution")
    }
}

/// Resolution-8 cell containing `point`.
pub fn h3_cell(point: &GeoPoint) -> Result<CellId> {
    CellIndexer::default().cell(point)
}

pub fn municipality_of<'a>(postal_code: &str, table: &'a PostalTable) -> Result<&'a str> {
    table
        .get(postal_code)
        .ok_or_else(|| Error::LookupMiss(format!("postal code {postal_code:?} not in table")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoKey {
    pub municipality: String,
    pub cell: CellId,
}

impl fmt::Display for GeoKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.municipality, self.cell)
    }
}

/// `municipality + " " + cell`.
pub fn geokey(municipality: &str, cell: &CellId) -> String {
    GeoKey {
        municipality: municipality.to_string(),
        cell: cell.clone(),
    }
    .to_string()
}
