//! Core data types shared by every stage.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sequences shorter than this cannot provide both a prefix and a target.
pub const MIN_SEQUENCE_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::InvalidValue(format!(
                "non-finite coordinate ({lat}, {lon})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidValue(format!("latitude {lat} out of range")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidValue(format!("longitude {lon} out of range")));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Coordinates rounded to 1e-6 degrees, used as cache and fixture keys.
    pub fn micro_key(&self) -> (i64, i64) {
        (
            (self.lat * 1e6).round() as i64,
            (self.lon * 1e6).round() as i64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckIn {
    pub user_id: String,
    pub venue_id: String,
    pub category_id: String,
    pub category_name: String,
    pub geo: GeoPoint,
    pub tz_offset_min: i32,
    pub timestamp_utc: DateTime<Utc>,
}

impl CheckIn {
    pub fn validate(&self) -> Result<()> {
        if self.user_id.is_empty() {
            return Err(Error::InvalidValue("empty user_id".into()));
        }
        if self.venue_id.is_empty() {
            return Err(Error::InvalidValue("empty venue_id".into()));
        }
        let year = self.timestamp_utc.year();
        if !(1970..2100).contains(&year) {
            return Err(Error::InvalidValue(format!(
                "timestamp year {year} outside [1970, 2100)"
            )));
        }
        Ok(())
    }
}

/// Attribute keys in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKey {
    VenueCategory,
    VenueArea,
    VenueName,
    VenueDesc,
    VenueTypes,
}

impl AttributeKey {
    pub const ALL: [AttributeKey; 5] = [
        AttributeKey::VenueCategory,
        AttributeKey::VenueArea,
        AttributeKey::VenueName,
        AttributeKey::VenueDesc,
        AttributeKey::VenueTypes,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttributeKey::VenueCategory => "venue_category",
            AttributeKey::VenueArea => "venue_area",
            AttributeKey::VenueName => "venue_name",
            AttributeKey::VenueDesc => "venue_desc",
            AttributeKey::VenueTypes => "venue_types",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown attribute key {s:?}")))
    }
}

impl fmt::Display for AttributeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered attribute dictionary of one venue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PoiMetaRecord", into = "PoiMetaRecord")]
pub struct PoiMeta {
    venue_id: String,
    attributes: Vec<(AttributeKey, String)>,
}

impl PoiMeta {
    /// Builds a meta record, sorting attributes into canonical order.
    pub fn new(
        venue_id: impl Into<String>,
        attributes: impl IntoIterator<Item = (AttributeKey, String)>,
    ) -> Result<Self> {
        let venue_id = venue_id.into();
        if venue_id.is_empty() {
            return Err(Error::InvalidValue("empty venue_id".into()));
        }
        let mut attributes: Vec<_> = attributes.into_iter().collect();
        attributes.sort_by_key(|(k, _)| *k);
        for pair in attributes.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::InvalidValue(format!(
                    "duplicate attribute {} for venue {venue_id}",
                    pair[0].0
                )));
            }
        }
        if let Some((k, _)) = attributes.iter().find(|(_, v)| v.trim().is_empty()) {
            return Err(Error::InvalidValue(format!(
                "empty value for {k} on venue {venue_id}"
            )));
        }
        Ok(Self {
            venue_id,
            attributes,
        })
    }

    pub fn venue_id(&self) -> &str {
        &self.venue_id
    }

    pub fn attributes(&self) -> &[(AttributeKey, String)] {
        &self.attributes
    }

    pub fn get(&self, key: AttributeKey) -> Option<&str> {
        self.attributes
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Copy with one attribute removed.
    pub fn without(&self, key: AttributeKey) -> Self {
        Self {
            venue_id: self.venue_id.clone(),
            attributes: self
                .attributes
                .iter()
                .filter(|(k, _)| *k != key)
                .cloned()
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PoiMetaRecord {
    venue_id: String,
    attributes: Vec<(AttributeKey, String)>,
}

impl TryFrom<PoiMetaRecord> for PoiMeta {
    type Error = Error;

    fn try_from(r: PoiMetaRecord) -> Result<Self> {
        PoiMeta::new(r.venue_id, r.attributes)
    }
}

impl From<PoiMeta> for PoiMetaRecord {
    fn from(m: PoiMeta) -> Self {
        PoiMetaRecord {
            venue_id: m.venue_id,
            attributes: m.attributes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub venue_id: String,
    pub timestamp_utc: DateTime<Utc>,
}

/// Time-ordered check-in history of one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<Visit>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn venue_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|v| v.venue_id.as_str())
    }

    /// Prefix (all but the last item) and target (the last item).
    pub fn split_last(&self) -> Option<(&[Visit], &Visit)> {
        self.items.split_last().map(|(last, rest)| (rest, last))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub pois: BTreeMap<String, PoiMeta>,
    pub sequences: Vec<UserSequence>,
}

impl Corpus {
    /// Copy with `key` stripped from every venue.
    pub fn without_attribute(&self, key: AttributeKey) -> Self {
        Self {
            pois: self
                .pois
                .iter()
                .map(|(id, m)| (id.clone(), m.without(key)))
                .collect(),
            sequences: self.sequences.clone(),
        }
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(UserSequence::len).sum()
    }
}

/// Groups check-ins per user, ordered by (timestamp, venue_id).
///
/// Output is sorted by user id so it does not depend on input order.
pub fn build_sequences(checkins: &[CheckIn]) -> Vec<UserSequence> {
    let mut per_user: BTreeMap<&str, Vec<Visit>> = BTreeMap::new();
    for c in checkins {
        per_user.entry(&c.user_id).or_default().push(Visit {
            venue_id: c.venue_id.clone(),
            timestamp_utc: c.timestamp_utc,
        });
    }
    per_user
        .into_iter()
        .map(|(user, mut items)| {
            items.sort_by(|a, b| {
                a.timestamp_utc
                    .cmp(&b.timestamp_utc)
                    .then_with(|| a.venue_id.cmp(&b.venue_id))
            });
            UserSequence {
                user_id: user.to_string(),
                items,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DanglingPolicy {
    Reject,
    Drop,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Sequence items whose venue has no meta record.
    pub dangling_items: usize,
    /// Sequences removed because fewer than two items remained.
    pub short_sequences: usize,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.dangling_items == 0 && self.short_sequences == 0
    }
}

/// Enforces the corpus invariant: every referenced venue exists and every
/// sequence has at least two items.
pub fn validate_corpus(
    corpus: Corpus,
    policy: DanglingPolicy,
) -> Result<(Corpus, ValidationReport)> {
    let mut report = ValidationReport::default();
    let Corpus { pois, sequences } = corpus;
    let mut kept = Vec::with_capacity(sequences.len());
    for mut seq in sequences {
        if let Some(bad) = seq.items.iter().find(|v| !pois.contains_key(&v.venue_id)) {
            if policy == DanglingPolicy::Reject {
                return Err(Error::Validation(format!(
                    "user {} references unknown venue {}",
                    seq.user_id, bad.venue_id
                )));
            }
            let before = seq.items.len();
            seq.items.retain(|v| pois.contains_key(&v.venue_id));
            report.dangling_items += before - seq.items.len();
        }
        if seq.items.len() < MIN_SEQUENCE_LEN {
            report.short_sequences += 1;
            continue;
        }
        kept.push(seq);
    }
    Ok((
        Corpus {
            pois,
            sequences: kept,
        },
        report,
    ))
}

/// Venue ids referenced by any sequence.
pub fn referenced_venues(sequences: &[UserSequence]) -> HashSet<&str> {
    sequences.iter().flat_map(|s| s.venue_ids()).collect()
}
