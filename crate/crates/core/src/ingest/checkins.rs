//! Tab-separated check-in files.
//!
//! Column layout (the public Foursquare TKY dump):
//!
//! ```text
//! user_id  venue_id  category_id  category_name  latitude  longitude  tz_offset_min  utc_timestamp
//! ```
//!
//! Timestamps look like `Tue Apr 03 18:00:09 +0000 2012`; RFC 3339 is accepted
//! as a fallback.

use std::io::{BufRead, Write};

use chrono::{DateTime, FixedOffset, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{CheckIn, GeoPoint};
use crate::error::{Error, Result};

pub const FIELD_COUNT: usize = 8;
const TIMESTAMP_FORMAT: &str = "%a %b %d %H:%M:%S %z %Y";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinePolicy {
    #[default]
    Skip,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedCheckins {
    pub checkins: Vec<CheckIn>,
    pub malformed: Vec<MalformedLine>,
}

pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    DateTime::<FixedOffset>::parse_from_str(raw, TIMESTAMP_FORMAT)
        .or_else(|_| DateTime::parse_from_rfc3339(raw))
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

fn parse_line(line: &str) -> std::result::Result<CheckIn, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != FIELD_COUNT {
        return Err(format!(
            "expected {FIELD_COUNT} fields, found {}",
            fields.len()
        ));
    }
    let lat: f64 = fields[4]
        .parse()
        .map_err(|_| format!("bad latitude {:?}", fields[4]))?;
    let lon: f64 = fields[5]
        .parse()
        .map_err(|_| format!("bad longitude {:?}", fields[5]))?;
    let geo = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
    let tz_offset_min: i32 = fields[6]
        .parse()
        .map_err(|_| format!("bad timezone offset {:?}", fields[6]))?;
    let timestamp_utc =
        parse_timestamp(fields[7]).ok_or_else(|| format!("bad timestamp {:?}", fields[7]))?;
    let checkin = CheckIn {
        user_id: fields[0].to_string(),
        venue_id: fields[1].to_string(),
        category_id: fields[2].to_string(),
        category_name: fields[3].to_string(),
        geo,
        tz_offset_min,
        timestamp_utc,
    };
    checkin.validate().map_err(|e| e.to_string())?;
    Ok(checkin)
}

/// Parses a check-in stream. Blank lines are ignored; a trailing `\r` is stripped.
pub fn parse_checkins<R: BufRead>(reader: R, policy: LinePolicy) -> Result<ParsedCheckins> {
    let mut out = ParsedCheckins::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(c) => out.checkins.push(c),
            Err(reason) => {
                if policy == LinePolicy::Abort {
                    return Err(Error::Parse {
                        line: idx + 1,
                        reason,
                    });
                }
                out.malformed.push(MalformedLine {
                    line: idx + 1,
                    reason,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_checkins<W: Write>(mut w: W, checkins: &[CheckIn]) -> std::io::Result<()> {
    for c in checkins {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.user_id,
            c.venue_id,
            c.category_id,
            c.category_name,
            c.geo.lat(),
            c.geo.lon(),
            c.tz_offset_min,
            format_timestamp(&c.timestamp_utc)
        )?;
    }
    Ok(())
}
