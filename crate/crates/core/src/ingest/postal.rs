//! Postal-code → municipality table (Japan Post `KEN_ALL` layout, UTF-8).

use std::collections::HashMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

/// Canonical 7-digit form of `ddd-dddd` / `ddddddd`, or `None`.
pub fn normalize_postal_code(raw: &str) -> Option<String> {
    let s = raw.trim().trim_start_matches('〒').trim();
    let digits: String = match s.len() {
        8 if s.as_bytes()[3] == b'-' => format!("{}{}", &s[..3], &s[4..]),
        7 => s.to_string(),
        _ => return None,
    };
    digits
        .bytes()
        .all(|b| b.is_ascii_digit())
        .then_some(digits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostalColumns {
    pub postal_code: usize,
    pub municipality: usize,
}

impl Default for PostalColumns {
    /// `KEN_ALL.CSV`: column 2 is the 7-digit code, column 7 the municipality.
    fn default() -> Self {
        Self {
            postal_code: 2,
            municipality: 7,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PostalTable {
    map: HashMap<String, String>,
    /// Rows whose key had already been seen (last one wins).
    pub duplicate_keys: usize,
    /// Rows without a usable code or municipality.
    pub skipped_rows: usize,
}

impl PostalTable {
    pub fn get(&self, postal_code: &str) -> Option<&str> {
        normalize_postal_code(postal_code)
            .and_then(|k| self.map.get(&k))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, postal_code: &str, municipality: &str) -> bool {
        match normalize_postal_code(postal_code) {
            Some(k) => {
                if self.map.insert(k, municipality.to_string()).is_some() {
                    self.duplicate_keys += 1;
                }
                true
            }
            None => false,
        }
    }
}

/// Reads a comma-separated, optionally quoted postal table without a header row.
pub fn parse_postal_table<R: Read>(reader: R, columns: PostalColumns) -> crate::Result<PostalTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut table = PostalTable::default();
    for record in rdr.records() {
        let Ok(record) = record else {
            table.skipped_rows += 1;
            continue;
        };
        let code = record.get(columns.postal_code);
        let muni = record.get(columns.municipality).map(str::trim);
        match (code, muni) {
            (Some(code), Some(muni)) if !muni.is_empty() => {
                if !table.insert(code, muni) {
                    table.skipped_rows += 1;
                }
            }
            _ => table.skipped_rows += 1,
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEN_ALL_ROW: &str = "13104,\"160  \",\"1600022\",\"ﾄｳｷｮｳﾄ\",\"ｼﾝｼﾞｭｸｸ\",\"ｼﾝｼﾞｭｸ\",\"東京都\",\"新宿区\",\"新宿\",0,0,1,0,0,0\n";

    #[test]
    fn normalizes_codes() {
        assert_eq!(normalize_postal_code("160-0022").as_deref(), Some("1600022"));
        assert_eq!(normalize_postal_code("1600022").as_deref(), Some("1600022"));
        assert_eq!(normalize_postal_code("〒160-0022").as_deref(), Some("1600022"));
        assert_eq!(normalize_postal_code("16-00022"), None);
        assert_eq!(normalize_postal_code("160002"), None);
        assert_eq!(normalize_postal_code("16a0022"), None);
    }

    #[test]
    fn reads_ken_all_layout() {
        let table = parse_postal_table(KEN_ALL_ROW.as_bytes(), PostalColumns::default()).unwrap();
        assert_eq!(table.get("160-0022"), Some("新宿区"));
        assert_eq!(table.get("1600022"), Some("新宿区"));
        assert_eq!(table.skipped_rows, 0);
    }

    #[test]
    fn last_duplicate_wins() {
        let text = "0,0,1600022,a,b,c,東京都,旧名\n0,0,1600022,a,b,c,東京都,新宿区\n";
        let table = parse_postal_table(text.as_bytes(), PostalColumns::default()).unwrap();
        assert_eq!(table.get("1600022"), Some("新宿区"));
        assert_eq!(table.duplicate_keys, 1);
    }

    #[test]
    fn empty_and_bad_rows() {
        let table = parse_postal_table("".as_bytes(), PostalColumns::default()).unwrap();
        assert!(table.is_empty());
        let text = "0,0,notacode,a,b,c,東京都,新宿区\n0,0\n";
        let table = parse_postal_table(text.as_bytes(), PostalColumns::default()).unwrap();
        assert!(table.is_empty());
        assert_eq!(table.skipped_rows, 2);
    }

    #[test]
    fn custom_columns() {
        let text = "\"107-0052\",港区\n";
        let cols = PostalColumns {
            postal_code: 0,
            municipality: 1,
        };
        let table = parse_postal_table(text.as_bytes(), cols).unwrap();
        assert_eq!(table.get("1070052"), Some("港区"));
    }
}
