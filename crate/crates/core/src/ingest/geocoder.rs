//! Reverse geocoding and place lookup behind a backend trait.
//!
//! The fixture backend serves JSON Lines records
//! `{"lat":…, "lon":…, "postal_code":…, "formatted":…, "name":…, "types":[…]}`
//! (an optional `"category"` disambiguates several venues at one address).
//! The HTTP backend (feature `http-geocoder`) talks to a Google-style API at
//! `GEOCODER_BASE_URL` with `GEOCODER_API_KEY`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::postal::normalize_postal_code;
use crate::domain::GeoPoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Address {
    /// Seven digits, no hyphen.
    pub postal_code: String,
    pub formatted: String,
}

impl Address {
    pub fn new(postal_code: &str, formatted: impl Into<String>) -> Result<Self> {
        let postal_code = normalize_postal_code(postal_code)
            .ok_or_else(|| Error::InvalidValue(format!("bad postal code {postal_code:?}")))?;
        Ok(Self {
            postal_code,
            formatted: formatted.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceInfo {
    pub name: String,
    pub types: Vec<String>,
}

impl PlaceInfo {
    pub fn new(name: impl Into<String>, types: impl IntoIterator<Item = String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::InvalidValue("empty place name".into()));
        }
        Ok(Self {
            name,
            types: types.into_iter().map(|t| t.to_lowercase()).collect(),
        })
    }
}

pub trait GeocoderBackend: Send + Sync {
    fn reverse_geocode(&self, point: &GeoPoint) -> Result<Address>;
    fn resolve_place(&self, address: &Address, category_name: &str) -> Result<PlaceInfo>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub lat: f64,
    pub lon: f64,
    pub postal_code: String,
    pub formatted: String,
    pub name: String,
    #[serde(default)]
    pub types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Offline backend over fixture records.
#[derive(Debug, Default)]
pub struct FixtureBackend {
    addresses: HashMap<(i64, i64), Address>,
    places: HashMap<(String, Option<String>), PlaceInfo>,
}

impl FixtureBackend {
    pub fn from_records(records: impl IntoIterator<Item = FixtureRecord>) -> Result<Self> {
        let mut backend = Self::default();
        for r in records {
            let point = GeoPoint::new(r.lat, r.lon)?;
            let address = Address::new(&r.postal_code, r.formatted.clone())?;
            let place = PlaceInfo::new(r.name, r.types)?;
            backend.addresses.insert(point.micro_key(), address);
            backend
                .places
                .entry((r.formatted.clone(), None))
                .or_insert_with(|| place.clone());
            if let Some(cat) = r.category {
                backend.places.insert((r.formatted, Some(cat)), place);
            }
        }
        Ok(backend)
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn len(&self) -> usize {
        self.addresses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addresses.is_empty()
    }
}

impl GeocoderBackend for FixtureBackend {
    fn reverse_geocode(&self, point: &GeoPoint) -> Result<Address> {
        self.addresses
            .get(&point.micro_key())
            .cloned()
            .ok_or_else(|| {
                Error::LookupMiss(format!("no address for ({}, {})", point.lat(), point.lon()))
            })
    }

    fn resolve_place(&self, address: &Address, category_name: &str) -> Result<PlaceInfo> {
        self.places
            .get(&(address.formatted.clone(), Some(category_name.to_string())))
            .or_else(|| self.places.get(&(address.formatted.clone(), None)))
            .cloned()
            .ok_or_else(|| {
                Error::LookupMiss(format!(
                    "no place for {:?} ({category_name})",
                    address.formatted
                ))
            })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    lat_e6: i64,
    lon_e6: i64,
    address: Address,
}

/// Backend wrapper with a coordinate-keyed address cache.
pub struct GeocoderClient {
    backend: Box<dyn GeocoderBackend>,
    cache: Mutex<HashMap<(i64, i64), Address>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl GeocoderClient {
    pub fn new(backend: Box<dyn GeocoderBackend>) -> Self {
        Self {
            backend,
            cache: Mutex::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn backend_calls(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    /// Pre-populates the cache from a JSON Lines dump written by [`Self::save_cache`].
    pub fn load_cache<R: BufRead>(&self, reader: R) -> Result<usize> {
        let mut cache = self.cache.lock().expect("cache lock");
        let mut n = 0;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheRecord = serde_json::from_str(&line)?;
            cache.insert((rec.lat_e6, rec.lon_e6), rec.address);
            n += 1;
        }
        Ok(n)
    }

    pub fn save_cache<W: Write>(&self, mut w: W) -> Result<()> {
        let cache = self.cache.lock().expect("cache lock");
        let mut keys: Vec<_> = cache.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let rec = CacheRecord {
                lat_e6: key.0,
                lon_e6: key.1,
                address: cache[&key].clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn reverse_geocode(&self, point: &GeoPoint) -> Result<Address> {
        let key = point.micro_key();
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let address = self.backend.reverse_geocode(point)?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, address.clone());
        Ok(address)
    }

    pub fn resolve_place(&self, address: &Address, category_name: &str) -> Result<PlaceInfo> {
        self.backend.resolve_place(address, category_name)
    }
}

#[cfg(feature = "http-geocoder")]
pub use http::{HttpBackend, HttpConfig};

#[cfg(feature = "http-geocoder")]
mod http {
    use super::*;
    use std::time::Duration;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct HttpConfig {
        pub base_url: String,
        pub api_key: String,
        pub timeout_ms: u64,
        pub max_retries: u32,
    }

    impl HttpConfig {
        /// Base URL and key from `GEOCODER_BASE_URL` / `GEOCODER_API_KEY`.
        pub fn from_env(timeout_ms: u64, max_retries: u32) -> Result<Self> {
            let var = |k: &str| {
                std::env::var(k).map_err(|_| Error::Config(format!("{k} is not set")))
            };
            Ok(Self {
                base_url: var("GEOCODER_BASE_URL")?,
                api_key: var("GEOCODER_API_KEY")?,
                timeout_ms,
                max_retries,
            })
        }
    }

    pub struct HttpBackend {
        config: HttpConfig,
        client: reqwest::blocking::Client,
    }

    impl HttpBackend {
        pub fn new(config: HttpConfig) -> Result<Self> {
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_millis(config.timeout_ms))
                .build()
                .map_err(|e| Error::Transport {
                    retries: 0,
                    reason: e.to_string(),
                })?;
            Ok(Self { config, client })
        }

        fn get_json(&self, path: &str, query: &[(&str, String)]) -> Result<serde_json::Value> {
            let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
            let mut last = String::new();
            for _ in 0..=self.config.max_retries {
                let resp = self
                    .client
                    .get(&url)
                    .query(query)
                    .query(&[("key", self.config.api_key.as_str())])
                    .send()
                    .and_then(|r| r.error_for_status());
                match resp.and_then(|r| r.json::<serde_json::Value>()) {
                    Ok(v) => return Ok(v),
                    Err(e) => last = e.to_string(),
                }
            }
            Err(Error::Transport {
                retries: self.config.max_retries,
                reason: last,
            })
        }
    }

    impl GeocoderBackend for HttpBackend {
        fn reverse_geocode(&self, point: &GeoPoint) -> Result<Address> {
            let v = self.get_json(
                "geocode/json",
                &[("latlng", format!("{},{}", point.lat(), point.lon()))],
            )?;
            let first = &v["results"][0];
            let postal = first["address_components"]
                .as_array()
                .into_iter()
                .flatten()
                .find(|c| {
                    c["types"]
                        .as_array()
                        .is_some_and(|t| t.iter().any(|x| x == "postal_code"))
                })
                .and_then(|c| c["long_name"].as_str())
                .ok_or_else(|| {
                    Error::LookupMiss(format!(
                        "no postal code for ({}, {})",
                        point.lat(),
                        point.lon()
                    ))
                })?;
            Address::new(postal, first["formatted_address"].as_str().unwrap_or_default())
        }

        fn resolve_place(&self, address: &Address, category_name: &str) -> Result<PlaceInfo> {
            let v = self.get_json(
                "place/textsearch/json",
                &[("query", format!("{category_name} {}", address.formatted))],
            )?;
            let first = &v["results"][0];
            let name = first["name"]
                .as_str()
                .ok_or_else(|| Error::LookupMiss(format!("no place for {:?}", address.formatted)))?;
            let types = first["types"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|t| t.as_str().map(str::to_string));
            PlaceInfo::new(name, types)
        }
    }
}
