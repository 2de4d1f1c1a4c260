//! Food-picture descriptions for venues.
//!
//! Image classes are mapped to venue categories, every category gets a pool of
//! pictures, each venue gets eight distinct pictures from its category's pool,
//! and the pictures' captions are combined into the `venue_desc` attribute.
//! Captioning and summarisation models run outside this crate; their
//! requests and answers travel through [`CaptionStore`] and [`FileExchange`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_substream;

/// Prompt sent with each picture to the image-to-text model.
pub const CAPTION_PROMPT: &str = "Please describe briefly what you see in the picture.";
/// Prompt prefixed to the combined captions sent to the summarisation model.
pub const SUMMARY_PROMPT: &str =
    "Summarise the following descriptions of dishes served at a restaurant in 100 words:";

pub const PICTURES_PER_POI: usize = 8;
pub const MIN_POOL_SIZE: usize = 100;
pub const MAX_CATEGORIES_PER_CLASS: usize = 3;
pub const DEFAULT_DESC_BUDGET: usize = 800;

const BUNDLED_MAPPING: &str = include_str!("../data/class_mapping.tsv");

/// Collapses runs of whitespace so `Ramen /  Noodle House` and
/// `Ramen / Noodle House` name the same category.
pub fn normalize_category(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn sniff_delimiter(text: &str) -> u8 {
    match text.lines().next() {
        Some(l) if l.contains('\t') => b'\t',
        _ => b',',
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassMapping {
    entries: BTreeMap<String, Vec<String>>,
}

impl ClassMapping {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (category, class) in pairs {
            let classes = entries.entry(normalize_category(&category)).or_default();
            if !classes.contains(&class) {
                classes.push(class);
            }
        }
        let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
        for classes in entries.values() {
            for c in classes {
                *per_class.entry(c).or_default() += 1;
            }
        }
        if let Some((class, n)) = per_class
            .iter()
            .find(|(_, n)| **n > MAX_CATEGORIES_PER_CLASS)
        {
            return Err(Error::Config(format!(
                "image class {class} mapped to {n} categories (max {MAX_CATEGORIES_PER_CLASS})"
            )));
        }
        Ok(Self { entries })
    }

    /// The 30-category / 106-class mapping between Foursquare and FoodX-251.
    pub fn foodx_bundled() -> Self {
        Self::parse(BUNDLED_MAPPING.as_bytes()).expect("bundled class mapping is valid")
    }

    /// Two-column table `venue_category, image_class` with a header row; tab or comma separated.
    pub fn parse<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(sniff_delimiter(&text))
            .has_headers(true)
            .from_reader(text.as_bytes());
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            match (rec.get(0), rec.get(1)) {
                (Some(cat), Some(class)) if !cat.trim().is_empty() && !class.trim().is_empty() => {
                    pairs.push((cat.trim().to_string(), class.trim().to_string()))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "class mapping row {:?} needs two fields",
                        rec.position().map(|p| p.line())
                    )))
                }
            }
        }
        Self::new(pairs)
    }

    pub fn classes_for(&self, category: &str) -> Option<&[String]> {
        self.entries
            .get(&normalize_category(category))
            .map(Vec::as_slice)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Image ids per image class, read from `image_id,class` rows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassImages {
    pub by_class: BTreeMap<String, Vec<String>>,
}

impl ClassImages {
    pub fn parse<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(sniff_delimiter(&text))
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut out = Self::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let (Some(id), Some(class)) = (rec.get(0), rec.get(1)) else {
                continue;
            };
            if i == 0 && id == "image_id" {
                continue;
            }
            out.by_class
                .entry(class.trim().to_string())
                .or_default()
                .push(id.trim().to_string());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptionStore {
    captions: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionRecord {
    image_id: String,
    caption: String,
}

impl CaptionStore {
    pub fn insert(&mut self, image_id: impl Into<String>, caption: impl Into<String>) -> Result<()> {
        let caption = caption.into();
        if caption.trim().is_empty() {
            return Err(Error::InvalidValue("empty caption".into()));
        }
        self.captions.insert(image_id.into(), caption);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&str> {
        self.captions.get(image_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// JSON Lines of `{"image_id": …, "caption": …}`.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut store = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CaptionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            store.insert(rec.image_id, rec.caption)?;
        }
        Ok(store)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, caption) in &self.captions {
            serde_json::to_writer(
                &mut w,
                &CaptionRecord {
                    image_id: id.clone(),
                    caption: caption.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSample {
    pub image_ids: Vec<String>,
    /// Set when the category had fewer images than requested.
    pub with_replacement: bool,
}

/// Draws `max(poi_count, 100)` pictures for one venue category.
pub fn sample_pool(
    category: &str,
    mapping: &ClassMapping,
    images: &ClassImages,
    poi_count: usize,
    seed: u64,
) -> Result<PoolSample> {
    let classes = mapping
        .classes_for(category)
        .filter(|c| !c.is_empty())
        .ok_or_else(|| Error::Config(format!("category {category:?} has no mapped image classes")))?;
    let candidates: Vec<&String> = classes
        .iter()
        .filter_map(|c| images.by_class.get(c))
        .flatten()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if candidates.is_empty() {
        return Err(Error::Config(format!(
            "no images available for category {category:?}"
        )));
    }
    let want = poi_count.max(MIN_POOL_SIZE);
    let mut rng = keyed_substream(seed, "sample_pool", &normalize_category(category));
    if candidates.len() >= want {
        let picked = sample(&mut rng, candidates.len(), want);
        Ok(PoolSample {
            image_ids: picked.iter().map(|i| candidates[i].clone()).collect(),
            with_replacement: false,
        })
    } else {
        let image_ids = (0..want)
            .map(|_| candidates[rng.gen_range(0..candidates.len())].clone())
            .collect();
        Ok(PoolSample {
            image_ids,
            with_replacement: true,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub per_poi: BTreeMap<String, Vec<String>>,
}

impl Allocation {
    pub fn unique_images(&self) -> BTreeSet<&str> {
        self.per_poi.values().flatten().map(String::as_str).collect()
    }

    /// JSON Lines of `{"venue_id": …, "image_ids": […]}`, the layout of the
    /// published venue/picture mapping.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Rec {
            venue_id: String,
            image_ids: Vec<String>,
        }
        let mut out = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            out.per_poi.insert(rec.venue_id, rec.image_ids);
        }
        Ok(out)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (venue_id, image_ids) in &self.per_poi {
            serde_json::to_writer(
                &mut w,
                &serde_json::json!({ "venue_id": venue_id, "image_ids": image_ids }),
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Gives every venue `k` distinct pictures from `pool`; pictures may repeat
/// across venues. Each venue's draw depends only on the seed and its id.
pub fn allocate(pois: &[String], pool: &[String], k: usize, seed: u64) -> Result<Allocation> {
    let distinct: Vec<&String> = pool.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if distinct.len() < k {
        return Err(Error::Allocation(format!(
            "pool has {} distinct pictures, need {k}",
            distinct.len()
        )));
    }
    let per_poi = pois
        .iter()
        .map(|venue| {
            let mut rng = keyed_substream(seed, "allocate", venue);
            let ids = sample(&mut rng, distinct.len(), k)
                .iter()
                .map(|i| distinct[i].clone())
                .collect();
            (venue.clone(), ids)
        })
        .collect();
    Ok(Allocation { per_poi })
}

pub trait Summarizer {
    fn summarize(&self, captions: &[&str]) -> Result<String>;
}

/// `1. c1 2. c2 …`, cut to a character budget.
#[derive(Debug, Clone, Copy)]
pub struct NumberedSummarizer {
    pub budget_chars: usize,
}

impl Default for NumberedSummarizer {
    fn default() -> Self {
        Self {
            budget_chars: DEFAULT_DESC_BUDGET,
        }
    }
}

impl Summarizer for NumberedSummarizer {
    fn summarize(&self, captions: &[&str]) -> Result<String> {
        let joined = captions
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, c.trim()))
            .collect::<Vec<_>>()
            .join(" ");
        Ok(match joined.char_indices().nth(self.budget_chars) {
            Some((cut, _)) => joined[..cut].trim_end().to_string(),
            None => joined,
        })
    }
}

/// Looks up the captions of `image_ids` and summarises them.
pub fn assemble_description(
    image_ids: &[String],
    store: &CaptionStore,
    summarizer: &dyn Summarizer,
) -> Result<String> {
    let missing: Vec<&str> = image_ids
        .iter()
        .filter(|id| store.get(id).is_none())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::LookupMiss(format!(
            "no caption for images {}",
            missing.join(", ")
        )));
    }
    let captions: Vec<&str> = image_ids
        .iter()
        .map(|id| store.get(id).expect("checked"))
        .collect();
    summarizer.summarize(&captions)
}

/// File contract for an external summarisation model: one request per line
/// (`{"venue_id", "prompt", "captions"}`) out, one summary per line back, in
/// the same order.
pub struct FileExchange;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SummaryRequest {
    pub venue_id: String,
    pub prompt: String,
    pub captions: Vec<String>,
}

impl FileExchange {
    pub fn request(venue_id: &str, captions: &[&str]) -> SummaryRequest {
        SummaryRequest {
            venue_id: venue_id.to_string(),
            prompt: SUMMARY_PROMPT.to_string(),
            captions: captions.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn write_requests<W: Write>(mut w: W, requests: &[SummaryRequest]) -> Result<()> {
        for r in requests {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// One summary per line; must match the request count.
    pub fn read_responses<R: BufRead>(reader: R, expected: usize) -> Result<Vec<String>> {
        let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
        if lines.len() != expected {
            return Err(Error::Input(format!(
                "summarizer returned {} lines for {expected} requests",
                lines.len()
            )));
        }
        if let Some(i) = lines.iter().position(|l| l.trim().is_empty()) {
            return Err(Error::Parse {
                line: i + 1,
                reason: "empty summary".into(),
            });
        }
        Ok(lines)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(class: &str, n: usize) -> ClassImages {
        let mut ci = ClassImages::default();
        ci.by_class
            .insert(class.into(), (0..n).map(|i| format!("{class}_{i:04}")).collect());
        ci
    }

    #[test]
    fn bundled_mapping_shape() {
        let m = ClassMapping::foodx_bundled();
        assert_eq!(m.len(), 30);
        let classes: BTreeSet<&str> = m
            .categories()
            .flat_map(|c| m.classes_for(c).unwrap())
            .map(String::as_str)
            .collect();
        assert_eq!(classes.len(), 106);
        assert_eq!(m.classes_for("Ramen /  Noodle House").unwrap(), ["ramen"]);
        let burger_homes: Vec<&str> = m
            .categories()
            .filter(|c| m.classes_for(c).unwrap().iter().any(|x| x == "hamburger"))
            .collect();
        assert_eq!(
            burger_homes,
            ["American Restaurant", "Burger Joint", "Fast Food Restaurant"]
        );
    }

    #[test]
    fn class_under_four_categories_is_rejected() {
        let pairs = ["A", "B", "C", "D"].map(|c| (c.to_string(), "pho".to_string()));
        assert!(ClassMapping::new(pairs).is_err());
    }

    #[test]
    fn pool_size_follows_poi_count() {
        let m = ClassMapping::foodx_bundled();
        let ci = images("ramen", 1000);
        let big = sample_pool("Ramen / Noodle House", &m, &ci, 250, 1).unwrap();
        assert_eq!(big.image_ids.len(), 250);
        assert!(!big.with_replacement);
        let small = sample_pool("Ramen / Noodle House", &m, &ci, 40, 1).unwrap();
        assert_eq!(small.image_ids.len(), 100);
        let again = sample_pool("Ramen / Noodle House", &m, &ci, 40, 1).unwrap();
        assert_eq!(small, again);
    }

    #[test]
    fn small_category_samples_with_replacement() {
        let m = ClassMapping::foodx_bundled();
        let pool = sample_pool("Ramen / Noodle House", &m, &images("ramen", 30), 5, 3).unwrap();
        assert_eq!(pool.image_ids.len(), 100);
        assert!(pool.with_replacement);
    }

    #[test]
    fn unmapped_category_is_config_error() {
        let m = ClassMapping::foodx_bundled();
        let err = sample_pool("Bar", &m, &images("ramen", 10), 5, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn allocation_cases() {
        let pool: Vec<String> = (0..8).map(|i| format!("img{i}")).collect();
        let one = allocate(&["v1".into()], &pool, 8, 9).unwrap();
        let mut got = one.per_poi["v1"].clone();
        got.sort();
        assert_eq!(got, pool);

        let two = allocate(&["v1".into(), "v2".into()], &pool, 8, 9).unwrap();
        for ids in two.per_poi.values() {
            assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 8);
        }
        assert_eq!(two.unique_images().len(), 8);

        let err = allocate(&["v1".into()], &pool[..7], 8, 9).unwrap_err();
        assert!(matches!(err, Error::Allocation(_)));
    }

    #[test]
    fn allocation_is_deterministic_and_order_free() {
        let pool: Vec<String> = (0..120).map(|i| format!("img{i}")).collect();
        let pois: Vec<String> = (0..20).map(|i| format!("v{i}")).collect();
        let a = allocate(&pois, &pool, 8, 5).unwrap();
        let mut rev = pois.clone();
        rev.reverse();
        assert_eq!(a, allocate(&rev, &pool, 8, 5).unwrap());
        assert_ne!(a, allocate(&pois, &pool, 8, 6).unwrap());
    }

    fn store(n: usize) -> (CaptionStore, Vec<String>) {
        let mut s = CaptionStore::default();
        let ids: Vec<String> = (1..=n).map(|i| format!("i{i}")).collect();
        for (i, id) in ids.iter().enumerate() {
            s.insert(id.clone(), format!("c{}", i + 1)).unwrap();
        }
        (s, ids)
    }

    #[test]
    fn numbered_summary() {
        let (s, ids) = store(8);
        let big = NumberedSummarizer { budget_chars: 10_000 };
        assert_eq!(
            assemble_description(&ids, &s, &big).unwrap(),
            "1. c1 2. c2 3. c3 4. c4 5. c5 6. c6 7. c7 8. c8"
        );
        let tiny = NumberedSummarizer { budget_chars: 10 };
        assert!(assemble_description(&ids, &s, &tiny).unwrap().chars().count() <= 10);
    }

    #[test]
    fn budget_respects_char_boundaries() {
        let mut s = CaptionStore::default();
        s.insert("a", "ラーメンと餃子").unwrap();
        let out = assemble_description(&["a".into()], &s, &NumberedSummarizer { budget_chars: 5 })
            .unwrap();
        assert_eq!(out, "1. ラー");
    }

    #[test]
    fn missing_captions_are_listed() {
        let (s, mut ids) = store(2);
        ids.push("nope".into());
        ids.push("gone".into());
        let err = assemble_description(&ids, &s, &NumberedSummarizer::default()).unwrap_err();
        assert!(err.to_string().contains("nope, gone"), "{err}");
    }

    #[test]
    fn caption_store_json_lines() {
        let text = "{\"image_id\":\"train_1\",\"caption\":\"A bowl of ramen.\"}\n\n";
        let s = CaptionStore::parse(text.as_bytes()).unwrap();
        assert_eq!(s.get("train_1"), Some("A bowl of ramen."));
        assert!(CaptionStore::parse("{\"image_id\":\"x\",\"caption\":\"\"}".as_bytes()).is_err());
    }

    #[test]
    fn exchange_round_trip() {
        let reqs = vec![
            FileExchange::request("v1", &["a", "b"]),
            FileExchange::request("v2", &["c"]),
        ];
        let mut buf = Vec::new();
        FileExchange::write_requests(&mut buf, &reqs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains(SUMMARY_PROMPT));
        let answers = FileExchange::read_responses("one\ntwo\n".as_bytes(), 2).unwrap();
        assert_eq!(answers, ["one", "two"]);
        assert!(FileExchange::read_responses("one\n".as_bytes(), 2).is_err());
    }
}
