//! Raw files to corpus: parse, filter, geocode, describe, assemble.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{
    build_sequences, validate_corpus, AttributeKey, CheckIn, Corpus, DanglingPolicy, PoiMeta,
    UserSequence,
};
use crate::error::{Error, Result};
use crate::foodtext::{
    allocate, assemble_description, sample_pool, Allocation, CaptionStore, ClassImages,
    ClassMapping, NumberedSummarizer, DEFAULT_DESC_BUDGET, PICTURES_PER_POI,
};
use crate::geospatial::{geokey, h3_cell, municipality_of};
use crate::ingest::{
    apply_filters, parse_checkins, parse_postal_table, CategoryAllowlist, FilterCounts,
    GeocoderClient, LinePolicy, MalformedLine, PostalColumns,
};

pub const POIS_FILE: &str = "pois.jsonl";
pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const COUNTS_FILE: &str = "stage_counts.json";

/// Where venue descriptions come from, in order of preference.
#[derive(Debug, Clone, Default)]
pub struct DescriptionSources {
    /// JSON Lines of `{venue_id, description}`.
    pub published: Option<PathBuf>,
    /// JSON Lines of `{venue_id, image_ids}`.
    pub venue_images: Option<PathBuf>,
    /// `image_id,class` rows; used with `class_mapping` to draw pools.
    pub class_images: Option<PathBuf>,
    pub class_mapping: Option<PathBuf>,
    /// JSON Lines of `{image_id, caption}`.
    pub captions: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PrepareConfig {
    pub min_checkins: usize,
    pub line_policy: LinePolicy,
    pub postal_columns: PostalColumns,
    pub desc_budget: usize,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            min_checkins: 100,
            line_policy: LinePolicy::Skip,
            postal_columns: PostalColumns::default(),
            desc_budget: DEFAULT_DESC_BUDGET,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input_lines: usize,
    pub malformed_lines: usize,
    pub filters: FilterCounts,
    pub candidate_pois: usize,
    pub final_pois: usize,
    /// Venues dropped during attribute assembly, keyed by reason.
    pub dropped_pois: BTreeMap<String, usize>,
    pub pois_with_description: usize,
    pub dangling_checkins: usize,
    pub short_sequences: usize,
    pub users: usize,
    pub interactions: usize,
    pub unique_images: usize,
    pub avg_description_chars: f64,
}

#[derive(Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub counts: StageCounts,
    pub malformed: Vec<MalformedLine>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn read_published(path: &Path) -> Result<BTreeMap<String, String>> {
    #[derive(Deserialize)]
    struct Rec {
        venue_id: String,
        description: String,
    }
    let mut out = BTreeMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if !rec.description.trim().is_empty() {
            out.insert(rec.venue_id, rec.description);
        }
    }
    Ok(out)
}

/// One representative check-in per venue: the first in input order.
fn unique_venues(checkins: &[CheckIn]) -> Vec<&CheckIn> {
    let mut seen = BTreeSet::new();
    checkins
        .iter()
        .filter(|c| seen.insert(c.venue_id.as_str()))
        .collect()
}

struct Described {
    descriptions: BTreeMap<String, String>,
    unique_images: usize,
}

fn describe(
    venues: &[(&CheckIn, String)],
    sources: &DescriptionSources,
    cfg: &PrepareConfig,
) -> Result<Described> {
    let mut descriptions = BTreeMap::new();
    if let Some(path) = &sources.published {
        let published = read_published(path)?;
        for (c, _) in venues {
            if let Some(d) = published.get(&c.venue_id) {
                descriptions.insert(c.venue_id.clone(), d.clone());
            }
        }
    }
    let Some(captions_path) = &sources.captions else {
        return Ok(Described {
            descriptions,
            unique_images: 0,
        });
    };
    let store = CaptionStore::parse(open(captions_path)?)?;
    let pending: Vec<&CheckIn> = venues
        .iter()
        .map(|(c, _)| *c)
        .filter(|c| !descriptions.contains_key(&c.venue_id))
        .collect();

    let mut allocation = Allocation::default();
    if let Some(path) = &sources.venue_images {
        let given = Allocation::parse(open(path)?)?;
        for c in &pending {
            if let Some(ids) = given.per_poi.get(&c.venue_id) {
                allocation.per_poi.insert(c.venue_id.clone(), ids.clone());
            }
        }
    }
    if let (Some(images), Some(mapping)) = (&sources.class_images, &sources.class_mapping) {
        let images = ClassImages::parse(open(images)?)?;
        let mapping = ClassMapping::parse(open(mapping)?)?;
        let mut by_category: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for c in &pending {
            if !allocation.per_poi.contains_key(&c.venue_id)
                && mapping.classes_for(&c.category_name).is_some()
            {
                by_category
                    .entry(&c.category_name)
                    .or_default()
                    .push(c.venue_id.clone());
            }
        }
        for (category, pois) in by_category {
            let pool = sample_pool(category, &mapping, &images, pois.len(), cfg.seed)?;
            if pool.with_replacement {
                log::warn!("category {category:?} pool drawn with replacement");
            }
            let part = allocate(&pois, &pool.image_ids, PICTURES_PER_POI, cfg.seed)?;
            allocation.per_poi.extend(part.per_poi);
        }
    }

    let summarizer = NumberedSummarizer {
        budget_chars: cfg.desc_budget,
    };
    for (venue, ids) in &allocation.per_poi {
        let text = assemble_description(ids, &store, &summarizer)?;
        if !text.trim().is_empty() {
            descriptions.insert(venue.clone(), text);
        }
    }
    Ok(Described {
        descriptions,
        unique_images: allocation.unique_images().len(),
    })
}

/// Runs the whole preparation chain.
///
/// Venues whose address, municipality, cell or place cannot be resolved are
/// dropped and counted by reason; their check-ins are then removed from the
/// sequences. Venues without a description keep the other four attributes.
pub fn prepare(
    checkins_path: &Path,
    postal_path: &Path,
    allowlist: &CategoryAllowlist,
    geocoder: &GeocoderClient,
    sources: &DescriptionSources,
    cfg: &PrepareConfig,
) -> Result<Prepared> {
    if cfg.min_checkins == 0 {
        return Err(Error::Config("min_checkins must be at least 1".into()));
    }
    let parsed = parse_checkins(open(checkins_path)?, cfg.line_policy)?;
    let postal = parse_postal_table(open(postal_path)?, cfg.postal_columns)?;
    let mut counts = StageCounts {
        malformed_lines: parsed.malformed.len(),
        input_lines: parsed.checkins.len() + parsed.malformed.len(),
        ..Default::default()
    };
    let (kept, filter_counts) = apply_filters(parsed.checkins, allowlist, cfg.min_checkins);
    counts.filters = filter_counts;

    let venues = unique_venues(&kept);
    counts.candidate_pois = venues.len();
    let mut resolved = Vec::with_capacity(venues.len());
    let mut drop = |reason: &str, venue: &str, e: &Error| {
        log::debug!("dropping venue {venue}: {e}");
        *counts.dropped_pois.entry(reason.to_string()).or_default() += 1;
    };
    for c in venues {
        let address = match geocoder.reverse_geocode(&c.geo) {
            Ok(a) => a,
            Err(e) => {
                drop("address", &c.venue_id, &e);
                continue;
            }
        };
        let municipality = match municipality_of(&address.postal_code, &postal) {
            Ok(m) => m,
            Err(e) => {
                drop("municipality", &c.venue_id, &e);
                continue;
            }
        };
        let cell = match h3_cell(&c.geo) {
            Ok(cell) => cell,
            Err(e) => {
                drop("cell", &c.venue_id, &e);
                continue;
            }
        };
        let place = match geocoder.resolve_place(&address, &c.category_name) {
            Ok(p) => p,
            Err(e) => {
                drop("place", &c.venue_id, &e);
                continue;
            }
        };
        let mut attrs = vec![
            (AttributeKey::VenueCategory, c.category_name.clone()),
            (AttributeKey::VenueArea, geokey(municipality, &cell)),
            (AttributeKey::VenueName, place.name),
        ];
        if !place.types.is_empty() {
            attrs.push((AttributeKey::VenueTypes, place.types.join(" ")));
        }
        resolved.push((c, attrs));
    }

    let with_key: Vec<(&CheckIn, String)> = resolved
        .iter()
        .map(|(c, _)| (*c, c.venue_id.clone()))
        .collect();
    let described = describe(&with_key, sources, cfg)?;
    counts.unique_images = described.unique_images;

    let mut pois = BTreeMap::new();
    for (c, mut attrs) in resolved {
        if let Some(d) = described.descriptions.get(&c.venue_id) {
            attrs.push((AttributeKey::VenueDesc, d.clone()));
        }
        match PoiMeta::new(c.venue_id.clone(), attrs) {
            Ok(meta) => {
                pois.insert(c.venue_id.clone(), meta);
            }
            Err(e) => drop("invalid_meta", &c.venue_id, &e),
        }
    }
    counts.final_pois = pois.len();
    let described_lens: Vec<usize> = pois
        .values()
        .filter_map(|m| m.get(AttributeKey::VenueDesc))
        .map(|d| d.chars().count())
        .collect();
    counts.pois_with_description = described_lens.len();
    if !described_lens.is_empty() {
        counts.avg_description_chars =
            described_lens.iter().sum::<usize>() as f64 / described_lens.len() as f64;
    }

    let sequences = build_sequences(&kept);
    let (corpus, report) = validate_corpus(Corpus { pois, sequences }, DanglingPolicy::Drop)?;
    counts.dangling_checkins = report.dangling_items;
    counts.short_sequences = report.short_sequences;
    counts.users = corpus.sequences.len();
    counts.interactions = corpus.interaction_count();
    Ok(Prepared {
        corpus,
        counts,
        malformed: parsed.malformed,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

/// Writes `pois.jsonl`, `sequences.jsonl` and, if given, `stage_counts.json`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, counts: Option<&StageCounts>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(POIS_FILE), corpus.pois.values())?;
    write_jsonl(&dir.join(SEQUENCES_FILE), &corpus.sequences)?;
    if let Some(counts) = counts {
        let path = dir.join(COUNTS_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(counts)?)
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads a corpus directory and re-checks the corpus invariant.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let metas: Vec<PoiMeta> = read_jsonl(&dir.join(POIS_FILE))?;
    let mut pois = BTreeMap::new();
    for m in metas {
        if let Some(prev) = pois.insert(m.venue_id().to_string(), m) {
            return Err(Error::Validation(format!(
                "duplicate venue {} in corpus",
                prev.venue_id()
            )));
        }
    }
    let sequences: Vec<UserSequence> = read_jsonl(&dir.join(SEQUENCES_FILE))?;
    let (corpus, _) = validate_corpus(Corpus { pois, sequences }, DanglingPolicy::Reject)?;
    if let Some(s) = corpus.sequences.iter().find(|s| s.len() < 2) {
        return Err(Error::Validation(format!(
            "user {} has fewer than two check-ins",
            s.user_id
        )));
    }
    Ok(corpus)
}
