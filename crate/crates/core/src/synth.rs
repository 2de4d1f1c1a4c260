//! Synthetic corpora with a planted next-venue signal.
//!
//! Every venue has a hidden topic and every user a preferred topic. Each
//! check-in after the first is, with probability `fidelity`, a uniformly random
//! venue of the preferred topic, otherwise a uniformly random venue. The
//! signal mode decides which attribute reveals a venue's topic: its picture
//! captions (`desc_only`), its category, or its location.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration, TimeZone, Utc};
use h3o::CellIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{CheckIn, GeoPoint};
use crate::error::{Error, Result};
use crate::foodtext::{Allocation, CaptionStore, PICTURES_PER_POI};
use crate::geospatial::{CellId, CellIndexer};
use crate::ingest::{write_checkins, CategoryAllowlist, FixtureRecord};
use crate::rng::{keyed_substream, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    DescOnly,
    Category,
    Geo,
}

impl SignalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desc_only" => Ok(Self::DescOnly),
            "category" => Ok(Self::Category),
            "geo" => Ok(Self::Geo),
            other => Err(Error::Config(format!(
                "unknown signal mode {other:?} (expected desc_only, category or geo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub venues: usize,
    pub categories: usize,
    pub cells: usize,
    pub topics: usize,
    pub keywords_per_topic: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub fidelity: f64,
    pub mode: SignalMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            venues: 500,
            categories: 10,
            cells: 25,
            topics: 10,
            keywords_per_topic: 6,
            min_len: 20,
            max_len: 60,
            fidelity: 0.8,
            mode: SignalMode::DescOnly,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.topics == 0 || self.venues < 10 * self.topics {
            return fail(format!(
                "need at least 10 venues per topic: {} venues, {} topics",
                self.venues, self.topics
            ));
        }
        if !(self.fidelity > 0.0 && self.fidelity <= 1.0) {
            return fail(format!("fidelity {} outside (0, 1]", self.fidelity));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return fail(format!(
                "sequence lengths {}..={} invalid (minimum 2)",
                self.min_len, self.max_len
            ));
        }
        if self.users == 0 || self.cells == 0 || self.categories == 0 {
            return fail("users, cells and categories must be positive".into());
        }
        if self.keywords_per_topic < KEYWORDS_PER_CAPTION {
            return fail(format!(
                "keywords_per_topic must be at least {KEYWORDS_PER_CAPTION}"
            ));
        }
        Ok(())
    }
}

pub const KEYWORDS_PER_CAPTION: usize = 3;
pub const FILLERS_PER_CAPTION: usize = 10;

const FOOD_WORDS: [&str; 72] = [
    "ramen", "sushi", "tempura", "udon", "soba", "yakitori", "gyoza", "curry", "tonkatsu",
    "okonomiyaki", "takoyaki", "sashimi", "miso", "tofu", "edamame", "karaage", "onigiri",
    "donburi", "pizza", "pasta", "risotto", "lasagna", "gnocchi", "bruschetta", "tiramisu",
    "croissant", "baguette", "quiche", "crepe", "souffle", "macaron", "ratatouille", "taco",
    "burrito", "nachos", "quesadilla", "guacamole", "enchilada", "churros", "salsa", "kimchi",
    "bibimbap", "bulgogi", "tteokbokki", "japchae", "dumpling", "noodle", "wonton", "mapo",
    "dimsum", "congee", "pho", "banhmi", "satay", "laksa", "rendang", "padthai", "tomyum",
    "falafel", "hummus", "kebab", "shawarma", "pilaf", "baklava", "burger", "steak", "hotdog",
    "pancake", "waffle", "bagel", "donut", "muffin",
];

const FILLER_WORDS: [&str; 40] = [
    "a", "plate", "of", "with", "served", "on", "the", "table", "bowl", "fresh", "delicious",
    "and", "some", "sauce", "white", "small", "large", "wooden", "dish", "topped", "side",
    "garnish", "hot", "warm", "sliced", "close", "up", "view", "in", "restaurant", "colorful",
    "tasty", "portion", "dinner", "lunch", "meal", "plated", "neatly", "beside", "cup",
];

/// Real ward postal codes in the Japan Post layout.
const WARDS: [(&str, &str, &str, &str, &str, &str); 5] = [
    ("13104", "1600022", "ｼﾝｼﾞｭｸｸ", "ｼﾝｼﾞｭｸ", "新宿区", "新宿"),
    ("13103", "1070052", "ﾐﾅﾄｸ", "ｱｶｻｶ", "港区", "赤坂"),
    ("13113", "1500002", "ｼﾌﾞﾔｸ", "ｼﾌﾞﾔ", "渋谷区", "渋谷"),
    ("13101", "1000005", "ﾁﾖﾀﾞｸ", "ﾏﾙﾉｳﾁ", "千代田区", "丸の内"),
    ("13102", "1040061", "ﾁｭｳｵｳｸ", "ｷﾞﾝｻﾞ", "中央区", "銀座"),
];

const ANCHOR_CELL: &str = "882f5a3751fffff";
const PLACE_TYPES: [&str; 4] = ["restaurant", "food", "point_of_interest", "establishment"];

fn topic_keywords(topics: usize, per_topic: usize) -> Vec<Vec<String>> {
    (0..topics)
        .map(|t| {
            (0..per_topic)
                .map(|j| {
                    let i = t * per_topic + j;
                    match FOOD_WORDS.get(i) {
                        Some(w) => w.to_string(),
                        None => format!("dish{t}x{j}"),
                    }
                })
                .collect()
        })
        .collect()
}

fn nearby_cells(count: usize) -> Result<Vec<CellId>> {
    let anchor: CellIndex = ANCHOR_CELL.parse().expect("valid anchor cell");
    let mut k = 0u32;
    loop {
        let disk: Vec<CellIndex> = anchor.grid_disk(k);
        if disk.len() >= count {
            let mut ids: Vec<String> = disk.iter().map(|c| c.to_string()).collect();
            ids.sort();
            ids.truncate(count);
            return ids.iter().map(|s| CellId::parse(s)).collect();
        }
        k += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthVenue {
    pub venue_id: String,
    pub topic: usize,
    pub name: String,
    pub category_id: String,
    pub category_name: String,
    pub cell: CellId,
    pub ward: usize,
    pub location: GeoPoint,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub venues: Vec<SynthVenue>,
    pub user_topics: BTreeMap<String, usize>,
    pub checkins: Vec<CheckIn>,
    pub captions: CaptionStore,
    pub allocation: Allocation,
    /// Transitions (check-ins after a user's first) and how many landed in the
    /// user's preferred topic.
    pub transitions: usize,
    pub in_topic_transitions: usize,
}

/// Generates a corpus; a pure function of the configuration.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let seed = config.seed;
    let allowlist = CategoryAllowlist::foursquare_food();
    let mut names: Vec<&str> = allowlist.iter().collect();
    names.sort_unstable();
    if config.categories > names.len() {
        return Err(Error::Config(format!(
            "at most {} categories are available",
            names.len()
        )));
    }
    let mut rng = substream(seed, "synth/categories");
    let categories: Vec<&str> = names
        .choose_multiple(&mut rng, config.categories)
        .copied()
        .collect();
    let cells = nearby_cells(config.cells)?;
    let keywords = topic_keywords(config.topics, config.keywords_per_topic);

    let mut rng = substream(seed, "synth/venues");
    let mut topics: Vec<usize> = (0..config.venues).map(|i| i % config.topics).collect();
    topics.shuffle(&mut rng);
    let mut venues = Vec::with_capacity(config.venues);
    for (i, &topic) in topics.iter().enumerate() {
        let cat = match config.mode {
            SignalMode::Category => topic % config.categories,
            _ => rng.gen_range(0..config.categories),
        };
        let cell_ix = match config.mode {
            SignalMode::Geo => {
                let slots = (config.cells + config.topics - 1 - topic) / config.topics;
                topic % config.cells + config.topics * rng.gen_range(0..slots.max(1))
            }
            _ => rng.gen_range(0..config.cells),
        } % config.cells;
        let cell = cells[cell_ix].clone();
        let center = CellIndexer::center(&cell)?;
        let location = GeoPoint::new(
            round6(center.lat() + rng.gen_range(-4e-4..4e-4)),
            round6(center.lon() + rng.gen_range(-4e-4..4e-4)),
        )?;
        let name: String = (0..6)
            .map(|_| {
                let c = rng.gen_range(0..36u32);
                char::from_digit(c, 36).expect("base 36")
            })
            .collect();
        venues.push(SynthVenue {
            venue_id: format!("v{i:05}"),
            topic,
            name: format!("x{name}"),
            category_id: format!("c{:02}", cat),
            category_name: categories[cat].to_string(),
            cell,
            ward: cell_ix % WARDS.len(),
            location,
        });
    }
    let by_topic: Vec<Vec<usize>> = (0..config.topics)
        .map(|t| (0..venues.len()).filter(|&i| venues[i].topic == t).collect())
        .collect();
    if let Some(t) = by_topic.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("topic {t} has no venues")));
    }

    let mut captions = CaptionStore::default();
    let mut allocation = Allocation::default();
    for v in &venues {
        let mut crng = keyed_substream(seed, "synth/captions", &v.venue_id);
        let mut ids = Vec::with_capacity(PICTURES_PER_POI);
        for k in 0..PICTURES_PER_POI {
            let caption_topic = match config.mode {
                SignalMode::DescOnly => v.topic,
                _ => crng.gen_range(0..config.topics),
            };
            let mut words: Vec<&str> = keywords[caption_topic]
                .choose_multiple(&mut crng, KEYWORDS_PER_CAPTION)
                .map(String::as_str)
                .collect();
            words.extend((0..FILLERS_PER_CAPTION).map(|_| *FILLER_WORDS.choose(&mut crng).expect("fillers")));
            words.shuffle(&mut crng);
            let id = format!("img_{}_{k}", v.venue_id);
            captions.insert(id.clone(), words.join(" "))?;
            ids.push(id);
        }
        allocation.per_poi.insert(v.venue_id.clone(), ids);
    }

    let start = Utc.with_ymd_and_hms(2012, 4, 3, 9, 0, 0).single().expect("valid date");
    let mut user_topics = BTreeMap::new();
    let mut checkins = Vec::new();
    let (mut transitions, mut in_topic) = (0, 0);
    for u in 0..config.users {
        let user_id = format!("u{u:04}");
        let mut urng = keyed_substream(seed, "synth/users", &user_id);
        let pref = urng.gen_range(0..config.topics);
        user_topics.insert(user_id.clone(), pref);
        let len = urng.gen_range(config.min_len..=config.max_len);
        let mut t = start + Duration::minutes(urng.gen_range(0..60 * 24));
        for step in 0..len {
            let vi = if step > 0 && urng.gen::<f64>() < config.fidelity {
                *by_topic[pref].choose(&mut urng).expect("non-empty topic")
            } else {
                urng.gen_range(0..venues.len())
            };
            if step > 0 {
                transitions += 1;
                in_topic += usize::from(venues[vi].topic == pref);
            }
            let v = &venues[vi];
            checkins.push(CheckIn {
                user_id: user_id.clone(),
                venue_id: v.venue_id.clone(),
                category_id: v.category_id.clone(),
                category_name: v.category_name.clone(),
                geo: v.location,
                tz_offset_min: 540,
                timestamp_utc: t,
            });
            t += Duration::minutes(urng.gen_range(60..60 * 48));
        }
    }
    Ok(SynthData {
        config: config.clone(),
        venues,
        user_topics,
        checkins,
        captions,
        allocation,
        transitions,
        in_topic_transitions: in_topic,
    })
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Paths written by [`SynthData::write_to`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthFiles {
    pub checkins: PathBuf,
    pub postal: PathBuf,
    pub geocoder: PathBuf,
    pub captions: PathBuf,
    pub venue_images: PathBuf,
    pub ground_truth: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkins: dir.join("checkins.tsv"),
            postal: dir.join("postal.csv"),
            geocoder: dir.join("geocoder.jsonl"),
            captions: dir.join("captions.jsonl"),
            venue_images: dir.join("venue_images.jsonl"),
            ground_truth: dir.join("ground_truth.jsonl"),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

impl SynthData {
    pub fn fixtures(&self) -> Vec<FixtureRecord> {
        self.venues
            .iter()
            .map(|v| {
                let ward = WARDS[v.ward];
                FixtureRecord {
                    lat: v.location.lat(),
                    lon: v.location.lon(),
                    postal_code: format!("{}-{}", &ward.1[..3], &ward.1[3..]),
                    formatted: format!("〒{} 東京都{}{} {}", ward.1, ward.4, ward.5, v.venue_id),
                    name: v.name.clone(),
                    types: PLACE_TYPES.iter().map(|s| s.to_string()).collect(),
                    category: Some(v.category_name.clone()),
                }
            })
            .collect()
    }

    /// Writes every input file `prepare` consumes, plus the ground truth.
    pub fn write_to(&self, dir: &Path) -> Result<SynthFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles::in_dir(dir);

        let mut w = create(&files.checkins)?;
        write_checkins(&mut w, &self.checkins).map_err(|e| Error::io(&files.checkins, e))?;
        w.flush().map_err(|e| Error::io(&files.checkins, e))?;

        let mut w = create(&files.postal)?;
        for (jis, code, city_kana, town_kana, city, town) in WARDS {
            writeln!(
                w,
                "{jis},\"{}  \",\"{code}\",\"ﾄｳｷｮｳﾄ\",\"{city_kana}\",\"{town_kana}\",\"東京都\",\"{city}\",\"{town}\",0,0,1,0,0,0",
                &code[..3]
            )
            .map_err(|e| Error::io(&files.postal, e))?;
        }
        w.flush().map_err(|e| Error::io(&files.postal, e))?;

        let mut w = create(&files.geocoder)?;
        for rec in self.fixtures() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&files.geocoder, e))?;
        }
        w.flush().map_err(|e| Error::io(&files.geocoder, e))?;

        let mut w = create(&files.captions)?;
        self.captions.write(&mut w)?;
        w.flush().map_err(|e| Error::io(&files.captions, e))?;

        let mut w = create(&files.venue_images)?;
        self.allocation.write(&mut w)?;
        w.flush().map_err(|e| Error::io(&files.venue_images, e))?;

        let mut w = create(&files.ground_truth)?;
        for v in &self.venues {
            serde_json::to_writer(&mut w, &serde_json::json!({"venue_id": v.venue_id, "topic": v.topic}))?;
            w.write_all(b"\n").map_err(|e| Error::io(&files.ground_truth, e))?;
        }
        for (user, topic) in &self.user_topics {
            serde_json::to_writer(&mut w, &serde_json::json!({"user_id": user, "preferred_topic": topic}))?;
            w.write_all(b"\n").map_err(|e| Error::io(&files.ground_truth, e))?;
        }
        w.flush().map_err(|e| Error::io(&files.ground_truth, e))?;
        Ok(files)
    }
}

/// Recall@k of an oracle that knows every topic and ranks the preferred
/// topic's venues first, when each target is in-topic: `min(k, n)/n` for a
/// topic of `n` venues.
pub fn oracle_recall_in_topic(k: usize, topic_size: usize) -> f64 {
    k.min(topic_size) as f64 / topic_size as f64
}
