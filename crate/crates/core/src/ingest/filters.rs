use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::domain::CheckIn;
use crate::error::{Error, Result};

const FOOD_CATEGORIES: &str = include_str!("../../data/food_categories.txt");

/// Venue category names to keep. Matching is exact, including the double
/// space in `Ramen /  Noodle House` that the Foursquare dump uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryAllowlist {
    names: BTreeSet<String>,
}

impl CategoryAllowlist {
    pub fn new(names: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for name in names {
            if !set.insert(name.clone()) {
                return Err(Error::InvalidValue(format!(
                    "duplicate allowlist entry {name:?}"
                )));
            }
        }
        Ok(Self { names: set })
    }

    /// The 80 food-related Foursquare categories.
    pub fn foursquare_food() -> Self {
        Self::parse(FOOD_CATEGORIES.as_bytes()).expect("bundled allowlist is valid")
    }

    /// One category per line; blank lines and `#` comments are ignored.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut names = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            names.push(line.to_string());
        }
        let list = Self::new(names)?;
        if list.is_empty() {
            return Err(Error::Config("category allowlist is empty".into()));
        }
        Ok(list)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

pub fn filter_by_category(checkins: Vec<CheckIn>, allowlist: &CategoryAllowlist) -> Vec<CheckIn> {
    checkins
        .into_iter()
        .filter(|c| allowlist.contains(&c.category_name))
        .collect()
}

/// Keeps every check-in of users with at least `min_count` check-ins.
pub fn filter_loyal_users(checkins: Vec<CheckIn>, min_count: usize) -> Vec<CheckIn> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in &checkins {
        *counts.entry(c.user_id.as_str()).or_default() += 1;
    }
    let loyal: BTreeSet<String> = counts
        .into_iter()
        .filter(|(_, n)| *n >= min_count)
        .map(|(u, _)| u.to_string())
        .collect();
    checkins
        .into_iter()
        .filter(|c| loyal.contains(&c.user_id))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub input_checkins: usize,
    pub category_checkins: usize,
    pub loyal_checkins: usize,
    pub loyal_users: usize,
}

/// The dataset filter chain: category allowlist first, then loyalty counted on
/// the category-filtered stream.
pub fn apply_filters(
    checkins: Vec<CheckIn>,
    allowlist: &CategoryAllowlist,
    min_count: usize,
) -> (Vec<CheckIn>, FilterCounts) {
    let mut counts = FilterCounts {
        input_checkins: checkins.len(),
        ..Default::default()
    };
    let by_category = filter_by_category(checkins, allowlist);
    counts.category_checkins = by_category.len();
    let loyal = filter_loyal_users(by_category, min_count);
    counts.loyal_checkins = loyal.len();
    counts.loyal_users = loyal
        .iter()
        .map(|c| c.user_id.as_str())
        .collect::<BTreeSet<_>>()
        .len();
    (loyal, counts)
}
