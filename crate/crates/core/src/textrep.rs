//! Tokenisation, vocabulary, item flattening and sequence packing.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{AttributeKey, PoiMeta};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
const SPECIALS: [&str; NUM_SPECIALS] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

pub const FIELD_KEY: u8 = 0;
pub const FIELD_VALUE: u8 = 1;

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F   // CJK punctuation
        | 0x3040..=0x30FF // kana
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF // hangul
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF // half/full width forms
        | 0x20000..=0x2FA1F)
}

/// Splits text into tokens: CJK characters stand alone, other alphanumeric runs
/// (with `_`) form lowercased words, any other non-space character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if is_cjk(c) {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        } else if c.is_alphanumeric() || c == '_' {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Text as the tokenizer sees it: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(regular: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(regular)
            .collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidValue(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= NUM_SPECIALS
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK_ID as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Regular tokens, one per line; line `n` (0-based) has id `n + 4`.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.tokens[NUM_SPECIALS..] {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let tokens = reader
            .lines()
            .collect::<std::io::Result<Vec<String>>>()?;
        Self::from_tokens(tokens)
    }
}

/// Ranks tokens by frequency, then lexicographically; keeps at most
/// `max_vocab` entries including the four specials. `forced` tokens are always kept.
pub fn build_vocab<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    forced: &[&str],
    max_vocab: usize,
    min_freq: usize,
) -> Result<Vocab> {
    if max_vocab < NUM_SPECIALS + 1 {
        return Err(Error::Config(format!(
            "max_vocab must be at least {}, got {max_vocab}",
            NUM_SPECIALS + 1
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for text in texts {
        any = true;
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
    }
    for f in forced {
        counts.remove(*f);
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, n)| *n >= min_freq)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = max_vocab.saturating_sub(NUM_SPECIALS + forced.len());
    Vocab::from_tokens(
        forced
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(t, _)| t)),
    )
}

/// Vocabulary over all attribute values, with the attribute keys always present.
pub fn vocab_from_metas<'a>(
    metas: impl IntoIterator<Item = &'a PoiMeta>,
    max_vocab: usize,
    min_freq: usize,
) -> Result<Vocab> {
    let keys: Vec<&str> = AttributeKey::ALL.iter().map(AttributeKey::as_str).collect();
    let values: Vec<&str> = metas
        .into_iter()
        .flat_map(|m| m.attributes().iter().map(|(_, v)| v.as_str()))
        .collect();
    build_vocab(values, &keys, max_vocab, min_freq)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedItem {
    pub token_ids: Vec<u32>,
    pub field_type_ids: Vec<u8>,
}

impl TokenizedItem {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Token budgets for flattening and packing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    /// Value tokens kept per attribute.
    pub per_attribute_cap: usize,
    /// Tokens per packed sequence, CLS included.
    pub max_sequence_tokens: usize,
    pub max_vocab: usize,
    pub min_freq: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            per_attribute_cap: 32,
            max_sequence_tokens: 512,
            max_vocab: 20_000,
            min_freq: 2,
        }
    }
}

/// `k1 v1 k2 v2 …` with each value cut to `cap` tokens.
pub fn flatten_item(meta: &PoiMeta, vocab: &Vocab, cap: usize) -> Result<TokenizedItem> {
    if meta.attributes().is_empty() {
        return Err(Error::Input(format!(
            "venue {} has no attributes",
            meta.venue_id()
        )));
    }
    let mut item = TokenizedItem::default();
    for (key, value) in meta.attributes() {
        item.token_ids.push(vocab.id(key.as_str()));
        item.field_type_ids.push(FIELD_KEY);
        for id in vocab.encode(value).into_iter().take(cap) {
            item.token_ids.push(id);
            item.field_type_ids.push(FIELD_VALUE);
        }
    }
    Ok(item)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelInput {
    pub token_ids: Vec<u32>,
    pub field_type_ids: Vec<u8>,
    /// 0 for CLS; otherwise the item's 1-based chronological position among
    /// the packed items, so the newest item (packed first) has the largest id.
    pub item_position_ids: Vec<u16>,
    pub position_ids: Vec<u16>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PackStats {
    pub items_kept: usize,
    pub items_dropped: usize,
    /// Set when the newest item alone exceeded the budget and was cut.
    pub truncated: bool,
}

/// Packs chronologically ordered items newest-first behind a CLS token,
/// dropping the oldest items that do not fit in `max_tokens`.
pub fn pack_sequence(items: &[TokenizedItem], max_tokens: usize) -> Result<(ModelInput, PackStats)> {
    if items.is_empty() {
        return Err(Error::Input("cannot pack an empty sequence".into()));
    }
    if max_tokens < 2 {
        return Err(Error::Config(format!("sequence budget {max_tokens} is too small")));
    }
    let room = max_tokens - 1;
    let mut kept: Vec<&TokenizedItem> = Vec::new();
    let mut used = 0;
    let mut stats = PackStats::default();
    for item in items.iter().rev() {
        if used + item.len() > room {
            break;
        }
        used += item.len();
        kept.push(item);
    }
    let mut input = ModelInput {
        token_ids: vec![CLS_ID],
        field_type_ids: vec![FIELD_KEY],
        item_position_ids: vec![0],
        position_ids: Vec::new(),
    };
    if kept.is_empty() {
        let newest = items.last().expect("non-empty");
        stats.truncated = true;
        input.token_ids.extend(&newest.token_ids[..room]);
        input.field_type_ids.extend(&newest.field_type_ids[..room]);
        input.item_position_ids.extend(std::iter::repeat_n(1, room));
        stats.items_kept = 1;
    } else {
        let m = kept.len();
        for (rank, item) in kept.iter().enumerate() {
            let pos = (m - rank) as u16;
            input.token_ids.extend(&item.token_ids);
            input.field_type_ids.extend(&item.field_type_ids);
            input
                .item_position_ids
                .extend(std::iter::repeat_n(pos, item.len()));
        }
        stats.items_kept = m;
    }
    stats.items_dropped = items.len() - stats.items_kept;
    input.position_ids = (0..input.token_ids.len() as u16).collect();
    Ok((input, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(pairs: &[(AttributeKey, &str)]) -> PoiMeta {
        PoiMeta::new("v", pairs.iter().map(|(k, v)| (*k, v.to_string()))).unwrap()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("French Restaurant"), ["french", "restaurant"]);
        assert_eq!(tokenize("新宿区 882f5a3751fffff"), ["新", "宿", "区", "882f5a3751fffff"]);
        assert_eq!(tokenize("1. Ramen, egg"), ["1", ".", "ramen", ",", "egg"]);
        assert_eq!(tokenize("meal_takeaway"), ["meal_takeaway"]);
    }

    #[test]
    fn vocab_counts_and_unk() {
        let v = build_vocab(["ramen ramen soup"], &[], 100, 1).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS + 2);
        assert_eq!(v.id("ramen"), 4);
        assert_eq!(v.id("soup"), 5);
        let v2 = build_vocab(["ramen ramen soup"], &[], 100, 2).unwrap();
        assert_eq!(v2.id("soup"), UNK_ID);
        assert_eq!(v2.encode("新宿区").len(), 3);
        assert!(build_vocab(["x"], &[], 4, 1).is_err());
        assert!(build_vocab(Vec::<&str>::new(), &[], 10, 1).is_err());
    }

    #[test]
    fn vocab_caps_size_and_breaks_ties_lexicographically() {
        let v = build_vocab(["b a c a b c d"], &[], NUM_SPECIALS + 2, 1).unwrap();
        assert_eq!(v.len(), NUM_SPECIALS + 2);
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("b"));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab(["ramen soup 新宿"], &["venue_name"], 100, 1).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let back = Vocab::read(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("venue_name"), 4);
    }

    #[test]
    fn flatten_single_attribute() {
        let m = meta(&[(AttributeKey::VenueCategory, "French Restaurant")]);
        let vocab = vocab_from_metas([&m], 100, 1).unwrap();
        let item = flatten_item(&m, &vocab, 32).unwrap();
        assert_eq!(vocab.decode(&item.token_ids), "venue_category french restaurant");
        assert_eq!(item.field_type_ids, [0, 1, 1]);
    }

    #[test]
    fn flatten_truncates_values() {
        let long = vec!["word"; 1000].join(" ");
        let m = meta(&[(AttributeKey::VenueDesc, &long)]);
        let vocab = vocab_from_metas([&m], 100, 1).unwrap();
        let item = flatten_item(&m, &vocab, 32).unwrap();
        assert_eq!(item.field_type_ids.iter().filter(|&&f| f == FIELD_VALUE).count(), 32);
    }

    #[test]
    fn flatten_is_order_independent() {
        let a = meta(&[(AttributeKey::VenueName, "x"), (AttributeKey::VenueCategory, "y")]);
        let b = meta(&[(AttributeKey::VenueCategory, "y"), (AttributeKey::VenueName, "x")]);
        let vocab = vocab_from_metas([&a], 100, 1).unwrap();
        assert_eq!(flatten_item(&a, &vocab, 8).unwrap(), flatten_item(&b, &vocab, 8).unwrap());
        let empty = PoiMeta::new("e", []).unwrap();
        assert!(flatten_item(&empty, &vocab, 8).is_err());
    }

    fn item(len: usize, tag: u32) -> TokenizedItem {
        TokenizedItem {
            token_ids: vec![tag; len],
            field_type_ids: vec![FIELD_VALUE; len],
        }
    }

    #[test]
    fn pack_single_item() {
        let (input, stats) = pack_sequence(&[item(5, 9)], 512).unwrap();
        assert_eq!(input.len(), 6);
        assert_eq!(input.token_ids[0], CLS_ID);
        assert_eq!(input.position_ids, [0, 1, 2, 3, 4, 5]);
        assert_eq!(stats.items_kept, 1);
    }

    #[test]
    fn pack_drops_oldest() {
        let (input, stats) = pack_sequence(&[item(6, 7), item(6, 8)], 10).unwrap();
        assert_eq!(input.len(), 7);
        assert!(input.token_ids[1..].iter().all(|&t| t == 8));
        assert_eq!(stats.items_dropped, 1);
        let again = pack_sequence(&[item(6, 7), item(6, 8)], 10).unwrap();
        assert_eq!(again.0, input);
    }

    #[test]
    fn pack_truncates_oversized_newest_item() {
        let (input, stats) = pack_sequence(&[item(3, 7), item(20, 8)], 10).unwrap();
        assert_eq!(input.len(), 10);
        assert!(stats.truncated);
        assert!(pack_sequence(&[], 10).is_err());
    }

    #[test]
    fn item_positions_newest_first() {
        let (input, _) = pack_sequence(&[item(2, 5), item(1, 6), item(2, 7)], 100).unwrap();
        assert_eq!(input.token_ids, [CLS_ID, 7, 7, 6, 5, 5]);
        assert_eq!(input.item_position_ids, [0, 3, 3, 2, 1, 1]);
    }

    #[test]
    fn description_free_flattening_has_no_description_tokens() {
        let m = meta(&[
            (AttributeKey::VenueCategory, "Ramen /  Noodle House"),
            (AttributeKey::VenueDesc, "1. tonkotsu broth with chashu"),
            (AttributeKey::VenueTypes, "food restaurant"),
        ]);
        let vocab = vocab_from_metas([&m], 100, 1).unwrap();
        let stripped = m.without(AttributeKey::VenueDesc);
        let text = vocab.decode(&flatten_item(&stripped, &vocab, 32).unwrap().token_ids);
        for w in ["tonkotsu", "broth", "chashu", "venue_desc"] {
            assert!(!text.contains(w), "{text}");
        }
        assert!(text.contains("food"));
    }

    proptest! {
        #[test]
        fn decode_encode_round_trip(text in "[a-z ]{0,30}( [新宿区港])?[a-z .,]{0,20}") {
            let vocab = build_vocab([text.as_str(), "x"], &[], 1000, 1).unwrap();
            prop_assert_eq!(vocab.decode(&vocab.encode(&text)), normalize(&text));
        }

        #[test]
        fn packing_respects_budget(
            lens in prop::collection::vec(1usize..40, 1..12),
            budget in 2usize..120,
        ) {
            let items: Vec<TokenizedItem> =
                lens.iter().enumerate().map(|(i, &l)| item(l, i as u32 + 4)).collect();
            let (input, stats) = pack_sequence(&items, budget).unwrap();
            prop_assert!(input.len() <= budget);
            prop_assert_eq!(stats.items_kept + stats.items_dropped, items.len());
            prop_assert!(input.item_position_ids[1..].windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(input.len(), input.item_position_ids.len());
            prop_assert_eq!(input.len(), input.field_type_ids.len());
        }
    }
}
