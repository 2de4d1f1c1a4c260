//! Item index and cosine-similarity ranking.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;

use crate::domain::PoiMeta;
use crate::error::{Error, Result};
use crate::model::checkpoint::verify_crc;
use crate::model::tensor::{dot, l2_norm};
use crate::model::Encoder;

const MAGIC: &[u8; 8] = b"MMPOIIDX";
const VERSION: u32 = 1;
const UNIT_TOLERANCE: f64 = 1e-6;

/// Unit-norm item embeddings in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl ItemIndex {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Index("dimension must be positive".into()));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        let mut positions = HashMap::with_capacity(entries.len());
        for (id, v) in entries {
            if v.len() != dim {
                return Err(Error::Index(format!(
                    "vector for {id} has {} dimensions, expected {dim}",
                    v.len()
                )));
            }
            let norm = l2_norm(&v);
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Index(format!("vector for {id} has norm {norm}")));
            }
            if positions.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::Index(format!("duplicate venue_id {id}")));
            }
            ids.push(id);
            data.extend_from_slice(&v);
        }
        Ok(Self {
            dim,
            ids,
            data,
            positions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, venue_id: &str) -> Option<usize> {
        self.positions.get(venue_id).copied()
    }

    /// Row-major `len × dim` matrix of all vectors.
    pub fn matrix(&self) -> &[f64] {
        &self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for &v in self.vector(i) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: origin.to_path_buf(),
            reason,
        };
        let body = verify_crc(bytes).map_err(corrupt)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= body.len())
                .ok_or_else(|| corrupt(format!("truncated at byte {pos}")))?;
            let s = &body[pos..end];
            pos = end;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let id = std::str::from_utf8(take(len)?)
                .map_err(|e| corrupt(format!("venue id: {e}")))?
                .to_string();
            let raw = take(dim * 4)?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            entries.push((id, v));
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes".into()));
        }
        Self::new(dim, entries).map_err(|e| corrupt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rounds every vector to the `f32` precision of the file format.
    pub fn round_to_stored(&mut self) {
        self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Embeds every POI with the encoder, in iteration order.
pub fn build_index<'a>(
    metas: impl IntoIterator<Item = &'a PoiMeta>,
    encoder: &Encoder,
) -> Result<ItemIndex> {
    let metas: Vec<&PoiMeta> = metas.into_iter().collect();
    let mut seen = HashSet::with_capacity(metas.len());
    if let Some(dup) = metas.iter().find(|m| !seen.insert(m.venue_id())) {
        return Err(Error::Index(format!("duplicate venue_id {}", dup.venue_id())));
    }
    let vectors = metas
        .par_iter()
        .map(|m| encoder.encode_item(m))
        .collect::<Result<Vec<_>>>()?;
    let entries = metas
        .iter()
        .map(|m| m.venue_id().to_string())
        .zip(vectors)
        .collect();
    ItemIndex::new(encoder.params.config.d_model, entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub venue_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankOptions {
    pub top_k: Option<usize>,
    /// Drop venues that already occur in the prefix.
    pub exclude_seen: bool,
}

/// Descending score, ties by ascending venue id.
fn order(index: &ItemIndex, a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| index.ids[a.0].cmp(&index.ids[b.0]))
}

/// Cosine scores of `query` against every index vector.
pub fn scores(query: &[f64], index: &ItemIndex) -> Vec<f64> {
    index
        .matrix()
        .par_chunks(index.dim)
        .map(|v| dot(query, v))
        .collect()
}

/// Ranks index positions for a unit query, skipping `excluded` positions.
pub fn rank_embedding(
    query: &[f64],
    index: &ItemIndex,
    excluded: &HashSet<usize>,
    top_k: Option<usize>,
) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = scores(query, index)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .collect();
    let k = top_k.unwrap_or(scored.len()).min(scored.len());
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, |a, b| order(index, *a, *b));
        scored.truncate(k);
    } else {
        scored.truncate(k);
    }
    scored.sort_by(|a, b| order(index, *a, *b));
    scored
}

/// 1-based rank `target` would receive in [`rank_embedding`], given its scores.
///
/// Returns `None` when the target is excluded.
pub fn rank_of(
    scores: &[f64],
    index: &ItemIndex,
    target: usize,
    excluded: &HashSet<usize>,
) -> Option<usize> {
    if excluded.contains(&target) {
        return None;
    }
    let t = (target, scores[target]);
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .filter(|&(i, &s)| order(index, (i, s), t) == Ordering::Less)
        .count();
    Some(ahead + 1)
}

/// Ranks candidates for a chronologically ordered visit prefix.
pub fn rank(
    prefix: &[&PoiMeta],
    index: &ItemIndex,
    encoder: &Encoder,
    opts: &RankOptions,
) -> Result<Vec<Ranked>> {
    if index.is_empty() {
        return Err(Error::Index("cannot rank against an empty index".into()));
    }
    if prefix.is_empty() {
        return Err(Error::Input("cannot rank for an empty prefix".into()));
    }
    let query = encoder.encode_sequence(prefix)?;
    let excluded = if opts.exclude_seen {
        prefix
            .iter()
            .filter_map(|m| index.position(m.venue_id()))
            .collect()
    } else {
        HashSet::new()
    };
    Ok(rank_embedding(&query, index, &excluded, opts.top_k)
        .into_iter()
        .map(|(i, score)| Ranked {
            venue_id: index.ids[i].clone(),
            score,
        })
        .collect())
}
