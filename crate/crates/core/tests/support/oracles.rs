//! Brute-force reference implementations, written without the library's
//! ranking and metric code.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use chrono::{TimeZone, Utc};
use mmpoi::domain::{AttributeKey, PoiMeta, UserSequence, Visit};
use mmpoi::eval::{evaluate, group_split, EvalOptions, SplitConfig};
use mmpoi::model::{Encoder, ModelConfig, ModelParams};
use mmpoi::rank::{rank, ItemIndex, RankOptions};
use mmpoi::textrep::{vocab_from_metas, TextConfig};
use rand::seq::SliceRandom;
use rand::Rng;

const WORDS: [&str; 16] = [
    "ramen", "sushi", "curry", "udon", "soba", "pizza", "pasta", "taco", "grill", "cafe",
    "noodle", "rice", "broth", "spicy", "sweet", "fried",
];

/// A random untrained encoder and `n` venues with random attributes.
pub fn toy_world(n: usize, seed: u64) -> (Encoder, BTreeMap<String, PoiMeta>) {
    let mut rng = mmpoi::rng::substream(seed, "oracle/world");
    let mut pois = BTreeMap::new();
    for i in 0..n {
        let mut words = |k: usize| {
            (0..k)
                .map(|_| *WORDS.choose(&mut rng).unwrap())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let meta = PoiMeta::new(
            format!("p{i:03}"),
            [
                (AttributeKey::VenueCategory, words(1)),
                (AttributeKey::VenueName, words(2)),
                (AttributeKey::VenueDesc, words(5)),
            ],
        )
        .unwrap();
        pois.insert(meta.venue_id().to_string(), meta);
    }
    let vocab = vocab_from_metas(pois.values(), 1000, 1).unwrap();
    let params = ModelParams::init(ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_tokens: 64,
        max_items: 8,
        vocab_size: vocab.len(),
        dropout_rate: 0.0,
        tie_mlm_head: true,
        seed,
    })
    .unwrap();
    let text = TextConfig {
        per_attribute_cap: 8,
        max_sequence_tokens: 64,
        ..TextConfig::default()
    };
    (Encoder::new(params, vocab, text).unwrap(), pois)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Candidates ordered by descending cosine, ties by ascending id.
pub fn scan(query: &[f64], index: &ItemIndex, excluded: &HashSet<String>) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = (0..index.len())
        .filter(|&i| !excluded.contains(&index.ids()[i]))
        .map(|i| (index.ids()[i].clone(), cosine(query, index.vector(i))))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all
}

/// nDCG@10, nDCG@50, Recall@10, Recall@50, MRR, AUC computed from an explicit
/// ranked list. A target missing from the list is appended after it.
pub fn list_metrics(ranked: &[(String, f64)], target: &str) -> [f64; 6] {
    let mut rel: Vec<f64> = ranked
        .iter()
        .map(|(id, _)| if id == target { 1.0 } else { 0.0 })
        .collect();
    if !rel.contains(&1.0) {
        rel.push(1.0);
    }
    let dcg = |k: usize| -> f64 {
        rel.iter()
            .take(k)
            .enumerate()
            .map(|(i, r)| r / ((i + 2) as f64).log2())
            .sum()
    };
    let recall = |k: usize| -> f64 { rel.iter().take(k).sum() };
    let first = rel.iter().position(|&r| r == 1.0).unwrap();
    let mut below = 0usize;
    let mut negatives = 0usize;
    for (i, r) in rel.iter().enumerate() {
        if *r == 0.0 {
            negatives += 1;
            if i > first {
                below += 1;
            }
        }
    }
    let auc = if negatives == 0 {
        1.0
    } else {
        below as f64 / negatives as f64
    };
    [dcg(10), dcg(50), recall(10), recall(50), 1.0 / (first + 1) as f64, auc]
}

/// Unit vector whose cosine with unit `q` is exactly `a` (up to rounding).
fn at_cosine(q: &[f64], a: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut u: Vec<f64> = (0..q.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let proj: f64 = u.iter().zip(q).map(|(x, y)| x * y).sum();
    u.iter_mut().zip(q).for_each(|(x, y)| *x -= proj * y);
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let b = (1.0 - a * a).sqrt();
    let v: Vec<f64> = q.iter().zip(&u).map(|(y, x)| a * y + b * x / nu).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / nv).collect()
}

fn visits(ids: &[&str]) -> Vec<Visit> {
    ids.iter()
        .enumerate()
        .map(|(t, id)| Visit {
            venue_id: id.to_string(),
            timestamp_utc: Utc.timestamp_opt(1_300_000_000 + 3600 * t as i64, 0).unwrap(),
        })
        .collect()
}

/// Largest absolute gap between `evaluate` and the list oracle over random
/// instances, each with one test sequence whose target is planted at a random
/// rank among at most 50 candidates.
pub fn metric_oracle_gap(instances: usize, seed: u64) -> f64 {
    let (encoder, pois) = toy_world(60, seed);
    let ids: Vec<&str> = pois.keys().map(String::as_str).collect();
    let mut rng = mmpoi::rng::substream(seed, "oracle/metrics");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let p = rng.gen_range(2..=50);
        let candidates: Vec<&str> = ids.choose_multiple(&mut rng, p).copied().collect();
        let prefix_len = rng.gen_range(1..=3);
        let prefix: Vec<&str> = (0..prefix_len)
            .map(|_| *candidates.choose(&mut rng).unwrap())
            .collect();
        let target = *candidates.choose(&mut rng).unwrap();
        let metas: Vec<&PoiMeta> = prefix.iter().map(|id| &pois[*id]).collect();
        let q = encoder.encode_sequence(&metas).unwrap();

        let mut levels: Vec<f64> = (0..p).map(|_| rng.gen_range(-0.95..0.95)).collect();
        levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let r = rng.gen_range(0..p);
        let target_level = levels.remove(r);
        let mut entries = vec![(target.to_string(), at_cosine(&q, target_level, &mut rng))];
        for (id, a) in candidates.iter().filter(|c| **c != target).zip(levels) {
            entries.push((id.to_string(), at_cosine(&q, a, &mut rng)));
        }
        let index = ItemIndex::new(q.len(), entries).unwrap();

        let exclude_seen = rng.gen_bool(0.5);
        let mut seq_ids = prefix.clone();
        seq_ids.push(target);
        let test = [UserSequence {
            user_id: "u".into(),
            items: visits(&seq_ids),
        }];
        let got = evaluate(
            &test,
            &pois,
            &index,
            &encoder,
            &EvalOptions {
                exclude_seen,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        let excluded: HashSet<String> = if exclude_seen {
            prefix.iter().map(|s| s.to_string()).collect()
        } else {
            HashSet::new()
        };
        let want = list_metrics(&scan(&q, &index, &excluded), target);
        let have = [
            got.ndcg_at_10,
            got.ndcg_at_50,
            got.recall_at_10,
            got.recall_at_50,
            got.mrr,
            got.auc,
        ];
        for (a, b) in have.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Compares `rank` with a direct cosine scan on random indexes of at most 50
/// venues. Returns (order always identical, largest score gap).
pub fn rank_oracle(instances: usize, seed: u64) -> (bool, f64) {
    let (encoder, pois) = toy_world(60, seed);
    let ids: Vec<&str> = pois.keys().map(String::as_str).collect();
    let mut rng = mmpoi::rng::substream(seed, "oracle/rank");
    let mut same = true;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let p = rng.gen_range(1..=50);
        let chosen: Vec<&str> = ids.choose_multiple(&mut rng, p).copied().collect();
        let dim = encoder.params.config.d_model;
        let entries: Vec<(String, Vec<f64>)> = chosen
            .iter()
            .map(|id| {
                if rng.gen_bool(0.5) {
                    (id.to_string(), encoder.encode_item(&pois[*id]).unwrap())
                } else {
                    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    (id.to_string(), v.into_iter().map(|x| x / n).collect())
                }
            })
            .collect();
        let index = ItemIndex::new(dim, entries).unwrap();
        let prefix: Vec<&PoiMeta> = (0..rng.gen_range(1..=4))
            .map(|_| &pois[*ids.choose(&mut rng).unwrap()])
            .collect();
        let opts = RankOptions {
            top_k: rng.gen_bool(0.5).then(|| rng.gen_range(1..=60)),
            exclude_seen: rng.gen_bool(0.5),
        };
        let got = rank(&prefix, &index, &encoder, &opts).unwrap();
        let q = encoder.encode_sequence(&prefix).unwrap();
        let excluded: HashSet<String> = if opts.exclude_seen {
            prefix.iter().map(|m| m.venue_id().to_string()).collect()
        } else {
            HashSet::new()
        };
        let mut want = scan(&q, &index, &excluded);
        if let Some(k) = opts.top_k {
            want.truncate(k);
        }
        if got.len() != want.len() {
            same = false;
            continue;
        }
        for (g, w) in got.iter().zip(&want) {
            same &= g.venue_id == w.0;
            worst = worst.max((g.score - w.1).abs());
        }
    }
    (same, worst)
}

/// Over `seeds` splits of random user sets: (total overlapping users, largest
/// distance of the train-user count from 80 %).
pub fn split_integrity(seeds: u64) -> (usize, f64) {
    let mut overlap = 0;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = mmpoi::rng::substream(seed, "oracle/split");
        let users = rng.gen_range(2..=300);
        let seqs: Vec<UserSequence> = (0..users)
            .map(|u| UserSequence {
                user_id: format!("u{u}"),
                items: visits(&["a", "b"]),
            })
            .collect();
        let (train, test) = group_split(
            &seqs,
            &SplitConfig {
                train_fraction: 0.8,
                seed,
            },
        )
        .unwrap();
        let tr: HashSet<&str> = train.iter().map(|s| s.user_id.as_str()).collect();
        overlap += test.iter().filter(|s| tr.contains(s.user_id.as_str())).count();
        assert_eq!(train.len() + test.len(), users);
        worst = worst.max((tr.len() as f64 - 0.8 * users as f64).abs());
    }
    (overlap, worst)
}
