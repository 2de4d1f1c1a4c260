//! Grouped splitting, leave-last-out evaluation and the description ablation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AttributeKey, Corpus, PoiMeta, UserSequence};
use crate::error::{Error, Result};
use crate::model::{Encoder, ModelConfig, ModelParams};
use crate::rank::{rank_of, scores, ItemIndex};
use crate::rng::substream;
use crate::textrep::{vocab_from_metas, TextConfig, Vocab};
use crate::train::{finetune_two_stage, pretrain, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Splits by user so no user appears on both sides. Each side keeps input order.
pub fn group_split(
    sequences: &[UserSequence],
    config: &SplitConfig,
) -> Result<(Vec<UserSequence>, Vec<UserSequence>)> {
    let f = config.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Config(format!("train_fraction {f} outside (0, 1)")));
    }
    let users: BTreeSet<&str> = sequences.iter().map(|s| s.user_id.as_str()).collect();
    if users.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 users to split, found {}",
            users.len()
        )));
    }
    let mut order: Vec<&str> = users.into_iter().collect();
    order.shuffle(&mut substream(config.seed, "group_split"));
    let n_train = ((f * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
    let train_users: HashSet<&str> = order[..n_train].iter().copied().collect();
    let (train, test) = sequences
        .iter()
        .cloned()
        .partition(|s| train_users.contains(s.user_id.as_str()));
    Ok((train, test))
}

/// Metrics for a single target at 1-based rank `r` among `p` candidates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RankMetrics {
    pub ndcg_at_10: f64,
    pub ndcg_at_50: f64,
    pub recall_at_10: f64,
    pub recall_at_50: f64,
    pub mrr: f64,
    pub auc: f64,
}

fn ndcg_at(r: usize, k: usize) -> f64 {
    if r <= k {
        1.0 / ((r + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn rank_metrics(r: usize, p: usize) -> RankMetrics {
    assert!(r >= 1 && r <= p, "rank {r} outside 1..={p}");
    RankMetrics {
        ndcg_at_10: ndcg_at(r, 10),
        ndcg_at_50: ndcg_at(r, 50),
        recall_at_10: f64::from(u8::from(r <= 10)),
        recall_at_50: f64::from(u8::from(r <= 50)),
        mrr: 1.0 / r as f64,
        auc: if p == 1 {
            1.0
        } else {
            (p - r) as f64 / (p - 1) as f64
        },
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ndcg_at_10: f64,
    pub ndcg_at_50: f64,
    pub recall_at_10: f64,
    pub recall_at_50: f64,
    pub mrr: f64,
    pub auc: f64,
    pub n_sequences: usize,
    /// Size of the candidate set |P|.
    pub n_candidates: usize,
    pub missing_targets: usize,
}

impl MetricsReport {
    /// Means over `(rank, candidate count)` pairs, accumulated in order.
    pub fn from_ranks(ranks: &[(usize, usize)], n_candidates: usize) -> Self {
        let mut sum = RankMetrics::default();
        for &(r, p) in ranks {
            let m = rank_metrics(r, p);
            sum.ndcg_at_10 += m.ndcg_at_10;
            sum.ndcg_at_50 += m.ndcg_at_50;
            sum.recall_at_10 += m.recall_at_10;
            sum.recall_at_50 += m.recall_at_50;
            sum.mrr += m.mrr;
            sum.auc += m.auc;
        }
        let n = ranks.len().max(1) as f64;
        Self {
            ndcg_at_10: sum.ndcg_at_10 / n,
            ndcg_at_50: sum.ndcg_at_50 / n,
            recall_at_10: sum.recall_at_10 / n,
            recall_at_50: sum.recall_at_50 / n,
            mrr: sum.mrr / n,
            auc: sum.auc / n,
            n_sequences: ranks.len(),
            n_candidates,
            missing_targets: 0,
        }
    }

    pub fn values(&self) -> [(&'static str, f64); 6] {
        [
            ("ndcg@10", self.ndcg_at_10),
            ("ndcg@50", self.ndcg_at_50),
            ("recall@10", self.recall_at_10),
            ("recall@50", self.recall_at_50),
            ("mrr", self.mrr),
            ("auc", self.auc),
        ]
    }
}

const TABLE_HEADER: [&str; 7] = ["", "nDCG@10", "nDCG@50", "Recall@10", "Recall@50", "MRR", "AUC"];

/// Aligned plain-text table with one row per `(label, values)`.
pub fn render_table(rows: &[(String, [f64; 6])]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .chain([TABLE_HEADER[0].len()])
        .max()
        .unwrap_or(0);
    let col_w = 10;
    let mut out = format!("{:<label_w$}", TABLE_HEADER[0]);
    for h in &TABLE_HEADER[1..] {
        let _ = write!(out, "  {h:>col_w$}");
    }
    out.push('\n');
    for (label, vals) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for v in vals {
            let _ = write!(out, "  {v:>col_w$.4}");
        }
        out.push('\n');
    }
    out
}

impl MetricsReport {
    pub fn row(&self) -> [f64; 6] {
        self.values().map(|(_, v)| v)
    }

    pub fn to_table(&self, label: &str) -> String {
        render_table(&[(label.to_string(), self.row())])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingTarget {
    /// Rank the target after every candidate (rank p + 1 of p + 1) and log a warning.
    #[default]
    WorstRank,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub exclude_seen: bool,
    pub missing_target: MissingTarget,
}

/// Rank of the target of one sequence and the size of its candidate set.
fn sequence_rank(
    seq: &UserSequence,
    pois: &BTreeMap<String, PoiMeta>,
    index: &ItemIndex,
    encoder: &Encoder,
    opts: &EvalOptions,
) -> Result<(Option<usize>, usize)> {
    let (prefix, target) = seq.split_last().filter(|(p, _)| !p.is_empty()).ok_or_else(|| {
        Error::Input(format!("sequence of user {} is shorter than 2", seq.user_id))
    })?;
    let metas = prefix
        .iter()
        .map(|v| {
            pois.get(&v.venue_id).ok_or_else(|| {
                Error::Input(format!("venue {} in history has no metadata", v.venue_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let query = encoder.encode_sequence(&metas)?;
    let excluded: HashSet<usize> = if opts.exclude_seen {
        prefix
            .iter()
            .filter_map(|v| index.position(&v.venue_id))
            .collect()
    } else {
        HashSet::new()
    };
    let candidates = index.len() - excluded.len();
    let s = scores(&query, index);
    let r = index
        .position(&target.venue_id)
        .and_then(|t| rank_of(&s, index, t, &excluded));
    Ok((r, candidates))
}

/// Leave-last-out evaluation of every sequence against the full index.
pub fn evaluate(
    test: &[UserSequence],
    pois: &BTreeMap<String, PoiMeta>,
    index: &ItemIndex,
    encoder: &Encoder,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if index.is_empty() {
        return Err(Error::Index("cannot evaluate against an empty index".into()));
    }
    let outcomes = test
        .par_iter()
        .map(|s| sequence_rank(s, pois, index, encoder, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut missing = 0;
    let mut ranks = Vec::with_capacity(outcomes.len());
    for (seq, (r, p)) in test.iter().zip(outcomes) {
        match r {
            Some(r) => ranks.push((r, p)),
            None => {
                let target = &seq.items.last().expect("checked").venue_id;
                if opts.missing_target == MissingTarget::Error {
                    return Err(Error::Index(format!(
                        "target {target} of user {} is not a candidate",
                        seq.user_id
                    )));
                }
                log::warn!(
                    "target {target} of user {} is not a candidate; counted at rank {}",
                    seq.user_id,
                    p + 1
                );
                missing += 1;
                ranks.push((p + 1, p + 1));
            }
        }
    }
    let mut report = MetricsReport::from_ranks(&ranks, index.len());
    report.missing_targets = missing;
    Ok(report)
}

/// Metrics when every target lands at a uniformly random rank in `1..=p`.
pub fn random_baseline(n_sequences: usize, p: usize, seed: u64) -> Result<MetricsReport> {
    if p < 2 {
        return Err(Error::Config(format!("random baseline needs at least 2 candidates, got {p}")));
    }
    let mut rng = substream(seed, "random_baseline");
    let ranks: Vec<(usize, usize)> = (0..n_sequences)
        .map(|_| (rng.gen_range(1..=p), p))
        .collect();
    Ok(MetricsReport::from_ranks(&ranks, p))
}

/// Everything one training-and-evaluation run needs besides the data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub text: TextConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl ExperimentConfig {
    /// Toy budgets for the synthetic ablation on one CPU core.
    ///
    /// Dropout is off: early in training item embeddings differ by about 1e-3
    /// in cosine and dropout noise drowns the contrastive signal.
    pub fn desk_scale() -> Self {
        Self {
            model: ModelConfig {
                d_model: 32,
                n_layers: 1,
                n_heads: 2,
                d_ff: 64,
                max_tokens: 128,
                dropout_rate: 0.0,
                ..ModelConfig::default()
            },
            text: TextConfig {
                per_attribute_cap: 16,
                max_sequence_tokens: 128,
                ..TextConfig::default()
            },
            train: TrainConfig {
                pretrain_epochs: 3,
                stage1_epochs: 2,
                stage2_epochs: 1,
                warmup_steps: 50,
                pairs_per_user: 0,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    /// Routes the run seed into every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.split.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}

pub struct ExperimentOutcome {
    pub encoder: Encoder,
    pub index: ItemIndex,
    pub pretrain: TrainReport,
    pub finetune: TrainReport,
    pub metrics: MetricsReport,
    pub train_users: usize,
    pub test_users: usize,
}

/// Split, pretrain, finetune and evaluate on one corpus with a fixed vocabulary.
pub fn run_experiment(corpus: &Corpus, vocab: &Vocab, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (train, test) = group_split(&corpus.sequences, &config.split)?;
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        seed: config.model.seed,
        ..config.model
    };
    let params = ModelParams::init(model_cfg)?;
    let encoder = Encoder::new(params, vocab.clone(), config.text)?;
    let train_corpus = Corpus {
        pois: corpus.pois.clone(),
        sequences: train.clone(),
    };
    let (encoder, pretrain_report) = pretrain(&train_corpus, encoder, &config.train)?;
    let (encoder, index, finetune_report) = finetune_two_stage(&train_corpus, encoder, &config.train)?;
    let metrics = evaluate(&test, &corpus.pois, &index, &encoder, &config.eval)?;
    Ok(ExperimentOutcome {
        encoder,
        index,
        pretrain: pretrain_report,
        finetune: finetune_report,
        metrics,
        train_users: train.len(),
        test_users: test.len(),
    })
}

/// Published reference rows, displayed for orientation only.
pub const REFERENCE_WITH_DESC: [f64; 6] = [0.0019, 0.0032, 0.0049, 0.0123, 0.0017, 0.545];
pub const REFERENCE_WITHOUT_DESC: [f64; 6] = [0.0, 0.0011, 0.0, 0.0048, 0.0009, 0.520];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_desc: MetricsReport,
    pub without_desc: MetricsReport,
    /// with/without per metric; `None` when the denominator is zero.
    pub ratios: BTreeMap<String, Option<f64>>,
    pub no_desc_both: bool,
}

impl AblationReport {
    pub fn new(with_desc: MetricsReport, without_desc: MetricsReport, no_desc_both: bool) -> Self {
        let ratios = with_desc
            .values()
            .iter()
            .zip(without_desc.values())
            .map(|((name, a), (_, b))| (name.to_string(), (b != 0.0).then(|| a / b)))
            .collect();
        Self {
            with_desc,
            without_desc,
            ratios,
            no_desc_both,
        }
    }

    pub fn to_table(&self) -> String {
        let with_label = if self.no_desc_both { "With (desc removed)" } else { "With" };
        let mut out = render_table(&[
            (with_label.to_string(), self.with_desc.row()),
            ("Without".to_string(), self.without_desc.row()),
        ]);
        out.push_str("\nRatio with/without\n");
        for (name, _) in self.with_desc.values() {
            match self.ratios.get(name).copied().flatten() {
                Some(r) => {
                    let _ = writeln!(out, "  {name:<10} {r:.3}");
                }
                None => {
                    let _ = writeln!(out, "  {name:<10} n/a");
                }
            }
        }
        out.push_str("\nPublished reference (full-scale, not reproduced here)\n");
        out.push_str(&render_table(&[
            ("With".to_string(), REFERENCE_WITH_DESC),
            ("Without".to_string(), REFERENCE_WITHOUT_DESC),
        ]));
        out
    }
}

pub struct AblationOutcome {
    pub report: AblationReport,
    pub with_desc: ExperimentOutcome,
    pub without_desc: ExperimentOutcome,
}

/// Trains and evaluates two models that differ only in `venue_desc`.
///
/// Both arms share the vocabulary built from the full corpus, so the
/// architecture and initial weights are identical. With `no_desc_both` the
/// description is removed from both arms.
pub fn run_ablation(corpus: &Corpus, config: &ExperimentConfig, no_desc_both: bool) -> Result<AblationOutcome> {
    let vocab = vocab_from_metas(corpus.pois.values(), config.text.max_vocab, config.text.min_freq)?;
    let stripped = corpus.without_attribute(AttributeKey::VenueDesc);
    let with_corpus = if no_desc_both { &stripped } else { corpus };
    log::info!("ablation arm: with description");
    let with_desc = run_experiment(with_corpus, &vocab, config)?;
    log::info!("ablation arm: without description");
    let without_desc = run_experiment(&stripped, &vocab, config)?;
    let report = AblationReport::new(with_desc.metrics.clone(), without_desc.metrics.clone(), no_desc_both);
    Ok(AblationOutcome {
        report,
        with_desc,
        without_desc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Visit;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn seqs(n: usize) -> Vec<UserSequence> {
        (0..n)
            .map(|u| UserSequence {
                user_id: format!("u{u:03}"),
                items: (0..3)
                    .map(|i| Visit {
                        venue_id: format!("v{i}"),
                        timestamp_utc: Utc.timestamp_opt(i as i64, 0).unwrap(),
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn metric_formulas() {
        let best = rank_metrics(1, 100);
        assert_eq!(best.ndcg_at_10, 1.0);
        assert_eq!(best.recall_at_10, 1.0);
        assert_eq!(best.mrr, 1.0);
        assert_eq!(best.auc, 1.0);
        let third = rank_metrics(3, 100);
        assert!((third.ndcg_at_10 - 0.5).abs() < 1e-15);
        assert!((third.mrr - 1.0 / 3.0).abs() < 1e-15);
        let eleventh = rank_metrics(11, 100);
        assert_eq!(eleventh.ndcg_at_10, 0.0);
        assert_eq!(eleventh.recall_at_10, 0.0);
        assert_eq!(eleventh.recall_at_50, 1.0);
        assert_eq!(rank_metrics(100, 100).auc, 0.0);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = seqs(10);
        let cfg = SplitConfig {
            train_fraction: 0.8,
            seed: 5,
        };
        let (train, test) = group_split(&s, &cfg).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let a: HashSet<_> = train.iter().map(|x| &x.user_id).collect();
        assert!(test.iter().all(|x| !a.contains(&x.user_id)));
        assert_eq!(group_split(&s, &cfg).unwrap(), (train, test));
        assert!(matches!(group_split(&seqs(1), &cfg), Err(Error::Split(_))));
    }

    #[test]
    fn baseline_expectations() {
        let r = random_baseline(20_000, 500, 1).unwrap();
        assert!((r.auc - 0.5).abs() < 0.01);
        assert!((r.recall_at_10 - 0.02).abs() < 0.005);
        assert!(random_baseline(10, 1, 1).is_err());
    }

    #[test]
    fn table_layout() {
        let report = MetricsReport::from_ranks(&[(1, 10), (3, 10)], 10);
        let t = report.to_table("With");
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("nDCG@10") && lines[0].contains("AUC"));
        assert_eq!(lines[0].len(), lines[1].len());
        let ab = AblationReport::new(report.clone(), MetricsReport::from_ranks(&[(5, 10), (9, 10)], 10), false);
        assert!(ab.to_table().contains("Ratio"));
        assert_eq!(ab.ratios["mrr"], Some((1.0 + 1.0 / 3.0) / (0.2 + 1.0 / 9.0)));
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_monotone(p in 2usize..500, a in 0usize..500, b in 0usize..500) {
            let (r1, r2) = (1 + a % p, 1 + b % p);
            let (better, worse) = (r1.min(r2), r1.max(r2));
            let m1 = rank_metrics(better, p);
            let m2 = rank_metrics(worse, p);
            let v1 = [m1.ndcg_at_10, m1.ndcg_at_50, m1.recall_at_10, m1.recall_at_50, m1.mrr, m1.auc];
            let v2 = [m2.ndcg_at_10, m2.ndcg_at_50, m2.recall_at_10, m2.recall_at_50, m2.mrr, m2.auc];
            for (x, y) in v1.iter().zip(v2) {
                prop_assert!((0.0..=1.0).contains(x));
                prop_assert!(*x >= y);
            }
            prop_assert!(m1.ndcg_at_10 <= m1.recall_at_10 && m1.recall_at_10 <= m1.recall_at_50);
        }

        #[test]
        fn split_partitions(n in 2usize..60, seed in any::<u64>(), f in 0.05f64..0.95) {
            let s = seqs(n);
            let (train, test) = group_split(&s, &SplitConfig { train_fraction: f, seed }).unwrap();
            prop_assert_eq!(train.len() + test.len(), n);
            let target = (f * n as f64).round() as i64;
            prop_assert!((train.len() as i64 - target).abs() <= 1);
            let a: HashSet<_> = train.iter().map(|x| &x.user_id).collect();
            prop_assert!(test.iter().all(|x| !a.contains(&x.user_id)));
        }
    }
}
