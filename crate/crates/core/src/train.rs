//! Pretraining (masked tokens plus item-item contrastive) and two-stage finetuning.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Corpus, UserSequence, Visit, MIN_SEQUENCE_LEN};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::tensor::{gemm, Mat};
use crate::model::{backward, forward, mlm_loss, Encoder, ModelParams, Mode};
use crate::rank::{build_index, ItemIndex};
use crate::rng::{keyed_substream, substream, StageRng};
use crate::textrep::{ModelInput, TokenizedItem, FIELD_VALUE, MASK_ID, NUM_SPECIALS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub mask_prob: f64,
    pub temperature: f64,
    /// Weight of the contrastive term during pretraining.
    pub lambda: f64,
    pub seed: u64,
    pub patience: usize,
    pub validation_fraction: f64,
    /// (prefix, next item) pairs drawn per user per epoch; 0 uses every cut.
    pub pairs_per_user: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            pretrain_epochs: 3,
            stage1_epochs: 3,
            stage2_epochs: 2,
            learning_rate: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            mask_prob: 0.15,
            temperature: 0.05,
            lambda: 1.0,
            seed: 0,
            patience: 1,
            validation_fraction: 0.1,
            pairs_per_user: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return fail(format!("mask_prob {} outside (0, 1)", self.mask_prob));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return fail(format!(
                "validation_fraction {} outside (0, 0.5]",
                self.validation_fraction
            ));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return fail("grad_clip and weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Input after masking, with the positions and original ids to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedInput {
    pub input: ModelInput,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Selects each value token with probability `mask_prob`; selected tokens
/// become MASK (80%), a random regular token (10%) or stay unchanged (10%).
pub fn mask_tokens(input: &ModelInput, mask_prob: f64, vocab_size: usize, rng: &mut impl Rng) -> MaskedInput {
    let mut out = input.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for i in 0..input.len() {
        if input.field_type_ids[i] != FIELD_VALUE || input.token_ids[i] < NUM_SPECIALS as u32 {
            continue;
        }
        if !(rng.gen::<f64>() < mask_prob) {
            continue;
        }
        positions.push(i);
        targets.push(input.token_ids[i]);
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            out.token_ids[i] = MASK_ID;
        } else if roll < 0.9 && vocab_size > NUM_SPECIALS {
            out.token_ids[i] = rng.gen_range(NUM_SPECIALS as u32..vocab_size as u32);
        }
    }
    MaskedInput {
        input: out,
        positions,
        targets,
    }
}

/// Mean cross-entropy of `queries · keysᵀ / tau` against target columns.
///
/// Returns the loss and the gradients w.r.t. queries and keys.
pub fn info_nce(queries: &Mat, keys: &Mat, targets: &[usize], tau: f64) -> (f64, Mat, Mat) {
    let b = queries.rows;
    let mut logits = Mat::zeros(b, keys.rows);
    gemm(1.0 / tau, queries, false, keys, true, 0.0, &mut logits);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
        row[t] -= 1.0;
    }
    let scale = 1.0 / (tau * b as f64);
    let mut dq = Mat::zeros(b, queries.cols);
    gemm(scale, &logits, false, keys, false, 0.0, &mut dq);
    let mut dk = Mat::zeros(keys.rows, keys.cols);
    gemm(scale, &logits, true, queries, false, 0.0, &mut dk);
    (loss / b as f64, dq, dk)
}

fn stack(rows: &[Vec<f64>]) -> Result<Mat> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Input("embeddings differ in dimension".into()));
    }
    Ok(Mat::from_vec(rows.len(), d, rows.concat()))
}

/// In-batch contrastive loss and its gradients w.r.t. both sides.
pub fn contrastive_loss_grad(
    sequences: &[Vec<f64>],
    items: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Mat, Mat)> {
    let b = sequences.len();
    if b < 2 || items.len() != b {
        return Err(Error::Input(format!(
            "contrastive batch needs at least 2 matched pairs, got {b} and {}",
            items.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let q = stack(sequences)?;
    let k = stack(items)?;
    if q.cols != k.cols {
        return Err(Error::Input("embeddings differ in dimension".into()));
    }
    let targets: Vec<usize> = (0..b).collect();
    Ok(info_nce(&q, &k, &targets, tau))
}

/// In-batch contrastive loss: row `i`'s positive is item `i`, the rest are negatives.
pub fn contrastive_loss(sequences: &[Vec<f64>], items: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(contrastive_loss_grad(sequences, items, tau)?.0)
}

/// Adam with linear warmup, optional decoupled weight decay.
pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    warmup: usize,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Self::with_lr(params, cfg, cfg.learning_rate)
    }

    fn with_lr(params: &ModelParams, cfg: &TrainConfig, lr: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            warmup: cfg.warmup_steps,
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((self.t as f64) / self.warmup as f64).min(1.0)
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let lr = self.current_lr();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let g = grads.named_tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(g).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
    }
}

fn clip(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One (prefix, next item) training example before masking.
#[derive(Debug, Clone)]
pub struct PretrainExample {
    pub sequence: MaskedInput,
    pub item: ModelInput,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub mlm_loss: f64,
    pub contrastive_loss: Option<f64>,
    pub grads: ModelParams,
}

impl BatchOutput {
    pub fn total(&self, lambda: f64) -> f64 {
        self.mlm_loss + self.contrastive_loss.map_or(0.0, |c| lambda * c)
    }
}

fn dropout_rng(key: &Option<(u64, String)>, i: usize) -> Option<StageRng> {
    key.as_ref()
        .map(|(seed, tag)| keyed_substream(*seed, "dropout", &format!("{tag}/{i}")))
}

fn run_forward(params: &ModelParams, input: &ModelInput, rng: Option<&mut StageRng>) -> Result<crate::model::ForwardOutput> {
    match rng {
        Some(r) => forward(params, input, Mode::Train(r)),
        None => forward(params, input, Mode::Record),
    }
}

fn sum_grads(params: &ModelParams, parts: Vec<ModelParams>) -> ModelParams {
    let mut total = params.zeros_like();
    for g in &parts {
        total.add_assign(g);
    }
    total
}

/// Loss and gradients of `L_mlm + λ·L_contrastive` for one batch.
///
/// The masked-token loss is averaged over every masked position in the batch,
/// the contrastive loss over pairs. `dropout_key` seeds per-example dropout;
/// `None` disables dropout. Per-example gradients are summed in batch order.
pub fn pretrain_objective(
    params: &ModelParams,
    batch: &[PretrainExample],
    tau: f64,
    lambda: f64,
    dropout_key: Option<(u64, String)>,
) -> Result<BatchOutput> {
    let use_con = lambda > 0.0;
    let fwd = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = dropout_rng(&dropout_key, i);
            let seq = run_forward(params, &ex.sequence.input, rng.as_mut())?;
            let item = if use_con {
                Some(run_forward(params, &ex.item, rng.as_mut())?)
            } else {
                None
            };
            Ok((seq, item))
        })
        .collect::<Result<Vec<_>>>()?;

    let (con_loss, dseq, ditem) = if use_con {
        let seqs: Vec<Vec<f64>> = fwd.iter().map(|(s, _)| s.pooled.clone()).collect();
        let items: Vec<Vec<f64>> = fwd
            .iter()
            .map(|(_, it)| it.as_ref().expect("item forward").pooled.clone())
            .collect();
        let (l, dq, dk) = contrastive_loss_grad(&seqs, &items, tau)?;
        (Some(l), Some(dq), Some(dk))
    } else {
        (None, None, None)
    };
    let masked: usize = batch.iter().map(|e| e.sequence.positions.len()).sum();
    let weight = if masked == 0 { 0.0 } else { 1.0 / masked as f64 };

    let parts = fwd
        .into_par_iter()
        .zip(batch.par_iter())
        .enumerate()
        .map(|(i, ((seq, item), ex))| {
            let mut g = params.zeros_like();
            let (l, mut dh) = mlm_loss(
                params,
                &seq.hidden,
                &ex.sequence.positions,
                &ex.sequence.targets,
                weight,
                Some(&mut g),
            );
            if let Some(dq) = &dseq {
                let d: Vec<f64> = dq.row(i).iter().map(|v| v * lambda).collect();
                let extra = seq.pooled_to_hidden_grad(&d);
                for (a, b) in dh.data.iter_mut().zip(&extra.data) {
                    *a += b;
                }
            }
            backward(params, seq.cache.as_ref().expect("recorded"), &dh, &mut g);
            if let (Some(dk), Some(item)) = (&ditem, &item) {
                let d: Vec<f64> = dk.row(i).iter().map(|v| v * lambda).collect();
                let dh_item = item.pooled_to_hidden_grad(&d);
                backward(params, item.cache.as_ref().expect("recorded"), &dh_item, &mut g);
            }
            (g, l)
        })
        .collect::<Vec<_>>();
    let mlm: f64 = parts.iter().map(|(_, l)| l).sum();
    let grads = sum_grads(params, parts.into_iter().map(|(g, _)| g).collect());
    Ok(BatchOutput {
        mlm_loss: mlm,
        contrastive_loss: con_loss,
        grads,
    })
}

/// Loss and gradients of the full-index softmax used in finetuning.
///
/// `index` rows are fixed item embeddings; only the sequence encoder receives gradient.
pub fn index_objective(
    params: &ModelParams,
    inputs: &[ModelInput],
    targets: &[usize],
    index: &Mat,
    tau: f64,
    dropout_key: Option<(u64, String)>,
) -> Result<(f64, ModelParams)> {
    let b = inputs.len();
    if b == 0 {
        return Err(Error::Input("empty finetuning batch".into()));
    }
    let parts = inputs
        .par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(i, (input, &t))| {
            let mut rng = dropout_rng(&dropout_key, i);
            let out = run_forward(params, input, rng.as_mut())?;
            let q = Mat::from_vec(1, out.pooled.len(), out.pooled.clone());
            let (l, dq, _) = info_nce(&q, index, &[t], tau);
            let d: Vec<f64> = dq.data.iter().map(|v| v / b as f64).collect();
            let mut g = params.zeros_like();
            backward(params, out.cache.as_ref().expect("recorded"), &out.pooled_to_hidden_grad(&d), &mut g);
            Ok((g, l / b as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = parts.iter().map(|(_, l)| l).sum();
    Ok((loss, sum_grads(params, parts.into_iter().map(|(g, _)| g).collect())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub steps: usize,
    pub mlm_loss: Option<f64>,
    pub contrastive_loss: Option<f64>,
    pub total_loss: f64,
    pub validation_ndcg_at_10: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected snapshot; `None` when the starting
    /// parameters were never beaten.
    pub best_epoch: Option<usize>,
    pub initial_validation_ndcg_at_10: Option<f64>,
    pub best_validation_ndcg_at_10: Option<f64>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// One JSON line per epoch followed by a summary line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        let summary = serde_json::json!({
            "summary": {
                "epochs": self.epochs.len(),
                "best_epoch": self.best_epoch,
                "initial_validation_ndcg_at_10": self.initial_validation_ndcg_at_10,
                "best_validation_ndcg_at_10": self.best_validation_ndcg_at_10,
                "wall_time_secs": self.wall_time_secs,
            }
        });
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Training users and held-out validation users (the last fraction, at least one).
pub fn split_validation(sequences: &[UserSequence], fraction: f64) -> Result<(&[UserSequence], &[UserSequence])> {
    let n = sequences.len();
    let n_val = ((fraction * n as f64).ceil() as usize).max(1);
    if n < 2 || n_val >= n {
        return Err(Error::Config(format!(
            "cannot hold out a validation split from {n} training users"
        )));
    }
    Ok(sequences.split_at(n - n_val))
}

fn check_sequences(sequences: &[UserSequence]) -> Result<()> {
    if let Some(s) = sequences.iter().find(|s| s.len() < MIN_SEQUENCE_LEN) {
        return Err(Error::Input(format!(
            "sequence of user {} has {} items, need at least {MIN_SEQUENCE_LEN}",
            s.user_id,
            s.len()
        )));
    }
    Ok(())
}

/// `(user, cut)` pairs: prefix `items[..cut]`, target `items[cut]`.
fn sample_pairs(sequences: &[UserSequence], per_user: usize, rng: &mut StageRng) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (u, s) in sequences.iter().enumerate() {
        if per_user == 0 {
            pairs.extend((1..s.len()).map(|c| (u, c)));
        } else {
            pairs.extend((0..per_user).map(|_| (u, rng.gen_range(1..s.len()))));
        }
    }
    pairs.shuffle(rng);
    pairs
}

struct Tokens<'a> {
    encoder: &'a Encoder,
    items: BTreeMap<String, TokenizedItem>,
}

impl<'a> Tokens<'a> {
    fn new(encoder: &'a Encoder, corpus: &Corpus) -> Result<Self> {
        Ok(Self {
            encoder,
            items: encoder.tokenize_all(corpus.pois.values())?,
        })
    }

    fn get(&self, venue: &str) -> Result<&TokenizedItem> {
        self.items
            .get(venue)
            .ok_or_else(|| Error::Input(format!("venue {venue} has no metadata")))
    }

    /// Packs the newest visits that can fit the budget.
    fn prefix(&self, visits: &[Visit]) -> Result<ModelInput> {
        let budget = self.encoder.text.max_sequence_tokens;
        let mut refs = Vec::new();
        let mut used = 1;
        for v in visits.iter().rev() {
            let t = self.get(&v.venue_id)?;
            refs.push(t);
            used += t.len();
            if used > budget {
                break;
            }
        }
        refs.reverse();
        self.encoder.pack(&refs)
    }

    fn item(&self, venue: &str) -> Result<ModelInput> {
        self.encoder.pack(&[self.get(venue)?])
    }
}

fn check_finite(loss: f64, grads: &ModelParams, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training {
            epoch,
            step,
            reason: format!("loss is {loss}"),
        });
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    Ok(())
}

/// Pretrains on (prefix, next item) pairs from the non-validation users.
pub fn pretrain(corpus: &Corpus, mut encoder: Encoder, cfg: &TrainConfig) -> Result<(Encoder, TrainReport)> {
    cfg.validate()?;
    check_sequences(&corpus.sequences)?;
    let start = Instant::now();
    let (train, _) = split_validation(&corpus.sequences, cfg.validation_fraction)?;
    let tokens = Tokens::new(&encoder, corpus)?;
    let vocab_size = encoder.params.config.vocab_size;
    let mut params = encoder.params.clone();
    let mut adam = Adam::new(&params, cfg);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.pretrain_epochs {
        let mut rng = substream(cfg.seed, &format!("pretrain/epoch{epoch}"));
        let pairs = sample_pairs(train, cfg.pairs_per_user, &mut rng);
        let (mut mlm_sum, mut con_sum, mut steps) = (0.0, 0.0, 0);
        for chunk in pairs.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch = chunk
                .iter()
                .map(|&(u, cut)| {
                    let items = &train[u].items;
                    let seq = tokens.prefix(&items[..cut])?;
                    let mut mrng = keyed_substream(cfg.seed, "mask", &format!("{epoch}/{step}/{u}/{cut}"));
                    Ok(PretrainExample {
                        sequence: mask_tokens(&seq, cfg.mask_prob, vocab_size, &mut mrng),
                        item: tokens.item(&items[cut].venue_id)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let key = Some((cfg.seed, format!("pretrain/{epoch}/{step}")));
            let mut out = pretrain_objective(&params, &batch, cfg.temperature, cfg.lambda, key)?;
            check_finite(out.total(cfg.lambda), &out.grads, epoch, step)?;
            clip(&mut out.grads, cfg.grad_clip);
            adam.step(&mut params, &out.grads);
            mlm_sum += out.mlm_loss;
            con_sum += out.contrastive_loss.unwrap_or(0.0);
            steps += 1;
            step += 1;
        }
        let n = steps.max(1) as f64;
        let con = (cfg.lambda > 0.0).then_some(con_sum / n);
        let record = EpochRecord {
            phase: "pretrain".into(),
            epoch,
            steps,
            mlm_loss: Some(mlm_sum / n),
            contrastive_loss: con,
            total_loss: mlm_sum / n + con.map_or(0.0, |c| cfg.lambda * c),
            validation_ndcg_at_10: None,
        };
        match con {
            Some(c) => log::info!("pretrain epoch {epoch}: mlm {:.4} contrastive {c:.4}", mlm_sum / n),
            None => log::info!("pretrain epoch {epoch}: mlm {:.4}", mlm_sum / n),
        }
        report.epochs.push(record);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    encoder.params = params;
    Ok((encoder, report))
}

fn index_matrix(index: &ItemIndex) -> Mat {
    Mat::from_vec(index.len(), index.dim(), index.matrix().to_vec())
}

fn validation_score(
    corpus: &Corpus,
    val: &[UserSequence],
    index: &ItemIndex,
    encoder: &Encoder,
) -> Result<f64> {
    Ok(evaluate(val, &corpus.pois, index, encoder, &EvalOptions::default())?.ndcg_at_10)
}

struct Finetuner<'a> {
    corpus: &'a Corpus,
    train: &'a [UserSequence],
    val: &'a [UserSequence],
    tokens: Tokens<'a>,
    cfg: &'a TrainConfig,
    step: usize,
}

impl Finetuner<'_> {
    /// One pass over sampled pairs against a fixed index.
    fn epoch(
        &mut self,
        phase: &str,
        epoch: usize,
        params: &mut ModelParams,
        adam: &mut Adam,
        index: &ItemIndex,
    ) -> Result<(usize, f64)> {
        let cfg = self.cfg;
        let matrix = index_matrix(index);
        let mut rng = substream(cfg.seed, &format!("{phase}/epoch{epoch}"));
        let pairs = sample_pairs(self.train, cfg.pairs_per_user, &mut rng);
        let (mut loss_sum, mut steps) = (0.0, 0);
        for chunk in pairs.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &(u, cut) in chunk {
                let items = &self.train[u].items;
                inputs.push(self.tokens.prefix(&items[..cut])?);
                let venue = &items[cut].venue_id;
                targets.push(index.position(venue).ok_or_else(|| {
                    Error::Index(format!("training target {venue} missing from the index"))
                })?);
            }
            let key = Some((cfg.seed, format!("{phase}/{epoch}/{}", self.step)));
            let (loss, mut grads) =
                index_objective(params, &inputs, &targets, &matrix, cfg.temperature, key)?;
            check_finite(loss, &grads, epoch, self.step)?;
            clip(&mut grads, cfg.grad_clip);
            adam.step(params, &grads);
            loss_sum += loss;
            steps += 1;
            self.step += 1;
        }
        Ok((steps, loss_sum / steps.max(1) as f64))
    }

    fn score(&self, encoder: &Encoder, index: &ItemIndex) -> Result<f64> {
        validation_score(self.corpus, self.val, index, encoder)
    }
}

fn record(phase: &str, epoch: usize, steps: usize, loss: f64, val: f64) -> EpochRecord {
    EpochRecord {
        phase: phase.into(),
        epoch,
        steps,
        mlm_loss: None,
        contrastive_loss: Some(loss),
        total_loss: loss,
        validation_ndcg_at_10: Some(val),
    }
}

/// Two-stage finetuning.
///
/// Stage 1 re-encodes the item index at the start of every epoch and trains
/// the sequence encoder against it, keeping the best snapshot by validation
/// nDCG@10 (the starting parameters count as a candidate). Stage 2 freezes the
/// index of that snapshot and keeps training the encoder alone.
pub fn finetune_two_stage(
    corpus: &Corpus,
    encoder: Encoder,
    cfg: &TrainConfig,
) -> Result<(Encoder, ItemIndex, TrainReport)> {
    cfg.validate()?;
    check_sequences(&corpus.sequences)?;
    let start = Instant::now();
    let (train, val) = split_validation(&corpus.sequences, cfg.validation_fraction)?;
    let pois: Vec<_> = corpus.pois.values().collect();
    let tokens_encoder = encoder.clone();
    let mut ft = Finetuner {
        corpus,
        train,
        val,
        tokens: Tokens::new(&tokens_encoder, corpus)?,
        cfg,
        step: 0,
    };
    let mut report = TrainReport::default();

    let mut current = encoder;
    let mut index = build_index(pois.iter().copied(), &current)?;
    let initial = ft.score(&current, &index)?;
    report.initial_validation_ndcg_at_10 = Some(initial);
    let mut best = (current.params.clone(), index.clone(), initial);
    let mut adam = Adam::new(&current.params, cfg);

    let mut since_best = 0;
    for epoch in 0..cfg.stage1_epochs {
        let (steps, loss) = ft.epoch("stage1", epoch, &mut current.params, &mut adam, &index)?;
        index = build_index(pois.iter().copied(), &current)?;
        let score = ft.score(&current, &index)?;
        log::info!("stage1 epoch {epoch}: loss {loss:.4} val ndcg@10 {score:.4}");
        report.epochs.push(record("stage1", epoch, steps, loss, score));
        if score > best.2 {
            best = (current.params.clone(), index.clone(), score);
            report.best_epoch = Some(report.epochs.len() - 1);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }

    let frozen = best.1.clone();
    current.params = best.0.clone();
    let mut best_params = best.0;
    let mut best_score = best.2;
    let mut since_best = 0;
    for epoch in 0..cfg.stage2_epochs {
        let (steps, loss) = ft.epoch("stage2", epoch, &mut current.params, &mut adam, &frozen)?;
        let score = ft.score(&current, &frozen)?;
        log::info!("stage2 epoch {epoch}: loss {loss:.4} val ndcg@10 {score:.4}");
        report.epochs.push(record("stage2", epoch, steps, loss, score));
        if score > best_score {
            best_params = current.params.clone();
            best_score = score;
            report.best_epoch = Some(report.epochs.len() - 1);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    report.best_validation_ndcg_at_10 = Some(best_score);
    report.wall_time_secs = start.elapsed().as_secs_f64();
    current.params = best_params;
    Ok((current, frozen, report))
}

/// One parameter compared between backprop and central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares analytic gradients of [`pretrain_objective`] (without dropout)
/// with central differences of step `h` on `count` parameters drawn at random
/// from those with a non-negligible analytic gradient.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(
    params: &ModelParams,
    batch: &[PretrainExample],
    tau: f64,
    lambda: f64,
    count: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradCheckEntry>> {
    let analytic = pretrain_objective(params, batch, tau, lambda, None)?;
    let mut candidates = Vec::new();
    for (t, (name, g)) in analytic.grads.named_tensors().into_iter().enumerate() {
        for (o, v) in g.iter().enumerate() {
            if v.abs() > 1e-7 {
                candidates.push((t, name.clone(), o, *v));
            }
        }
    }
    let mut rng = substream(seed, "gradient_check");
    let chosen: Vec<_> = candidates.choose_multiple(&mut rng, count).cloned().collect();
    let loss_at = |p: &ModelParams| -> Result<f64> {
        Ok(pretrain_objective(p, batch, tau, lambda, None)?.total(lambda))
    };
    chosen
        .into_iter()
        .map(|(t, tensor, offset, a)| {
            let mut plus = params.clone();
            plus.tensors_mut()[t][offset] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t][offset] -= h;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            Ok(GradCheckEntry {
                tensor,
                offset,
                analytic: a,
                numeric,
                rel_error,
            })
        })
        .collect()
}
