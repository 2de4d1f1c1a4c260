//! Forward pass, MLM head and the matching hand-written backward pass.

use rand::Rng;

use super::tensor::{gemm, gemm_view, l2_norm, Mat, View};
use super::{LayerNorm, Linear, ModelParams, FIELD_TYPES};
use crate::error::{Error, Result};
use crate::rng::StageRng;
use crate::textrep::ModelInput;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub enum Mode<'a> {
    /// No dropout, nothing recorded.
    Eval,
    /// No dropout; activations recorded for [`backward`].
    Record,
    /// Dropout drawn from the given stream; activations recorded.
    Train(&'a mut StageRng),
}

pub struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
    attn_mask: Option<Vec<f64>>,
    ln2: LnCache,
    h2: Mat,
    ff_pre: Mat,
    ff_act: Mat,
    ff_mask: Option<Vec<f64>>,
}

pub struct ForwardCache {
    input: ModelInput,
    emb_ln: LnCache,
    emb_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

pub struct ForwardOutput {
    /// Final per-token states, `L × d_model`.
    pub hidden: Mat,
    /// Unit-norm CLS state.
    pub pooled: Vec<f64>,
    /// Norm of the CLS state before normalisation.
    pub pooled_norm: f64,
    pub cache: Option<ForwardCache>,
}

impl ForwardOutput {
    /// Maps a gradient w.r.t. `pooled` to a gradient w.r.t. `hidden`.
    pub fn pooled_to_hidden_grad(&self, d_pooled: &[f64]) -> Mat {
        let mut dh = Mat::zeros(self.hidden.rows, self.hidden.cols);
        let p = &self.pooled;
        let proj: f64 = p.iter().zip(d_pooled).map(|(a, b)| a * b).sum();
        for ((o, g), pi) in dh.row_mut(0).iter_mut().zip(d_pooled).zip(p) {
            *o = (g - pi * proj) / self.pooled_norm;
        }
        dh
    }
}

fn layer_norm(x: &Mat, ln: &LayerNorm) -> (Mat, LnCache) {
    let d = x.cols;
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(r);
        for (o, v) in xr.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = y.row_mut(r);
        for j in 0..d {
            yr[j] = xhat.data[r * d + j] * ln.gamma[j] + ln.beta[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Mat,
    cache: &LnCache,
    ln: &LayerNorm,
    grad: &mut LayerNorm,
) -> Mat {
    let d = dy.cols;
    let n = d as f64;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            grad.gamma[j] += dyr[j] * xh[j];
            grad.beta[j] += dyr[j];
            dxhat[j] = dyr[j] * ln.gamma[j];
        }
        let sum: f64 = dxhat.iter().sum();
        let sum_xh: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is / n * (n * dxhat[j] - sum - xh[j] * sum_xh);
        }
    }
    dx
}

fn linear(x: &Mat, lin: &Linear) -> Mat {
    let mut y = Mat::zeros(x.rows, lin.w.cols);
    gemm(1.0, x, false, &lin.w, false, 0.0, &mut y);
    y.add_row_vector(&lin.b);
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn linear_backward(x: &Mat, dy: &Mat, lin: &Linear, grad: &mut Linear) -> Mat {
    gemm(1.0, x, true, dy, false, 1.0, &mut grad.w);
    dy.col_sums_into(&mut grad.b);
    let mut dx = Mat::zeros(x.rows, lin.w.rows);
    gemm(1.0, dy, false, &lin.w, true, 0.0, &mut dx);
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(m: &mut Mat) {
    for row in m.data.chunks_exact_mut(m.cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn dropout_mask(len: usize, rate: f64, mode: &mut Mode<'_>) -> Option<Vec<f64>> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            Some(
                (0..len)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect(),
            )
        }
        _ => None,
    }
}

fn apply_mask(m: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (v, k) in m.data.iter_mut().zip(mask) {
            *v *= k;
        }
    }
}

fn validate_input(params: &ModelParams, input: &ModelInput) -> Result<()> {
    let c = &params.config;
    let n = input.token_ids.len();
    if n == 0 {
        return Err(Error::Input("empty model input".into()));
    }
    if n > c.max_tokens {
        return Err(Error::Input(format!(
            "input of {n} tokens exceeds max_tokens {}",
            c.max_tokens
        )));
    }
    if input.field_type_ids.len() != n
        || input.item_position_ids.len() != n
        || input.position_ids.len() != n
    {
        return Err(Error::Input("input channels differ in length".into()));
    }
    if let Some(t) = input.token_ids.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::Input(format!(
            "token id {t} outside vocabulary of {}",
            c.vocab_size
        )));
    }
    if input.field_type_ids.iter().any(|&f| f as usize >= FIELD_TYPES) {
        return Err(Error::Input("field type id out of range".into()));
    }
    if input.position_ids.iter().any(|&p| p as usize >= c.max_tokens) {
        return Err(Error::Input("position id out of range".into()));
    }
    Ok(())
}

fn item_row(params: &ModelParams, id: u16) -> usize {
    (id as usize).min(params.config.max_items - 1)
}

/// Runs the encoder on one packed input.
pub fn forward(params: &ModelParams, input: &ModelInput, mut mode: Mode<'_>) -> Result<ForwardOutput> {
    validate_input(params, input)?;
    let cfg = &params.config;
    let d = cfg.d_model;
    let len = input.token_ids.len();
    let record = !matches!(mode, Mode::Eval);
    let rate = cfg.dropout_rate;

    let mut emb = Mat::zeros(len, d);
    for t in 0..len {
        let row = emb.row_mut(t);
        let parts = [
            params.token_emb.row(input.token_ids[t] as usize),
            params.position_emb.row(input.position_ids[t] as usize),
            params.field_emb.row(input.field_type_ids[t] as usize),
            params
                .item_position_emb
                .row(item_row(params, input.item_position_ids[t])),
        ];
        for part in parts {
            for (o, v) in row.iter_mut().zip(part) {
                *o += v;
            }
        }
    }
    let (mut x, emb_ln) = layer_norm(&emb, &params.emb_ln);
    let emb_mask = dropout_mask(len * d, rate, &mut mode);
    apply_mask(&mut x, &emb_mask);

    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let (h1, ln1) = layer_norm(&x, &layer.ln1);
        let q = linear(&h1, &layer.query);
        let k = linear(&h1, &layer.key);
        let v = linear(&h1, &layer.value);
        let mut ctx = Mat::zeros(len, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut s = Mat::zeros(len, len);
            let sv = View::whole(&s);
            gemm_view(
                scale,
                &q.data,
                View::cols_of(&q, h * dh, dh),
                false,
                &k.data,
                View::cols_of(&k, h * dh, dh),
                true,
                0.0,
                &mut s.data,
                sv,
            );
            softmax_rows(&mut s);
            let cv = View::cols_of(&ctx, h * dh, dh);
            gemm_view(
                1.0,
                &s.data,
                View::whole(&s),
                false,
                &v.data,
                View::cols_of(&v, h * dh, dh),
                false,
                0.0,
                &mut ctx.data,
                cv,
            );
            probs.push(s);
        }
        let mut attn = linear(&ctx, &layer.out);
        let attn_mask = dropout_mask(len * d, rate, &mut mode);
        apply_mask(&mut attn, &attn_mask);
        let mut x_mid = x.clone();
        for (a, b) in x_mid.data.iter_mut().zip(&attn.data) {
            *a += b;
        }

        let (h2, ln2) = layer_norm(&x_mid, &layer.ln2);
        let ff_pre = linear(&h2, &layer.ff1);
        let mut ff_act = ff_pre.clone();
        ff_act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut ff = linear(&ff_act, &layer.ff2);
        let ff_mask = dropout_mask(len * d, rate, &mut mode);
        apply_mask(&mut ff, &ff_mask);
        let mut x_out = x_mid;
        for (a, b) in x_out.data.iter_mut().zip(&ff.data) {
            *a += b;
        }

        if record {
            layer_caches.push(LayerCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                attn_mask,
                ln2,
                h2,
                ff_pre,
                ff_act,
                ff_mask,
            });
        }
        x = x_out;
    }

    let (hidden, final_ln) = layer_norm(&x, &params.final_ln);
    let pooled_norm = l2_norm(hidden.row(0)).max(1e-12);
    let pooled = hidden.row(0).iter().map(|v| v / pooled_norm).collect();
    let cache = record.then(|| ForwardCache {
        input: input.clone(),
        emb_ln,
        emb_mask,
        layers: layer_caches,
        final_ln,
    });
    Ok(ForwardOutput {
        hidden,
        pooled,
        pooled_norm,
        cache,
    })
}

/// Backpropagates `d_hidden` through a recorded forward pass, accumulating into `grads`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, d_hidden: &Mat, grads: &mut ModelParams) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dx = layer_norm_backward(d_hidden, &cache.final_ln, &params.final_ln, &mut grads.final_ln);

    for (li, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        let len = lc.h1.rows;

        // x_out = x_mid + dropout(ff2(gelu(ff1(ln2(x_mid)))))
        let mut dff = dx.clone();
        apply_mask(&mut dff, &lc.ff_mask);
        let mut d_act = linear_backward(&lc.ff_act, &dff, &layer.ff2, &mut g.ff2);
        for (da, pre) in d_act.data.iter_mut().zip(&lc.ff_pre.data) {
            *da *= gelu_grad(*pre);
        }
        let dh2 = linear_backward(&lc.h2, &d_act, &layer.ff1, &mut g.ff1);
        let dln2 = layer_norm_backward(&dh2, &lc.ln2, &layer.ln2, &mut g.ln2);
        let mut dx_mid = dx;
        for (a, b) in dx_mid.data.iter_mut().zip(&dln2.data) {
            *a += b;
        }

        // x_mid = x_in + dropout(out(attention(ln1(x_in))))
        let mut da = dx_mid.clone();
        apply_mask(&mut da, &lc.attn_mask);
        let dctx = linear_backward(&lc.ctx, &da, &layer.out, &mut g.out);
        let mut dq = Mat::zeros(len, d);
        let mut dk = Mat::zeros(len, d);
        let mut dv = Mat::zeros(len, d);
        let mut dp = Mat::zeros(len, len);
        for h in 0..heads {
            let p = &lc.probs[h];
            let dpv = View::whole(&dp);
            gemm_view(
                1.0,
                &dctx.data,
                View::cols_of(&dctx, h * dh, dh),
                false,
                &lc.v.data,
                View::cols_of(&lc.v, h * dh, dh),
                true,
                0.0,
                &mut dp.data,
                dpv,
            );
            let dvv = View::cols_of(&dv, h * dh, dh);
            gemm_view(
                1.0,
                &p.data,
                View::whole(p),
                true,
                &dctx.data,
                View::cols_of(&dctx, h * dh, dh),
                false,
                0.0,
                &mut dv.data,
                dvv,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
            for r in 0..len {
                let pr = p.row(r);
                let dr = dp.row_mut(r);
                let s: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (o, pv) in dr.iter_mut().zip(pr) {
                    *o = pv * (*o - s) * scale;
                }
            }
            let dqv = View::cols_of(&dq, h * dh, dh);
            gemm_view(
                1.0,
                &dp.data,
                View::whole(&dp),
                false,
                &lc.k.data,
                View::cols_of(&lc.k, h * dh, dh),
                false,
                0.0,
                &mut dq.data,
                dqv,
            );
            let dkv = View::cols_of(&dk, h * dh, dh);
            gemm_view(
                1.0,
                &dp.data,
                View::whole(&dp),
                true,
                &lc.q.data,
                View::cols_of(&lc.q, h * dh, dh),
                false,
                0.0,
                &mut dk.data,
                dkv,
            );
        }
        let mut dh1 = linear_backward(&lc.h1, &dq, &layer.query, &mut g.query);
        let dh1k = linear_backward(&lc.h1, &dk, &layer.key, &mut g.key);
        let dh1v = linear_backward(&lc.h1, &dv, &layer.value, &mut g.value);
        for ((a, b), c) in dh1.data.iter_mut().zip(&dh1k.data).zip(&dh1v.data) {
            *a += b + c;
        }
        let dln1 = layer_norm_backward(&dh1, &lc.ln1, &layer.ln1, &mut g.ln1);
        for (a, b) in dx_mid.data.iter_mut().zip(&dln1.data) {
            *a += b;
        }
        dx = dx_mid;
    }

    apply_mask(&mut dx, &cache.emb_mask);
    let demb = layer_norm_backward(&dx, &cache.emb_ln, &params.emb_ln, &mut grads.emb_ln);
    let input = &cache.input;
    for t in 0..demb.rows {
        let src = demb.row(t);
        let targets = [
            (&mut grads.token_emb, input.token_ids[t] as usize),
            (&mut grads.position_emb, input.position_ids[t] as usize),
            (&mut grads.field_emb, input.field_type_ids[t] as usize),
        ];
        for (table, row) in targets {
            for (o, v) in table.row_mut(row).iter_mut().zip(src) {
                *o += v;
            }
        }
        let ir = item_row(params, input.item_position_ids[t]);
        for (o, v) in grads.item_position_emb.row_mut(ir).iter_mut().zip(src) {
            *o += v;
        }
    }
}

struct HeadCache {
    t1: Mat,
    ln: LnCache,
    normed: Mat,
}

fn head_forward(params: &ModelParams, h: &Mat) -> (Mat, HeadCache) {
    let t1 = linear(h, &params.mlm.transform);
    let mut act = t1.clone();
    act.data.iter_mut().for_each(|v| *v = gelu(*v));
    let (normed, ln) = layer_norm(&act, &params.mlm.ln);
    let decoder = params.mlm.decoder.as_ref().unwrap_or(&params.token_emb);
    let mut logits = Mat::zeros(h.rows, decoder.rows);
    gemm(1.0, &normed, false, decoder, true, 0.0, &mut logits);
    logits.add_row_vector(&params.mlm.bias);
    (logits, HeadCache { t1, ln, normed })
}

/// Vocabulary logits for every row of `hidden`.
pub fn mlm_logits(params: &ModelParams, hidden: &Mat) -> Mat {
    head_forward(params, hidden).0
}

/// Cross-entropy of `targets` at `positions`, scaled by `weight`.
///
/// Returns the scaled loss and, when `grads` is given, accumulates head
/// gradients there and returns the gradient w.r.t. `hidden`.
pub fn mlm_loss(
    params: &ModelParams,
    hidden: &Mat,
    positions: &[usize],
    targets: &[u32],
    weight: f64,
    grads: Option<&mut ModelParams>,
) -> (f64, Mat) {
    let d = hidden.cols;
    let mut d_hidden = Mat::zeros(hidden.rows, d);
    if positions.is_empty() {
        return (0.0, d_hidden);
    }
    let mut rows = Mat::zeros(positions.len(), d);
    for (i, &p) in positions.iter().enumerate() {
        rows.row_mut(i).copy_from_slice(hidden.row(p));
    }
    let (mut logits, hc) = head_forward(params, &rows);
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t as usize];
        // row becomes d loss / d logits
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * weight;
        }
        row[t as usize] -= weight;
    }
    let Some(g) = grads else {
        return (loss * weight, d_hidden);
    };
    let dlogits = logits;
    dlogits.col_sums_into(&mut g.mlm.bias);
    let decoder = params.mlm.decoder.as_ref().unwrap_or(&params.token_emb);
    {
        let g_dec = match g.mlm.decoder.as_mut() {
            Some(m) => m,
            None => &mut g.token_emb,
        };
        gemm(1.0, &dlogits, true, &hc.normed, false, 1.0, g_dec);
    }
    let mut dnormed = Mat::zeros(rows.rows, d);
    gemm(1.0, &dlogits, false, decoder, false, 0.0, &mut dnormed);
    let mut dact = layer_norm_backward(&dnormed, &hc.ln, &params.mlm.ln, &mut g.mlm.ln);
    for (da, pre) in dact.data.iter_mut().zip(&hc.t1.data) {
        *da *= gelu_grad(*pre);
    }
    let drows = linear_backward(&rows, &dact, &params.mlm.transform, &mut g.mlm.transform);
    for (i, &p) in positions.iter().enumerate() {
        for (o, v) in d_hidden.row_mut(p).iter_mut().zip(drows.row(i)) {
            *o += v;
        }
    }
    (loss * weight, d_hidden)
}
