//! The text-sequence encoder.
//!
//! Token, position, field-type and item-position embeddings are summed and
//! normalised, passed through a pre-norm bidirectional transformer stack, and
//! the final CLS state (L2-normalised) is the sequence embedding. An MLM head
//! predicts masked tokens from the per-token states. All gradients are
//! computed by hand in [`forward`].

pub mod checkpoint;
pub mod encoder;
pub mod forward;
pub mod tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
pub use encoder::Encoder;
pub use forward::{backward, forward, mlm_logits, mlm_loss, ForwardCache, ForwardOutput, Mode};
pub use tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_tokens: usize,
    /// Rows of the item-position table; larger positions share the last row.
    pub max_items: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    /// Reuse the token embedding table as the MLM output projection.
    pub tie_mlm_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_tokens: 512,
            max_items: 64,
            vocab_size: 0,
            dropout_rate: 0.1,
            tie_mlm_head: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_tokens", self.max_tokens),
            ("max_items", self.max_items),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

/// `y = x · w + b`, with `w` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Linear {
    fn new(inp: usize, out: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            w: uniform(inp, out, scale, rng),
            b: vec![0.0; out],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead {
    pub transform: Linear,
    pub ln: LayerNorm,
    /// `vocab × d_model`; `None` when tied to the token embeddings.
    pub decoder: Option<Mat>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_emb: Mat,
    pub position_emb: Mat,
    pub field_emb: Mat,
    pub item_position_emb: Mat,
    pub emb_ln: LayerNorm,
    pub layers: Vec<Layer>,
    pub final_ln: LayerNorm,
    pub mlm: MlmHead,
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
}

pub const FIELD_TYPES: usize = 2;

impl ModelParams {
    /// Uniform weights in `±1/√d_model`, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, "model_init");
        let d = config.d_model;
        let s = 1.0 / (d as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                ln1: LayerNorm::new(d),
                query: Linear::new(d, d, s, &mut rng),
                key: Linear::new(d, d, s, &mut rng),
                value: Linear::new(d, d, s, &mut rng),
                out: Linear::new(d, d, s, &mut rng),
                ln2: LayerNorm::new(d),
                ff1: Linear::new(d, config.d_ff, s, &mut rng),
                ff2: Linear::new(config.d_ff, d, s, &mut rng),
            })
            .collect();
        let token_emb = uniform(config.vocab_size, d, s, &mut rng);
        let position_emb = uniform(config.max_tokens, d, s, &mut rng);
        let field_emb = uniform(FIELD_TYPES, d, s, &mut rng);
        let item_position_emb = uniform(config.max_items, d, s, &mut rng);
        let transform = Linear::new(d, d, s, &mut rng);
        let decoder = (!config.tie_mlm_head).then(|| uniform(config.vocab_size, d, s, &mut rng));
        Ok(Self {
            config,
            token_emb,
            position_emb,
            field_emb,
            item_position_emb,
            emb_ln: LayerNorm::new(d),
            layers,
            final_ln: LayerNorm::new(d),
            mlm: MlmHead {
                transform,
                ln: LayerNorm::new(d),
                decoder,
                bias: vec![0.0; config.vocab_size],
            },
        })
    }

    /// Same shapes, all zeros. Used as the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(0.0));
        z
    }

    /// Visits every tensor in declaration order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64])) {
        f("token_emb", &self.token_emb.data);
        f("position_emb", &self.position_emb.data);
        f("field_emb", &self.field_emb.data);
        f("item_position_emb", &self.item_position_emb.data);
        f("emb_ln.gamma", &self.emb_ln.gamma);
        f("emb_ln.beta", &self.emb_ln.beta);
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            f(&p("ln1.gamma"), &l.ln1.gamma);
            f(&p("ln1.beta"), &l.ln1.beta);
            f(&p("query.w"), &l.query.w.data);
            f(&p("query.b"), &l.query.b);
            f(&p("key.w"), &l.key.w.data);
            f(&p("key.b"), &l.key.b);
            f(&p("value.w"), &l.value.w.data);
            f(&p("value.b"), &l.value.b);
            f(&p("out.w"), &l.out.w.data);
            f(&p("out.b"), &l.out.b);
            f(&p("ln2.gamma"), &l.ln2.gamma);
            f(&p("ln2.beta"), &l.ln2.beta);
            f(&p("ff1.w"), &l.ff1.w.data);
            f(&p("ff1.b"), &l.ff1.b);
            f(&p("ff2.w"), &l.ff2.w.data);
            f(&p("ff2.b"), &l.ff2.b);
        }
        f("final_ln.gamma", &self.final_ln.gamma);
        f("final_ln.beta", &self.final_ln.beta);
        f("mlm.transform.w", &self.mlm.transform.w.data);
        f("mlm.transform.b", &self.mlm.transform.b);
        f("mlm.ln.gamma", &self.mlm.ln.gamma);
        f("mlm.ln.beta", &self.mlm.ln.beta);
        if let Some(dec) = &self.mlm.decoder {
            f("mlm.decoder", &dec.data);
        }
        f("mlm.bias", &self.mlm.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("token_emb", &mut self.token_emb.data);
        f("position_emb", &mut self.position_emb.data);
        f("field_emb", &mut self.field_emb.data);
        f("item_position_emb", &mut self.item_position_emb.data);
        f("emb_ln.gamma", &mut self.emb_ln.gamma);
        f("emb_ln.beta", &mut self.emb_ln.beta);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            f(&p("ln1.gamma"), &mut l.ln1.gamma);
            f(&p("ln1.beta"), &mut l.ln1.beta);
            f(&p("query.w"), &mut l.query.w.data);
            f(&p("query.b"), &mut l.query.b);
            f(&p("key.w"), &mut l.key.w.data);
            f(&p("key.b"), &mut l.key.b);
            f(&p("value.w"), &mut l.value.w.data);
            f(&p("value.b"), &mut l.value.b);
            f(&p("out.w"), &mut l.out.w.data);
            f(&p("out.b"), &mut l.out.b);
            f(&p("ln2.gamma"), &mut l.ln2.gamma);
            f(&p("ln2.beta"), &mut l.ln2.beta);
            f(&p("ff1.w"), &mut l.ff1.w.data);
            f(&p("ff1.b"), &mut l.ff1.b);
            f(&p("ff2.w"), &mut l.ff2.w.data);
            f(&p("ff2.b"), &mut l.ff2.b);
        }
        f("final_ln.gamma", &mut self.final_ln.gamma);
        f("final_ln.beta", &mut self.final_ln.beta);
        f("mlm.transform.w", &mut self.mlm.transform.w.data);
        f("mlm.transform.b", &mut self.mlm.transform.b);
        f("mlm.ln.gamma", &mut self.mlm.ln.gamma);
        f("mlm.ln.beta", &mut self.mlm.ln.beta);
        if let Some(dec) = &mut self.mlm.decoder {
            f("mlm.decoder", &mut dec.data);
        }
        f("mlm.bias", &mut self.mlm.bias);
    }

    /// Tensors as `(name, values)` in declaration order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<*mut [f64]> = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t as *mut [f64]));
        // SAFETY: every pointer refers to a distinct tensor owned by `self`,
        // and the returned borrows are tied to the unique borrow of `self`.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Parameters of the MLM head alone.
    pub fn mlm_head_params(&self) -> usize {
        let d = self.config.d_model;
        let head = d * d + d + 2 * d + self.mlm.bias.len();
        head + self.mlm.decoder.as_ref().map_or(0, |m| m.data.len())
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let src = other.named_tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|x| *x *= factor));
    }

    /// First non-finite tensor, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.visit(&mut |n, t| {
            if bad.is_none() && t.iter().any(|x| !x.is_finite()) {
                bad = Some(n.to_string());
            }
        });
        bad
    }

    pub fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, t| s += t.iter().map(|x| x * x).sum::<f64>());
        s
    }
}
