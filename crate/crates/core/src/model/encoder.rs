//! Parameters bundled with the vocabulary and token budgets needed to embed metadata.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{checkpoint, forward, ModelParams, Mode};
use crate::domain::PoiMeta;
use crate::error::{Error, Result};
use crate::textrep::{flatten_item, pack_sequence, ModelInput, TextConfig, TokenizedItem, Vocab};

pub const MODEL_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TEXT_FILE: &str = "text.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub text: TextConfig,
}

impl Encoder {
    pub fn new(params: ModelParams, vocab: Vocab, text: TextConfig) -> Result<Self> {
        if vocab.len() != params.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                params.config.vocab_size
            )));
        }
        if text.max_sequence_tokens > params.config.max_tokens {
            return Err(Error::Config(format!(
                "sequence budget {} exceeds model max_tokens {}",
                text.max_sequence_tokens, params.config.max_tokens
            )));
        }
        Ok(Self { params, vocab, text })
    }

    pub fn tokenize(&self, meta: &PoiMeta) -> Result<TokenizedItem> {
        flatten_item(meta, &self.vocab, self.text.per_attribute_cap)
    }

    /// Tokenizes every POI once, keyed by venue id.
    pub fn tokenize_all<'a>(
        &self,
        metas: impl IntoIterator<Item = &'a PoiMeta>,
    ) -> Result<BTreeMap<String, TokenizedItem>> {
        metas
            .into_iter()
            .map(|m| Ok((m.venue_id().to_string(), self.tokenize(m)?)))
            .collect()
    }

    /// Packs chronologically ordered items into one model input.
    pub fn pack(&self, items: &[&TokenizedItem]) -> Result<ModelInput> {
        let owned: Vec<TokenizedItem> = items.iter().map(|t| (*t).clone()).collect();
        Ok(pack_sequence(&owned, self.text.max_sequence_tokens)?.0)
    }

    pub fn embed(&self, input: &ModelInput) -> Result<Vec<f64>> {
        Ok(forward(&self.params, input, Mode::Eval)?.pooled)
    }

    /// Unit-norm embedding of a single POI.
    pub fn encode_item(&self, meta: &PoiMeta) -> Result<Vec<f64>> {
        let item = self.tokenize(meta)?;
        self.embed(&self.pack(&[&item])?)
    }

    /// Unit-norm embedding of a chronologically ordered visit sequence.
    pub fn encode_sequence(&self, metas: &[&PoiMeta]) -> Result<Vec<f64>> {
        let items = metas
            .iter()
            .map(|m| self.tokenize(m))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TokenizedItem> = items.iter().collect();
        self.embed(&self.pack(&refs)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.params, &dir.join(MODEL_FILE))?;
        let vocab_path = dir.join(VOCAB_FILE);
        let f = File::create(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        self.vocab
            .write(BufWriter::new(f))
            .map_err(|e| Error::io(&vocab_path, e))?;
        let text_path = dir.join(TEXT_FILE);
        std::fs::write(&text_path, serde_json::to_vec_pretty(&self.text)?)
            .map_err(|e| Error::io(&text_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = checkpoint::load(&dir.join(MODEL_FILE))?;
        let vocab_path = dir.join(VOCAB_FILE);
        let f = File::open(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab = Vocab::read(BufReader::new(f))?;
        let text_path = dir.join(TEXT_FILE);
        let text: TextConfig = serde_json::from_slice(
            &std::fs::read(&text_path).map_err(|e| Error::io(&text_path, e))?,
        )?;
        Self::new(params, vocab, text)
    }
}
