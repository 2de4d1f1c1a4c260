//! Language-based sequential point-of-interest recommendation.
//!
//! Venues are described by ordered attribute dictionaries (category, geospatial
//! key, name, food-picture description, place types). Each dictionary is
//! flattened into a token sequence, a user's check-in history becomes the
//! concatenation of its venues' token sequences, and a small transformer encoder
//! maps both histories and single venues into a shared unit-norm embedding
//! space. Recommendation is cosine ranking of all venues against the history
//! embedding.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`domain`]: shared data types and per-user sequence construction.
//! * [`ingest`]: check-in, postal table and geocoder parsing plus the dataset filters.
//! * [`geospatial`]: hexagonal cell ids, municipality lookup, geospatial keys.
//! * [`foodtext`]: image-class mapping, picture allocation and description assembly.
//! * [`textrep`]: tokenizer, vocabulary, item flattening and sequence packing.
//! * [`model`]: the encoder, its exact gradients and checkpoint format.
//! * [`train`]: masking, losses, optimizer, pretraining and two-stage finetuning.
//! * [`rank`]: the item index and cosine ranking.
//! * [`eval`]: grouped split, leave-last-out metrics and the description ablation.
//! * [`synth`]: planted-signal corpora.
//! * [`pipeline`]: end-to-end corpus preparation from raw files.

pub mod domain;
pub mod error;
pub mod eval;
pub mod foodtext;
pub mod geospatial;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod rank;
pub mod rng;
pub mod synth;
pub mod textrep;
pub mod train;

pub use error::{Error, Result};
