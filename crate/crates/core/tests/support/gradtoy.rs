//! A tiny model and a random masked batch for finite-difference checks.

#![allow(dead_code)]

use mmpoi::model::{ModelConfig, ModelParams};
use mmpoi::rng::substream;
use mmpoi::textrep::{ModelInput, FIELD_KEY, FIELD_VALUE};
use mmpoi::train::{mask_tokens, PretrainExample};
use rand::Rng;

pub fn toy(tie: bool) -> ModelParams {
    ModelParams::init(ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_tokens: 16,
        max_items: 4,
        vocab_size: 24,
        dropout_rate: 0.1,
        tie_mlm_head: tie,
        seed: 11,
    })
    .unwrap()
}

pub fn random_input(rng: &mut impl Rng, items: usize) -> ModelInput {
    let mut x = ModelInput {
        token_ids: vec![1],
        field_type_ids: vec![FIELD_KEY],
        item_position_ids: vec![0],
        position_ids: Vec::new(),
    };
    for pos in (1..=items).rev() {
        x.token_ids.push(rng.gen_range(4..9));
        x.field_type_ids.push(FIELD_KEY);
        x.item_position_ids.push(pos as u16);
        for _ in 0..rng.gen_range(1..4) {
            x.token_ids.push(rng.gen_range(9..24));
            x.field_type_ids.push(FIELD_VALUE);
            x.item_position_ids.push(pos as u16);
        }
    }
    x.position_ids = (0..x.token_ids.len() as u16).collect();
    x
}

pub fn batch(seed: u64) -> Vec<PretrainExample> {
    let mut rng = substream(seed, "batch");
    (0..3)
        .map(|_| {
            let items = rng.gen_range(1..3);
            let seq = random_input(&mut rng, items);
            PretrainExample {
                sequence: mask_tokens(&seq, 0.5, 24, &mut rng),
                item: random_input(&mut rng, 1),
            }
        })
        .collect()
}
