//! Small fixtures shared by unit tests.

use crate::backbone::{Model, ModelConfig, Sequence, SyntheticImage, TransformerConfig, VisionConfig, NUM_RESERVED};
use crate::numkernel::SplitMix64;

/// d_model 8, two layers, 4x4 images in 2x2 patches, vocabulary of 12.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        transformer: TransformerConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 16,
            vocab_size: 12,
            max_seq_len: 14,
            moe_layer_indices: vec![],
        },
        vision: VisionConfig {
            image_size: 4,
            patch_size: 2,
            d_vision: 4,
        },
    }
}

pub fn tiny_model(seed: u64) -> Model {
    Model::init(tiny_config(), seed).unwrap()
}

/// Random image plus a random prompt and target that fit `tiny_config`.
pub fn random_sequence(rng: &mut SplitMix64) -> Sequence {
    let img = SyntheticImage::new(4, 4, (0..16).map(|_| rng.next_f64()).collect()).unwrap();
    let word = |rng: &mut SplitMix64| (NUM_RESERVED as usize + rng.below(12 - NUM_RESERVED as usize)) as u32;
    let prompt: Vec<u32> = (0..1 + rng.below(3)).map(|_| word(rng)).collect();
    let target: Vec<u32> = (0..1 + rng.below(3)).map(|_| word(rng)).collect();
    let modality = rng.below(4);
    Sequence::build(Some(img), 4, &prompt, &target, Some(modality))
}

/// A corpus with eight records per split and a small model sized for it.
pub fn tiny_corpus_model(seed: u64) -> (crate::synthdata::Corpus, Model) {
    let sizes = "align=8,instruct=8,tune=8,test=8".parse().unwrap();
    let corpus = crate::synthdata::generate_corpus(seed, sizes).unwrap();
    let mut cfg = tiny_config();
    cfg.transformer.vocab_size = corpus.vocab.size();
    cfg.transformer.max_seq_len = 40;
    cfg.vision = VisionConfig {
        image_size: 16,
        patch_size: 8,
        d_vision: 4,
    };
    let model = Model::init(cfg, seed).unwrap();
    (corpus, model)
}
