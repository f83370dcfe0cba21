use serde::{Deserialize, Serialize};

use super::BackboneError;

/// Transformer shape. `moe_layer_indices` is empty for a dense model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub moe_layer_indices: Vec<usize>,
}

impl TransformerConfig {
    /// d_model 64, 4 layers, 4 heads, FFN 128.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_hidden: 128,
            vocab_size,
            max_seq_len: 48,
            moe_layer_indices: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(BackboneError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_hidden == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(BackboneError::Config("zero-sized dimension".into()));
        }
        if let Some(&bad) = self.moe_layer_indices.iter().find(|&&l| l >= self.n_layers) {
            return Err(BackboneError::Config(format!("MoE layer {bad} out of range")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Stub vision encoder shape: square single-channel images cut into square
/// patches, each linearly embedded into `d_vision`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_vision: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            d_vision: 32,
        }
    }
}

impl VisionConfig {
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}
