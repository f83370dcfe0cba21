//! The miniature multimodal causal language model.
//!
//! Images pass through a frozen linear patch embedding and a two-layer
//! projector; the resulting tokens are prepended to the text token
//! embeddings and processed by a pre-norm transformer with learned
//! positional embeddings. Selected FFN slots may be replaced by expert banks
//! (see [`crate::moe`]).

mod config;
mod generate;
mod layers;
mod model;
mod sequence;
mod vision;
mod vocab;

pub use config::{TransformerConfig, VisionConfig};
pub use generate::{argmax_token, greedy_generate, Decoder};
pub use layers::Net;
pub use model::{nll_loss, nll_value, ForwardOutput, Model, ModelConfig, Stage};
pub use sequence::{Sequence, SequenceBatch};
pub use vision::{encode_image, patchify, project, Projector, SyntheticImage, VisionEncoder};
pub use vocab::{Vocabulary, BOS, EOS, IMAGE, NUM_RESERVED, PAD, UNK};

use crate::numkernel::KernelError;

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("io: {0}")]
    Io(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("sequence of length {len} exceeds the maximum {max}")]
    Overlong { len: usize, max: usize },
    #[error("prompt of length {prompt} plus {max_new} new tokens exceeds context {limit}")]
    ContextOverflow { prompt: usize, max_new: usize, limit: usize },
    #[error("sequence has no response positions")]
    NoResponse,
    #[error("routing: {0}")]
    Routing(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}
