//! Sparse expert layers routed by a frozen modality classifier.
//!
//! A [`MoeSpec`] turns selected FFN slots into E domain experts plus an
//! optional always-on meta expert. The router scores each token from the
//! layer-0 input embeddings; one decision is reused at every MoE layer of
//! the forward pass. [`MoeProbe`] counts expert invocations and records the
//! decisions for tracing.

mod gate;
mod layer;
mod lora;
mod router;
mod trace;

pub use gate::{gate, GateDecision};
pub use layer::{
    dense_ffn_prefix, expand_from_dense, expert_prefix, meta_prefix, moe_block, moe_forward, ExpandOptions,
    ExpertCall, MoeProbe, MoeSpec, RouterMode, RoutingRecord,
};
pub use lora::{apply_lora, effective_weight, LoraAdapter};
pub use router::{
    argmax, router_forward, router_logits, train_router, Router, RouterConfig, RouterExample, RouterLogits,
    RouterTrainConfig, RouterTrainReport,
};
pub use trace::{trace_activations, ActivationTrace};

use crate::backbone::BackboneError;
use crate::numkernel::KernelError;

#[derive(Debug, thiserror::Error)]
pub enum MoeError {
    #[error("top-k {k} out of range for {experts} experts")]
    TopK { k: usize, experts: usize },
    #[error("router emits {router} classes but there are {experts} experts")]
    RouterMismatch { router: usize, experts: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid MoE configuration: {0}")]
    Config(String),
    #[error("no weight matches LoRA targets `{0}`")]
    NoTargets(String),
    #[error("LoRA rank {rank} invalid for `{target}` (allowed 1..={max})")]
    Rank { rank: usize, target: String, max: usize },
    #[error("record {0} has no modality label")]
    Unlabeled(usize),
    #[error("label {0} outside the modality set")]
    BadLabel(usize),
    #[error("router training subset is empty")]
    EmptySubset,
    #[error("model has no MoE layers")]
    NotMoe,
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}
