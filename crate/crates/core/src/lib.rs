//! Desk-scale sparse mixture-of-experts multimodal transformer.
//!
//! A modality classifier, trained on a small labeled subset and then frozen,
//! routes every token to the top-k of E domain experts; an always-active
//! meta expert sits on the shortcut path. Training follows three phases:
//! projector alignment on captions, instruction tuning (plus router fitting),
//! and MoE tuning of experts initialized from the dense FFN.

pub mod backbone;
pub mod eval;
pub mod moe;
pub mod numkernel;
pub mod pipeline;
pub mod synthdata;

#[cfg(test)]
pub(crate) mod testutil;
