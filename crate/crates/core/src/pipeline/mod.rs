//! The training curriculum: text-only pretraining stand-in, projector
//! alignment, instruction tuning, router fitting, and MoE tuning (or dense
//! FFN tuning for comparison), each with an explicit freezing contract.

mod config;
mod count;
mod manifest;
mod phases;
mod train;

pub use config::{PhaseConfig, PhaseId};
pub use count::{count_parameters, published_comparison, ArchitectureRow, ParamCount};
pub use manifest::{config_hash, RunManifest};
pub use phases::{
    router_dataset, run_phase1, run_phase2, run_phase3, run_pretrain, run_router_phase, run_sft, RouterPhaseConfig,
    RouterPhaseReport,
};
pub use train::{batch_indices, epoch_order, train_phase, LossRow, TrainReport};

use crate::backbone::BackboneError;
use crate::eval::EvalError;
use crate::moe::MoeError;
use crate::numkernel::KernelError;
use crate::synthdata::SynthError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("alignment may only train the projector, but `{0}` is trainable")]
    TrainableOutsideProjector(String),
    #[error("the vision encoder must stay frozen, but `{0}` is trainable")]
    VisionNotFrozen(String),
    #[error("the router must be frozen during MoE tuning, but `{0}` is trainable")]
    RouterNotFrozen(String),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
