//! Dense `f64` tensors, reverse-mode differentiation, the AdamW optimizer
//! with a warmup/cosine schedule, a finite-difference oracle, and
//! checkpoint serialization.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, relative_error, FdReport, KINK_TOL, REL_ERROR_FLOOR};
pub use optim::{optimizer_step, LrSchedule, Moments, OptimState};
pub use params::{name_matches, Binding, Param, ParamSet};
pub use rng::SplitMix64;
pub use tape::{gelu_scalar, top_k_indices, topk_softmax_row, Gradients, NodeId, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("function is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Tensor of i.i.d. `N(0, std^2)` draws.
pub fn randn(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}
