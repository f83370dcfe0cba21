//! Answer-quality metrics (recall, exact match, BLEU, closed and
//! classification accuracy), the silhouette score, and report emission.

mod evaluate;
mod metrics;
mod silhouette;

pub use evaluate::{evaluate, score, MetricReport, SampleRow};
pub use metrics::{
    bleu, classification_correct, closed_accuracy, closed_correct, exact_match, modified_precision, normalize_words,
    recall,
};
pub use silhouette::silhouette;

use crate::backbone::BackboneError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("reference has no words")]
    EmptyReference,
    #[error("reference `{0}` is not a yes/no answer")]
    NotClosed(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}
