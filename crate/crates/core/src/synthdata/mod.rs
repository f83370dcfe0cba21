//! Deterministic four-modality image/text corpus whose answers follow from
//! the pixels.
//!
//! Each 16x16 image carries a modality texture (period-4 bands in one of
//! four orientations), an organ-specific background level and one or two
//! lesion blobs drawn at exactly 1.0. Captions and question answers are
//! computed from these attributes and re-checked against the pixels by an
//! independent oracle before any record is written.

mod attributes;
mod corpus;
mod probe;
mod record;
mod templates;

pub use attributes::{derive_attributes, render, Attributes, Modality, Organ, Quadrant, Shape, IMAGE_SIZE};
pub use corpus::{
    build_vocabulary, generate_corpus, load_corpus, verify_record, write_corpus, Corpus, CorpusSizes, CountTable,
    DatasetManifest, FORMAT_VERSION, MAX_VOCAB,
};
pub use probe::{mean_patch_vector, separability_certificate, LinearProbe};
pub use record::{load_records, parse_records, write_records, Record, Split};
pub use templates::{all_questions, caption, vocabulary_words, Question, TaskKind, ALIGN_INSTRUCTION};

use crate::backbone::BackboneError;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("vocabulary of {size} words exceeds the limit {max}")]
    VocabularyOverflow { size: usize, max: usize },
    #[error("split `{split}` of size {size} cannot hold every modality")]
    UnsatisfiableBalance { split: String, size: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown task kind `{value}`")]
    UnknownTask { line: usize, value: String },
    #[error("answer oracle: {0}")]
    Oracle(String),
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}
