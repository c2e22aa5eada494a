//! Word-level tokenization and a small transformer encoder-decoder.
//!
//! The same architecture serves as the semantic LM (linearized triples to
//! text) and the semantic parser (text to linearized triples). Besides the
//! usual teacher-forced path, the encoder accepts a matrix of token
//! distributions in place of ids; that is the path a straight-through
//! estimate of the generated text flows through.

mod checkpoint;
mod model;
mod train;
mod vocab;

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use model::{Architecture, Bound, IncrementalDecoder, Role, Seq2SeqModel, Source};
pub use train::{train_supervised, TrainConfig, TrainLog};
pub use vocab::{detokenize, tokenize, TokenSequence, Vocab, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum Seq2SeqError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what} length {len} outside [{min}, {max}]")]
    Length {
        what: &'static str,
        len: usize,
        min: usize,
        max: usize,
    },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("source distribution row {row} sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f32 },
    #[error("expected a {expected} model, got {found}")]
    RoleMismatch { expected: Role, found: Role },
    #[error("model is frozen")]
    Frozen,
    #[error("non-finite loss at step {step}: {source}")]
    NonFinite {
        step: usize,
        #[source]
        source: TensorError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
