//! Encoder–decoder transformer whose encoder blocks read the fact memory
//! through a learned scalar gate.

mod checkpoint;
mod config;
mod generate;
mod model;

use std::io;
use std::path::PathBuf;

use crate::grammarian::GrammarianError;
use crate::librarian::LibrarianError;
use crate::numerics::NumericsError;

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_FORMAT_VERSION};
pub use config::{count_parameters, ModelConfig, ParamBreakdown, PositionKind, REPORTED_PARAMS_M};
pub use generate::{AnswerRecord, Consulted, DecodeMode, GenerateOptions};
pub use model::{sinusoidal_positions, EncoderOut, Model, LN_EPS};

#[derive(Debug, thiserror::Error)]
pub enum ReasonerError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_positions = {max}")]
    TooLong { len: usize, max: usize },
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Librarian(#[from] LibrarianError),
    #[error(transparent)]
    Grammarian(#[from] GrammarianError),
}
