//! Toy transformers (translator and classifier), synthetic corpora, training
//! with per-epoch checkpoints, decoding and evaluation.

mod checkpoint;
mod config;
mod corpus;
mod decode;
mod train;
mod transformer;

use thiserror::Error;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, Task};
pub use corpus::{synth_corpus, total_variation, unigram_distribution, Corpus, CorpusSpec, Example, Split, TaskSpec};
pub use decode::{argmax, classify, classify_batch, evaluate, generate, generate_batch, EVAL_BATCH};
pub use train::{log_score, train, EpochLog, OptimizerSpec};
pub use transformer::{
    build_model, sinusoidal_positions, Batch, DecoderLayer, EncoderLayer, FeedForward, Forward, Gates, LayerNormParams,
    LossReduction, TransformerModel, Weights,
};

use crate::attention::AttentionError;
use crate::stats::{Metric, StatsError};
use crate::tensor::TensorError;

/// Padding token.
pub const PAD: usize = 0;
/// Beginning of sequence; doubles as the CLS token of classifier inputs.
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Separator between the two sequences of a classification input.
pub const SEP: usize = 3;
/// First content-symbol id.
pub const FIRST_CONTENT: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("`{op}` is not available for a {task:?} model")]
    WrongTask { op: &'static str, task: Task },
    #[error("metric {metric} does not apply to a {task:?} model")]
    MetricMismatch { metric: Metric, task: Task },
    #[error("sequence length {len} exceeds the model's max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("vocabulary too small: {0}")]
    VocabularyTooSmall(String),
    #[error("no data")]
    EmptyData,
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("training diverged at epoch {epoch}, batch {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
