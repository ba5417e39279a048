//! Trainable autoregressive language models with exact scoring, sampling,
//! hand-derived gradients, and checkpointing.
//!
//! Two reference implementations are provided: a tabular bigram (one logit row
//! per predecessor token, convex under cross-entropy) and a k-gram MLP that
//! concatenates the embeddings of the last `k` tokens through one tanh hidden
//! layer. All arithmetic is 64-bit and log-space; scoring is a pure function
//! of `(params, input)` so models can be shared read-only across threads.

mod checkpoint;
mod model;
mod optim;
mod sample;
mod tensor;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use model::{
    ModelHyper, ModelKind, ModelParams, NamedTensors, T_B1, T_B2, T_EMBED, T_LOGITS, T_W1, T_W2,
};
pub use optim::{apply_update, LrSchedule, OptimizerState, UpdateRule};
pub use sample::{DecodeKind, DecodingPolicy};
pub use tensor::Tensor;
pub use vocab::{TokenId, TokenSequence, Vocabulary, BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, SEP_TOKEN};

use thiserror::Error;

/// Errors from model construction, scoring, and updates.
#[derive(Debug, Error)]
pub enum LmError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidTokenId { id: usize, size: usize },
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("context is empty (callers must prepend BOS)")]
    EmptyContext,
    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("non-finite gradient in tensor {0:?}")]
    NonFiniteGradient(String),
    #[error("invalid decoding policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Log-likelihood of `completion` after `prompt`, with the crate's BOS/EOS
/// conventions applied: the prompt is prefixed with BOS and the completion is
/// terminated with EOS before scoring.
pub fn score_completion(
    params: &ModelParams,
    vocab: &Vocabulary,
    prompt: &str,
    completion: &str,
) -> Result<f64, LmError> {
    let prompt_ids = vocab.encode_prompt(prompt)?;
    let target_ids = vocab.encode_completion(completion)?;
    params.sequence_log_likelihood(&prompt_ids, &target_ids)
}

/// Number of tokens scored by [`score_completion`] for `completion`
/// (including the terminating EOS).
pub fn completion_token_count(vocab: &Vocabulary, completion: &str) -> Result<usize, LmError> {
    Ok(vocab.encode_completion(completion)?.len())
}
