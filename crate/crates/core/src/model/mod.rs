//! A small pre-norm transformer with tape-based gradients, Adam, activation
//! tracing and a binary checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod tape;
pub mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use tape::{Scalar, SeqLayout, Tape, Var};
pub use transformer::{
    batch_loss_and_grads, example_loss, forward, forward_batch, grad_step, init, ForwardTrace,
    LayerParams, Parameters,
};

use crate::corpus::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Causal => "causal",
            AttentionMode::Bidirectional => "bidirectional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub attention: AttentionMode,
    /// Share the token embedding with the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// 4 layers, width 256, 4 heads, MLP width 1024.
    pub fn standard(vocab_size: usize, max_seq_len: usize, attention: AttentionMode) -> Self {
        Self {
            n_layers: 4,
            d_model: 256,
            n_heads: 4,
            d_mlp: 1024,
            vocab_size,
            max_seq_len,
            attention,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} at position {position} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { token: TokenId, position: usize, vocab_size: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("trace position {position} is outside a sequence of length {len}")]
    TracePosition { position: usize, len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("example uses {found} attention but the model is {expected}")]
    AttentionMismatch { expected: &'static str, found: &'static str },
    #[error("non-finite loss {loss}")]
    NonFiniteLoss { loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
