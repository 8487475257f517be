//! Small decoder-only transformer that writes step-formatted reasoning and
//! exposes its internal states (lookback attention, top-K log-probs, entropy).

mod checkpoint;
mod decoder;
mod model;
mod sampling;
mod train;
pub mod vocab;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, LmCheckpoint, LmMeta, LM_FORMAT_VERSION, LM_MAGIC,
};
pub use decoder::{Decoder, DecoderStep};
pub use model::LanguageModel;
pub use sampling::{
    filter_distribution, generate, rescore, Continuation, Generation, InternalTrace,
    SamplingParams, StopReason, TokenRecord, TRACE_LOOKBACK, TRACE_TOP_K,
};
pub use train::{mean_nll, train_lm, LmTrainHyper, LmTrainReport};
pub use vocab::Vocabulary;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("sequence of length {len} exceeds context {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("prompt of length {len} leaves no room in context {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("invalid sampling parameters: {0}")]
    BadSampling(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    pub ffn_mult: usize,
    pub dropout: f32,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocabulary::new().len(),
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            context: 512,
            ffn_mult: 4,
            dropout: 0.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: &str| Err(LmError::BadConfig(m.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.context < 2 || self.ffn_mult == 0 {
            return bad("context must be >= 2 and ffn_mult >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_pairs(&self) -> usize {
        self.n_layers * self.n_heads
    }
}
