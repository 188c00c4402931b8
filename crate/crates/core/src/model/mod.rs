//! Encoder-decoder transformer with a three-way edit classifier on top of the
//! encoder, plus a decoder-only language model used for candidate ranking.
//!
//! The forward and backward passes are written out by hand; everything is
//! generic over [`Scalar`] so the same code runs at 32-bit for training and
//! at 64-bit for finite-difference checks.

mod blocks;
pub mod lm;
pub mod ops;
mod seq2seq;
pub mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::NUM_SPECIALS;

pub use lm::LanguageModel;
pub use seq2seq::{BatchTrace, DecoderOutput, EncodedSequence, EncoderOutput, LossBreakdown, PaddedBatch, Seq2Seq};
pub use tensor::{ParamSet, Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence length {len} exceeds max_positions {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("forward trace already consumed")]
    TraceConsumed,
    #[error("empty batch")]
    EmptyBatch,
    #[error("sequence must hold at least {0} tokens")]
    TooShort(usize),
}

/// Decoder training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Reconstruct every target position.
    Lm,
    /// Only positions that fill a mask contribute to the loss.
    Mlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub objective: Objective,
    pub causal_mask: bool,
    /// Weight of the decoder loss in the total loss.
    pub alpha: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layer: 2,
            n_head: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 0,
            max_positions: 64,
            dropout: 0.1,
            objective: Objective::Lm,
            causal_mask: true,
            alpha: 1.0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layer == 0 || self.n_head == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return bad(format!("d_model {} not divisible by n_head {}", self.d_model, self.n_head));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return bad(format!("vocab_size must exceed {NUM_SPECIALS}"));
        }
        if self.max_positions < 3 {
            return bad("max_positions must be >= 3".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be > 0".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be >= 0".into());
        }
        Ok(())
    }
}
