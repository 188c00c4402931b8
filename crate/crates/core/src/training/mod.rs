//! Optimization, the training loops and the checkpoint file format.

pub mod checkpoint;
pub mod optim;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::synthesis::SynthError;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelKind};
pub use optim::{adamw_step, clip_grad_norm, OptimState};
pub use trainer::{evaluate_loss, fit, train, train_instances, train_lm, EpochRecord, TrainReport, Trainable};
pub use trainer::{best_epoch, init_seed, split_validation};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl PartialEq for TrainError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Keep every epoch checkpoint instead of only the best and the latest.
    pub keep_all_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            validation_fraction: 0.1,
            clip_norm: 1.0,
            keep_all_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be > 0");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return bad("clip_norm must be >= 0");
        }
        Ok(())
    }
}
