//! Flat JSON run configuration. Absent keys take their defaults, unknown keys
//! are rejected, command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{DecodeConfig, PenaltyMode, Ranker, Strategy};
use crate::model::{ModelConfig, Objective};
use crate::synthesis::InsertionStrategy;
use crate::text::NUM_SPECIALS;
use crate::training::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
}

/// Name of a decoding strategy without its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Greedy,
    Topk,
    Topp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,

    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub lm_checkpoint: Option<PathBuf>,
    pub constraints: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub min_freq: usize,
    pub max_vocab: usize,

    pub insertion: InsertionStrategy,
    pub per_sentence: usize,
    pub replace_rate: f64,

    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub objective: Objective,
    pub causal_mask: bool,
    pub alpha: f64,
    pub init_std: f64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub clip_norm: f64,
    pub keep_all_checkpoints: bool,

    pub strategy: StrategyName,
    pub k: usize,
    pub p: f64,
    pub theta: f64,
    pub penalty: PenaltyMode,
    pub num_sequences: usize,
    pub max_steps: usize,
    pub ranker: Ranker,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let d = DecodeConfig::default();
        Self {
            seed: 0,
            threads: None,
            corpus: None,
            vocab: None,
            dataset: None,
            checkpoint: None,
            lm_checkpoint: None,
            constraints: None,
            references: None,
            generations: None,
            out: None,
            min_freq: 1,
            max_vocab: 50_000,
            insertion: InsertionStrategy::TfIdf,
            per_sentence: 10,
            replace_rate: 0.15,
            n_layer: m.n_layer,
            n_head: m.n_head,
            d_model: m.d_model,
            d_ff: m.d_ff,
            max_positions: m.max_positions,
            dropout: m.dropout,
            objective: m.objective,
            causal_mask: m.causal_mask,
            alpha: m.alpha,
            init_std: m.init_std,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            validation_fraction: t.validation_fraction,
            clip_norm: t.clip_norm,
            keep_all_checkpoints: t.keep_all_checkpoints,
            strategy: StrategyName::Greedy,
            k: 10,
            p: 0.9,
            theta: d.theta,
            penalty: d.penalty,
            num_sequences: d.num_sequences,
            max_steps: d.max_steps,
            ranker: d.ranker,
        }
    }
}

pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse { path: origin.into(), message: e.to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text, &path.display().to_string())
}

impl RunConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layer: self.n_layer,
            n_head: self.n_head,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_positions: self.max_positions,
            dropout: self.dropout,
            objective: self.objective,
            causal_mask: self.causal_mask,
            alpha: self.alpha,
            init_std: self.init_std,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
            clip_norm: self.clip_norm,
            keep_all_checkpoints: self.keep_all_checkpoints,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: match self.strategy {
                StrategyName::Greedy => Strategy::Greedy,
                StrategyName::Topk => Strategy::TopK(self.k),
                StrategyName::Topp => Strategy::TopP(self.p),
            },
            num_sequences: self.num_sequences,
            theta: self.theta,
            penalty: self.penalty,
            max_steps: self.max_steps,
            seed: self.seed,
            ranker: self.ranker,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ConfigError::Invalid("alpha must be > 0".into()));
        }
        self.model_config(NUM_SPECIALS + 1).validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.decode_config().validate().map_err(|e| invalid(&e))?;
        if self.min_freq == 0 {
            return Err(ConfigError::Invalid("min_freq must be >= 1".into()));
        }
        if self.max_vocab <= NUM_SPECIALS {
            return Err(ConfigError::Invalid(format!("max_vocab must be > {NUM_SPECIALS}")));
        }
        if self.per_sentence == 0 {
            return Err(ConfigError::Invalid("per_sentence must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.replace_rate) {
            return Err(ConfigError::Invalid("replace_rate must be in [0, 1)".into()));
        }
        if self.threads == Some(0) {
            return Err(ConfigError::Invalid("threads must be >= 1".into()));
        }
        Ok(())
    }
}
