//! Glue between checkpoints, vocabularies and the refinement engine, shared by
//! the command line and the C interface.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{self, DecodeConfig, GenerationResult, InferenceError};
use crate::metrics::MetricError;
use crate::model::{LanguageModel, ModelError, Seq2Seq};
use crate::synthesis::SynthError;
use crate::text::{self, TextError, TokenId, Vocab};
use crate::training::{load_checkpoint, ModelKind, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("keyword {0:?} is not in the vocabulary")]
    UnknownKeyword(String),
    #[error("{path}: expected a {expected} checkpoint")]
    WrongKind { path: String, expected: &'static str },
    #[error("checkpoint carries no vocabulary; pass --vocab")]
    MissingVocab,
    #[error("vocabulary size {vocab} does not match model vocab_size {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn checkpoint_vocab(tokens: Option<Vec<String>>, fallback: Option<&Vocab>) -> Result<Vocab, PipelineError> {
    match (fallback, tokens) {
        (Some(v), _) => Ok(v.clone()),
        (None, Some(t)) => Ok(Vocab::from_tokens(t)?),
        (None, None) => Err(PipelineError::MissingVocab),
    }
}

/// Loads an edit-model checkpoint; `vocab` overrides the embedded one.
pub fn load_cbart(path: &Path, vocab: Option<&Vocab>) -> Result<(Seq2Seq<f32>, Vocab), PipelineError> {
    let (params, meta) = load_checkpoint(path)?;
    if meta.kind != ModelKind::Cbart {
        return Err(PipelineError::WrongKind { path: path.display().to_string(), expected: "cbart" });
    }
    let vocab = checkpoint_vocab(meta.vocab, vocab)?;
    if vocab.size() != meta.model.vocab_size {
        return Err(PipelineError::VocabMismatch { vocab: vocab.size(), model: meta.model.vocab_size });
    }
    Ok((Seq2Seq::from_params(meta.model, params)?, vocab))
}

pub fn load_lm(path: &Path) -> Result<LanguageModel<f32>, PipelineError> {
    let (params, meta) = load_checkpoint(path)?;
    if meta.kind != ModelKind::Lm {
        return Err(PipelineError::WrongKind { path: path.display().to_string(), expected: "lm" });
    }
    Ok(LanguageModel::from_params(meta.model, params)?)
}

/// One line of the generation output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub keywords: Vec<String>,
    pub output: String,
    pub steps: usize,
    pub decoder_passes: usize,
    pub nll: Option<f64>,
    pub elapsed_ms: f64,
}

pub struct Generator {
    pub model: Seq2Seq<f32>,
    pub lm: Option<LanguageModel<f32>>,
    pub vocab: Vocab,
}

impl Generator {
    pub fn load(checkpoint: &Path, lm: Option<&Path>, vocab: Option<&Vocab>) -> Result<Self, PipelineError> {
        let (model, vocab) = load_cbart(checkpoint, vocab)?;
        let lm = lm.map(load_lm).transpose()?;
        if let Some(lm) = &lm {
            if lm.config().vocab_size != vocab.size() {
                return Err(PipelineError::VocabMismatch { vocab: vocab.size(), model: lm.config().vocab_size });
            }
        }
        Ok(Self { model, lm, vocab })
    }

    pub fn keyword_ids<S: AsRef<str>>(&self, keywords: &[S]) -> Result<Vec<TokenId>, PipelineError> {
        keywords
            .iter()
            .map(|k| {
                let k = k.as_ref();
                match self.vocab.id(k) {
                    Some(id) if !text::is_special(id) => Ok(id),
                    _ => Err(PipelineError::UnknownKeyword(k.to_string())),
                }
            })
            .collect()
    }

    pub fn run<S: AsRef<str>>(&self, keywords: &[S], cfg: &DecodeConfig) -> Result<GenerationResult, PipelineError> {
        let ids = self.keyword_ids(keywords)?;
        Ok(inference::generate_ranked(&ids, &self.model, cfg, self.lm.as_ref())?)
    }

    pub fn generate<S: AsRef<str>>(&self, keywords: &[S], cfg: &DecodeConfig) -> Result<GenerationRecord, PipelineError> {
        let start = Instant::now();
        let result = self.run(keywords, cfg)?;
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(GenerationRecord {
            keywords: keywords.iter().map(|k| k.as_ref().to_string()).collect(),
            output: text::decode(&result.sentence, &self.vocab)?,
            steps: result.steps,
            decoder_passes: result.decoder_passes,
            nll: result.nll,
            elapsed_ms,
        })
    }
}

/// Constraints file: one case per line, keywords separated by tabs.
pub fn read_constraints(path: &Path) -> Result<Vec<Vec<String>>, PipelineError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let kws: Vec<String> = line.split('\t').map(|s| s.trim().to_string()).collect();
        if kws.iter().any(|k| k.is_empty() || k.contains(' ')) {
            return Err(PipelineError::Format(format!("{}:{}: keywords must be single tab-separated tokens", path.display(), i + 1)));
        }
        out.push(kws);
    }
    Ok(out)
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>, PipelineError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| PipelineError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
