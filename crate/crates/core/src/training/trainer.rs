use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, CheckpointMeta, ModelKind};
use super::optim::{adamw_step, clip_grad_norm, OptimState};
use super::{TrainConfig, TrainError};
use crate::model::{LanguageModel, ModelConfig, ParamSet, Seq2Seq};
use crate::seed;
use crate::synthesis::{read_dataset, TrainingInstance};
use crate::text::{TokenId, Vocab};

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5F0F;
const DROPOUT_STREAM: u64 = 0xD20F;
const EVAL_CHUNK: usize = 32;

/// A model the generic loop can optimize.
pub trait Trainable: Sync {
    type Item: Clone + Sync;

    fn params(&self) -> &ParamSet<f32>;
    fn params_mut(&mut self) -> &mut ParamSet<f32>;
    fn batch_loss_and_grad(&self, batch: &[Self::Item], dropout_seed: u64) -> Result<(f64, ParamSet<f32>), TrainError>;
    /// Evaluation-mode loss over `data`, normalized over the whole set.
    fn dataset_loss(&self, data: &[Self::Item]) -> Result<f64, TrainError>;
}

impl Trainable for Seq2Seq<f32> {
    type Item = TrainingInstance;

    fn params(&self) -> &ParamSet<f32> {
        Seq2Seq::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        Seq2Seq::params_mut(self)
    }

    fn batch_loss_and_grad(&self, batch: &[TrainingInstance], dropout_seed: u64) -> Result<(f64, ParamSet<f32>), TrainError> {
        let (loss, g) = self.loss_and_grad(batch, Some(dropout_seed))?;
        Ok((loss.l_total, g))
    }

    fn dataset_loss(&self, data: &[TrainingInstance]) -> Result<f64, TrainError> {
        let (mut enc, mut dec, mut ne, mut nd) = (0.0, 0.0, 0usize, 0usize);
        for chunk in data.chunks(EVAL_CHUNK) {
            let (loss, trace) = self.compute_loss(chunk, None)?;
            let (ce, cd) = trace.counts();
            enc += loss.l_encoder * ce as f64;
            dec += loss.l_decoder * cd as f64;
            ne += ce;
            nd += cd;
        }
        if ne == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let dec = if nd == 0 { 0.0 } else { dec / nd as f64 };
        Ok(enc / ne as f64 + self.config().alpha * dec)
    }
}

impl Trainable for LanguageModel<f32> {
    type Item = Vec<TokenId>;

    fn params(&self) -> &ParamSet<f32> {
        LanguageModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        LanguageModel::params_mut(self)
    }

    fn batch_loss_and_grad(&self, batch: &[Vec<TokenId>], dropout_seed: u64) -> Result<(f64, ParamSet<f32>), TrainError> {
        Ok(self.loss_and_grad(batch, Some(dropout_seed))?)
    }

    fn dataset_loss(&self, data: &[Vec<TokenId>]) -> Result<f64, TrainError> {
        let (mut sum, mut count) = (0.0, 0usize);
        for s in data {
            sum += self.nll(s)?;
            count += s.len().saturating_sub(1);
        }
        if count == 0 {
            return Err(TrainError::EmptyDataset);
        }
        Ok(sum / count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Epoch 0: evaluation-mode loss of the initialization. Later epochs:
    /// mean of the batch losses seen while training.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

impl EpochRecord {
    /// Selection score: validation loss, or training loss without a split.
    pub fn score(&self) -> f64 {
        self.val_loss.unwrap_or(self.train_loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
}

/// Index of the record with the lowest score; the earliest one wins ties.
pub fn best_epoch(history: &[EpochRecord]) -> Option<usize> {
    history
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, r)| match best {
            Some((_, s)) if s <= r.score() => best,
            _ => Some((i, r.score())),
        })
        .map(|(i, _)| i)
}

/// Splits off the last `fraction` of `data` for validation.
pub fn split_validation<T>(data: &[T], fraction: f64) -> (&[T], &[T]) {
    let n_val = ((data.len() as f64) * fraction).floor() as usize;
    data.split_at(data.len() - n_val.min(data.len().saturating_sub(1)))
}

pub fn evaluate_loss<M: Trainable>(model: &M, data: &[M::Item]) -> Result<f64, TrainError> {
    model.dataset_loss(data)
}

/// Generic optimization loop. `on_epoch` runs after the initialization
/// (epoch 0) and after every epoch.
pub fn fit<M, F>(model: &mut M, train: &[M::Item], val: &[M::Item], cfg: &TrainConfig, mut on_epoch: F) -> Result<Vec<EpochRecord>, TrainError>
where
    M: Trainable,
    F: FnMut(&EpochRecord, &M) -> Result<(), TrainError>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let eval_val = |m: &M| -> Result<Option<f64>, TrainError> {
        if val.is_empty() {
            Ok(None)
        } else {
            m.dataset_loss(val).map(Some)
        }
    };
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let rec = EpochRecord { epoch: 0, train_loss: model.dataset_loss(train)?, val_loss: eval_val(model)? };
    if !rec.train_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0, step: 0 });
    }
    on_epoch(&rec, model)?;
    history.push(rec);

    let mut state = OptimState::new(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive2(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<M::Item> = idx.iter().map(|&i| train[i].clone()).collect();
            let dseed = seed::derive2(seed::derive(cfg.seed, DROPOUT_STREAM), epoch as u64, step as u64);
            let (loss, mut grads) = model.batch_loss_and_grad(&batch, dseed)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adamw_step(model.params_mut(), &grads, &mut state, cfg)?;
            sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let rec = EpochRecord { epoch, train_loss: sum / seen as f64, val_loss: eval_val(model)? };
        log::info!("epoch {epoch}: train {:.4} val {:?}", rec.train_loss, rec.val_loss);
        on_epoch(&rec, model)?;
        history.push(rec);
    }
    Ok(history)
}

fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Runs `fit`, writing one checkpoint per epoch into `out_dir` together with
/// `history.json`. Superseded checkpoints that are neither the best so far nor
/// the latest are deleted unless `keep_all_checkpoints` is set.
fn fit_to_dir<M: Trainable>(
    model: &mut M,
    train: &[M::Item],
    val: &[M::Item],
    cfg: &TrainConfig,
    out_dir: &Path,
    base_meta: CheckpointMeta,
) -> Result<TrainReport, TrainError> {
    fs::create_dir_all(out_dir)?;
    let mut seen: Vec<EpochRecord> = Vec::new();
    let mut on_disk = BTreeSet::new();
    let history = fit(model, train, val, cfg, |rec, m| {
        let meta = CheckpointMeta {
            epoch: Some(rec.epoch),
            train_loss: Some(rec.train_loss),
            val_loss: rec.val_loss,
            ..base_meta.clone()
        };
        save_checkpoint(&epoch_path(out_dir, rec.epoch), m.params(), &meta)?;
        on_disk.insert(rec.epoch);
        seen.push(rec.clone());
        if !cfg.keep_all_checkpoints {
            let best = best_epoch(&seen).expect("non-empty history");
            for e in on_disk.clone() {
                if e != best && e != rec.epoch {
                    fs::remove_file(epoch_path(out_dir, e))?;
                    on_disk.remove(&e);
                }
            }
        }
        Ok(())
    })?;
    let best = best_epoch(&history).expect("history holds epoch 0");
    let report = TrainReport {
        best_epoch: history[best].epoch,
        best_checkpoint: epoch_path(out_dir, history[best].epoch),
        last_checkpoint: epoch_path(out_dir, history.last().expect("non-empty").epoch),
        history,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    fs::write(out_dir.join("history.json"), json)?;
    Ok(report)
}

/// Trains the edit model on an in-memory dataset.
pub fn train_instances(
    data: &[TrainingInstance],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    vocab: Option<&Vocab>,
) -> Result<TrainReport, TrainError> {
    let (train, val) = split_validation(data, cfg.validation_fraction);
    let mut model = Seq2Seq::<f32>::new(model_cfg.clone(), seed::derive(cfg.seed, INIT_STREAM))?;
    let meta = CheckpointMeta {
        kind: ModelKind::Cbart,
        model: model_cfg.clone(),
        vocab: vocab.map(|v| v.corpus_tokens().to_vec()),
        epoch: None,
        train_loss: None,
        val_loss: None,
    };
    fit_to_dir(&mut model, train, val, cfg, out_dir, meta)
}

/// Trains the edit model on a JSONL dataset file.
pub fn train(
    dataset: &Path,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    vocab: Option<&Vocab>,
) -> Result<TrainReport, TrainError> {
    let data = read_dataset(dataset)?;
    train_instances(&data, model_cfg, cfg, out_dir, vocab)
}

/// Trains the ranking language model on full sentences (with BOS and EOS).
pub fn train_lm(
    corpus: &[Vec<TokenId>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    vocab: Option<&Vocab>,
) -> Result<TrainReport, TrainError> {
    let data: Vec<Vec<TokenId>> = corpus.iter().filter(|s| s.len() >= 2).cloned().collect();
    let (train, val) = split_validation(&data, cfg.validation_fraction);
    let mut model = LanguageModel::<f32>::new(model_cfg.clone(), seed::derive(cfg.seed, INIT_STREAM))?;
    let meta = CheckpointMeta {
        kind: ModelKind::Lm,
        model: model_cfg.clone(),
        vocab: vocab.map(|v| v.corpus_tokens().to_vec()),
        epoch: None,
        train_loss: None,
        val_loss: None,
    };
    fit_to_dir(&mut model, train, val, cfg, out_dir, meta)
}

/// Seed used for the initial parameters of a run with `train_seed`.
pub fn init_seed(train_seed: u64) -> u64 {
    seed::derive(train_seed, INIT_STREAM)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, t: f64, v: Option<f64>) -> EpochRecord {
        EpochRecord { epoch, train_loss: t, val_loss: v }
    }

    #[test]
    fn best_epoch_prefers_lowest_then_earliest() {
        let h = vec![rec(0, 5.0, Some(3.0)), rec(1, 4.0, Some(2.0)), rec(2, 3.0, Some(2.0)), rec(3, 1.0, Some(2.5))];
        assert_eq!(best_epoch(&h), Some(1));
        let h = vec![rec(0, 5.0, None), rec(1, 4.0, None)];
        assert_eq!(best_epoch(&h), Some(1));
        assert_eq!(best_epoch(&[]), None);
    }

    #[test]
    fn split_keeps_tail_for_validation() {
        let d: Vec<u32> = (0..20).collect();
        let (t, v) = split_validation(&d, 0.1);
        assert_eq!(t.len(), 18);
        assert_eq!(v, &[18, 19]);
        let (t, v) = split_validation(&d[..5], 0.1);
        assert_eq!((t.len(), v.len()), (5, 0));
        let (t, v) = split_validation(&d[..1], 0.9);
        assert_eq!((t.len(), v.len()), (1, 0));
    }
}
