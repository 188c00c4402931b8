use std::fs;
use std::path::Path;

use cbart::model::{LanguageModel, ModelConfig, Seq2Seq};
use cbart::pipeline;
use cbart::synthesis::{self, InsertionStrategy, TrainingInstance};
use cbart::text::{self, TokenId, Vocab};
use cbart::training::{self, load_checkpoint, TrainConfig, TrainError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> (Vec<String>, Vocab) {
    let lines = text::read_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/toy_corpus.txt")).unwrap();
    let lines: Vec<String> = lines.into_iter().take(16).collect();
    let v = text::build_vocab(&lines, 1, 1000).unwrap();
    (lines, v)
}

fn data(lines: &[String], v: &Vocab) -> Vec<TrainingInstance> {
    synthesis::make_dataset(lines, v, InsertionStrategy::Middle, 4, 0.15, 2).unwrap()
}

fn model_cfg(vocab: usize) -> ModelConfig {
    ModelConfig { n_layer: 1, n_head: 2, d_model: 16, d_ff: 32, vocab_size: vocab, max_positions: 16, dropout: 0.1, ..ModelConfig::default() }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, validation_fraction: 0.25, learning_rate: 3e-3, seed: 9, ..TrainConfig::default() }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ckpt"))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let (lines, v) = toy();
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_cfg(0);
    let report = training::train_instances(&data(&lines, &v), &model_cfg(v.size()), &cfg, dir.path(), Some(&v)).unwrap();
    assert_eq!(report.best_epoch, 0);
    assert_eq!(report.history.len(), 1);
    let (params, meta) = load_checkpoint(&report.best_checkpoint).unwrap();
    let init = Seq2Seq::<f32>::new(model_cfg(v.size()), training::init_seed(cfg.seed)).unwrap();
    assert_eq!(meta.epoch, Some(0));
    assert_eq!(meta.vocab.as_deref(), Some(v.corpus_tokens()));
    for (a, b) in params.tensors().iter().zip(init.params().tensors()) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints_at_any_thread_count() {
    let (lines, v) = toy();
    let d = data(&lines, &v);
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { keep_all_checkpoints: true, ..train_cfg(2) };
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| training::train_instances(&d, &model_cfg(v.size()), &cfg, dir.path(), Some(&v)).unwrap());
        files(dir.path())
    };
    let a = run(1);
    assert_eq!(a.len(), 3);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
}

#[test]
fn different_seeds_differ() {
    let (lines, v) = toy();
    let d = data(&lines, &v);
    let run = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        training::train_instances(&d, &model_cfg(v.size()), &TrainConfig { seed, ..train_cfg(1) }, dir.path(), Some(&v)).unwrap();
        files(dir.path())
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn best_checkpoint_has_lowest_validation_loss() {
    let (lines, v) = toy();
    let dir = tempfile::tempdir().unwrap();
    let report = training::train_instances(&data(&lines, &v), &model_cfg(v.size()), &train_cfg(4), dir.path(), Some(&v)).unwrap();
    let vals: Vec<f64> = report.history.iter().map(|r| r.val_loss.unwrap()).collect();
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let first_min = vals.iter().position(|&x| x == min).unwrap();
    assert_eq!(report.best_epoch, first_min);
    let (_, meta) = load_checkpoint(&report.best_checkpoint).unwrap();
    assert_eq!(meta.epoch, Some(first_min));
    assert_eq!(meta.val_loss, Some(min));

    let mut kept: Vec<String> = files(dir.path()).into_iter().map(|f| f.0).collect();
    kept.dedup();
    let mut want = vec![format!("epoch_{:03}.ckpt", first_min), "epoch_004.ckpt".to_string()];
    want.sort();
    want.dedup();
    assert_eq!(kept, want);
    let history: training::TrainReport = serde_json::from_str(&fs::read_to_string(dir.path().join("history.json")).unwrap()).unwrap();
    assert_eq!(history, report);
}

#[test]
fn training_reduces_loss() {
    let (lines, v) = toy();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { validation_fraction: 0.0, learning_rate: 1e-2, ..train_cfg(6) };
    let mc = ModelConfig { dropout: 0.0, ..model_cfg(v.size()) };
    let report = training::train_instances(&data(&lines, &v), &mc, &cfg, dir.path(), Some(&v)).unwrap();
    let h = &report.history;
    assert!(h.last().unwrap().train_loss < 0.6 * h[0].train_loss, "{h:?}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let (lines, v) = toy();
    let dir = tempfile::tempdir().unwrap();
    let bad = TrainConfig { beta1: 1.0, ..train_cfg(1) };
    assert!(matches!(
        training::train_instances(&data(&lines, &v), &model_cfg(v.size()), &bad, dir.path(), None),
        Err(TrainError::InvalidConfig(_))
    ));
    assert!(matches!(training::train_instances(&[], &model_cfg(v.size()), &train_cfg(1), dir.path(), None), Err(TrainError::EmptyDataset)));
}

#[test]
fn corrupted_checkpoints_fail_loudly() {
    let (lines, v) = toy();
    let dir = tempfile::tempdir().unwrap();
    let report = training::train_instances(&data(&lines, &v), &model_cfg(v.size()), &train_cfg(0), dir.path(), Some(&v)).unwrap();
    let bytes = fs::read(&report.best_checkpoint).unwrap();
    let p = dir.path().join("x.ckpt");

    let mut b = bytes.clone();
    b[0] = b'X';
    fs::write(&p, &b).unwrap();
    assert_eq!(load_checkpoint(&p).unwrap_err().to_string(), "bad checkpoint magic");

    let mut b = bytes.clone();
    b[4] = 255;
    fs::write(&p, &b).unwrap();
    assert!(load_checkpoint(&p).unwrap_err().to_string().starts_with("unsupported version"));

    fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&p).is_err());

    let mut b = bytes.clone();
    let mid = b.len() / 2;
    b[mid] ^= 0x10;
    fs::write(&p, &b).unwrap();
    assert!(load_checkpoint(&p).is_err());
}

fn lm_cfg(vocab: usize) -> ModelConfig {
    ModelConfig { n_layer: 1, n_head: 2, d_model: 32, d_ff: 64, vocab_size: vocab, max_positions: 24, dropout: 0.0, ..ModelConfig::default() }
}

fn encoded(lines: &[String], v: &Vocab) -> Vec<Vec<TokenId>> {
    lines.iter().map(|l| text::encode(l, v).into_inner()).collect()
}

#[test]
fn lm_starts_near_uniform() {
    let (lines, v) = toy();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { init_std: 1e-4, ..lm_cfg(v.size()) };
    let report = training::train_lm(&encoded(&lines, &v), &cfg, &TrainConfig { validation_fraction: 0.0, ..train_cfg(0) }, dir.path(), Some(&v)).unwrap();
    let ln_v = (v.size() as f64).ln();
    assert!((report.history[0].train_loss - ln_v).abs() < 1e-3, "{} vs {ln_v}", report.history[0].train_loss);
}

#[test]
fn lm_memorizes_and_prefers_real_order() {
    // 16 sentences of ~19 tokens: the entropy of choosing a sentence after BOS
    // alone costs ln(16)/20 nats per token, below the 0.2 target
    let lines = text::read_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/lm_corpus.txt")).unwrap();
    let v = text::build_vocab(&lines, 1, 1000).unwrap();
    let corpus = encoded(&lines, &v);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { validation_fraction: 0.0, learning_rate: 1e-2, batch_size: 4, weight_decay: 0.0, ..train_cfg(60) };
    let report = training::train_lm(&corpus, &lm_cfg(v.size()), &cfg, dir.path(), Some(&v)).unwrap();
    let lm: LanguageModel<f32> = pipeline::load_lm(&report.best_checkpoint).unwrap();
    let (mut nll, mut tokens) = (0.0, 0);
    for s in &corpus {
        nll += lm.nll(s).unwrap();
        tokens += s.len() - 1;
    }
    let per_token = nll / tokens as f64;
    assert!(per_token < 0.2, "per-token NLL {per_token}");

    // moving average over 10 epochs falls until the loss is below 10% of the start
    let h: Vec<f64> = report.history.iter().map(|r| r.train_loss).collect();
    let threshold = 0.1 * h[0];
    let ma: Vec<f64> = h.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in ma.windows(2).enumerate() {
        if h[i + 10] <= threshold {
            break;
        }
        assert!(w[1] < w[0], "moving average rose at epoch {}", i + 10);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut better = 0;
    for s in &corpus {
        let mut inner = s[1..s.len() - 1].to_vec();
        let orig = inner.clone();
        while inner == orig {
            inner.shuffle(&mut rng);
        }
        let mut shuffled = vec![s[0]];
        shuffled.extend(inner);
        shuffled.push(*s.last().unwrap());
        better += usize::from(lm.nll(s).unwrap() < lm.nll(&shuffled).unwrap());
    }
    assert_eq!(better, corpus.len());
}
