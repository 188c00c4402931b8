//! Synthetic supervision: turn a clean sentence into an
//! `(encoder input, edit labels, decoder input, decoder target)` quadruple.
//!
//! The corruption pipeline is `subsample -> apply_replacements ->
//! derive_labels -> build_decoder_pair`. Every random decision goes through
//! the [`Chooser`] trait so a scripted sequence of choices can replay a
//! specific corruption exactly.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::text::{self, is_special, SentenceIds, TfIdfTable, TokenId, Vocab, BOS, EOS, MASK, NUM_SPECIALS, PAD};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("sentence has no interior tokens")]
    EmptySentence,
    #[error("replacement rate must be in [0, 1), got {0}")]
    BadRate(f64),
    #[error("vocab too small to supply a distinct replacement token")]
    VocabTooSmall,
    #[error("position {0} cannot be replaced")]
    NotReplaceable(usize),
    #[error("invalid replacement token {0}")]
    BadReplacement(TokenId),
    #[error("TF-IDF strategy requires a TF-IDF table")]
    MissingTfIdf,
    #[error("instances_per_sentence must be >= 1")]
    BadInstanceCount,
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("invalid training instance: {0}")]
    InvalidInstance(String),
    #[error("unknown insertion strategy {0:?}")]
    UnknownStrategy(String),
    #[error("dataset i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Text(#[from] text::TextError),
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
#[repr(u8)]
pub enum ActionLabel {
    Copy = 0,
    Replace = 1,
    Insert = 2,
}

impl ActionLabel {
    pub const ALL: [ActionLabel; 3] = [ActionLabel::Copy, ActionLabel::Replace, ActionLabel::Insert];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<ActionLabel> for u8 {
    fn from(l: ActionLabel) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for ActionLabel {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(ActionLabel::Copy),
            1 => Ok(ActionLabel::Replace),
            2 => Ok(ActionLabel::Insert),
            _ => Err(format!("invalid action label {v}")),
        }
    }
}

/// Which deleted token of a gap becomes the gold token for an insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertionStrategy {
    Left,
    Middle,
    Right,
    Random,
    TfIdf,
}

impl InsertionStrategy {
    pub const ALL: [InsertionStrategy; 5] = [
        InsertionStrategy::Left,
        InsertionStrategy::Middle,
        InsertionStrategy::Right,
        InsertionStrategy::Random,
        InsertionStrategy::TfIdf,
    ];
}

impl FromStr for InsertionStrategy {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Ok(Self::Left),
            "middle" => Ok(Self::Middle),
            "right" => Ok(Self::Right),
            "random" => Ok(Self::Random),
            "tfidf" | "tf-idf" => Ok(Self::TfIdf),
            _ => Err(SynthError::UnknownStrategy(s.into())),
        }
    }
}

impl fmt::Display for InsertionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Left => "left",
            Self::Middle => "middle",
            Self::Right => "right",
            Self::Random => "random",
            Self::TfIdf => "tfidf",
        };
        f.write_str(s)
    }
}

/// Source of the random decisions made during corruption.
pub trait Chooser {
    /// Uniform index in `0..n` (`n >= 1`).
    fn below(&mut self, n: usize) -> usize;
    /// `k` distinct indices from `0..n`, uniformly, in any order.
    fn subset(&mut self, n: usize, k: usize) -> Vec<usize>;
}

impl<R: rand::Rng + ?Sized> Chooser for R {
    fn below(&mut self, n: usize) -> usize {
        self.random_range(0..n)
    }

    fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(self, n, k).into_vec()
    }
}

/// Replays a fixed list of decisions. `below` consumes one value; `subset`
/// consumes `k` values.
#[derive(Debug, Clone, Default)]
pub struct Scripted(VecDeque<usize>);

impl Scripted {
    pub fn new(values: impl IntoIterator<Item = usize>) -> Self {
        Self(values.into_iter().collect())
    }

    pub fn remaining(&self) -> usize {
        self.0.len()
    }
}

impl Chooser for Scripted {
    fn below(&mut self, n: usize) -> usize {
        let v = self.0.pop_front().expect("scripted chooser exhausted");
        assert!(v < n, "scripted value {v} out of range 0..{n}");
        v
    }

    fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.below(n)).collect()
    }
}

/// Picks the kept indices: always BOS and EOS, plus a uniformly sized
/// uniform subset of the interior.
pub fn subsample(original: &SentenceIds, chooser: &mut impl Chooser) -> Result<Vec<usize>, SynthError> {
    let n = original.len();
    let interior = n - 2;
    if interior == 0 {
        return Err(SynthError::EmptySentence);
    }
    let keep = chooser.below(interior) + 1;
    let mut picks = chooser.subset(interior, keep);
    picks.sort_unstable();
    picks.dedup();
    let mut kept = Vec::with_capacity(picks.len() + 2);
    kept.push(0);
    kept.extend(picks.into_iter().map(|p| p + 1));
    kept.push(n - 1);
    Ok(kept)
}

fn gap_preceded(kept: &[usize], j: usize) -> bool {
    j > 0 && kept[j] > kept[j - 1] + 1
}

/// Kept interior positions whose original predecessor was also kept.
pub fn replaceable_positions(kept: &[usize]) -> Vec<usize> {
    (1..kept.len().saturating_sub(1))
        .filter(|&j| !gap_preceded(kept, j))
        .collect()
}

/// Gathers the kept tokens and substitutes the given `(kept position, token)` pairs.
pub fn replace_at(
    original: &SentenceIds,
    kept: &[usize],
    replacements: &[(usize, TokenId)],
) -> Result<(SentenceIds, Vec<bool>), SynthError> {
    check_kept(original, kept)?;
    let ids = original.ids();
    let mut x: Vec<TokenId> = kept.iter().map(|&k| ids[k]).collect();
    let mut replaced = vec![false; kept.len()];
    for &(j, tok) in replacements {
        if j == 0 || j + 1 >= kept.len() || gap_preceded(kept, j) || replaced[j] {
            return Err(SynthError::NotReplaceable(j));
        }
        if is_special(tok) || tok == x[j] {
            return Err(SynthError::BadReplacement(tok));
        }
        x[j] = tok;
        replaced[j] = true;
    }
    Ok((SentenceIds::new(x)?, replaced))
}

fn check_kept(original: &SentenceIds, kept: &[usize]) -> Result<(), SynthError> {
    let n = original.len();
    let ok = kept.len() >= 2
        && kept[0] == 0
        && kept[kept.len() - 1] == n - 1
        && kept.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(SynthError::Inconsistent("kept indices must be ascending and include BOS/EOS".into()))
    }
}

fn draw_replacement(original: TokenId, vocab_size: usize, chooser: &mut impl Chooser) -> Result<TokenId, SynthError> {
    let content = vocab_size.saturating_sub(NUM_SPECIALS);
    if is_special(original) {
        if content == 0 {
            return Err(SynthError::VocabTooSmall);
        }
        return Ok((NUM_SPECIALS + chooser.below(content)) as TokenId);
    }
    if content < 2 {
        return Err(SynthError::VocabTooSmall);
    }
    let mut t = (NUM_SPECIALS + chooser.below(content - 1)) as TokenId;
    if t >= original {
        t += 1;
    }
    Ok(t)
}

/// Replaces `round(rate * eligible)` of the replaceable kept tokens with
/// uniformly drawn different content tokens.
pub fn apply_replacements(
    original: &SentenceIds,
    kept: &[usize],
    rate: f64,
    chooser: &mut impl Chooser,
    vocab: &Vocab,
) -> Result<(SentenceIds, Vec<bool>), SynthError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(SynthError::BadRate(rate));
    }
    check_kept(original, kept)?;
    let eligible = replaceable_positions(kept);
    let count = (rate * eligible.len() as f64).round() as usize;
    let mut chosen: Vec<usize> = chooser
        .subset(eligible.len(), count)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    let mut replacements = Vec::with_capacity(chosen.len());
    for j in chosen {
        let orig = original.ids()[kept[j]];
        replacements.push((j, draw_replacement(orig, vocab.size(), chooser)?));
    }
    replace_at(original, kept, &replacements)
}

pub fn derive_labels(kept: &[usize], replaced: &[bool]) -> Vec<ActionLabel> {
    (0..kept.len())
        .map(|j| {
            if gap_preceded(kept, j) {
                ActionLabel::Insert
            } else if replaced.get(j).copied().unwrap_or(false) {
                ActionLabel::Replace
            } else {
                ActionLabel::Copy
            }
        })
        .collect()
}

/// The unshifted decoder sequence: a mask before every Insert position and
/// in place of every Replace position.
pub fn masked_sequence(x: &[TokenId], labels: &[ActionLabel]) -> Vec<TokenId> {
    let mut u = Vec::with_capacity(x.len() * 2);
    for (&tok, &l) in x.iter().zip(labels) {
        match l {
            ActionLabel::Copy => u.push(tok),
            ActionLabel::Replace => u.push(MASK),
            ActionLabel::Insert => {
                u.push(MASK);
                u.push(tok);
            }
        }
    }
    u
}

/// Right shift with `EOS` as the decoder start token; the last element is dropped.
pub fn shift_right(unshifted: &[TokenId]) -> Vec<TokenId> {
    let mut ym = Vec::with_capacity(unshifted.len());
    ym.push(EOS);
    ym.extend_from_slice(&unshifted[..unshifted.len().saturating_sub(1)]);
    ym
}

/// Chooses the gold insertion token from the gap of deleted originals.
pub fn choose_gold(
    strategy: InsertionStrategy,
    gap: &[TokenId],
    original: &SentenceIds,
    tfidf: Option<&TfIdfTable>,
    chooser: &mut impl Chooser,
) -> Result<TokenId, SynthError> {
    if gap.is_empty() {
        return Err(SynthError::Inconsistent("empty gap".into()));
    }
    let idx = match strategy {
        InsertionStrategy::Left => 0,
        InsertionStrategy::Middle => (gap.len() - 1) / 2,
        InsertionStrategy::Right => gap.len() - 1,
        InsertionStrategy::Random => chooser.below(gap.len()),
        InsertionStrategy::TfIdf => {
            let table = tfidf.ok_or(SynthError::MissingTfIdf)?;
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, &t) in gap.iter().enumerate() {
                let s = table.score_in(t, original);
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            best
        }
    };
    Ok(gap[idx])
}

/// Builds `(y_m, y)` given the encoder input and its gold labels.
pub fn build_decoder_pair(
    x: &SentenceIds,
    labels: &[ActionLabel],
    original: &SentenceIds,
    kept: &[usize],
    strategy: InsertionStrategy,
    tfidf: Option<&TfIdfTable>,
    chooser: &mut impl Chooser,
) -> Result<(Vec<TokenId>, Vec<TokenId>), SynthError> {
    if labels.len() != x.len() || kept.len() != x.len() {
        return Err(SynthError::Inconsistent("x, labels and kept differ in length".into()));
    }
    check_kept(original, kept)?;
    let ids = original.ids();
    let mut y = Vec::with_capacity(x.len() * 2);
    for (j, (&tok, &l)) in x.ids().iter().zip(labels).enumerate() {
        match l {
            ActionLabel::Copy => y.push(tok),
            ActionLabel::Replace => y.push(ids[kept[j]]),
            ActionLabel::Insert => {
                if j == 0 {
                    return Err(SynthError::Inconsistent("insert before BOS".into()));
                }
                let gap = &ids[kept[j - 1] + 1..kept[j]];
                y.push(choose_gold(strategy, gap, original, tfidf, chooser)?);
                y.push(tok);
            }
        }
    }
    let ym = shift_right(&masked_sequence(x.ids(), labels));
    Ok((ym, y))
}

/// One supervised example. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub x: Vec<TokenId>,
    pub l: Vec<ActionLabel>,
    pub ym: Vec<TokenId>,
    pub y: Vec<TokenId>,
}

impl TrainingInstance {
    /// Decoder positions whose prediction fills a mask slot.
    pub fn mask_slots(&self) -> Vec<usize> {
        (0..self.ym.len())
            .filter(|&t| t + 1 < self.ym.len() && self.ym[t + 1] == MASK)
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidInstance(m.to_string()));
        if SentenceIds::new(self.x.clone()).is_err() {
            return bad("x is not a well-formed sentence");
        }
        if self.x.len() != self.l.len() {
            return bad("|x| != |l|");
        }
        if self.l[0] != ActionLabel::Copy {
            return bad("BOS must be labeled Copy");
        }
        let inserts = self.l.iter().filter(|&&l| l == ActionLabel::Insert).count();
        let replaces = self.l.iter().filter(|&&l| l == ActionLabel::Replace).count();
        if self.l[self.l.len() - 1] == ActionLabel::Replace {
            return bad("EOS labeled Replace");
        }
        let m = self.x.len() + inserts;
        if self.ym.len() != m || self.y.len() != m {
            return bad("decoder lengths do not equal n + inserts");
        }
        if self.ym[0] != EOS || self.ym[1] != BOS {
            return bad("y_m must start with EOS, BOS");
        }
        if self.ym.iter().filter(|&&t| t == MASK).count() != inserts + replaces {
            return bad("mask count != inserts + replaces");
        }
        if self.y.iter().any(|&t| t == MASK || t == PAD) {
            return bad("y contains MASK or PAD");
        }
        if self.y[0] != BOS || self.y[m - 1] != EOS {
            return bad("y must be BOS ... EOS");
        }
        if self.ym[1..] != masked_sequence(&self.x, &self.l)[..m - 1] {
            return bad("y_m is not the shifted masked sequence");
        }
        Ok(())
    }
}

/// All instances derived from one sentence, using its own generator.
pub fn synthesize_sentence(
    original: &SentenceIds,
    vocab: &Vocab,
    strategy: InsertionStrategy,
    count: usize,
    rate: f64,
    tfidf: Option<&TfIdfTable>,
    chooser: &mut impl Chooser,
) -> Result<Vec<TrainingInstance>, SynthError> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let kept = subsample(original, chooser)?;
        let (x, replaced) = apply_replacements(original, &kept, rate, chooser, vocab)?;
        let l = derive_labels(&kept, &replaced);
        let (ym, y) = build_decoder_pair(&x, &l, original, &kept, strategy, tfidf, chooser)?;
        out.push(TrainingInstance { x: x.into_inner(), l, ym, y });
    }
    Ok(out)
}

/// Synthesizes `instances_per_sentence` instances for every corpus line with
/// at least one token. Line `i` draws from its own generator seeded by
/// `(seed, i)`, so the result does not depend on scheduling.
pub fn make_dataset<S: AsRef<str> + Sync>(
    corpus: &[S],
    vocab: &Vocab,
    strategy: InsertionStrategy,
    instances_per_sentence: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<TrainingInstance>, SynthError> {
    if instances_per_sentence < 1 {
        return Err(SynthError::BadInstanceCount);
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(SynthError::BadRate(rate));
    }
    let table = (strategy == InsertionStrategy::TfIdf).then(|| text::build_tfidf(corpus, vocab));
    let per_line: Result<Vec<Vec<TrainingInstance>>, SynthError> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, line)| {
            let original = text::encode(line.as_ref(), vocab);
            if original.len() < 3 {
                return Ok(Vec::new());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, i as u64));
            synthesize_sentence(&original, vocab, strategy, instances_per_sentence, rate, table.as_ref(), &mut rng)
        })
        .collect();
    Ok(per_line?.into_iter().flatten().collect())
}

pub fn write_dataset(path: &Path, instances: &[TrainingInstance]) -> Result<(), SynthError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut w, inst).map_err(|e| SynthError::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainingInstance>, SynthError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TrainingInstance = serde_json::from_str(&line)
            .map_err(|e| SynthError::Io(format!("line {}: {e}", lineno + 1)))?;
        inst.validate()
            .map_err(|e| SynthError::Io(format!("line {}: {e}", lineno + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_vocab;
    use ActionLabel::*;

    fn letters() -> (Vocab, SentenceIds) {
        let v = Vocab::from_tokens("A B C D E F G H I K".split(' ')).unwrap();
        let s = text::encode("A B C D E F G H I", &v);
        (v, s)
    }

    #[test]
    fn subsample_keep_all() {
        let (_, s) = letters();
        let mut c = Scripted::new([8, 0, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(subsample(&s, &mut c).unwrap(), (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_keep_one() {
        let (_, s) = letters();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let kept = subsample(&s, &mut rng).unwrap();
            assert_eq!(kept[0], 0);
            assert_eq!(*kept.last().unwrap(), 10);
        }
        let mut c = Scripted::new([0, 4]);
        assert_eq!(subsample(&s, &mut c).unwrap(), vec![0, 5, 10]);
    }

    #[test]
    fn empty_sentence_rejected() {
        let s = SentenceIds::new(vec![BOS, EOS]).unwrap();
        assert_eq!(subsample(&s, &mut Scripted::default()), Err(SynthError::EmptySentence));
    }

    #[test]
    fn replacement_count_rounds() {
        let (v, s) = letters();
        // F G H I contiguous with a gap before F: 3 eligible, 0.15*3 rounds to 0.
        let kept = vec![0, 6, 7, 8, 9, 10];
        assert_eq!(replaceable_positions(&kept), vec![2, 3, 4]);
        let (x, r) = apply_replacements(&s, &kept, 0.15, &mut Scripted::default(), &v).unwrap();
        assert_eq!(x.ids(), &[BOS, 10, 11, 12, 13, EOS]);
        assert!(r.iter().all(|&b| !b));
        // four eligible: round(0.6) = 1
        let kept = vec![0, 1, 2, 3, 4, 10];
        let mut c = Scripted::new([2, 0]);
        let (x, r) = apply_replacements(&s, &kept, 0.15, &mut c, &v).unwrap();
        assert_eq!(r, vec![false, false, false, true, false, false]);
        assert_eq!(x.ids()[3], 5);
        assert_eq!(c.remaining(), 0);
    }

    #[test]
    fn replacement_never_original() {
        let (v, s) = letters();
        let kept: Vec<usize> = (0..11).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (x, r) = apply_replacements(&s, &kept, 0.5, &mut rng, &v).unwrap();
            for j in 0..kept.len() {
                if r[j] {
                    assert_ne!(x.ids()[j], s.ids()[j]);
                    assert!(!is_special(x.ids()[j]));
                } else {
                    assert_eq!(x.ids()[j], s.ids()[j]);
                }
            }
        }
    }

    #[test]
    fn replacement_vocab_too_small() {
        let v = Vocab::from_tokens(["a"]).unwrap();
        let s = text::encode("a a a a", &v);
        let kept: Vec<usize> = (0..6).collect();
        assert_eq!(
            apply_replacements(&s, &kept, 0.5, &mut ChaCha8Rng::seed_from_u64(0), &v),
            Err(SynthError::VocabTooSmall)
        );
        assert_eq!(
            apply_replacements(&s, &kept, 1.0, &mut ChaCha8Rng::seed_from_u64(0), &v),
            Err(SynthError::BadRate(1.0))
        );
    }

    #[test]
    fn labels_from_gaps_and_replacements() {
        let kept = vec![0, 6, 7, 8, 9, 10];
        let replaced = vec![false, false, false, true, false, false];
        assert_eq!(derive_labels(&kept, &replaced), vec![Copy, Insert, Copy, Replace, Copy, Copy]);
        let kept: Vec<usize> = (0..5).collect();
        assert!(derive_labels(&kept, &[false; 5]).iter().all(|&l| l == Copy));
        // trailing originals deleted: EOS is gap-preceded
        assert_eq!(derive_labels(&[0, 1, 2, 6], &[false; 4]), vec![Copy, Copy, Copy, Insert]);
    }

    #[test]
    fn decoder_pair_for_each_strategy() {
        let (v, s) = letters();
        let kept = vec![0, 6, 7, 8, 9, 10];
        let id = |t: &str| v.id(t).unwrap();
        let (x, replaced) = replace_at(&s, &kept, &[(3, id("K"))]).unwrap();
        let l = derive_labels(&kept, &replaced);
        let corpus = ["A B C D E F G H I", "A C D E F G H I", "A C D E F G H I"];
        let table = text::build_tfidf(&corpus, &v);
        let cases = [
            (InsertionStrategy::Left, "A"),
            (InsertionStrategy::Middle, "C"),
            (InsertionStrategy::Right, "E"),
            (InsertionStrategy::Random, "D"),
            (InsertionStrategy::TfIdf, "B"),
        ];
        for (strategy, gold) in cases {
            let mut c = Scripted::new([3]);
            let (ym, y) = build_decoder_pair(&x, &l, &s, &kept, strategy, Some(&table), &mut c).unwrap();
            assert_eq!(ym, vec![EOS, BOS, MASK, id("F"), id("G"), MASK, id("I")]);
            assert_eq!(y, vec![BOS, id(gold), id("F"), id("G"), id("H"), id("I"), EOS], "{strategy}");
        }
    }

    #[test]
    fn tfidf_needs_table_and_breaks_ties_left() {
        let (_, s) = letters();
        let mut c = Scripted::default();
        assert_eq!(
            choose_gold(InsertionStrategy::TfIdf, &[5, 6], &s, None, &mut c),
            Err(SynthError::MissingTfIdf)
        );
        let table = TfIdfTable::default();
        assert_eq!(choose_gold(InsertionStrategy::TfIdf, &[7, 6], &s, Some(&table), &mut c), Ok(7));
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let corpus = ["the cat sat on the mat", "a dog ran in the park today", "birds sing"];
        let v = build_vocab(&corpus, 1, 100).unwrap();
        let a = make_dataset(&corpus, &v, InsertionStrategy::Left, 10, 0.15, 5).unwrap();
        assert_eq!(a.len(), 30);
        let b = make_dataset(&corpus, &v, InsertionStrategy::Left, 10, 0.15, 5).unwrap();
        assert_eq!(a, b);
        for inst in &a {
            inst.validate().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &a).unwrap();
        let first = fs::read_to_string(&p).unwrap();
        assert!(first.starts_with("{\"x\":[2,"));
        assert!(first.lines().next().unwrap().contains("],\"l\":["));
        assert_eq!(read_dataset(&p).unwrap(), a);
        assert_eq!(
            make_dataset(&corpus, &v, InsertionStrategy::Left, 0, 0.15, 5),
            Err(SynthError::BadInstanceCount)
        );
    }

    #[test]
    fn keep_all_no_corruption() {
        let (v, s) = letters();
        let kept: Vec<usize> = (0..s.len()).collect();
        let (x, r) = apply_replacements(&s, &kept, 0.0, &mut Scripted::default(), &v).unwrap();
        let l = derive_labels(&kept, &r);
        assert!(l.iter().all(|&l| l == Copy));
        let (ym, y) =
            build_decoder_pair(&x, &l, &s, &kept, InsertionStrategy::Left, None, &mut Scripted::default()).unwrap();
        assert_eq!(y, s.ids());
        assert_eq!(ym, shift_right(s.ids()));
    }

    #[test]
    fn strategy_parse() {
        for s in InsertionStrategy::ALL {
            assert_eq!(s.to_string().parse::<InsertionStrategy>().unwrap(), s);
        }
        assert!("bogus".parse::<InsertionStrategy>().is_err());
    }
}
