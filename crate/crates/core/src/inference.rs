//! Iterative parallel refinement: label every token, rebuild the decoder
//! input with mask slots, fill all slots from one decoder pass, repeat.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncodedSequence, LanguageModel, ModelError, Scalar, Seq2Seq};
use crate::seed;
use crate::synthesis::{masked_sequence, shift_right, ActionLabel};
use crate::text::{is_special, SentenceIds, TokenId, MASK};

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("empty keyword list")]
    EmptyKeywords,
    #[error("keyword id {0} is a special token")]
    SpecialKeyword(TokenId),
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("LmNll ranking requires a language model")]
    MissingLm,
    #[error("labels do not match the input length")]
    LabelLength,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    TopK(usize),
    TopP(f64),
}

impl FromStr for Strategy {
    type Err = InferenceError;

    /// `greedy`, `topk:K` or `topp:P`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || InferenceError::InvalidConfig(format!("unknown strategy {s:?} (greedy, topk:K, topp:P)"));
        let lower = s.trim().to_ascii_lowercase();
        if lower == "greedy" {
            return Ok(Strategy::Greedy);
        }
        let (name, arg) = lower.split_once(':').ok_or_else(bad)?;
        match name {
            "topk" | "top-k" => arg.parse().map(Strategy::TopK).map_err(|_| bad()),
            "topp" | "top-p" => arg.parse().map(Strategy::TopP).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Greedy => write!(f, "greedy"),
            Strategy::TopK(k) => write!(f, "topk:{k}"),
            Strategy::TopP(p) => write!(f, "topp:{p}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranker {
    LmNll,
    DecoderNll,
}

impl FromStr for Ranker {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "lm" | "lm_nll" | "lmnll" => Ok(Ranker::LmNll),
            "decoder" | "decoder_nll" | "decodernll" => Ok(Ranker::DecoderNll),
            _ => Err(InferenceError::InvalidConfig(format!("unknown ranker {s:?} (lm_nll, decoder_nll)"))),
        }
    }
}

/// How the repetition penalty treats the sign of a logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    Off,
    /// Divide positive logits by theta, multiply negative ones.
    SignAware,
    /// Divide every logit by theta.
    Literal,
}

impl FromStr for PenaltyMode {
    type Err = InferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "off" | "none" => Ok(PenaltyMode::Off),
            "sign_aware" | "signaware" => Ok(PenaltyMode::SignAware),
            "literal" => Ok(PenaltyMode::Literal),
            _ => Err(InferenceError::InvalidConfig(format!("unknown penalty mode {s:?} (off, sign_aware, literal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub num_sequences: usize,
    pub theta: f64,
    pub penalty: PenaltyMode,
    pub max_steps: usize,
    pub seed: u64,
    pub ranker: Ranker,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            num_sequences: 1,
            theta: 2.0,
            penalty: PenaltyMode::SignAware,
            max_steps: 10,
            seed: 0,
            ranker: Ranker::DecoderNll,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: &str| Err(InferenceError::InvalidConfig(m.into()));
        match self.strategy {
            Strategy::TopK(0) => return bad("top-k requires k >= 1"),
            Strategy::TopP(p) if !(p > 0.0 && p <= 1.0) => return bad("top-p requires p in (0, 1]"),
            _ => {}
        }
        if self.num_sequences == 0 {
            return bad("num_sequences must be >= 1");
        }
        if !(self.theta >= 1.0 && self.theta.is_finite()) {
            return bad("theta must be >= 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1");
        }
        Ok(())
    }
}

/// The two halves of an edit model as seen by the refinement loop.
pub trait EditModel: Sync {
    type Memory;

    fn vocab_size(&self) -> usize;
    fn max_positions(&self) -> usize;
    /// Label logits (`n x 3`, row-major) and the encoder memory.
    fn encode(&self, x: &[TokenId]) -> Result<(Vec<f64>, Self::Memory), InferenceError>;
    /// Token logits (`m x vocab`) for every decoder position.
    fn decode(&self, ym: &[TokenId], memory: &Self::Memory) -> Result<Vec<f64>, InferenceError>;
}

impl<T: Scalar> EditModel for Seq2Seq<T> {
    type Memory = EncodedSequence<T>;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_positions(&self) -> usize {
        self.config().max_positions
    }

    fn encode(&self, x: &[TokenId]) -> Result<(Vec<f64>, EncodedSequence<T>), InferenceError> {
        let enc = self.encode_sequence(x)?;
        let logits = enc.label_logits.iter().map(|v| v.as_f64()).collect();
        Ok((logits, enc))
    }

    fn decode(&self, ym: &[TokenId], memory: &EncodedSequence<T>) -> Result<Vec<f64>, InferenceError> {
        Ok(self.decode_sequence(ym, memory)?.iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FixedPoint,
    AllCopy,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementState {
    pub x: SentenceIds,
    /// True exactly on positions holding an original keyword.
    pub protected: Vec<bool>,
    pub r: usize,
    pub prev_output: Option<SentenceIds>,
    pub decoder_passes: usize,
}

impl RefinementState {
    pub fn protected_tokens(&self) -> Vec<TokenId> {
        self.x.ids().iter().zip(&self.protected).filter(|(_, &p)| p).map(|(&t, _)| t).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub sentence: SentenceIds,
    pub steps: usize,
    pub decoder_passes: usize,
    pub nll: Option<f64>,
    pub termination: Termination,
    /// `x_0, x_1, ...` up to and including the returned sentence.
    pub trajectory: Vec<SentenceIds>,
    /// Sum of -log p over the mask slots of the last decoder pass.
    pub decoder_nll: f64,
    pub chain: usize,
}

pub fn init_input(keywords: &[TokenId]) -> Result<RefinementState, InferenceError> {
    if keywords.is_empty() {
        return Err(InferenceError::EmptyKeywords);
    }
    if let Some(&k) = keywords.iter().find(|&&k| is_special(k)) {
        return Err(InferenceError::SpecialKeyword(k));
    }
    let x = SentenceIds::from_interior(keywords).map_err(|_| InferenceError::SpecialKeyword(keywords[0]))?;
    let mut protected = vec![true; x.len()];
    protected[0] = false;
    protected[x.len() - 1] = false;
    Ok(RefinementState { x, protected, r: 0, prev_output: None, decoder_passes: 0 })
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax labels from `n x 3` logits, then the keyword-protection coercions.
pub fn labels_from_logits(logits: &[f64], protected: &[bool]) -> Vec<ActionLabel> {
    let n = protected.len();
    let mut labels: Vec<ActionLabel> = logits.chunks_exact(3).map(|row| ActionLabel::ALL[argmax(row)]).collect();
    for (t, l) in labels.iter_mut().enumerate() {
        let coerce = t == 0 || ((protected[t] || t == n - 1) && *l == ActionLabel::Replace);
        if coerce {
            *l = ActionLabel::Copy;
        }
    }
    labels
}

pub fn predict_labels<M: EditModel>(state: &RefinementState, model: &M) -> Result<(Vec<ActionLabel>, M::Memory), InferenceError> {
    let (logits, memory) = model.encode(state.x.ids())?;
    Ok((labels_from_logits(&logits, &state.protected), memory))
}

/// Decoder input of one refinement step.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInput {
    pub ym: Vec<TokenId>,
    /// Unshifted sequence; holds `MASK` at every slot to fill.
    pub unshifted: Vec<TokenId>,
    /// Output positions to fill.
    pub mask_positions: Vec<usize>,
    /// Protected flags aligned to the unshifted output.
    pub next_protected: Vec<bool>,
}

/// Turns Insert labels beyond the length budget into Copy, keeping the
/// leftmost inserts.
pub fn limit_inserts(labels: &mut [ActionLabel], max_len: usize) {
    let mut budget = max_len.saturating_sub(labels.len());
    for l in labels.iter_mut() {
        if *l == ActionLabel::Insert {
            if budget == 0 {
                *l = ActionLabel::Copy;
            } else {
                budget -= 1;
            }
        }
    }
}

pub fn build_masked_input(state: &RefinementState, labels: &[ActionLabel]) -> Result<MaskedInput, InferenceError> {
    let x = state.x.ids();
    if labels.len() != x.len() {
        return Err(InferenceError::LabelLength);
    }
    let unshifted = masked_sequence(x, labels);
    let mut next_protected = Vec::with_capacity(unshifted.len());
    for (&p, &l) in state.protected.iter().zip(labels) {
        match l {
            ActionLabel::Copy => next_protected.push(p),
            ActionLabel::Replace => next_protected.push(false),
            ActionLabel::Insert => {
                next_protected.push(false);
                next_protected.push(p);
            }
        }
    }
    let mask_positions = unshifted.iter().enumerate().filter(|(_, &t)| t == MASK).map(|(i, _)| i).collect();
    Ok(MaskedInput { ym: shift_right(&unshifted), unshifted, mask_positions, next_protected })
}

/// Repetition penalty on one logit row for the non-special tokens of `ym`.
pub fn apply_repetition_penalty(row: &mut [f64], ym: &[TokenId], theta: f64, mode: PenaltyMode) {
    if mode == PenaltyMode::Off {
        return;
    }
    let mut seen = vec![false; row.len()];
    for &t in ym {
        let t = t as usize;
        if t < row.len() && !is_special(t as TokenId) && !seen[t] {
            seen[t] = true;
            let h = &mut row[t];
            match mode {
                PenaltyMode::SignAware if *h <= 0.0 => *h *= theta,
                _ => *h /= theta,
            }
        }
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() }).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Ids sorted by descending probability, ties broken by the lower id.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

pub fn top_k_filter(probs: &[f64], k: usize) -> Vec<usize> {
    let mut r = ranked(probs);
    r.truncate(k.max(1));
    r
}

/// Smallest probability-sorted prefix whose cumulative mass reaches `p`.
pub fn top_p_filter(probs: &[f64], p: f64) -> Vec<usize> {
    let r = ranked(probs);
    let mut cum = 0.0;
    for (i, &id) in r.iter().enumerate() {
        cum += probs[id];
        if cum >= p {
            return r[..=i].to_vec();
        }
    }
    r.into_iter().filter(|&id| probs[id] > 0.0).collect()
}

/// Picks a token for one slot from its (already penalized) logits.
/// Returns the token and its -log p under the unfiltered distribution.
pub fn choose_token(logits: &[f64], strategy: Strategy, rng: &mut impl Rng) -> (TokenId, f64) {
    let probs = softmax(logits);
    let pick = match strategy {
        Strategy::Greedy => argmax(logits),
        Strategy::TopK(k) => sample(&probs, &top_k_filter(&probs, k), rng),
        Strategy::TopP(p) => sample(&probs, &top_p_filter(&probs, p), rng),
    };
    (pick as TokenId, -probs[pick].ln())
}

fn sample(probs: &[f64], support: &[usize], rng: &mut impl Rng) -> usize {
    if support.len() == 1 {
        return support[0];
    }
    match WeightedIndex::new(support.iter().map(|&i| probs[i])) {
        Ok(dist) => support[dist.sample(rng)],
        Err(_) => support[0],
    }
}

/// Fills every mask slot of `input` from a single decoder pass.
/// Returns the completed sequence and the summed -log p over the slots.
pub fn fill_masks<M: EditModel>(
    state: &mut RefinementState,
    input: &MaskedInput,
    memory: &M::Memory,
    model: &M,
    cfg: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<TokenId>, f64), InferenceError> {
    let v = model.vocab_size();
    let logits = model.decode(&input.ym, memory)?;
    state.decoder_passes += 1;
    let mut out = input.unshifted.clone();
    let mut nll = 0.0;
    for &t in &input.mask_positions {
        let mut row = logits[t * v..(t + 1) * v].to_vec();
        for (id, h) in row.iter_mut().enumerate() {
            if is_special(id as TokenId) {
                *h = f64::NEG_INFINITY;
            }
        }
        apply_repetition_penalty(&mut row, &input.ym, cfg.theta, cfg.penalty);
        let (tok, lp) = choose_token(&row, cfg.strategy, rng);
        out[t] = tok;
        nll += lp;
    }
    Ok((out, nll))
}

/// One refinement chain seeded with `chain_seed`.
pub fn refine_with_seed<M: EditModel>(keywords: &[TokenId], model: &M, cfg: &DecodeConfig, chain_seed: u64) -> Result<GenerationResult, InferenceError> {
    cfg.validate()?;
    let mut state = init_input(keywords)?;
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);
    let mut trajectory = vec![state.x.clone()];
    let mut decoder_nll = 0.0;
    let termination = loop {
        if state.r >= cfg.max_steps {
            break Termination::MaxSteps;
        }
        let (mut labels, memory) = predict_labels(&state, model)?;
        if labels.iter().all(|&l| l == ActionLabel::Copy) {
            break Termination::AllCopy;
        }
        limit_inserts(&mut labels, model.max_positions());
        let input = build_masked_input(&state, &labels)?;
        let (out, nll) = fill_masks(&mut state, &input, &memory, model, cfg, &mut rng)?;
        decoder_nll = nll;
        state.r += 1;
        let out = SentenceIds::new(out).expect("refinement keeps BOS/EOS and fills every mask with content");
        let fixed = out == state.x;
        state.prev_output = Some(out.clone());
        state.x = out;
        state.protected = input.next_protected;
        trajectory.push(state.x.clone());
        if fixed {
            break Termination::FixedPoint;
        }
    };
    Ok(GenerationResult {
        sentence: state.x,
        steps: state.r,
        decoder_passes: state.decoder_passes,
        nll: None,
        termination,
        trajectory,
        decoder_nll,
        chain: 0,
    })
}

pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    seed::derive(seed, chain as u64)
}

/// Single chain with the seed of chain 0, so `refine` equals `generate_ranked` at N=1.
pub fn refine<M: EditModel>(keywords: &[TokenId], model: &M, cfg: &DecodeConfig) -> Result<GenerationResult, InferenceError> {
    refine_with_seed(keywords, model, cfg, chain_seed(cfg.seed, 0))
}

/// Runs one chain per seed and returns the lowest-NLL result (ties go to
/// the lowest chain index).
pub fn generate_with_seeds<M: EditModel>(
    keywords: &[TokenId],
    model: &M,
    cfg: &DecodeConfig,
    lm: Option<&LanguageModel<f32>>,
    seeds: &[u64],
) -> Result<GenerationResult, InferenceError> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(InferenceError::InvalidConfig("at least one chain is required".into()));
    }
    if cfg.ranker == Ranker::LmNll && lm.is_none() {
        return Err(InferenceError::MissingLm);
    }
    let results: Vec<GenerationResult> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut r = refine_with_seed(keywords, model, cfg, s)?;
            r.chain = i;
            r.nll = Some(match (cfg.ranker, lm) {
                (Ranker::LmNll, Some(lm)) => lm.nll(r.sentence.ids())?,
                _ => r.decoder_nll,
            });
            Ok(r)
        })
        .collect::<Result<_, InferenceError>>()?;
    let score = |r: &GenerationResult| r.nll.filter(|v| !v.is_nan()).unwrap_or(f64::INFINITY);
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if score(r) < score(&results[best]) {
            best = i;
        }
    }
    Ok(results.into_iter().nth(best).expect("non-empty"))
}

pub fn generate_ranked<M: EditModel>(
    keywords: &[TokenId],
    model: &M,
    cfg: &DecodeConfig,
    lm: Option<&LanguageModel<f32>>,
) -> Result<GenerationResult, InferenceError> {
    let seeds: Vec<u64> = (0..cfg.num_sequences).map(|i| chain_seed(cfg.seed, i)).collect();
    generate_with_seeds(keywords, model, cfg, lm, &seeds)
}

/// True when `needle` occurs in `hay` as an order-preserving subsequence.
pub fn is_subsequence(needle: &[TokenId], hay: &[TokenId]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}
