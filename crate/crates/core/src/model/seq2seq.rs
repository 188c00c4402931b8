use rayon::prelude::*;

use super::blocks::{CrossBlockCache, CrossBlockIds, SelfBlockCache, SelfBlockIds};
use super::ops::{self, Dropout, Init, LayerNormCache, LayerNormIds, LinearIds};
use super::tensor::{ParamSet, Scalar, Tensor};
use super::{ModelConfig, ModelError, Objective};
use crate::seed;
use crate::synthesis::{ActionLabel, TrainingInstance};
use crate::text::{TokenId, PAD};

/// Right-padded id matrix; row `r` is valid on `0..lengths[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    ids: Vec<TokenId>,
    rows: usize,
    cols: usize,
    lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_sequences<S: AsRef<[TokenId]>>(seqs: &[S]) -> Self {
        let cols = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        Self::with_width(seqs, cols)
    }

    /// Pads to at least `cols` columns.
    pub fn with_width<S: AsRef<[TokenId]>>(seqs: &[S], cols: usize) -> Self {
        let cols = cols.max(seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0));
        let mut ids = vec![PAD; seqs.len() * cols];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (r, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            ids[r * cols..r * cols + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        Self { ids, rows: seqs.len(), cols, lengths }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Valid (unpadded) part of row `r`.
    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.cols..r * self.cols + self.lengths[r]]
    }

    /// `true` at real positions, `false` at padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.rows * self.cols).map(|i| i % self.cols < self.lengths[i / self.cols]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_encoder: f64,
    pub l_decoder: f64,
    pub l_total: f64,
}

/// Encoder result for one sequence.
#[derive(Debug, Clone)]
pub struct EncodedSequence<T> {
    /// `n x d_model`, post final layer norm.
    pub hidden: Vec<T>,
    /// `n x 3` over `{Copy, Replace, Insert}`.
    pub label_logits: Vec<T>,
    pub len: usize,
}

impl<T: Scalar> EncodedSequence<T> {
    pub fn label_row(&self, t: usize) -> [T; 3] {
        [self.label_logits[3 * t], self.label_logits[3 * t + 1], self.label_logits[3 * t + 2]]
    }
}

pub struct EncoderOutput<T> {
    /// `batch x n x d_model`, zero at pad positions.
    pub hidden: Tensor<T>,
    /// `batch x n x 3`, zero at pad positions.
    pub label_logits: Tensor<T>,
    sequences: Vec<EncodedSequence<T>>,
}

impl<T> EncoderOutput<T> {
    pub fn sequence(&self, r: usize) -> &EncodedSequence<T> {
        &self.sequences[r]
    }
}

pub struct DecoderOutput<T> {
    /// `batch x m x vocab_size`, zero at pad positions.
    pub token_logits: Tensor<T>,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    enc_pos: usize,
    enc_blocks: Vec<SelfBlockIds>,
    enc_ln: LayerNormIds,
    cls: LinearIds,
    dec_pos: usize,
    dec_blocks: Vec<CrossBlockIds>,
    dec_ln: LayerNormIds,
}

impl Layout {
    fn build<T: Scalar>(cfg: &ModelConfig, init: &mut Init) -> (Self, ParamSet<T>) {
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let mut p = ParamSet::new();
        let tok_emb = p.push("tok_emb", init.normal(&[v, d]));
        let enc_pos = p.push("enc.pos", init.normal(&[cfg.max_positions, d]));
        let enc_blocks = (0..cfg.n_layer)
            .map(|i| SelfBlockIds::register(&mut p, &format!("enc.layers.{i}"), d, cfg.d_ff, init))
            .collect();
        let enc_ln = LayerNormIds::register(&mut p, "enc.ln_f", d, init);
        let cls = LinearIds::register(&mut p, "cls", d, 3, init);
        let dec_pos = p.push("dec.pos", init.normal(&[cfg.max_positions, d]));
        let dec_blocks = (0..cfg.n_layer)
            .map(|i| CrossBlockIds::register(&mut p, &format!("dec.layers.{i}"), d, cfg.d_ff, init))
            .collect();
        let dec_ln = LayerNormIds::register(&mut p, "dec.ln_f", d, init);
        (Self { tok_emb, enc_pos, enc_blocks, enc_ln, cls, dec_pos, dec_blocks, dec_ln }, p)
    }
}

pub(super) fn embed<T: Scalar>(p: &ParamSet<T>, tok: usize, pos: usize, ids: &[TokenId], d: usize) -> Vec<T> {
    let e = p.data(tok);
    let pe = p.data(pos);
    let mut h = vec![T::zero(); ids.len() * d];
    for (t, &id) in ids.iter().enumerate() {
        let row = &mut h[t * d..(t + 1) * d];
        let er = &e[id as usize * d..(id as usize + 1) * d];
        let pr = &pe[t * d..(t + 1) * d];
        for c in 0..d {
            row[c] = er[c] + pr[c];
        }
    }
    h
}

pub(super) fn embed_backward<T: Scalar>(g: &mut ParamSet<T>, tok: usize, pos: usize, ids: &[TokenId], dh: &[T], d: usize) {
    {
        let ge = g.data_mut(tok);
        for (t, &id) in ids.iter().enumerate() {
            ops::add_in_place(&mut ge[id as usize * d..(id as usize + 1) * d], &dh[t * d..(t + 1) * d]);
        }
    }
    let gp = g.data_mut(pos);
    ops::add_in_place(&mut gp[..dh.len()], dh);
}

pub(super) fn check_ids(ids: &[TokenId], vocab: usize, max: usize) -> Result<(), ModelError> {
    if ids.len() > max {
        return Err(ModelError::LengthOverflow { len: ids.len(), max });
    }
    match ids.iter().find(|&&id| id as usize >= vocab) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

struct EncoderCache<T> {
    ids: Vec<TokenId>,
    drop0: Option<Vec<T>>,
    blocks: Vec<SelfBlockCache<T>>,
    ln: LayerNormCache<T>,
    hidden: Vec<T>,
}

struct DecoderCache<T> {
    ids: Vec<TokenId>,
    drop0: Option<Vec<T>>,
    blocks: Vec<CrossBlockCache<T>>,
    ln: LayerNormCache<T>,
    hidden: Vec<T>,
}

struct InstanceTrace<T> {
    enc: EncoderCache<T>,
    dec: DecoderCache<T>,
    label_probs: Vec<T>,
    token_probs: Vec<T>,
    labels: Vec<ActionLabel>,
    targets: Vec<TokenId>,
    scored: Vec<bool>,
}

/// Activations of one batch, kept for a single backward pass.
pub struct BatchTrace<T> {
    instances: Vec<InstanceTrace<T>>,
    enc_count: usize,
    dec_count: usize,
    consumed: bool,
}

impl<T> BatchTrace<T> {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Number of scored (encoder, decoder) positions in the batch.
    pub fn counts(&self) -> (usize, usize) {
        (self.enc_count, self.dec_count)
    }
}

/// The edit-planning encoder-decoder.
#[derive(Debug, Clone)]
pub struct Seq2Seq<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Scalar> Seq2Seq<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init::new(seed, config.init_std);
        let (layout, params) = Layout::build(&config, &mut init);
        Ok(Self { config, params, layout })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        let mut m = Self::new(config, 0)?;
        m.params.fill(T::zero());
        Ok(m)
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        let reference = Self::new(config, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(ModelError::LayoutMismatch(
                "parameter names or shapes do not match the model config".into(),
            ));
        }
        Ok(Self { config: reference.config, params, layout: reference.layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn set_causal_mask(&mut self, on: bool) {
        self.config.causal_mask = on;
    }

    fn run_encoder(&self, ids: &[TokenId], drop: &mut Dropout) -> (Vec<T>, EncoderCache<T>) {
        let (d, heads) = (self.config.d_model, self.config.n_head);
        let p = &self.params;
        let mut h = embed(p, self.layout.tok_emb, self.layout.enc_pos, ids, d);
        let drop0 = drop.mask(h.len());
        ops::apply_mask(&mut h, &drop0);
        let blocks = self
            .layout
            .enc_blocks
            .iter()
            .map(|b| b.forward(p, &mut h, d, heads, false, drop))
            .collect();
        let (hidden, ln) = self.layout.enc_ln.forward(p, &h, d);
        let logits = self.layout.cls.forward(p, &hidden, ids.len());
        (logits, EncoderCache { ids: ids.to_vec(), drop0, blocks, ln, hidden })
    }

    fn back_encoder(&self, g: &mut ParamSet<T>, c: &EncoderCache<T>, mut dhidden: Vec<T>, dlogits: &[T]) {
        let (d, heads) = (self.config.d_model, self.config.n_head);
        let p = &self.params;
        ops::add_in_place(&mut dhidden, &self.layout.cls.backward(p, g, &c.hidden, dlogits, c.ids.len()));
        let mut dh = self.layout.enc_ln.backward(p, g, &c.ln, &dhidden, d);
        for (b, bc) in self.layout.enc_blocks.iter().zip(&c.blocks).rev() {
            b.backward(p, g, bc, &mut dh, d, heads);
        }
        ops::apply_mask(&mut dh, &c.drop0);
        embed_backward(g, self.layout.tok_emb, self.layout.enc_pos, &c.ids, &dh, d);
    }

    fn run_decoder(&self, ids: &[TokenId], memory: &[T], drop: &mut Dropout) -> (Vec<T>, DecoderCache<T>) {
        let (d, heads, v) = (self.config.d_model, self.config.n_head, self.config.vocab_size);
        let p = &self.params;
        let mut h = embed(p, self.layout.tok_emb, self.layout.dec_pos, ids, d);
        let drop0 = drop.mask(h.len());
        ops::apply_mask(&mut h, &drop0);
        let causal = self.config.causal_mask;
        let blocks = self
            .layout
            .dec_blocks
            .iter()
            .map(|b| b.forward(p, &mut h, memory, d, heads, causal, drop))
            .collect();
        let (hidden, ln) = self.layout.dec_ln.forward(p, &h, d);
        let logits = ops::matmul_nt(&hidden, p.data(self.layout.tok_emb), ids.len(), d, v);
        (logits, DecoderCache { ids: ids.to_vec(), drop0, blocks, ln, hidden })
    }

    /// Returns the gradient w.r.t. the encoder memory.
    fn back_decoder(&self, g: &mut ParamSet<T>, c: &DecoderCache<T>, dlogits: &[T], mem_len: usize) -> Vec<T> {
        let (d, heads, v) = (self.config.d_model, self.config.n_head, self.config.vocab_size);
        let p = &self.params;
        let m = c.ids.len();
        let emb = self.layout.tok_emb;
        ops::matmul_tn_acc(dlogits, &c.hidden, m, v, d, g.data_mut(emb));
        let dhidden = ops::matmul(dlogits, p.data(emb), m, v, d);
        let mut dh = self.layout.dec_ln.backward(p, g, &c.ln, &dhidden, d);
        let mut dmem = vec![T::zero(); mem_len * d];
        for (b, bc) in self.layout.dec_blocks.iter().zip(&c.blocks).rev() {
            b.backward(p, g, bc, &mut dh, &mut dmem, d, heads);
        }
        ops::apply_mask(&mut dh, &c.drop0);
        embed_backward(g, emb, self.layout.dec_pos, &c.ids, &dh, d);
        dmem
    }

    fn check(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        check_ids(ids, self.config.vocab_size, self.config.max_positions)
    }

    /// Encodes a single unpadded sequence (no dropout).
    pub fn encode_sequence(&self, ids: &[TokenId]) -> Result<EncodedSequence<T>, ModelError> {
        self.check(ids)?;
        let (label_logits, cache) = self.run_encoder(ids, &mut Dropout::disabled());
        Ok(EncodedSequence { hidden: cache.hidden, label_logits, len: ids.len() })
    }

    /// Decoder logits (`m x vocab_size`) for one unpadded decoder input.
    pub fn decode_sequence(&self, ym: &[TokenId], enc: &EncodedSequence<T>) -> Result<Vec<T>, ModelError> {
        self.check(ym)?;
        Ok(self.run_decoder(ym, &enc.hidden, &mut Dropout::disabled()).0)
    }

    /// Bidirectional encoding of a padded batch. Rows are processed
    /// independently, so padding never influences real positions.
    pub fn encoder_forward(&self, batch: &PaddedBatch) -> Result<EncoderOutput<T>, ModelError> {
        let (n, d) = (batch.cols(), self.config.d_model);
        let sequences: Vec<EncodedSequence<T>> = (0..batch.rows())
            .into_par_iter()
            .map(|r| self.encode_sequence(batch.row(r)))
            .collect::<Result<_, _>>()?;
        let mut hidden = Tensor::zeros(&[batch.rows(), n, d]);
        let mut label_logits = Tensor::zeros(&[batch.rows(), n, 3]);
        for (r, s) in sequences.iter().enumerate() {
            hidden.data[r * n * d..r * n * d + s.len * d].copy_from_slice(&s.hidden);
            label_logits.data[r * n * 3..r * n * 3 + s.len * 3].copy_from_slice(&s.label_logits);
        }
        Ok(EncoderOutput { hidden, label_logits, sequences })
    }

    /// Decoder logits for a padded batch of decoder inputs; row `r` attends
    /// to row `r` of `enc`.
    pub fn decoder_forward(&self, ym: &PaddedBatch, enc: &EncoderOutput<T>) -> Result<DecoderOutput<T>, ModelError> {
        if ym.rows() != enc.sequences.len() {
            return Err(ModelError::LayoutMismatch("decoder and encoder batch sizes differ".into()));
        }
        let (m, v) = (ym.cols(), self.config.vocab_size);
        let rows: Vec<Vec<T>> = (0..ym.rows())
            .into_par_iter()
            .map(|r| self.decode_sequence(ym.row(r), &enc.sequences[r]))
            .collect::<Result<_, _>>()?;
        let mut token_logits = Tensor::zeros(&[ym.rows(), m, v]);
        for (r, l) in rows.iter().enumerate() {
            token_logits.data[r * m * v..r * m * v + l.len()].copy_from_slice(l);
        }
        Ok(DecoderOutput { token_logits })
    }

    fn scored_positions(&self, inst: &TrainingInstance) -> Vec<bool> {
        match self.config.objective {
            Objective::Lm => vec![true; inst.y.len()],
            Objective::Mlm => {
                let mut s = vec![false; inst.y.len()];
                for t in inst.mask_slots() {
                    s[t] = true;
                }
                s
            }
        }
    }

    /// Joint loss `L_enc + alpha * L_dec` over a batch, averaged over
    /// scored positions. `dropout_seed = None` runs in evaluation mode.
    pub fn compute_loss(
        &self,
        batch: &[TrainingInstance],
        dropout_seed: Option<u64>,
    ) -> Result<(LossBreakdown, BatchTrace<T>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let v = self.config.vocab_size;
        let results: Vec<(InstanceTrace<T>, f64, f64)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, inst)| {
                self.check(&inst.x)?;
                self.check(&inst.ym)?;
                if inst.ym.len() != inst.y.len() || inst.x.len() != inst.l.len() {
                    return Err(ModelError::LayoutMismatch("instance lengths inconsistent".into()));
                }
                check_ids(&inst.y, v, usize::MAX)?;
                let mut drop = match dropout_seed {
                    Some(s) => Dropout::new(self.config.dropout, seed::derive(s, i as u64)),
                    None => Dropout::disabled(),
                };
                let (mut label_probs, enc) = self.run_encoder(&inst.x, &mut drop);
                let mut enc_nll = 0.0;
                for (row, &l) in label_probs.chunks_exact(3).zip(&inst.l) {
                    enc_nll -= ops::log_softmax_at(row, l.index());
                }
                label_probs.chunks_exact_mut(3).for_each(ops::softmax_in_place);
                let (mut token_probs, dec) = self.run_decoder(&inst.ym, &enc.hidden, &mut drop);
                let scored = self.scored_positions(inst);
                let mut dec_nll = 0.0;
                for ((row, &y), &s) in token_probs.chunks_exact(v).zip(&inst.y).zip(&scored) {
                    if s {
                        dec_nll -= ops::log_softmax_at(row, y as usize);
                    }
                }
                token_probs.chunks_exact_mut(v).for_each(ops::softmax_in_place);
                let trace = InstanceTrace {
                    enc,
                    dec,
                    label_probs,
                    token_probs,
                    labels: inst.l.clone(),
                    targets: inst.y.clone(),
                    scored,
                };
                Ok((trace, enc_nll, dec_nll))
            })
            .collect::<Result<_, ModelError>>()?;
        let enc_count: usize = results.iter().map(|r| r.0.labels.len()).sum();
        let dec_count: usize = results.iter().map(|r| r.0.scored.iter().filter(|&&s| s).count()).sum();
        let enc_sum: f64 = results.iter().map(|r| r.1).sum();
        let dec_sum: f64 = results.iter().map(|r| r.2).sum();
        let l_encoder = enc_sum / enc_count as f64;
        let l_decoder = if dec_count == 0 { 0.0 } else { dec_sum / dec_count as f64 };
        let loss = LossBreakdown { l_encoder, l_decoder, l_total: l_encoder + self.config.alpha * l_decoder };
        let trace = BatchTrace {
            instances: results.into_iter().map(|r| r.0).collect(),
            enc_count,
            dec_count,
            consumed: false,
        };
        Ok((loss, trace))
    }

    /// Exact gradient of `l_total` for the batch held in `trace`.
    /// Per-instance gradients are reduced in batch order.
    pub fn backward(&self, _loss: &LossBreakdown, trace: &mut BatchTrace<T>) -> Result<ParamSet<T>, ModelError> {
        if trace.consumed {
            return Err(ModelError::TraceConsumed);
        }
        trace.consumed = true;
        let v = self.config.vocab_size;
        let enc_scale = T::of(1.0 / trace.enc_count as f64);
        let dec_scale = if trace.dec_count == 0 {
            T::zero()
        } else {
            T::of(self.config.alpha / trace.dec_count as f64)
        };
        let instances = std::mem::take(&mut trace.instances);
        let per_instance: Vec<ParamSet<T>> = instances
            .into_par_iter()
            .map(|it| {
                let mut g = self.params.zeros_like();
                let mut dtok = it.token_probs;
                for (t, row) in dtok.chunks_exact_mut(v).enumerate() {
                    if it.scored[t] {
                        row[it.targets[t] as usize] -= T::one();
                        row.iter_mut().for_each(|x| *x *= dec_scale);
                    } else {
                        row.iter_mut().for_each(|x| *x = T::zero());
                    }
                }
                let dmem = self.back_decoder(&mut g, &it.dec, &dtok, it.enc.ids.len());
                let mut dlab = it.label_probs;
                for (row, &l) in dlab.chunks_exact_mut(3).zip(&it.labels) {
                    row[l.index()] -= T::one();
                    row.iter_mut().for_each(|x| *x *= enc_scale);
                }
                self.back_encoder(&mut g, &it.enc, dmem, &dlab);
                g
            })
            .collect();
        let mut iter = per_instance.into_iter();
        let mut total = iter.next().ok_or(ModelError::EmptyBatch)?;
        for g in iter {
            total.add_assign(&g);
        }
        Ok(total)
    }

    pub fn loss_and_grad(
        &self,
        batch: &[TrainingInstance],
        dropout_seed: Option<u64>,
    ) -> Result<(LossBreakdown, ParamSet<T>), ModelError> {
        let (loss, mut trace) = self.compute_loss(batch, dropout_seed)?;
        let g = self.backward(&loss, &mut trace)?;
        Ok((loss, g))
    }
}
