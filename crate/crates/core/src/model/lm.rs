//! Decoder-only autoregressive language model: the decoder stack without
//! cross-attention, always causally masked. Used to rank candidates.

use rayon::prelude::*;

use super::blocks::{SelfBlockCache, SelfBlockIds};
use super::ops::{self, Dropout, Init, LayerNormCache, LayerNormIds};
use super::seq2seq::{check_ids, embed, embed_backward};
use super::tensor::{ParamSet, Scalar};
use super::{ModelConfig, ModelError};
use crate::seed;
use crate::text::TokenId;

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    pos: usize,
    blocks: Vec<SelfBlockIds>,
    ln: LayerNormIds,
}

struct Trace<T> {
    ids: Vec<TokenId>,
    targets: Vec<TokenId>,
    drop0: Option<Vec<T>>,
    blocks: Vec<SelfBlockCache<T>>,
    ln: LayerNormCache<T>,
    hidden: Vec<T>,
    probs: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LanguageModel<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init::new(seed, config.init_std);
        let (d, v) = (config.d_model, config.vocab_size);
        let mut p = ParamSet::new();
        let tok_emb = p.push("lm.tok_emb", init.normal(&[v, d]));
        let pos = p.push("lm.pos", init.normal(&[config.max_positions, d]));
        let blocks = (0..config.n_layer)
            .map(|i| SelfBlockIds::register(&mut p, &format!("lm.layers.{i}"), d, config.d_ff, &mut init))
            .collect();
        let ln = LayerNormIds::register(&mut p, "lm.ln_f", d, &mut init);
        Ok(Self { config, params: p, layout: Layout { tok_emb, pos, blocks, ln } })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        let mut m = Self::new(config, 0)?;
        if !m.params.same_layout(&params) {
            return Err(ModelError::LayoutMismatch("language model parameters do not match config".into()));
        }
        m.params = params;
        Ok(m)
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

    fn forward(&self, sentence: &[TokenId], drop: &mut Dropout) -> Result<(Vec<T>, Trace<T>), ModelError> {
        if sentence.len() < 2 {
            return Err(ModelError::TooShort(2));
        }
        let ids = &sentence[..sentence.len() - 1];
        check_ids(ids, self.config.vocab_size, self.config.max_positions)?;
        check_ids(sentence, self.config.vocab_size, usize::MAX)?;
        let (d, heads, v) = (self.config.d_model, self.config.n_head, self.config.vocab_size);
        let p = &self.params;
        let mut h = embed(p, self.layout.tok_emb, self.layout.pos, ids, d);
        let drop0 = drop.mask(h.len());
        ops::apply_mask(&mut h, &drop0);
        let blocks = self.layout.blocks.iter().map(|b| b.forward(p, &mut h, d, heads, true, drop)).collect();
        let (hidden, ln) = self.layout.ln.forward(p, &h, d);
        let logits = ops::matmul_nt(&hidden, p.data(self.layout.tok_emb), ids.len(), d, v);
        let trace = Trace {
            ids: ids.to_vec(),
            targets: sentence[1..].to_vec(),
            drop0,
            blocks,
            ln,
            hidden,
            probs: Vec::new(),
        };
        Ok((logits, trace))
    }

    /// Next-token logits for every prefix of `sentence[..n-1]`.
    pub fn logits(&self, sentence: &[TokenId]) -> Result<Vec<T>, ModelError> {
        Ok(self.forward(sentence, &mut Dropout::disabled())?.0)
    }

    /// Total negative log-likelihood of `sentence[1..]` given its prefixes.
    pub fn nll(&self, sentence: &[TokenId]) -> Result<f64, ModelError> {
        let logits = self.logits(sentence)?;
        let v = self.config.vocab_size;
        Ok(logits
            .chunks_exact(v)
            .zip(&sentence[1..])
            .map(|(row, &y)| -ops::log_softmax_at(row, y as usize))
            .sum())
    }

    /// Mean per-token NLL over a batch and its exact gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[Vec<TokenId>],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, ParamSet<T>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let v = self.config.vocab_size;
        let traces: Vec<(Trace<T>, f64)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut drop = match dropout_seed {
                    Some(sd) => Dropout::new(self.config.dropout, seed::derive(sd, i as u64)),
                    None => Dropout::disabled(),
                };
                let (mut logits, mut tr) = self.forward(s, &mut drop)?;
                let mut nll = 0.0;
                for (row, &y) in logits.chunks_exact(v).zip(&tr.targets) {
                    nll -= ops::log_softmax_at(row, y as usize);
                }
                logits.chunks_exact_mut(v).for_each(ops::softmax_in_place);
                tr.probs = logits;
                Ok((tr, nll))
            })
            .collect::<Result<_, ModelError>>()?;
        let count: usize = traces.iter().map(|t| t.0.targets.len()).sum();
        let loss = traces.iter().map(|t| t.1).sum::<f64>() / count as f64;
        let scale = T::of(1.0 / count as f64);
        let (d, heads) = (self.config.d_model, self.config.n_head);
        let grads: Vec<ParamSet<T>> = traces
            .into_par_iter()
            .map(|(tr, _)| {
                let p = &self.params;
                let mut g = p.zeros_like();
                let mut dl = tr.probs;
                for (row, &y) in dl.chunks_exact_mut(v).zip(&tr.targets) {
                    row[y as usize] -= T::one();
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                let m = tr.ids.len();
                let emb = self.layout.tok_emb;
                ops::matmul_tn_acc(&dl, &tr.hidden, m, v, d, g.data_mut(emb));
                let dhidden = ops::matmul(&dl, p.data(emb), m, v, d);
                let mut dh = self.layout.ln.backward(p, &mut g, &tr.ln, &dhidden, d);
                for (b, bc) in self.layout.blocks.iter().zip(&tr.blocks).rev() {
                    b.backward(p, &mut g, bc, &mut dh, d, heads);
                }
                ops::apply_mask(&mut dh, &tr.drop0);
                embed_backward(&mut g, emb, self.layout.pos, &tr.ids, &dh, d);
                g
            })
            .collect();
        let mut it = grads.into_iter();
        let mut total = it.next().ok_or(ModelError::EmptyBatch)?;
        for g in it {
            total.add_assign(&g);
        }
        Ok((loss, total))
    }
}
