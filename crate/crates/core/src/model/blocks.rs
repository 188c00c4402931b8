//! Pre-layer-norm transformer blocks.

use super::ops::{
    add_in_place, apply_mask, AttentionCache, AttentionIds, Dropout, FeedForwardCache, FeedForwardIds, Init,
    LayerNormCache, LayerNormIds,
};
use super::tensor::{ParamSet, Scalar};

/// Self-attention + feed-forward; used by the encoder (bidirectional) and
/// by the language model (causal).
#[derive(Debug, Clone, Copy)]
pub struct SelfBlockIds {
    ln1: LayerNormIds,
    attn: AttentionIds,
    ln2: LayerNormIds,
    ff: FeedForwardIds,
}

pub struct SelfBlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
    drop2: Option<Vec<T>>,
}

impl SelfBlockIds {
    pub fn register<T: Scalar>(p: &mut ParamSet<T>, name: &str, d: usize, d_ff: usize, init: &mut Init) -> Self {
        Self {
            ln1: LayerNormIds::register(p, &format!("{name}.ln1"), d, init),
            attn: AttentionIds::register(p, &format!("{name}.attn"), d, init),
            ln2: LayerNormIds::register(p, &format!("{name}.ln2"), d, init),
            ff: FeedForwardIds::register(p, &format!("{name}.ff"), d, d_ff, init),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        h: &mut [T],
        d: usize,
        heads: usize,
        causal: bool,
        drop: &mut Dropout,
    ) -> SelfBlockCache<T> {
        let rows = h.len() / d;
        let (a, ln1) = self.ln1.forward(p, h, d);
        let (mut att, attn) = self.attn.forward(p, &a, None, d, heads, causal);
        let drop1 = drop.mask(att.len());
        apply_mask(&mut att, &drop1);
        add_in_place(h, &att);
        let (b, ln2) = self.ln2.forward(p, h, d);
        let (mut f, ff) = self.ff.forward(p, &b, rows);
        let drop2 = drop.mask(f.len());
        apply_mask(&mut f, &drop2);
        add_in_place(h, &f);
        SelfBlockCache { ln1, attn, drop1, ln2, ff, drop2 }
    }

    /// `dh` holds the gradient w.r.t. the block output and is updated in place
    /// to the gradient w.r.t. the block input.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        g: &mut ParamSet<T>,
        c: &SelfBlockCache<T>,
        dh: &mut [T],
        d: usize,
        heads: usize,
    ) {
        let rows = dh.len() / d;
        let mut df = dh.to_vec();
        apply_mask(&mut df, &c.drop2);
        let db = self.ff.backward(p, g, &c.ff, &df, rows);
        add_in_place(dh, &self.ln2.backward(p, g, &c.ln2, &db, d));
        let mut datt = dh.to_vec();
        apply_mask(&mut datt, &c.drop1);
        let (da, _) = self.attn.backward(p, g, &c.attn, &datt, d, heads);
        add_in_place(dh, &self.ln1.backward(p, g, &c.ln1, &da, d));
    }
}

/// Masked self-attention, cross-attention over the encoder memory, feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct CrossBlockIds {
    ln1: LayerNormIds,
    self_attn: AttentionIds,
    ln2: LayerNormIds,
    cross_attn: AttentionIds,
    ln3: LayerNormIds,
    ff: FeedForwardIds,
}

pub struct CrossBlockCache<T> {
    ln1: LayerNormCache<T>,
    self_attn: AttentionCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    cross_attn: AttentionCache<T>,
    drop2: Option<Vec<T>>,
    ln3: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
    drop3: Option<Vec<T>>,
}

impl CrossBlockIds {
    pub fn register<T: Scalar>(p: &mut ParamSet<T>, name: &str, d: usize, d_ff: usize, init: &mut Init) -> Self {
        Self {
            ln1: LayerNormIds::register(p, &format!("{name}.ln1"), d, init),
            self_attn: AttentionIds::register(p, &format!("{name}.self_attn"), d, init),
            ln2: LayerNormIds::register(p, &format!("{name}.ln2"), d, init),
            cross_attn: AttentionIds::register(p, &format!("{name}.cross_attn"), d, init),
            ln3: LayerNormIds::register(p, &format!("{name}.ln3"), d, init),
            ff: FeedForwardIds::register(p, &format!("{name}.ff"), d, d_ff, init),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        h: &mut [T],
        memory: &[T],
        d: usize,
        heads: usize,
        causal: bool,
        drop: &mut Dropout,
    ) -> CrossBlockCache<T> {
        let rows = h.len() / d;
        let (a, ln1) = self.ln1.forward(p, h, d);
        let (mut sa, self_attn) = self.self_attn.forward(p, &a, None, d, heads, causal);
        let drop1 = drop.mask(sa.len());
        apply_mask(&mut sa, &drop1);
        add_in_place(h, &sa);
        let (b, ln2) = self.ln2.forward(p, h, d);
        let (mut ca, cross_attn) = self.cross_attn.forward(p, &b, Some(memory), d, heads, false);
        let drop2 = drop.mask(ca.len());
        apply_mask(&mut ca, &drop2);
        add_in_place(h, &ca);
        let (c, ln3) = self.ln3.forward(p, h, d);
        let (mut f, ff) = self.ff.forward(p, &c, rows);
        let drop3 = drop.mask(f.len());
        apply_mask(&mut f, &drop3);
        add_in_place(h, &f);
        CrossBlockCache { ln1, self_attn, drop1, ln2, cross_attn, drop2, ln3, ff, drop3 }
    }

    /// Like [`SelfBlockIds::backward`]; the memory gradient is accumulated
    /// into `dmemory`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        g: &mut ParamSet<T>,
        c: &CrossBlockCache<T>,
        dh: &mut [T],
        dmemory: &mut [T],
        d: usize,
        heads: usize,
    ) {
        let rows = dh.len() / d;
        let mut df = dh.to_vec();
        apply_mask(&mut df, &c.drop3);
        let dc = self.ff.backward(p, g, &c.ff, &df, rows);
        add_in_place(dh, &self.ln3.backward(p, g, &c.ln3, &dc, d));

        let mut dca = dh.to_vec();
        apply_mask(&mut dca, &c.drop2);
        let (db, dmem) = self.cross_attn.backward(p, g, &c.cross_attn, &dca, d, heads);
        add_in_place(dmemory, &dmem.expect("cross-attention has separate memory"));
        add_in_place(dh, &self.ln2.backward(p, g, &c.ln2, &db, d));

        let mut dsa = dh.to_vec();
        apply_mask(&mut dsa, &c.drop1);
        let (da, _) = self.self_attn.backward(p, g, &c.self_attn, &dsa, d, heads);
        add_in_place(dh, &self.ln1.backward(p, g, &c.ln1, &da, d));
    }
}
