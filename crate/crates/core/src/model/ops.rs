//! Row-major kernels and the forward/backward pairs of the transformer
//! building blocks. All activations of one sequence are `rows x cols`
//! matrices stored as flat slices.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{ParamSet, Scalar};

const LN_EPS: f64 = 1e-5;

/// `a[m x k] * b[k x n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// `g[m x n] * b[k x n]^T`
pub fn matmul_nt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// In-place softmax over a row; `-inf` entries get probability 0.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax value at `target` for a row of logits.
pub fn log_softmax_at<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
    let lse = row.iter().map(|&v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[target].as_f64() - lse
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: usize,
    pub b: usize,
}

impl LinearIds {
    pub fn register<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: &mut Init,
    ) -> Self {
        let w = params.push(format!("{name}.w"), init.normal(&[fan_in, fan_out]));
        let b = params.push(format!("{name}.b"), init.zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn dims<T: Scalar>(&self, p: &ParamSet<T>) -> (usize, usize) {
        let s = &p.get(self.w).shape;
        (s[0], s[1])
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &[T], rows: usize) -> Vec<T> {
        let (din, dout) = self.dims(p);
        let mut y = matmul(x, p.data(self.w), rows, din, dout);
        let b = p.data(self.b);
        for r in y.chunks_exact_mut(dout) {
            for (v, &bv) in r.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        g: &mut ParamSet<T>,
        x: &[T],
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        let (din, dout) = self.dims(p);
        matmul_tn_acc(x, dy, rows, din, dout, g.data_mut(self.w));
        let gb = g.data_mut(self.b);
        for r in dy.chunks_exact(dout) {
            for (v, &d) in gb.iter_mut().zip(r) {
                *v += d;
            }
        }
        matmul_nt(dy, p.data(self.w), rows, dout, din)
    }
}

/// Parameter initializer: N(0, std) weights from a seeded generator.
pub struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    pub fn new(seed: u64, std: f64) -> Self {
        use rand::SeedableRng;
        Self { rng: ChaCha8Rng::seed_from_u64(seed), std }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize]) -> super::tensor::Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0, self.std).expect("valid std");
        let data = (0..n).map(|_| T::of(self.rng.sample(dist))).collect();
        super::tensor::Tensor::from_vec(shape, data)
    }

    pub fn zeros<T: Scalar>(&mut self, shape: &[usize]) -> super::tensor::Tensor<T> {
        super::tensor::Tensor::zeros(shape)
    }

    pub fn ones<T: Scalar>(&mut self, shape: &[usize]) -> super::tensor::Tensor<T> {
        super::tensor::Tensor::filled(shape, T::one())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormIds {
    pub gain: usize,
    pub bias: usize,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl LayerNormIds {
    pub fn register<T: Scalar>(params: &mut ParamSet<T>, name: &str, d: usize, init: &mut Init) -> Self {
        let gain = params.push(format!("{name}.g"), init.ones(&[d]));
        let bias = params.push(format!("{name}.b"), init.zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &[T], d: usize) -> (Vec<T>, LayerNormCache<T>) {
        let g = p.data(self.gain);
        let b = p.data(self.bias);
        let rows = x.len() / d;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::of(d as f64);
        let eps = T::of(LN_EPS);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (xr[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * g[c] + b[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        grads: &mut ParamSet<T>,
        cache: &LayerNormCache<T>,
        dy: &[T],
        d: usize,
    ) -> Vec<T> {
        let g = p.data(self.gain);
        let rows = dy.len() / d;
        {
            let gg = grads.data_mut(self.gain);
            for r in 0..rows {
                for c in 0..d {
                    gg[c] += dy[r * d + c] * cache.xhat[r * d + c];
                }
            }
        }
        {
            let gb = grads.data_mut(self.bias);
            for r in 0..rows {
                for c in 0..d {
                    gb[c] += dy[r * d + c];
                }
            }
        }
        let dn = T::of(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for c in 0..d {
                dxhat[c] = dy[r * d + c] * g[c];
                mean_d += dxhat[c];
                mean_dx += dxhat[c] * xh[c];
            }
            mean_d /= dn;
            mean_dx /= dn;
            for c in 0..d {
                dx[r * d + c] = cache.rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

pub struct AttentionCache<T> {
    xq: Vec<T>,
    /// `None` for self-attention (keys/values come from `xq`).
    xkv: Option<Vec<T>>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads x n x s`
    probs: Vec<T>,
    ctx: Vec<T>,
    n: usize,
    s: usize,
}

impl AttentionIds {
    pub fn register<T: Scalar>(params: &mut ParamSet<T>, name: &str, d: usize, init: &mut Init) -> Self {
        Self {
            q: LinearIds::register(params, &format!("{name}.q"), d, d, init),
            k: LinearIds::register(params, &format!("{name}.k"), d, d, init),
            v: LinearIds::register(params, &format!("{name}.v"), d, d, init),
            o: LinearIds::register(params, &format!("{name}.o"), d, d, init),
        }
    }

    /// Multi-head attention. `xkv = None` means self-attention over `xq`.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        xq: &[T],
        xkv: Option<&[T]>,
        d: usize,
        heads: usize,
        causal: bool,
    ) -> (Vec<T>, AttentionCache<T>) {
        let n = xq.len() / d;
        let kv_src = xkv.unwrap_or(xq);
        let s = kv_src.len() / d;
        let q = self.q.forward(p, xq, n);
        let k = self.k.forward(p, kv_src, s);
        let v = self.v.forward(p, kv_src, s);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * n * s];
        let mut ctx = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let row = &mut probs[(h * n + i) * s..(h * n + i + 1) * s];
                let qi = &q[i * d + off..i * d + off + dh];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = if causal && j > i {
                        T::neg_infinity()
                    } else {
                        dot(qi, &k[j * d + off..j * d + off + dh]) * scale
                    };
                }
                softmax_in_place(row);
                let ci = &mut ctx[i * d + off..i * d + off + dh];
                for (j, &pij) in row.iter().enumerate() {
                    if pij == T::zero() {
                        continue;
                    }
                    for (c, &vv) in ci.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *c += pij * vv;
                    }
                }
            }
        }
        let y = self.o.forward(p, &ctx, n);
        let cache = AttentionCache {
            xq: xq.to_vec(),
            xkv: xkv.map(<[T]>::to_vec),
            q,
            k,
            v,
            probs,
            ctx,
            n,
            s,
        };
        (y, cache)
    }

    /// Returns `(d_xq, d_xkv)`; for self-attention both contributions are
    /// summed into the first element and the second is `None`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        g: &mut ParamSet<T>,
        c: &AttentionCache<T>,
        dy: &[T],
        d: usize,
        heads: usize,
    ) -> (Vec<T>, Option<Vec<T>>) {
        let (n, s) = (c.n, c.s);
        let dctx = self.o.backward(p, g, &c.ctx, dy, n);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); s * d];
        let mut dv = vec![T::zero(); s * d];
        let mut dp = vec![T::zero(); s];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let pr = &c.probs[(h * n + i) * s..(h * n + i + 1) * s];
                let dci = &dctx[i * d + off..i * d + off + dh];
                let mut weighted = T::zero();
                for j in 0..s {
                    if pr[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    dp[j] = dot(dci, &c.v[j * d + off..j * d + off + dh]);
                    weighted += dp[j] * pr[j];
                    for (o, &dcv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(dci) {
                        *o += pr[j] * dcv;
                    }
                }
                let qi = &c.q[i * d + off..i * d + off + dh];
                for j in 0..s {
                    if pr[j] == T::zero() {
                        continue;
                    }
                    let ds = pr[j] * (dp[j] - weighted) * scale;
                    let kj = &c.k[j * d + off..j * d + off + dh];
                    for (o, &kv) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
        let mut dxq = self.q.backward(p, g, &c.xq, &dq, n);
        let kv_src = c.xkv.as_deref().unwrap_or(&c.xq);
        let dxk = self.k.backward(p, g, kv_src, &dk, s);
        let dxv = self.v.backward(p, g, kv_src, &dv, s);
        let mut dkv: Vec<T> = dxk;
        for (a, &b) in dkv.iter_mut().zip(&dxv) {
            *a += b;
        }
        if c.xkv.is_none() {
            for (a, &b) in dxq.iter_mut().zip(&dkv) {
                *a += b;
            }
            (dxq, None)
        } else {
            (dxq, Some(dkv))
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardIds {
    pub up: LinearIds,
    pub down: LinearIds,
}

pub struct FeedForwardCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

impl FeedForwardIds {
    pub fn register<T: Scalar>(params: &mut ParamSet<T>, name: &str, d: usize, d_ff: usize, init: &mut Init) -> Self {
        Self {
            up: LinearIds::register(params, &format!("{name}.up"), d, d_ff, init),
            down: LinearIds::register(params, &format!("{name}.down"), d_ff, d, init),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &[T], rows: usize) -> (Vec<T>, FeedForwardCache<T>) {
        let pre = self.up.forward(p, x, rows);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.down.forward(p, &act, rows);
        (y, FeedForwardCache { x: x.to_vec(), pre, act })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        g: &mut ParamSet<T>,
        c: &FeedForwardCache<T>,
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        let mut dact = self.down.backward(p, g, &c.act, dy, rows);
        for (da, &z) in dact.iter_mut().zip(&c.pre) {
            *da *= gelu_grad(z);
        }
        self.up.backward(p, g, &c.x, &dact, rows)
    }
}

/// Inverted dropout; `None` masks are the identity.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn new(p: f64, seed: u64) -> Self {
        use rand::SeedableRng;
        if p <= 0.0 {
            return Self::disabled();
        }
        Self { p, rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn mask<T: Scalar>(&mut self, len: usize) -> Option<Vec<T>> {
        let rng = self.rng.as_mut()?;
        let keep = T::of(1.0 / (1.0 - self.p));
        Some(
            (0..len)
                .map(|_| if rng.random::<f64>() < self.p { T::zero() } else { keep })
                .collect(),
        )
    }
}

pub fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

pub fn add_in_place<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
