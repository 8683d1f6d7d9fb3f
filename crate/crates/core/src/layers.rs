//! Parameterized building blocks shared by the denoiser and the classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Init, ParamId, ParamStore, Tape, Tensor, Var};

/// Per-row affine map `x · W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), &[n_in, n_out], init, rng)?;
        let b = store.add(format!("{name}.bias"), &[n_out], Init::Zeros, rng)?;
        Ok(Self { w, b, n_in, n_out })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, Some(b))
    }

    pub fn num_scalars(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, n: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), &[n], Init::Ones, rng)?,
            beta: store.add(format!("{name}.beta"), &[n], Init::Zeros, rng)?,
        })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Sinusoidal table `[n, d]`: `sin(pos / 10000^(2i/d))` at even columns and
/// the matching cosine at odd columns, for positions `offset..offset + n`.
pub fn sinusoidal_table(n: usize, d: usize, offset: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal width must be even, got {d}")));
    }
    if n == 0 {
        return Err(Error::Config("sinusoidal table needs at least one row".into()));
    }
    Ok(Tensor::from_fn(&[n, d], |idx| {
        let pos = (offset + idx / d) as f64;
        let col = idx % d;
        let freq = 10000f64.powf((col - col % 2) as f64 / d as f64);
        if col % 2 == 0 {
            (pos / freq).sin()
        } else {
            (pos / freq).cos()
        }
    }))
}

/// `[B, N, H * dh]` → `[B * H, N, dh]`.
pub fn split_heads(tape: &mut Tape<'_>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(Error::Config(format!("width of {s:?} not divisible into {heads} heads")));
    }
    let (b, n, dh) = (s[0], s[1], s[2] / heads);
    let r = tape.reshape(x, &[b, n, heads, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b * heads, n, dh])
}

/// Inverse of [`split_heads`].
pub fn merge_heads(tape: &mut Tape<'_>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (bh, n, dh) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let r = tape.reshape(x, &[b, heads, n, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b, n, heads * dh])
}

/// Expand a `[B, N]` key mask to every `[B * H, rows, N]` score entry.
pub(crate) fn score_mask(keep: &[bool], batch: usize, heads: usize, rows: usize, keys: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * heads * rows * keys);
    for b in 0..batch {
        let row = &keep[b * keys..(b + 1) * keys];
        for _ in 0..heads * rows {
            out.extend_from_slice(row);
        }
    }
    out
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, Init::Xavier, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, Init::Xavier, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, Init::Xavier, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, Init::Xavier, rng)?,
            heads,
        })
    }

    /// Self-attention over `x [B, N, d]`; `keep [B * N]` marks real positions.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        x: Var,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let qh = split_heads(tape, q, self.heads)?;
        let kh = split_heads(tape, k, self.heads)?;
        let vh = split_heads(tape, v, self.heads)?;
        let scores = tape.bmm(qh, kh, false, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let mask = keep.map(|k| score_mask(k, b, self.heads, n, n));
        let attn = tape.softmax_masked(scores, 2, mask.as_deref())?;
        let ctx = tape.bmm(attn, vh, false, false)?;
        let merged = merge_heads(tape, ctx, self.heads)?;
        self.o.forward(tape, store, merged)
    }
}

/// Pre-norm transformer encoder layer with a GELU feed-forward block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: Norm,
    pub attn: MultiHeadAttention,
    pub ln_ff: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: Norm::new(store, &format!("{name}.ln_attn"), d, rng)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln_ff: Norm::new(store, &format!("{name}.ln_ff"), d, rng)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, 4 * d, Init::Xavier, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 4 * d, d, Init::Xavier, rng)?,
            dropout,
        })
    }

    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        x: Var,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, keep)?;
        let a = tape.dropout(a, self.dropout)?;
        let x = tape.add(x, a)?;
        let h = self.ln_ff.forward(tape, store, x)?;
        let f = self.ff_in.forward(tape, store, h)?;
        let f = tape.gelu(f);
        let f = tape.dropout(f, self.dropout)?;
        let f = self.ff_out.forward(tape, store, f)?;
        tape.add(x, f)
    }
}

/// Mean over the real positions of `x [B, N, d]` → `[B, d]`.
pub fn masked_mean_pool(tape: &mut Tape<'_>, x: Var, keep: Option<&[bool]>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let mut w = vec![0.0; b * n];
    for bi in 0..b {
        let real: Vec<bool> = (0..n).map(|j| keep.is_none_or(|k| k[bi * n + j])).collect();
        let count = real.iter().filter(|&&r| r).count().max(1) as f64;
        for j in 0..n {
            if real[j] {
                w[bi * n + j] = 1.0 / count;
            }
        }
    }
    let wv = tape.constant(Tensor::new(vec![b, 1, n], w)?);
    let pooled = tape.bmm(wv, x, false, false)?;
    tape.reshape(pooled, &[b, d])
}
