use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{merge_heads, split_heads, Linear};
use crate::numerics::{Init, ParamStore, Tape, Var};

/// Linear-cost attention `ρ_q(Q) (ρ_k(K)ᵀ V)` per head.
///
/// `ρ_q` is a softmax over the features of each query row and `ρ_k` a
/// softmax over the sequence for each key feature. `q [B, Nq, d]`,
/// `k [B, Nk, d]`, `v [B, Nk, dv]`; `key_keep [B * Nk]` excludes padded keys.
/// Returns the concatenated heads `[B, Nq, dv]`, before any output
/// projection.
pub fn efficient_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_keep: Option<&[bool]>,
) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(Error::shape("efficient_attention", &sq, &sk));
    }
    if sq[0] != sk[0] || sk[0] != sv[0] || sq[2] != sk[2] || sk[1] != sv[1] {
        return Err(Error::shape("efficient_attention", &sq, &sv));
    }
    if heads == 0 || sq[2] % heads != 0 || sv[2] % heads != 0 {
        return Err(Error::Config(format!(
            "attention widths {} / {} not divisible by {heads} heads",
            sq[2], sv[2]
        )));
    }
    let (b, nk, dh) = (sk[0], sk[1], sk[2] / heads);
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let rq = tape.softmax(qh, 2)?;
    let mask = key_keep.map(|keep| {
        let mut m = Vec::with_capacity(b * heads * nk * dh);
        for bi in 0..b {
            for _ in 0..heads {
                for j in 0..nk {
                    m.extend(std::iter::repeat_n(keep[bi * nk + j], dh));
                }
            }
        }
        m
    });
    let rk = tape.softmax_masked(kh, 1, mask.as_deref())?;
    let context = tape.bmm(rk, vh, true, false)?; // [B*H, dh, dv_h]
    let out = tape.bmm(rq, context, false, false)?;
    merge_heads(tape, out, heads)
}

/// Projections around [`efficient_attention`]. The output projection starts
/// at zero so a fresh block contributes nothing to its residual.
#[derive(Debug, Clone)]
pub struct EfficientAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl EfficientAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_kv: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, Init::Xavier, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_kv, d, Init::Xavier, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_kv, d, Init::Xavier, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, Init::Zeros, rng)?,
            heads,
        })
    }

    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        x: Var,
        context: Var,
        key_keep: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let a = efficient_attention(tape, q, k, v, self.heads, key_keep)?;
        self.o.forward(tape, store, a)
    }
}
