//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and enough context to replay the chain rule. Calling
//! [`Tape::backward`] walks the nodes in reverse creation order. Tapes are
//! single-pass: build a fresh one per forward.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{axis_layout, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    Softmax {
        x: Var,
        layout: (usize, usize, usize),
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Narrow {
        x: Var,
        layout: (usize, usize, usize),
        start: usize,
        len: usize,
    },
    Expand {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        width: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Gradient of the loss with respect to a leaf created with
    /// [`Tape::input`] or [`Tape::param`]. `None` when the leaf does not
    /// require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Operation recorder. Parameters are borrowed from their store for the
/// lifetime `'p`, so a forward pass never copies weights.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Tape in training mode: [`Tape::dropout`] draws masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape node holds a valid tensor")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for inputs under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Leaf borrowing a parameter's value. Registering the same parameter
    /// twice returns the same node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.value(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(op, a, b)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    /// Matrix product. `a` is `[.., m, n]`; `b` is either `[n, p]` (shared
    /// across the leading dimensions of `a`) or `[B, n, p]` matching a
    /// rank-3 `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        match (self.shape(a).len(), self.shape(b).len()) {
            (ra, 2) if ra >= 2 => self.affine_impl("matmul", a, b, None),
            (2 | 3, 3) => self.bmm(a, b, false, false),
            _ => Err(Error::shape("matmul", self.shape(a), self.shape(b))),
        }
    }

    /// Batched matrix product `op(a) · op(b)` where `op` transposes the last
    /// two axes when the flag is set. Operands are rank 3 `[B, ., .]`, or
    /// rank 2 to broadcast one matrix over the batch.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("bmm", &sa, &sb);
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) || (sa.len() == 2 && sb.len() == 2) {
            return Err(err());
        }
        let a_batched = sa.len() == 3;
        let b_batched = sb.len() == 3;
        let batch = if a_batched { sa[0] } else { sb[0] };
        if a_batched && b_batched && sa[0] != sb[0] {
            return Err(err());
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for bi in 0..batch {
                let ao = if a_batched { bi * m * k } else { 0 };
                let bo = if b_batched { bi * k * n } else { 0 };
                gemm(m, k, n, &av[ao..ao + m * k], ta, &bv[bo..bo + k * n], tb, &mut out[bi * m * n..(bi + 1) * m * n], false);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::Bmm { a, b, ta, tb, batch, m, k, n, a_batched, b_batched },
            ng,
        ))
    }

    /// `x · w + b` along the last axis of `x`, batched over leading axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.affine_impl("affine", x, w, b)
    }

    fn affine_impl(&mut self, op: &'static str, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(Error::shape(op, &sx, &sw));
        }
        let (n_in, n_out) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(Error::shape(op, &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / n_in;
        let mut out = vec![0.0; rows * n_out];
        gemm(rows, n_in, n_out, self.value(x), false, self.value(w), false, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(n_out) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = n_out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(shape, out, Op::Affine { x, w, b, rows, n_in, n_out }, ng))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis` where entries with `keep[i] == false` are
    /// excluded and produce exactly zero. `keep` has the same length as `x`.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!("softmax axis {axis} invalid for shape {shape:?}")));
        }
        if let Some(k) = keep {
            if k.len() != self.value(x).len() {
                return Err(Error::InvalidShape(format!(
                    "softmax mask has {} entries for shape {shape:?}",
                    k.len()
                )));
            }
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let kept = |l: usize| keep.is_none_or(|k| k[idx(l)]);
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    if kept(l) {
                        max = max.max(xv[idx(l)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for l in 0..len {
                    if kept(l) {
                        let e = (xv[idx(l)] - max).exp();
                        out[idx(l)] = e;
                        sum += e;
                    }
                }
                for l in 0..len {
                    out[idx(l)] /= sum;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Softmax { x, layout: (outer, len, inner) }, ng))
    }

    /// Row-wise standardization over the last axis followed by `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::InvalidShape("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [n] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        if self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", &shape, self.shape(beta)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = gv[j] * h + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, n, xhat, rstd }, ng))
    }

    /// `x · Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * std_normal_cdf(v)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), ng))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape(format!("bad permutation {perm:?} for shape {shape:?}")));
        }
        let (out, out_shape) = permute_data(self.value(x), &shape, perm);
        let ng = self.ng(x);
        Ok(self.push(out_shape, out, Op::Permute { x, perm: perm.to_vec() }, ng))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::InvalidShape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape(format!("concat axis {axis} invalid for {base:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = axis_layout(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                out.extend_from_slice(&self.value(x)[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(shape, out, Op::Concat { xs: xs.to_vec(), outer, inner, lens }, ng))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape(format!(
                "narrow({axis}, {start}, {len}) out of bounds for {shape:?}"
            )));
        }
        let layout = axis_layout(&shape, axis);
        let (outer, full, inner) = layout;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&xv[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(out_shape, out, Op::Narrow { x, layout, start, len }, ng))
    }

    /// Insert a new axis of size `n` at `axis`, repeating `x` along it.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() || n == 0 {
            return Err(Error::InvalidShape(format!("expand axis {axis} invalid for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        let ng = self.ng(x);
        Ok(self.push(out_shape, out, Op::Expand { x, outer, n, inner }, ng))
    }

    /// Row lookup: `table` is `[V, d]`, output `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::InvalidShape(format!("gather from {s:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::InvalidShape(format!("row {bad} out of range for table {s:?}")));
        }
        let width = s[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![ids.len(), width], out, Op::Gather { table, ids: ids.to_vec(), width }, ng))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy of `logits [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / z;
            }
            loss -= row[y] - max - z.ln();
        }
        loss /= labels.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng))
    }

    /// Inverted dropout. Identity unless the tape is in training mode and
    /// `p > 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if p <= 0.0 || self.dropout_rng.is_none() {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let shape = self.shape(x).to_vec();
        let rng = self.dropout_rng.as_mut().unwrap();
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<NodeGrads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(NodeGrads { grads })
    }

    /// Reverse pass returning one gradient per parameter of `store`;
    /// parameters the loss does not reach get zeros.
    pub fn gradients(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let node_grads = self.backward(loss)?;
        let mut out = Gradients::empty(store.len());
        for (id, p) in store.iter() {
            let g = self
                .params
                .get(&id)
                .and_then(|v| node_grads.get(*v))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            out.insert(id, g);
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += f * g);
                }
            }
            &Op::Bmm { a, b, ta, tb, batch, m, k, n, a_batched, b_batched } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(s) = self.slot(grads, a) {
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bo..bo + k * n];
                        let da = &mut s[ao..ao + m * k];
                        if ta {
                            gemm(k, n, m, bb, tb, gc, true, da, true);
                        } else {
                            gemm(m, n, k, gc, false, bb, !tb, da, true);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let aa = &av[ao..ao + m * k];
                        let db = &mut s[bo..bo + k * n];
                        if tb {
                            gemm(n, m, k, gc, true, aa, ta, db, true);
                        } else {
                            gemm(k, m, n, aa, !ta, gc, false, db, true);
                        }
                    }
                }
            }
            &Op::Affine { x, w, b, rows, n_in, n_out } => {
                if let Some(s) = self.slot(grads, x) {
                    gemm(rows, n_out, n_in, g, false, self.value(w), true, s, true);
                }
                if let Some(s) = self.slot(grads, w) {
                    gemm(n_in, rows, n_out, self.value(x), true, g, false, s, true);
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(grads, b) {
                        for row in g.chunks_exact(n_out) {
                            s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                        }
                    }
                }
            }
            &Op::Softmax { x, layout: (outer, len, inner) } => {
                let y = &node.value;
                if let Some(s) = self.slot(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                s[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, n, xhat, rstd } => {
                let n = *n;
                if let Some(s) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for gr in g.chunks_exact(n) {
                        s.iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                    }
                }
                let gv = self.value(*gamma);
                if let Some(s) = self.slot(grads, *x) {
                    for (r, (gr, hr)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            s[r * n + j] += rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(s) = self.slot(grads, *x) {
                    for ((s, g), &v) in s.iter_mut().zip(g).zip(xv) {
                        *s += g * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(g, &node.shape, &inv);
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(&back).for_each(|(s, g)| *s += g);
                }
            }
            Op::Concat { xs, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut off = 0;
                for (&x, &l) in xs.iter().zip(lens) {
                    if let Some(s) = self.slot(grads, x) {
                        for o in 0..*outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + l) * inner];
                            let dst = &mut s[o * l * inner..(o + 1) * l * inner];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                    off += l;
                }
            }
            &Op::Narrow { x, layout: (outer, full, inner), start, len } => {
                if let Some(s) = self.slot(grads, x) {
                    for o in 0..outer {
                        let dst = &mut s[(o * full + start) * inner..(o * full + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Expand { x, outer, n, inner } => {
                if let Some(s) = self.slot(grads, x) {
                    for o in 0..outer {
                        for j in 0..n {
                            let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                            let dst = &mut s[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
            Op::Gather { table, ids, width } => {
                let w = *width;
                if let Some(s) = self.slot(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut s[i * w..(i + 1) * w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let f = g[0] / labels.len() as f64;
                if let Some(s) = self.slot(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == y { 1.0 } else { 0.0 };
                            s[r * c + j] += f * (probs[r * c + j] - t);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner_n {
            out.push(data[base + j * inner_s]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
