//! Bipartite graph reasoning between the two skeleton streams.
//!
//! Direction `a` projects stream `a` into a graph whose nodes are those of
//! stream `b`: `V_a = θ_b(F_b) φ_a(F_a)`, smooths it with
//! `M_a = (I - A_a) V_a W_a`, and maps back with a residual:
//! `F̃_a = φ'_a(H_b M_a) + F_a`. Direction `b` mirrors it with its own
//! parameters.
//!
//! The three stages are exposed individually in the channels × nodes
//! layout ([`project_to_graph`], [`graph_reason`], [`project_back`]).
//! [`bigraph_forward`] evaluates the same composition on batched
//! nodes × channels streams, reassociated so that no `D × D × D` product is
//! ever formed: only `O(D² C)` work for `D` nodes and `C` graph channels.
//!
//! `A` and `W` are sized for a fixed node count. A sequence of `N` frames
//! uses their leading `N × N` blocks, which is exactly zero-padding the
//! projected node features to the full size and cropping the result.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Init, ParamId, ParamStore, Tape, Tensor, Var};

/// Standard deviation of the initial adjacency and edge weights.
pub const GRAPH_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Updates stream `a` using the node set of stream `b`.
    A,
    /// Updates stream `b` using the node set of stream `a`.
    B,
}

#[derive(Debug, Clone)]
pub struct BipartiteGraphParams {
    pub phi_a: Linear,
    pub theta_b: Linear,
    pub phi_b: Linear,
    pub theta_a: Linear,
    pub out_a: Linear,
    pub out_b: Linear,
    /// `[D_b, D_b]`
    pub adj_a: ParamId,
    /// `[D_a, D_a]`
    pub adj_b: ParamId,
    /// `[D_a, D_a]`
    pub edge_a: ParamId,
    /// `[D_b, D_b]`
    pub edge_b: ParamId,
    pub channels_in: usize,
    pub channels: usize,
    pub nodes_a: usize,
    pub nodes_b: usize,
}

impl BipartiteGraphParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels_in: usize,
        channels: usize,
        nodes_a: usize,
        nodes_b: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels_in == 0 || channels == 0 || nodes_a == 0 || nodes_b == 0 {
            return Err(Error::Config("bipartite graph dimensions must be positive".into()));
        }
        let mut lin = |n: &str, i, o, init| Linear::new(store, &format!("{name}.{n}"), i, o, init, rng);
        let phi_a = lin("phi_a", channels_in, channels, Init::Xavier)?;
        let theta_b = lin("theta_b", channels_in, channels, Init::Xavier)?;
        let phi_b = lin("phi_b", channels_in, channels, Init::Xavier)?;
        let theta_a = lin("theta_a", channels_in, channels, Init::Xavier)?;
        let out_a = lin("out_a", channels, channels_in, Init::Zeros)?;
        let out_b = lin("out_b", channels, channels_in, Init::Zeros)?;
        let g = Init::Normal(GRAPH_INIT_STD);
        Ok(Self {
            phi_a,
            theta_b,
            phi_b,
            theta_a,
            out_a,
            out_b,
            adj_a: store.add(format!("{name}.A_a"), &[nodes_b, nodes_b], g, rng)?,
            adj_b: store.add(format!("{name}.A_b"), &[nodes_a, nodes_a], g, rng)?,
            edge_a: store.add(format!("{name}.W_a"), &[nodes_a, nodes_a], g, rng)?,
            edge_b: store.add(format!("{name}.W_b"), &[nodes_b, nodes_b], g, rng)?,
            channels_in,
            channels,
            nodes_a,
            nodes_b,
        })
    }

    /// Closed-form scalar count for the given dimensions.
    pub fn expected_scalars(channels_in: usize, channels: usize, nodes_a: usize, nodes_b: usize) -> usize {
        4 * (channels_in * channels + channels)
            + 2 * (channels * channels_in + channels_in)
            + 2 * nodes_a * nodes_a
            + 2 * nodes_b * nodes_b
    }

    pub fn num_scalars(&self) -> usize {
        Self::expected_scalars(self.channels_in, self.channels, self.nodes_a, self.nodes_b)
    }

    /// (reducer of the updated stream, reducer of the other stream,
    /// adjacency, edge weights, back-projection)
    fn direction(&self, dir: Direction) -> (&Linear, &Linear, ParamId, ParamId, &Linear) {
        match dir {
            Direction::A => (&self.phi_a, &self.theta_b, self.adj_a, self.edge_a, &self.out_a),
            Direction::B => (&self.phi_b, &self.theta_a, self.adj_b, self.edge_b, &self.out_b),
        }
    }
}

/// Leading `rows × cols` block of a square parameter matrix.
fn block<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, id: ParamId, n: usize) -> Result<Var> {
    let full = tape.param(store, id);
    let size = tape.shape(full)[0];
    if n > size {
        return Err(Error::Capacity { len: n, max: size });
    }
    if n == size {
        return Ok(full);
    }
    let r = tape.narrow(full, 0, 0, n)?;
    tape.narrow(r, 1, 0, n)
}

/// 1×1 convolution over a `[C_in, D]` feature map: `[C_out, D]`.
fn conv1x1<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, lin: &Linear, f: Var) -> Result<Var> {
    let t = tape.transpose(f)?;
    let y = lin.forward(tape, store, t)?;
    tape.transpose(y)
}

fn check_map(tape: &Tape<'_>, f: Var, channels: usize) -> Result<()> {
    let s = tape.shape(f);
    if s.len() != 2 || s[0] != channels {
        return Err(Error::shape("bigraph", s, &[channels, 0]));
    }
    Ok(())
}

/// Projects `F_a [C_in, D_a]` onto the node set of `F_b [C_in, D_b]`.
/// Returns `(V_a [D_b, D_a], H_b [C, D_b])` for direction `A`; direction `B`
/// swaps the roles of the two inputs.
pub fn project_to_graph<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    params: &BipartiteGraphParams,
    dir: Direction,
    f_self: Var,
    f_other: Var,
) -> Result<(Var, Var)> {
    check_map(tape, f_self, params.channels_in)?;
    check_map(tape, f_other, params.channels_in)?;
    let (reduce_self, reduce_other, ..) = params.direction(dir);
    let phi = conv1x1(tape, store, reduce_self, f_self)?;
    let h = conv1x1(tape, store, reduce_other, f_other)?;
    let ht = tape.transpose(h)?;
    let v = tape.matmul(ht, phi)?;
    Ok((v, h))
}

/// `M = (I - A) V W` for `V [D_other, D_self]`.
pub fn graph_reason<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    params: &BipartiteGraphParams,
    dir: Direction,
    v: Var,
) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("graph_reason", &s, &[0, 0]));
    }
    let (_, _, adj, edge, _) = params.direction(dir);
    let a = block(tape, store, adj, s[0])?;
    let w = block(tape, store, edge, s[1])?;
    let vw = tape.matmul(v, w)?;
    let avw = tape.matmul(a, vw)?;
    tape.sub(vw, avw)
}

/// `F̃ = φ'(H M) + F`.
pub fn project_back<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    params: &BipartiteGraphParams,
    dir: Direction,
    m: Var,
    h: Var,
    f_self: Var,
) -> Result<Var> {
    let (.., out) = params.direction(dir);
    let hm = tape.matmul(h, m)?;
    let back = conv1x1(tape, store, out, hm)?;
    if tape.shape(back) != tape.shape(f_self) {
        return Err(Error::shape("project_back", tape.shape(back), tape.shape(f_self)));
    }
    tape.add(back, f_self)
}

/// One direction on batched streams `[B, N, C_in]` (nodes × channels).
fn direction_forward<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    params: &BipartiteGraphParams,
    dir: Direction,
    x_self: Var,
    x_other: Var,
    node_mask: Option<Var>,
) -> Result<Var> {
    let (reduce_self, reduce_other, adj, edge, out) = params.direction(dir);
    let n = tape.shape(x_self)[1];
    let mut p = reduce_self.forward(tape, store, x_self)?; // φ(F)ᵀ   [B, N, C]
    let mut ht = reduce_other.forward(tape, store, x_other)?; // H_otherᵀ [B, N, C]
    if let Some(m) = node_mask {
        p = tape.mul(p, m)?;
        ht = tape.mul(ht, m)?;
    }
    let a = block(tape, store, adj, n)?;
    let w = block(tape, store, edge, n)?;
    let aht = tape.bmm(a, ht, false, false)?;
    let g = tape.sub(ht, aht)?; // (I - A) Hᵀ          [B, N, C]
    let r = tape.bmm(p, w, true, false)?; // φ(F) W    [B, C, N]
    let k = tape.bmm(g, ht, true, false)?; // Gᵀ Hᵀ     [B, C, C]
    let u = tape.bmm(r, k, true, false)?; // (H M)ᵀ    [B, N, C]
    out.forward(tape, store, u)
}

/// Both directions on streams `s_a, s_b [B, N, C_in]`, without the
/// residual: returns `φ'(H M)` for each stream. `frame_keep [B * N]` marks
/// real frames; padded frames are excluded from the graph.
pub fn bigraph_update<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    params: &BipartiteGraphParams,
    s_a: Var,
    s_b: Var,
    frame_keep: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let sa = tape.shape(s_a).to_vec();
    let sb = tape.shape(s_b).to_vec();
    if sa != sb || sa.len() != 3 || sa[2] != params.channels_in {
        return Err(Error::shape("bigraph_forward", &sa, &sb));
    }
    let (b, n) = (sa[0], sa[1]);
    if n > params.nodes_a.min(params.nodes_b) {
        return Err(Error::Capacity {
            len: n,
            max: params.nodes_a.min(params.nodes_b),
        });
    }
    let mask = match frame_keep {
        Some(keep) if keep.iter().any(|k| !k) => {
            let c = params.channels;
            let m = Tensor::from_fn(&[b, n, c], |i| if keep[i / c] { 1.0 } else { 0.0 });
            Some(tape.constant(m))
        }
        _ => None,
    };
    let out_a = direction_forward(tape, store, params, Direction::A, s_a, s_b, mask)?;
    let out_b = direction_forward(tape, store, params, Direction::B, s_b, s_a, mask)?;
    Ok((out_a, out_b))
}

/// [`bigraph_update`] plus the residual on each stream.
pub fn bigraph_forward<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    params: &BipartiteGraphParams,
    s_a: Var,
    s_b: Var,
    frame_keep: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (ua, ub) = bigraph_update(tape, store, params, s_a, s_b, frame_keep)?;
    Ok((tape.add(ua, s_a)?, tape.add(ub, s_b)?))
}
