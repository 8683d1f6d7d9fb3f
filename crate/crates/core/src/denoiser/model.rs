//! Two-stream denoiser network `ε_θ(x_t, t, c)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::EfficientAttention;
use super::config::DenoiserConfig;
use super::text::{ConditionEmbedding, TextEncoder, Vocabulary};
use crate::bigraph::{bigraph_update, BipartiteGraphParams};
use crate::error::{Error, Result};
use crate::layers::{masked_mean_pool, sinusoidal_table, Linear, Norm};
use crate::numerics::{Init, ParamStore, Tape, Tensor, Var};

/// Sinusoidal positional table `[n, d]`.
pub fn positional_encoding(n: usize, d: usize) -> Result<Tensor> {
    sinusoidal_table(n, d, 0)
}

/// Timestep-conditioned scale and shift: `h ⊙ (1 + scale(e)) + shift(e)`.
/// Both maps start at zero, so a fresh block is the identity.
#[derive(Debug, Clone)]
pub struct Stylization {
    pub scale: Linear,
    pub shift: Linear,
}

impl Stylization {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_style: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            scale: Linear::new(store, &format!("{name}.scale"), d_style, d, Init::Zeros, rng)?,
            shift: Linear::new(store, &format!("{name}.shift"), d_style, d, Init::Zeros, rng)?,
        })
    }

    /// `h [B, N, d]`, `e [B, d_style]`.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, h: Var, e: Var) -> Result<Var> {
        let hs = tape.shape(h).to_vec();
        let es = tape.shape(e).to_vec();
        if hs.len() != 3 || es.len() != 2 || hs[0] != es[0] || es[1] != self.scale.n_in || hs[2] != self.scale.n_out {
            return Err(Error::shape("stylization", &hs, &es));
        }
        let scale = self.scale.forward(tape, store, e)?;
        let ones = tape.constant(Tensor::full(&es[..1].iter().copied().chain([hs[2]]).collect::<Vec<_>>(), 1.0));
        let gain = tape.add(scale, ones)?;
        let gain = tape.expand(gain, 1, hs[1])?;
        let shift = self.shift.forward(tape, store, e)?;
        let shift = tape.expand(shift, 1, hs[1])?;
        let y = tape.mul(h, gain)?;
        tape.add(y, shift)
    }
}

/// Per-stream sublayers of one decoder layer.
#[derive(Debug, Clone)]
pub struct StreamBlock {
    pub ln_self: Norm,
    pub self_attn: EfficientAttention,
    pub styl_self: Stylization,
    pub ln_cross: Norm,
    pub cross_attn: EfficientAttention,
    pub styl_cross: Stylization,
    pub ln_ff: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub styl_ff: Stylization,
}

impl StreamBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let (d, h) = (cfg.d_l, cfg.num_heads);
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            ln_self: Norm::new(store, &n("ln_self"), d, rng)?,
            self_attn: EfficientAttention::new(store, &n("self_attn"), d, d, h, rng)?,
            styl_self: Stylization::new(store, &n("styl_self"), 2 * d, d, rng)?,
            ln_cross: Norm::new(store, &n("ln_cross"), d, rng)?,
            cross_attn: EfficientAttention::new(store, &n("cross_attn"), d, d, h, rng)?,
            styl_cross: Stylization::new(store, &n("styl_cross"), 2 * d, d, rng)?,
            ln_ff: Norm::new(store, &n("ln_ff"), d, rng)?,
            ff_in: Linear::new(store, &n("ff_in"), d, 4 * d, Init::Xavier, rng)?,
            ff_out: Linear::new(store, &n("ff_out"), 4 * d, d, Init::Zeros, rng)?,
            styl_ff: Stylization::new(store, &n("styl_ff"), 2 * d, d, rng)?,
        })
    }

    fn attend<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var, ctx: &Context, dropout: f64) -> Result<Var> {
        let h = self.ln_self.forward(tape, store, x)?;
        let a = self.self_attn.forward(tape, store, h, h, ctx.frame_keep.as_deref())?;
        let a = self.styl_self.forward(tape, store, a, ctx.style)?;
        let a = tape.dropout(a, dropout)?;
        let x = tape.add(x, a)?;
        let h = self.ln_cross.forward(tape, store, x)?;
        let c = self.cross_attn.forward(tape, store, h, ctx.cond, ctx.text_keep.as_deref())?;
        let c = self.styl_cross.forward(tape, store, c, ctx.style)?;
        let c = tape.dropout(c, dropout)?;
        tape.add(x, c)
    }

    fn feed_forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var, ctx: &Context, dropout: f64) -> Result<Var> {
        let h = self.ln_ff.forward(tape, store, x)?;
        let f = self.ff_in.forward(tape, store, h)?;
        let f = tape.gelu(f);
        let f = tape.dropout(f, dropout)?;
        let f = self.ff_out.forward(tape, store, f)?;
        let f = self.styl_ff.forward(tape, store, f, ctx.style)?;
        tape.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    /// One block when stream weights are tied, otherwise one per stream.
    pub streams: Vec<StreamBlock>,
    pub graph: Option<BipartiteGraphParams>,
    /// Norms applied to the streams before the graph, one per stream block.
    pub graph_norms: Vec<Norm>,
}

/// Per-batch conditioning shared by every decoder layer.
#[derive(Debug, Clone)]
pub struct Context {
    /// `[B, 2 d_l]`: timestep embedding next to the pooled condition.
    pub style: Var,
    /// `[B, L, d_l]` encoded label tokens.
    pub cond: Var,
    pub frame_keep: Option<Vec<bool>>,
    pub text_keep: Option<Vec<bool>>,
}

impl Context {
    fn stacked(&self, tape: &mut Tape<'_>) -> Result<Self> {
        let twice = |k: &Option<Vec<bool>>| k.as_ref().map(|k| [k.as_slice(), k.as_slice()].concat());
        Ok(Self {
            style: tape.concat(&[self.style, self.style], 0)?,
            cond: tape.concat(&[self.cond, self.cond], 0)?,
            frame_keep: twice(&self.frame_keep),
            text_keep: twice(&self.text_keep),
        })
    }
}

/// Parameter layout of the denoiser. Values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    /// Input embeddings `3k → d_l`, one per stream unless tied.
    pub embed: Vec<Linear>,
    pub layers: Vec<DecoderLayer>,
    /// `2 d_l → 6k`.
    pub head: Linear,
}

/// Batched denoiser input.
#[derive(Debug, Clone, Copy)]
pub struct NoiseBatch<'a> {
    /// `[B, N, k, 3, 2]`.
    pub x_t: &'a Tensor,
    /// `[B * N]`, `None` when no frame is padded.
    pub frame_keep: Option<&'a [bool]>,
    pub steps: &'a [usize],
    pub tokens: &'a [Vec<usize>],
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(config: &DenoiserConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_l;
        let text = TextEncoder::new(store, config.vocab.len(), d, config.text_layers, config.text_heads, config.dropout, rng)?;
        let time_fc1 = Linear::new(store, "time.fc1", d, d, Init::Xavier, rng)?;
        let time_fc2 = Linear::new(store, "time.fc2", d, d, Init::Xavier, rng)?;
        let n_streams = if config.share_stream_weights { 1 } else { 2 };
        let embed = (0..n_streams)
            .map(|s| Linear::new(store, &format!("stream{s}.embed"), config.frame_width(), d, Init::Xavier, rng))
            .collect::<Result<_>>()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for m in 0..config.num_layers {
            let streams = (0..n_streams)
                .map(|s| StreamBlock::new(store, &format!("layer{m}.stream{s}"), config, rng))
                .collect::<Result<_>>()?;
            let graph = config
                .bigraph
                .then(|| {
                    let (c, l) = (config.graph_channels, config.graph_len);
                    BipartiteGraphParams::new(store, &format!("layer{m}.bigraph"), d, c, l, l, rng)
                })
                .transpose()?;
            let graph_norms = if config.bigraph {
                (0..n_streams)
                    .map(|s| Norm::new(store, &format!("layer{m}.stream{s}.ln_graph"), d, rng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            layers.push(DecoderLayer { streams, graph, graph_norms });
        }
        let head = Linear::new(store, "head", 2 * d, 6 * config.joints, Init::Xavier, rng)?;
        Ok(Self {
            config: config.clone(),
            vocab: Vocabulary::new(&config.vocab),
            text,
            time_fc1,
            time_fc2,
            embed,
            layers,
            head,
        })
    }

    /// Embeddings `[B, d_l]` of the diffusion steps.
    pub fn timestep_embedding<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, steps: &[usize]) -> Result<Var> {
        let d = self.config.d_l;
        let max = self.config.diffusion_steps;
        let mut rows = Vec::with_capacity(steps.len() * d);
        for &t in steps {
            if t == 0 || t > max {
                return Err(Error::StepOutOfRange { t, max });
            }
            rows.extend_from_slice(sinusoidal_table(1, d, t)?.data());
        }
        let s = tape.constant(Tensor::new(vec![steps.len(), d], rows)?);
        let h = self.time_fc1.forward(tape, store, s)?;
        let h = tape.gelu(h);
        self.time_fc2.forward(tape, store, h)
    }

    /// Conditioning for a batch: encoded tokens and the stylization input.
    pub fn context<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        steps: &[usize],
        tokens: &[Vec<usize>],
        frame_keep: Option<&[bool]>,
    ) -> Result<Context> {
        let temb = self.timestep_embedding(tape, store, steps)?;
        let (cond, text_keep) = self.text.forward(tape, store, tokens)?;
        let pooled = masked_mean_pool(tape, cond, text_keep.as_deref())?;
        let style = tape.concat(&[temb, pooled], 1)?;
        Ok(Context {
            style,
            cond,
            frame_keep: frame_keep.filter(|k| k.iter().any(|x| !x)).map(<[bool]>::to_vec),
            text_keep,
        })
    }

    fn block(&self, layer: usize, stream: usize) -> &StreamBlock {
        let blocks = &self.layers[layer].streams;
        &blocks[stream.min(blocks.len() - 1)]
    }

    /// One decoder layer over both streams `[B, N, d_l]`.
    pub fn decoder_layer<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        layer: usize,
        s1: Var,
        s2: Var,
        ctx: &Context,
    ) -> Result<(Var, Var)> {
        if tape.shape(s1) != tape.shape(s2) {
            return Err(Error::shape("decoder_layer", tape.shape(s1), tape.shape(s2)));
        }
        let p = self.config.dropout;
        let tied = self.config.share_stream_weights;
        let stacked = if tied { Some(ctx.stacked(tape)?) } else { None };
        let per_stream = |tape: &mut Tape<'p>, s1: Var, s2: Var, attn: bool| -> Result<(Var, Var)> {
            let run = |tape: &mut Tape<'p>, b: &StreamBlock, x: Var, c: &Context| {
                if attn {
                    b.attend(tape, store, x, c, p)
                } else {
                    b.feed_forward(tape, store, x, c, p)
                }
            };
            match &stacked {
                Some(c2) => {
                    let batch = tape.shape(s1)[0];
                    let both = tape.concat(&[s1, s2], 0)?;
                    let both = run(tape, self.block(layer, 0), both, c2)?;
                    Ok((tape.narrow(both, 0, 0, batch)?, tape.narrow(both, 0, batch, batch)?))
                }
                None => Ok((
                    run(tape, self.block(layer, 0), s1, ctx)?,
                    run(tape, self.block(layer, 1), s2, ctx)?,
                )),
            }
        };
        let (mut a, mut b) = per_stream(tape, s1, s2, true)?;
        let l = &self.layers[layer];
        if let Some(graph) = &l.graph {
            let na = l.graph_norms[0].forward(tape, store, a)?;
            let nb = l.graph_norms[l.graph_norms.len() - 1].forward(tape, store, b)?;
            let (ua, ub) = bigraph_update(tape, store, graph, na, nb, ctx.frame_keep.as_deref())?;
            a = tape.add(a, ua)?;
            b = tape.add(b, ub)?;
        }
        per_stream(tape, a, b, false)
    }

    /// `ε_θ` for a batch, returned in the input layout `[B, N, k, 3, 2]`.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, input: NoiseBatch<'_>) -> Result<Var> {
        let s = input.x_t.shape();
        let k = self.config.joints;
        if s.len() != 5 || s[2] != k || s[3] != 3 || s[4] != 2 {
            return Err(Error::shape("predict_noise", s, &[0, 0, k, 3, 2]));
        }
        let (b, n) = (s[0], s[1]);
        if n > self.config.capacity() {
            return Err(Error::Capacity { len: n, max: self.config.capacity() });
        }
        if input.steps.len() != b || input.tokens.len() != b {
            return Err(Error::shape("predict_noise", &[b], &[input.steps.len(), input.tokens.len()]));
        }
        if input.frame_keep.is_some_and(|m| m.len() != b * n) {
            return Err(Error::shape("predict_noise", &[b * n], &[input.frame_keep.unwrap().len()]));
        }
        let ctx = self.context(tape, store, input.steps, input.tokens, input.frame_keep)?;

        let d = self.config.d_l;
        let w = 3 * k;
        let x = input.x_t.data();
        let person = |p: usize| Tensor::from_fn(&[b, n, w], |i| x[i * 2 + p]);
        let pe = positional_encoding(n, d)?;
        let pe = tape.constant(Tensor::from_fn(&[b, n, d], |i| pe.data()[i % (n * d)]));
        let mut streams = Vec::with_capacity(2);
        for p in 0..2 {
            let xp = tape.constant(person(p));
            let e = self.embed[p.min(self.embed.len() - 1)].forward(tape, store, xp)?;
            streams.push(tape.add(e, pe)?);
        }
        let (mut a, mut bb) = (streams[0], streams[1]);
        for m in 0..self.layers.len() {
            (a, bb) = self.decoder_layer(tape, store, m, a, bb, &ctx)?;
        }
        let joined = tape.concat(&[a, bb], 2)?;
        let out = self.head.forward(tape, store, joined)?;
        let out = tape.reshape(out, &[b, n, 2, k, 3])?;
        tape.permute(out, &[0, 1, 3, 4, 2])
    }
}

/// Denoiser parameters together with their layout.
#[derive(Debug, Clone)]
pub struct DenoiserWeights {
    pub net: DenoiserNet,
    pub store: ParamStore,
}

impl DenoiserWeights {
    pub fn new<R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = DenoiserNet::new(config, &mut store, rng)?;
        Ok(Self { net, store })
    }

    /// Rebuilds a model from named tensors. Names and shapes must match the
    /// layout implied by `config` exactly.
    pub fn from_named(config: &DenoiserConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut w = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if named.len() != w.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                w.store.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = w
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = w.store.value_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(w)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.net.config
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn tokenize(&self, label: &str) -> Result<Vec<usize>> {
        self.net.vocab.tokenize(label)
    }

    pub fn encode_condition(&self, tokens: &[usize]) -> Result<ConditionEmbedding> {
        let mut tape = Tape::new();
        let (h, _) = self.net.text.forward(&mut tape, &self.store, &[tokens.to_vec()])?;
        let t = tape.tensor(h);
        Ok(ConditionEmbedding {
            tokens: t.reshape(&[tokens.len(), self.net.config.d_l])?,
            token_ids: tokens.to_vec(),
        })
    }

    pub fn timestep_embedding(&self, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = self.net.timestep_embedding(&mut tape, &self.store, &[t])?;
        tape.tensor(e).reshape(&[self.net.config.d_l])
    }

    /// Batched `ε_θ` in evaluation mode.
    pub fn predict_noise_batch(&self, input: NoiseBatch<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.net.forward(&mut tape, &self.store, input)?;
        Ok(tape.tensor(out))
    }
}

/// Anything that estimates the injected noise of a single sequence.
pub trait NoisePredictor {
    /// `x_t [N, k, 3, 2]` at step `t` under the label tokens.
    fn predict_noise(&self, x_t: &Tensor, t: usize, tokens: &[usize]) -> Result<Tensor>;

    /// Batched form over `[B, N, k, 3, 2]`.
    fn predict_noise_batch(&self, input: NoiseBatch<'_>) -> Result<Tensor> {
        let s = input.x_t.shape();
        if s.len() != 5 || input.steps.len() != s[0] || input.tokens.len() != s[0] {
            return Err(Error::shape("predict_noise_batch", s, &[input.steps.len()]));
        }
        let per: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(input.x_t.numel());
        for i in 0..s[0] {
            let x = Tensor::new(s[1..].to_vec(), input.x_t.data()[i * per..(i + 1) * per].to_vec())?;
            out.extend(self.predict_noise(&x, input.steps[i], &input.tokens[i])?.into_data());
        }
        Tensor::new(s.to_vec(), out)
    }
}

impl NoisePredictor for DenoiserWeights {
    fn predict_noise(&self, x_t: &Tensor, t: usize, tokens: &[usize]) -> Result<Tensor> {
        let s = x_t.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("predict_noise", &s, &[0, self.net.config.joints, 3, 2]));
        }
        let x = x_t.clone().reshape(&[1, s[0], s[1], s[2], s[3]])?;
        let tokens = [tokens.to_vec()];
        let out = DenoiserWeights::predict_noise_batch(self, NoiseBatch { x_t: &x, frame_keep: None, steps: &[t], tokens: &tokens })?;
        out.reshape(&s)
    }

    fn predict_noise_batch(&self, input: NoiseBatch<'_>) -> Result<Tensor> {
        DenoiserWeights::predict_noise_batch(self, input)
    }
}
