//! Finite-difference cases for every differentiable operation and for the
//! full noise-prediction graph. Shared by the core integration tests and the
//! acceptance harness.

use bigraphdiff::bigraph::{bigraph_forward, graph_reason, project_back, project_to_graph, BipartiteGraphParams, Direction};
use bigraphdiff::denoiser::{efficient_attention, DenoiserConfig, DenoiserWeights, EfficientAttention, Stylization};
use bigraphdiff::layers::{masked_mean_pool, EncoderLayer, Linear, MultiHeadAttention, Norm};
use bigraphdiff::numerics::gradcheck::{check_inputs, check_params};
use bigraphdiff::numerics::{Init, ParamStore, Tape, Tensor, Var};
use bigraphdiff::sampler::{batch_loss, make_batch};
use bigraphdiff::{NoiseSchedule, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Case = (&'static str, Box<dyn Fn() -> Result<f64>>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Weighted sum with fixed random weights, so no gradient cancels by symmetry.
fn project(tape: &mut Tape<'_>, x: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(x), seed ^ 0x5eed));
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += scale * r.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

fn inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor> {
    shapes.iter().enumerate().map(|(i, s)| randn(s, seed + i as u64)).collect()
}

fn op_case(name: &'static str, shapes: &'static [&'static [usize]], f: fn(&mut Tape<'_>, &[Var]) -> Result<Var>) -> Case {
    (
        name,
        Box::new(move || {
            check_inputs(&inputs(shapes, 11), |t, v| {
                let y = f(t, v)?;
                project(t, y, 3)
            })
        }),
    )
}

pub fn denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        num_layers: 2,
        num_heads: 2,
        d_l: 8,
        text_layers: 1,
        text_heads: 2,
        vocab: vec!["shake".into(), "hands".into()],
        max_len: 4,
        joints: 3,
        bigraph: true,
        graph_len: 4,
        graph_channels: 4,
        share_stream_weights: true,
        dropout: 0.0,
        diffusion_steps: 10,
    }
}

fn tiny_model(cfg: &DenoiserConfig) -> DenoiserWeights {
    let mut w = DenoiserWeights::new(cfg, &mut rng(1)).unwrap();
    perturb(&mut w.store, 0.2, 2);
    w
}

pub fn operation_cases() -> Vec<Case> {
    let mut cases = vec![
        op_case("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1])),
        op_case("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1])),
        op_case("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1])),
        op_case("scale", &[&[4]], |t, v| Ok(t.scale(v[0], -1.7))),
        op_case("matmul shared rhs", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        op_case("matmul batched", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.matmul(v[0], v[1])),
        op_case("bmm transposed", &[&[2, 4, 3], &[2, 5, 4]], |t, v| t.bmm(v[0], v[1], true, true)),
        op_case("bmm broadcast lhs", &[&[3, 4], &[2, 4, 2]], |t, v| t.bmm(v[0], v[1], false, false)),
        op_case("bmm broadcast rhs", &[&[2, 3, 4], &[2, 4]], |t, v| t.bmm(v[0], v[1], false, true)),
        op_case("affine", &[&[2, 3, 4], &[4, 2], &[2]], |t, v| t.affine(v[0], v[1], Some(v[2]))),
        op_case("softmax", &[&[2, 3, 4]], |t, v| t.softmax(v[0], 1)),
        op_case("softmax masked", &[&[2, 4]], |t, v| {
            t.softmax_masked(v[0], 1, Some(&[true, false, true, true, true, true, false, true]))
        }),
        op_case("layer norm", &[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        op_case("gelu", &[&[7]], |t, v| Ok(t.gelu(v[0]))),
        op_case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        op_case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        op_case("transpose", &[&[3, 2]], |t, v| t.transpose(v[0])),
        op_case("concat", &[&[2, 1, 3], &[2, 2, 3]], |t, v| t.concat(&[v[0], v[1]], 1)),
        op_case("narrow", &[&[2, 5, 2]], |t, v| t.narrow(v[0], 1, 1, 3)),
        op_case("expand", &[&[2, 3]], |t, v| t.expand(v[0], 1, 4)),
        op_case("gather", &[&[4, 3]], |t, v| t.gather(v[0], &[2, 0, 2, 3])),
        op_case("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0]))),
        op_case("mean", &[&[2, 3]], |t, v| Ok(t.mean(v[0]))),
        op_case("cross entropy", &[&[3, 4]], |t, v| t.cross_entropy(v[0], &[1, 3, 0])),
        op_case("masked mean pool", &[&[2, 3, 4]], |t, v| masked_mean_pool(t, v[0], Some(&[true, true, false, true, false, false]))),
        op_case("efficient attention", &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 6]], |t, v| {
            efficient_attention(t, v[0], v[1], v[2], 2, Some(&[true, true, true, false, true, true, false, true, true, true]))
        }),
    ];

    cases.push((
        "linear / norm / stylization",
        Box::new(|| {
            let mut store = ParamStore::new();
            let mut r = rng(4);
            let lin = Linear::new(&mut store, "lin", 4, 3, Init::Xavier, &mut r)?;
            let norm = Norm::new(&mut store, "norm", 3, &mut r)?;
            let st = Stylization::new(&mut store, "st", 5, 3, &mut r)?;
            perturb(&mut store, 0.5, 5);
            let (x, e) = (randn(&[2, 3, 4], 6), randn(&[2, 5], 7));
            check_params(&store, |t, s| {
                let xv = t.constant(x.clone());
                let ev = t.constant(e.clone());
                let h = lin.forward(t, s, xv)?;
                let h = norm.forward(t, s, h)?;
                let h = st.forward(t, s, h, ev)?;
                project(t, h, 8)
            })
        }),
    ));
    cases.push((
        "multi-head attention and encoder layer",
        Box::new(|| {
            let mut store = ParamStore::new();
            let mut r = rng(9);
            let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut r)?;
            let enc = EncoderLayer::new(&mut store, "enc", 4, 2, 0.0, &mut r)?;
            perturb(&mut store, 0.2, 10);
            let x = randn(&[2, 3, 4], 11);
            let keep = [true, true, true, true, false, true];
            check_params(&store, |t, s| {
                let xv = t.constant(x.clone());
                let h = mha.forward(t, s, xv, Some(&keep))?;
                let h = enc.forward(t, s, h, Some(&keep))?;
                project(t, h, 12)
            })
        }),
    ));
    cases.push((
        "efficient attention block",
        Box::new(|| {
            let mut store = ParamStore::new();
            let ea = EfficientAttention::new(&mut store, "ea", 4, 6, 2, &mut rng(13))?;
            perturb(&mut store, 0.3, 14);
            let (x, c) = (randn(&[2, 3, 4], 15), randn(&[2, 2, 6], 16));
            check_params(&store, |t, s| {
                let (xv, cv) = (t.constant(x.clone()), t.constant(c.clone()));
                let h = ea.forward(t, s, xv, cv, None)?;
                project(t, h, 17)
            })
        }),
    ));
    cases.push((
        "bipartite projection, reasoning and back-projection",
        Box::new(|| {
            let mut store = ParamStore::new();
            let g = BipartiteGraphParams::new(&mut store, "g", 3, 2, 4, 5, &mut rng(18))?;
            perturb(&mut store, 0.3, 19);
            let (fa, fb) = (randn(&[3, 4], 20), randn(&[3, 5], 21));
            check_params(&store, |t, s| {
                let (a, b) = (t.constant(fa.clone()), t.constant(fb.clone()));
                let mut total = Vec::new();
                for (dir, me, other) in [(Direction::A, a, b), (Direction::B, b, a)] {
                    let (v, h) = project_to_graph(t, s, &g, dir, me, other)?;
                    let m = graph_reason(t, s, &g, dir, v)?;
                    let out = project_back(t, s, &g, dir, m, h, me)?;
                    total.push(project(t, out, 22)?);
                }
                t.add(total[0], total[1])
            })
        }),
    ));
    cases.push((
        "bipartite streams with padding",
        Box::new(|| {
            let mut store = ParamStore::new();
            let g = BipartiteGraphParams::new(&mut store, "g", 3, 2, 6, 6, &mut rng(23))?;
            perturb(&mut store, 0.3, 24);
            let (sa, sb) = (randn(&[2, 4, 3], 25), randn(&[2, 4, 3], 26));
            let keep = [true, true, true, true, true, true, false, false];
            check_params(&store, |t, s| {
                let (a, b) = (t.constant(sa.clone()), t.constant(sb.clone()));
                let (oa, ob) = bigraph_forward(t, s, &g, a, b, Some(&keep))?;
                let both = t.concat(&[oa, ob], 2)?;
                project(t, both, 27)
            })
        }),
    ));
    cases
}

pub fn model_cases() -> Vec<Case> {
    vec![
        (
            "timestep embedding map",
            Box::new(|| {
                let w = tiny_model(&denoiser_config());
                check_params(&w.store, |t, s| {
                    let e = w.net.timestep_embedding(t, s, &[1, 7])?;
                    project(t, e, 30)
                })
            }),
        ),
        (
            "condition encoder on a two-token label",
            Box::new(|| {
                let w = tiny_model(&denoiser_config());
                check_params(&w.store, |t, s| {
                    let (h, _) = w.net.text.forward(t, s, &[vec![1, 0]])?;
                    project(t, h, 31)
                })
            }),
        ),
        (
            "diffusion loss",
            Box::new(|| {
                let cfg = denoiser_config();
                let w = tiny_model(&cfg);
                let sched = NoiseSchedule::linear_default(cfg.diffusion_steps)?;
                let x0 = bigraphdiff::MotionSequence::new(randn(&[4, 3, 3, 2], 32), "shake hands", 10, 0, true)?;
                let x1 = bigraphdiff::MotionSequence::new(randn(&[3, 3, 3, 2], 33), "hands", 10, 0, true)?;
                let batch = make_batch(&[&x0, &x1], &[vec![0, 1], vec![1]], 1.5, cfg.diffusion_steps, &mut rng(34))?;
                check_params(&w.store, |t, s| batch_loss(t, &w.net, s, &batch, &sched))
            }),
        ),
        (
            "full noise prediction (N=4, k=3, d_l=8, 2 layers, 2 heads, graph on)",
            Box::new(|| {
                let cfg = DenoiserConfig { text_layers: 4, ..denoiser_config() };
                let w = tiny_model(&cfg);
                let x = randn(&[1, 4, 3, 3, 2], 35);
                check_params(&w.store, |t, s| {
                    let input = bigraphdiff::denoiser::NoiseBatch {
                        x_t: &x,
                        frame_keep: None,
                        steps: &[6],
                        tokens: &[vec![0, 1]],
                    };
                    let y = w.net.forward(t, s, input)?;
                    project(t, y, 36)
                })
            }),
        ),
    ]
}
