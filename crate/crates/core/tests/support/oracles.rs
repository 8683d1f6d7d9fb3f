//! Independent reference computations for the diffusion schedule, the
//! bipartite graph module, efficient attention, the evaluation metrics and
//! sequence normalization. Each check returns the worst deviation it saw so
//! callers can apply their own tolerance. Shared by the core integration
//! tests and the acceptance harness.

use bigraphdiff::bigraph::{
    bigraph_forward, graph_reason, project_back, project_to_graph, BipartiteGraphParams, Direction,
};
use bigraphdiff::data::normalize_sequence;
use bigraphdiff::denoiser::efficient_attention;
use bigraphdiff::layers::Linear;
use bigraphdiff::metrics::{feature_stats, frechet_distance, multimodality, FeatureStats};
use bigraphdiff::numerics::ParamStore;
use bigraphdiff::sampler::reverse_step;
use bigraphdiff::schedule::{default_beta_range, forward_chain_step, q_sample};
use bigraphdiff::{MotionSequence, NoisePredictor, NoiseSchedule, Result, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

// ---------------------------------------------------------------- diffusion

/// Largest `|ᾱ_t − oracle|` over several schedules, where the oracle
/// rebuilds each `β_s` from the endpoints and multiplies `1 − β_s` from
/// scratch for every `t`.
pub fn alpha_bar_vs_script() -> Result<f64> {
    let mut worst = 0.0f64;
    let mut configs = vec![(4, 0.1, 0.4), (1, 0.3, 0.3), (7, 1e-3, 0.5)];
    for t in [10, 100, 1000] {
        let (lo, hi) = default_beta_range(t);
        configs.push((t, lo, hi));
    }
    for (steps, lo, hi) in configs {
        let s = NoiseSchedule::linear(steps, lo, hi)?;
        let beta = |i: usize| if steps == 1 { lo } else { lo + (hi - lo) * i as f64 / (steps - 1) as f64 };
        for t in 1..=steps {
            let mut prod = 1.0;
            for i in 0..t {
                prod *= 1.0 - beta(i);
            }
            worst = worst.max((s.alpha_bar(t) - prod).abs());
        }
    }
    Ok(worst)
}

/// Mean and variance of `x_t` after iterating the one-step chain, against
/// closed-form draws, as z-scores of their differences.
#[derive(Debug, Clone, Copy)]
pub struct ChainAgreement {
    pub mean_z: f64,
    pub var_z: f64,
}

fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    (m, v, m4)
}

pub fn chain_vs_closed_form(trials: usize, t: usize, x0: f64) -> Result<ChainAgreement> {
    let sched = NoiseSchedule::linear_default(100)?;
    let mut r = rng(21);
    let mut x = Tensor::full(&[trials], x0);
    for s in 1..=t {
        x = forward_chain_step(&x, s, &sched, &mut r)?;
    }
    let eps = Tensor::from_fn(&[trials], |_| r.sample(StandardNormal));
    let y = q_sample(&Tensor::full(&[trials], x0), t, &eps, &sched)?;
    let (ma, va, m4a) = moments(x.data());
    let (mb, vb, m4b) = moments(y.data());
    let n = trials as f64;
    let mean_se = (va / n + vb / n).sqrt();
    let var_se = ((m4a - va * va) / n + (m4b - vb * vb) / n).sqrt();
    Ok(ChainAgreement { mean_z: (ma - mb).abs() / mean_se, var_z: (va - vb).abs() / var_se })
}

/// Predicts a fixed noise tensor regardless of input.
pub struct OracleNoise(pub Tensor);

impl NoisePredictor for OracleNoise {
    fn predict_noise(&self, _: &Tensor, _: usize, _: &[usize]) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

/// `reverse_step` fed the true noise, minus its own injected noise
/// (replayed from a cloned generator), against
/// `μ̃ = √ᾱ_{t-1} β_t / (1-ᾱ_t) · x_0 + √α_t (1-ᾱ_{t-1}) / (1-ᾱ_t) · x_t`.
pub fn reverse_step_vs_posterior(cases: usize) -> Result<f64> {
    let sched = NoiseSchedule::linear_default(100)?;
    let mut r = rng(22);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let t = r.random_range(1..=sched.steps());
        let shape = [r.random_range(1..5), 3, 3, 2];
        let x0 = Tensor::randn(&shape, 1.0, &mut r);
        let eps = Tensor::randn(&shape, 1.0, &mut r);
        let x_t = q_sample(&x0, t, &eps, &sched)?;
        let mut noise_rng = rng(r.random());
        let mut replay = noise_rng.clone();
        let step = reverse_step(&OracleNoise(eps), &x_t, t, &[0], &sched, &mut noise_rng)?;

        let ab = sched.alpha_bar(t);
        let ab_prev = if t == 1 { 1.0 } else { sched.alpha_bar(t - 1) };
        let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
        let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = sched.sigma(t);
        let z: Vec<f64> = if sigma > 0.0 {
            (0..x0.numel()).map(|_| replay.sample(StandardNormal)).collect()
        } else {
            vec![0.0; x0.numel()]
        };
        for i in 0..x0.numel() {
            let want = c0 * x0.data()[i] + ct * x_t.data()[i] + sigma * z[i];
            worst = worst.max((step.data()[i] - want).abs());
        }
    }
    Ok(worst)
}

/// `σ_1` over a range of schedules; all must be exactly zero.
pub fn first_sigmas() -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for steps in [1, 2, 10, 100, 1000] {
        out.push(NoiseSchedule::linear_default(steps)?.sigma(1));
    }
    out.push(NoiseSchedule::linear(5, 0.2, 0.2)?.sigma(1));
    Ok(out)
}

// ----------------------------------------------------------------- bigraph

fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = r.sample::<f64, _>(StandardNormal) * 0.5;
        }
    }
}

/// `W[i, o]` and `b[o]` of a linear map.
fn lin(store: &ParamStore, l: &Linear) -> (Vec<f64>, Vec<f64>, usize, usize) {
    (store.value(l.w).data().to_vec(), store.value(l.b).data().to_vec(), l.n_in, l.n_out)
}

/// `Y[o, d] = Σ_i W[i, o] X[i, d] + b[o]` over a row-major `[n_in, cols]` map.
fn conv(store: &ParamStore, l: &Linear, x: &[f64], cols: usize) -> Vec<f64> {
    let (w, b, n_in, n_out) = lin(store, l);
    let mut y = vec![0.0; n_out * cols];
    for o in 0..n_out {
        for d in 0..cols {
            let mut s = b[o];
            for i in 0..n_in {
                s += w[i * n_out + o] * x[i * cols + d];
            }
            y[o * cols + d] = s;
        }
    }
    y
}

struct Stages {
    v: Vec<f64>,
    h: Vec<f64>,
    m: Vec<f64>,
    out: Vec<f64>,
}

/// Nested-loop evaluation of one direction on `[C_in, D]` maps. `keep`
/// zeroes projected features of padded nodes; `n` selects the leading
/// block of the adjacency and edge matrices.
fn direction_oracle(
    store: &ParamStore,
    p: &BipartiteGraphParams,
    dir: Direction,
    f_self: &[f64],
    f_other: &[f64],
    n_self: usize,
    n_other: usize,
    keep: Option<&[bool]>,
) -> Stages {
    let (reduce_self, reduce_other, adj, edge, out) = match dir {
        Direction::A => (&p.phi_a, &p.theta_b, p.adj_a, p.edge_a, &p.out_a),
        Direction::B => (&p.phi_b, &p.theta_a, p.adj_b, p.edge_b, &p.out_b),
    };
    let c = p.channels;
    let mut phi = conv(store, reduce_self, f_self, n_self);
    let mut h = conv(store, reduce_other, f_other, n_other);
    if let Some(keep) = keep {
        for ch in 0..c {
            for d in 0..n_self {
                if !keep[d] {
                    phi[ch * n_self + d] = 0.0;
                }
            }
            for d in 0..n_other {
                if !keep[d] {
                    h[ch * n_other + d] = 0.0;
                }
            }
        }
    }
    let a_full = store.value(adj);
    let w_full = store.value(edge);
    let (sa, sw) = (a_full.shape()[0], w_full.shape()[0]);
    let a = |i: usize, j: usize| a_full.data()[i * sa + j];
    let w = |i: usize, j: usize| w_full.data()[i * sw + j];

    let mut v = vec![0.0; n_other * n_self];
    for m in 0..n_other {
        for d in 0..n_self {
            for ch in 0..c {
                v[m * n_self + d] += h[ch * n_other + m] * phi[ch * n_self + d];
            }
        }
    }
    let mut mm = vec![0.0; n_other * n_self];
    for i in 0..n_other {
        for j in 0..n_self {
            let mut s = 0.0;
            for q in 0..n_other {
                let lap = if i == q { 1.0 } else { 0.0 } - a(i, q);
                for r in 0..n_self {
                    s += lap * v[q * n_self + r] * w(r, j);
                }
            }
            mm[i * n_self + j] = s;
        }
    }
    let mut hm = vec![0.0; c * n_self];
    for ch in 0..c {
        for d in 0..n_self {
            for m in 0..n_other {
                hm[ch * n_self + d] += h[ch * n_other + m] * mm[m * n_self + d];
            }
        }
    }
    let mut back = conv(store, out, &hm, n_self);
    for (b, f) in back.iter_mut().zip(f_self) {
        *b += f;
    }
    Stages { v, h, m: mm, out: back }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// Staged channels × nodes operations and the batched forward pass against
/// the nested-loop oracle, over random dimensions up to `max_dim`.
pub fn bigraph_vs_loops(draws: usize, max_dim: usize) -> Result<f64> {
    let mut r = rng(31);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let c_in = r.random_range(1..=max_dim);
        let c = r.random_range(1..=max_dim);
        let (da, db) = (r.random_range(1..=max_dim), r.random_range(1..=max_dim));
        let mut store = ParamStore::new();
        let p = BipartiteGraphParams::new(&mut store, "g", c_in, c, da, db, &mut r)?;
        randomize(&mut store, &mut r);

        // Staged operations with different node counts on each side.
        let fa = Tensor::randn(&[c_in, da], 1.0, &mut r);
        let fb = Tensor::randn(&[c_in, db], 1.0, &mut r);
        for (dir, fs, fo, ns, no) in [(Direction::A, &fa, &fb, da, db), (Direction::B, &fb, &fa, db, da)] {
            let want = direction_oracle(&store, &p, dir, fs.data(), fo.data(), ns, no, None);
            let mut tape = Tape::new();
            let s = tape.constant(fs.clone());
            let o = tape.constant(fo.clone());
            let (v, h) = project_to_graph(&mut tape, &store, &p, dir, s, o)?;
            let m = graph_reason(&mut tape, &store, &p, dir, v)?;
            let out = project_back(&mut tape, &store, &p, dir, m, h, s)?;
            worst = worst
                .max(max_abs_diff(tape.value(v), &want.v))
                .max(max_abs_diff(tape.value(h), &want.h))
                .max(max_abs_diff(tape.value(m), &want.m))
                .max(max_abs_diff(tape.value(out), &want.out));
        }

        // Batched streams of n ≤ min(D_a, D_b) frames, some padded.
        let n = r.random_range(1..=da.min(db));
        let b = r.random_range(1..=3);
        let sa = Tensor::randn(&[b, n, c_in], 1.0, &mut r);
        let sb = Tensor::randn(&[b, n, c_in], 1.0, &mut r);
        let mut keep: Vec<bool> = (0..b * n).map(|_| r.random_bool(0.8)).collect();
        for bi in 0..b {
            keep[bi * n] = true;
        }
        let mut tape = Tape::new();
        let xa = tape.constant(sa.clone());
        let xb = tape.constant(sb.clone());
        let (ya, yb) = bigraph_forward(&mut tape, &store, &p, xa, xb, Some(&keep))?;
        let per = n * c_in;
        for bi in 0..b {
            let fa = transpose(&sa.data()[bi * per..(bi + 1) * per], n, c_in);
            let fb = transpose(&sb.data()[bi * per..(bi + 1) * per], n, c_in);
            let k = &keep[bi * n..(bi + 1) * n];
            let oa = direction_oracle(&store, &p, Direction::A, &fa, &fb, n, n, Some(k));
            let ob = direction_oracle(&store, &p, Direction::B, &fb, &fa, n, n, Some(k));
            worst = worst
                .max(max_abs_diff(&tape.value(ya)[bi * per..(bi + 1) * per], &transpose(&oa.out, c_in, n)))
                .max(max_abs_diff(&tape.value(yb)[bi * per..(bi + 1) * per], &transpose(&ob.out, c_in, n)));
        }
    }
    Ok(worst)
}

/// With freshly initialized (zero) output maps the module must return its
/// inputs bit for bit. Returns the number of draws that did not.
pub fn zero_output_identity(draws: usize) -> Result<usize> {
    let mut r = rng(32);
    let mut bad = 0;
    for _ in 0..draws {
        let (c_in, c, nodes) = (r.random_range(1..=6), r.random_range(1..=6), r.random_range(1..=6));
        let mut store = ParamStore::new();
        let p = BipartiteGraphParams::new(&mut store, "g", c_in, c, nodes, nodes, &mut r)?;
        let n = r.random_range(1..=nodes);
        let sa = Tensor::randn(&[2, n, c_in], 1.0, &mut r);
        let sb = Tensor::randn(&[2, n, c_in], 1.0, &mut r);
        let mut tape = Tape::new();
        let xa = tape.constant(sa.clone());
        let xb = tape.constant(sb.clone());
        let (ya, yb) = bigraph_forward(&mut tape, &store, &p, xa, xb, None)?;
        if tape.value(ya) != sa.data() || tape.value(yb) != sb.data() {
            bad += 1;
        }
    }
    Ok(bad)
}

// --------------------------------------------------------------- attention

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = efficient_attention(&mut tape, q, k, v, heads, None)?;
    Ok(tape.tensor(out))
}

/// Reorders rows of `[1, n, d]` so row `i` of the result is row `perm[i]`.
fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let d = x.shape()[2];
    Tensor::from_fn(x.shape(), |i| x.data()[perm[i / d] * d + i % d])
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionChecks {
    /// Deviation of every output row from the constant value row.
    pub collapse: f64,
    /// Permuting queries permutes the output the same way.
    pub query_equivariance: f64,
    /// Permuting keys and values together leaves the output unchanged.
    pub key_invariance: f64,
}

pub fn attention_properties(cases: usize) -> Result<AttentionChecks> {
    let mut r = rng(41);
    let mut out = AttentionChecks { collapse: 0.0, query_equivariance: 0.0, key_invariance: 0.0 };
    for _ in 0..cases {
        let heads = r.random_range(1..=3);
        let (dk, dv) = (heads * r.random_range(1..=4), heads * r.random_range(1..=4));
        let (nq, nk) = (r.random_range(1..=8), r.random_range(1..=8));
        let q = Tensor::randn(&[1, nq, dk], 2.0, &mut r);
        let k = Tensor::randn(&[1, nk, dk], 2.0, &mut r);
        let v = Tensor::randn(&[1, nk, dv], 1.0, &mut r);

        let row = Tensor::randn(&[dv], 1.0, &mut r);
        let v_const = Tensor::from_fn(&[1, nk, dv], |i| row.data()[i % dv]);
        let y = attend(&q, &k, &v_const, heads)?;
        let want = Tensor::from_fn(&[1, nq, dv], |i| row.data()[i % dv]);
        out.collapse = out.collapse.max(max_abs_diff(y.data(), want.data()));

        let base = attend(&q, &k, &v, heads)?;
        let mut pq: Vec<usize> = (0..nq).collect();
        pq.shuffle(&mut r);
        let yq = attend(&permute_rows(&q, &pq), &k, &v, heads)?;
        out.query_equivariance = out.query_equivariance.max(max_abs_diff(yq.data(), permute_rows(&base, &pq).data()));

        let mut pk: Vec<usize> = (0..nk).collect();
        pk.shuffle(&mut r);
        let yk = attend(&q, &permute_rows(&k, &pk), &permute_rows(&v, &pk), heads)?;
        out.key_invariance = out.key_invariance.max(max_abs_diff(yk.data(), base.data()));
    }
    Ok(out)
}

// ----------------------------------------------------------------- metrics

fn random_features(n: usize, d: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| r.sample(StandardNormal)).collect()).collect()
}

pub fn frechet_self_distance() -> Result<f64> {
    let mut r = rng(51);
    let mut worst = 0.0f64;
    for (n, d) in [(50, 4), (200, 16), (30, 40)] {
        let s = feature_stats(&random_features(n, d, &mut r))?;
        worst = worst.max(frechet_distance(&s, &s)?.abs());
    }
    Ok(worst)
}

/// `N(0, 1)` vs `N(1, 1)` (distance 1) and `N(0, 4I)` vs `N(0, I)` in two
/// dimensions (`4 + 1 − 2·2` per dimension, 2 in total).
pub fn frechet_analytic() -> Result<(f64, f64)> {
    let g = |mu: Vec<f64>, cov: Vec<f64>| FeatureStats { mu, cov, n: 2 };
    let one = frechet_distance(&g(vec![0.0], vec![1.0]), &g(vec![1.0], vec![1.0]))?;
    let two = frechet_distance(
        &g(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]),
        &g(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]),
    )?;
    Ok((one, two))
}

/// Shuffle of `0..n` with the shared generator, odd element dropped.
fn brute_order(n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(r);
    order.truncate(n - n % 2);
    order
}

/// Average Euclidean distance between index-paired halves of `order`.
fn brute_split_distance(f: &[Vec<f64>], order: &[usize]) -> f64 {
    let h = order.len() / 2;
    let mut total = 0.0;
    for i in 0..h {
        let mut sq = 0.0;
        for (x, y) in f[order[i]].iter().zip(&f[order[h + i]]) {
            sq += (x - y).powi(2);
        }
        total += sq.sqrt();
    }
    total / h as f64
}

/// `(implementation, brute force)` multimodality under one seed. Class
/// sizes include an equal-count class, which shares one split.
pub fn multimodality_vs_brute_force(seed: u64) -> Result<(f64, f64)> {
    let mut r = rng(seed ^ 0xabc);
    let gen_sizes = [10, 11, 12, 7];
    let ref_sizes = [13, 11, 9, 7];
    let gen: Vec<Vec<Vec<f64>>> = gen_sizes.iter().map(|&n| random_features(n, 6, &mut r)).collect();
    let reference: Vec<Vec<Vec<f64>>> = ref_sizes.iter().map(|&n| random_features(n, 6, &mut r)).collect();
    let got = multimodality(&gen, &reference, &mut rng(seed))?.score;
    let mut shared = rng(seed);
    let mut sum = 0.0;
    for (g, rf) in gen.iter().zip(&reference) {
        let og = brute_order(g.len(), &mut shared);
        let or = if rf.len() == g.len() { og.clone() } else { brute_order(rf.len(), &mut shared) };
        sum += (brute_split_distance(g, &og) - brute_split_distance(rf, &or)).abs();
    }
    Ok((got, sum / gen.len() as f64))
}

// ----------------------------------------------------------- normalization

pub fn random_raw_sequence(r: &mut ChaCha8Rng) -> Result<MotionSequence> {
    let n = r.random_range(1..=12);
    let k = r.random_range(2..=6);
    let spread = r.random_range(0.1..5.0);
    let offset = Tensor::randn(&[3], 3.0, r);
    let frames = Tensor::from_fn(&[n, k, 3, 2], |i| offset.data()[(i / 2) % 3] + spread * r.sample::<f64, _>(StandardNormal));
    MotionSequence::new(frames, "x", 30, r.random_range(0..k), false)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizationChecks {
    pub translation: f64,
    pub scale: f64,
    /// `| ‖pre-centering array‖_F − 1 |`.
    pub unit_norm: f64,
    /// Largest torso-midpoint coordinate after normalization.
    pub torso_origin: f64,
    /// Output against the oracle's pre-centering array shifted per frame.
    pub oracle: f64,
}

pub fn normalization_properties(sequences: usize) -> Result<NormalizationChecks> {
    let mut r = rng(61);
    let mut out = NormalizationChecks::default();
    for _ in 0..sequences {
        let seq = random_raw_sequence(&mut r)?;
        let (n, k) = (seq.len(), seq.joints());
        let base = normalize_sequence(&seq)?;

        let shift = Tensor::randn(&[3], 10.0, &mut r);
        let mut moved = seq.clone();
        for (i, v) in moved.frames.data_mut().iter_mut().enumerate() {
            *v += shift.data()[(i / 2) % 3];
        }
        out.translation = out.translation.max(max_abs_diff(normalize_sequence(&moved)?.frames.data(), base.frames.data()));

        let c = r.random_range(0.01..100.0);
        let mut scaled = seq.clone();
        scaled.frames.data_mut().iter_mut().for_each(|v| *v *= c);
        out.scale = out.scale.max(max_abs_diff(normalize_sequence(&scaled)?.frames.data(), base.frames.data()));

        // Oracle: centre per axis, divide by the Frobenius norm.
        let idx = |f: usize, j: usize, c: usize, p: usize| ((f * k + j) * 3 + c) * 2 + p;
        let raw = seq.frames.data();
        let mut pre = raw.to_vec();
        for c in 0..3 {
            let mut mean = 0.0;
            for f in 0..n {
                for j in 0..k {
                    for p in 0..2 {
                        mean += raw[idx(f, j, c, p)];
                    }
                }
            }
            mean /= (n * k * 2) as f64;
            for f in 0..n {
                for j in 0..k {
                    for p in 0..2 {
                        pre[idx(f, j, c, p)] -= mean;
                    }
                }
            }
        }
        let norm = pre.iter().map(|v| v * v).sum::<f64>().sqrt();
        pre.iter_mut().for_each(|v| *v /= norm);
        out.unit_norm = out.unit_norm.max((pre.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());

        let t = seq.torso_index;
        let got = base.frames.data();
        for f in 0..n {
            for c in 0..3 {
                let mid_out = 0.5 * (got[idx(f, t, c, 0)] + got[idx(f, t, c, 1)]);
                out.torso_origin = out.torso_origin.max(mid_out.abs());
                let mid_pre = 0.5 * (pre[idx(f, t, c, 0)] + pre[idx(f, t, c, 1)]);
                for j in 0..k {
                    for p in 0..2 {
                        let want = pre[idx(f, j, c, p)] - mid_pre;
                        out.oracle = out.oracle.max((got[idx(f, j, c, p)] - want).abs());
                    }
                }
            }
        }
    }
    Ok(out)
}

