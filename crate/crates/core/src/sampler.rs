//! Noise-prediction objective, ancestral sampling and the training loop.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, MotionSequence, Split};
use crate::denoiser::checkpoint::{read_container, write_container};
use crate::denoiser::{build_vocab, DenoiserConfig, DenoiserNet, DenoiserWeights, NoiseBatch, NoisePredictor};
use crate::error::{Error, Result};
use crate::numerics::{Adam, ParamStore, Tape, Tensor, Var};
use crate::schedule::{default_beta_range, q_sample, NoiseSchedule};

/// Optimisation and schedule settings. The diffusion length lives in the
/// denoiser config because the timestep embedding depends on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Checkpoint cadence in epochs.
    pub checkpoint_every: usize,
    pub denoiser: DenoiserConfig,
}

impl TrainConfig {
    /// Single-core profile: T = 100, two layers of width 64, batch 16.
    pub fn desk() -> Self {
        let denoiser = DenoiserConfig::desk();
        let (beta_start, beta_end) = default_beta_range(denoiser.diffusion_steps);
        Self {
            preset: "desk".into(),
            beta_start,
            beta_end,
            lr: 1e-3,
            batch_size: 16,
            epochs: 150,
            seed: 0,
            checkpoint_every: 25,
            denoiser,
        }
    }

    /// Published regime: T = 1000, eight layers and heads, lr 1e-4,
    /// batch 128, 1500 epochs.
    pub fn paper() -> Self {
        let denoiser = DenoiserConfig::paper();
        let (beta_start, beta_end) = default_beta_range(denoiser.diffusion_steps);
        Self {
            preset: "paper".into(),
            beta_start,
            beta_end,
            lr: 1e-4,
            batch_size: 128,
            epochs: 1500,
            seed: 0,
            checkpoint_every: 50,
            denoiser,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }

    pub fn steps(&self) -> usize {
        self.denoiser.diffusion_steps
    }

    /// Changes T and resets the beta endpoints to their defaults for it.
    pub fn set_steps(&mut self, steps: usize) {
        self.denoiser.diffusion_steps = steps;
        (self.beta_start, self.beta_end) = default_beta_range(steps);
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps(), self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, epochs and checkpoint_every must be positive".into()));
        }
        self.schedule()?;
        if !self.denoiser.vocab.is_empty() {
            self.denoiser.validate()?;
        }
        Ok(())
    }
}

/// Dataset facts a checkpoint needs to generate comparable samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataInfo {
    pub classes: Vec<String>,
    pub fps: u32,
    pub torso_index: usize,
    /// Factor taking normalized coordinates to the unit-variance space the
    /// model is trained in: the inverse RMS coordinate of the train split.
    pub scale: f64,
}

/// Inverse root-mean-square coordinate over `seqs`.
pub fn data_scale(seqs: &[&MotionSequence]) -> Result<f64> {
    let (sum, count) = seqs.iter().fold((0.0, 0usize), |(s, c), q| {
        (s + q.frames.data().iter().map(|v| v * v).sum::<f64>(), c + q.frames.numel())
    });
    let rms = (sum / count.max(1) as f64).sqrt();
    if !(rms > 0.0 && rms.is_finite()) {
        return Err(Error::Data("training coordinates have no spread".into()));
    }
    Ok(1.0 / rms)
}

/// Trained weights with optimiser state and history. Adam moments live in
/// the parameter store.
#[derive(Clone)]
pub struct Checkpoint {
    pub weights: DenoiserWeights,
    pub train: TrainConfig,
    pub data: DataInfo,
    pub epoch: usize,
    pub step: u64,
    /// `(step, loss)` per optimiser step.
    pub loss_history: Vec<(u64, f64)>,
}

impl fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Checkpoint")
            .field("preset", &self.train.preset)
            .field("epoch", &self.epoch)
            .field("step", &self.step)
            .field("parameters", &self.weights.num_parameters())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    train: TrainConfig,
    data: DataInfo,
    epoch: usize,
    step: u64,
    loss_history: Vec<(u64, f64)>,
}

const MOMENT_M: &str = "#adam_m";
const MOMENT_V: &str = "#adam_v";

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = CheckpointMeta {
            train: self.train.clone(),
            data: self.data.clone(),
            epoch: self.epoch,
            step: self.step,
            loss_history: self.loss_history.clone(),
        };
        let meta = serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let moments: Vec<(String, Tensor, Tensor)> = self
            .weights
            .store
            .iter()
            .map(|(_, p)| {
                let shape = p.value.shape().to_vec();
                Ok((p.name.clone(), Tensor::new(shape.clone(), p.m.clone())?, Tensor::new(shape, p.v.clone())?))
            })
            .collect::<Result<_>>()?;
        let mut tensors: Vec<(String, &Tensor)> = Vec::with_capacity(3 * moments.len());
        for ((_, p), (name, m, v)) in self.weights.store.iter().zip(&moments) {
            tensors.push((name.clone(), &p.value));
            tensors.push((format!("{name}{MOMENT_M}"), m));
            tensors.push((format!("{name}{MOMENT_V}"), v));
        }
        write_container(w, &meta, &tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: std::io::Read>(r: R) -> Result<Self> {
        let (meta, tensors) = read_container(r)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut values = Vec::new();
        let mut moments = std::collections::HashMap::new();
        for (name, t) in tensors {
            if let Some(base) = name.strip_suffix(MOMENT_M) {
                moments.insert((base.to_string(), 0), t);
            } else if let Some(base) = name.strip_suffix(MOMENT_V) {
                moments.insert((base.to_string(), 1), t);
            } else {
                values.push((name, t));
            }
        }
        let mut weights = DenoiserWeights::from_named(&meta.train.denoiser, values)?;
        for p in weights.store.iter_mut() {
            for (slot, kind) in [(&mut p.m, 0), (&mut p.v, 1)] {
                let t = moments
                    .remove(&(p.name.clone(), kind))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimiser state for {}", p.name)))?;
                if t.numel() != slot.len() {
                    return Err(Error::Checkpoint(format!("optimiser state for {} has wrong size", p.name)));
                }
                *slot = t.into_data();
            }
        }
        if !moments.is_empty() {
            return Err(Error::Checkpoint("optimiser state for unknown parameters".into()));
        }
        Ok(Self {
            weights,
            train: meta.train,
            data: meta.data,
            epoch: meta.epoch,
            step: meta.step,
            loss_history: meta.loss_history,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_loss_csv(&self.loss_history, path)
    }
}

pub fn write_loss_csv(history: &[(u64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,loss")?;
    for (s, l) in history {
        writeln!(w, "{s},{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Independent generator for `(domain, index)` under one seed.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) ^ index);
    rng
}

const DOMAIN_INIT: u64 = 1;
const DOMAIN_SHUFFLE: u64 = 2;
const DOMAIN_STEP: u64 = 3;
/// Domain reserved for sampling streams drawn by callers.
pub const DOMAIN_SAMPLE: u64 = 4;

pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Mean squared error between `eps` and the model's estimate at
/// `q_sample(x0, t, eps)`.
pub fn diffusion_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    tokens: &[usize],
    sched: &NoiseSchedule,
) -> Result<f64> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let pred = model.predict_noise(&x_t, t, tokens)?;
    if pred.shape() != eps.shape() {
        return Err(Error::shape("diffusion_loss", pred.shape(), eps.shape()));
    }
    let n = eps.numel() as f64;
    Ok(pred.data().iter().zip(eps.data()).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / n)
}

/// One training minibatch, already padded to a common length.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// `[B, N, k, 3, 2]`.
    pub x0: Tensor,
    pub eps: Tensor,
    pub steps: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    /// `[B * N]`.
    pub frame_keep: Vec<bool>,
}

/// Differentiable objective for a batch: squared error averaged over the
/// elements of real frames.
pub fn batch_loss<'p>(
    tape: &mut Tape<'p>,
    net: &DenoiserNet,
    store: &'p ParamStore,
    batch: &TrainBatch,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let s = batch.x0.shape().to_vec();
    if s.len() != 5 || batch.eps.shape() != s.as_slice() || batch.steps.len() != s[0] {
        return Err(Error::shape("batch_loss", &s, batch.eps.shape()));
    }
    let per: usize = s[1..].iter().product();
    let frame: usize = s[2..].iter().product();
    let mut x_t = Vec::with_capacity(batch.x0.numel());
    for (i, &t) in batch.steps.iter().enumerate() {
        sched.check_step(t)?;
        let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let r = i * per..(i + 1) * per;
        x_t.extend(batch.x0.data()[r.clone()].iter().zip(&batch.eps.data()[r]).map(|(x, e)| a * x + b * e));
    }
    let x_t = Tensor::new(s.clone(), x_t)?;
    let all_real = batch.frame_keep.iter().all(|&k| k);
    let input = NoiseBatch {
        x_t: &x_t,
        frame_keep: (!all_real).then_some(batch.frame_keep.as_slice()),
        steps: &batch.steps,
        tokens: &batch.tokens,
    };
    let pred = net.forward(tape, store, input)?;
    let eps = tape.constant(batch.eps.clone());
    let diff = tape.sub(pred, eps)?;
    let real = batch.frame_keep.iter().filter(|&&k| k).count() * frame;
    if real == 0 {
        return Err(Error::Data("batch has no real frames".into()));
    }
    let diff = if all_real {
        diff
    } else {
        let mask = Tensor::from_fn(&s, |i| if batch.frame_keep[i / frame] { 1.0 } else { 0.0 });
        let m = tape.constant(mask);
        tape.mul(diff, m)?
    };
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / real as f64))
}

/// Mean of `p(x_{t-1} | x_t)` given a noise estimate.
pub fn reverse_mean(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::shape("reverse_mean", x_t.shape(), eps_hat.shape()));
    }
    let a = sched.alpha(t);
    let coef = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / a.sqrt();
    let data = x_t.data().iter().zip(eps_hat.data()).map(|(x, e)| inv * (x - coef * e)).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

fn add_noise<R: Rng + ?Sized>(mut mean: Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma > 0.0 {
        for v in mean.data_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v += sigma * g;
        }
    }
    mean
}

/// One ancestral step `x_t → x_{t-1}`. No noise is drawn at `t = 1`.
pub fn reverse_step<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: usize,
    tokens: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let eps = model.predict_noise(x_t, t, tokens)?;
    let mean = reverse_mean(x_t, &eps, t, sched)?;
    Ok(add_noise(mean, sched.sigma(t), rng))
}

/// Draws `x_T ~ N(0, I)` of shape `[frames, joints, 3, 2]` and runs the
/// reverse chain down to `x_0` (normalized space).
pub fn generate<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    tokens: &[usize],
    frames: usize,
    joints: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut out = generate_batch(model, &[tokens.to_vec()], frames, joints, sched, rng)?;
    Ok(out.pop().unwrap())
}

/// Several trajectories advanced together, one batched model call per step.
/// All initial noise is drawn first, in request order.
pub fn generate_batch<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    requests: &[Vec<usize>],
    frames: usize,
    joints: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if requests.is_empty() || frames == 0 {
        return Err(Error::Contract("nothing to generate".into()));
    }
    let b = requests.len();
    let shape = [b, frames, joints, 3, 2];
    let mut x = gaussian(&shape, rng);
    let mut steps = vec![0; b];
    for t in (1..=sched.steps()).rev() {
        steps.fill(t);
        let eps = model.predict_noise_batch(NoiseBatch { x_t: &x, frame_keep: None, steps: &steps, tokens: requests })?;
        let mean = reverse_mean(&x, &eps, t, sched)?;
        x = add_noise(mean, sched.sigma(t), rng);
    }
    if !x.is_finite() {
        return Err(Error::Numerical("generated sample is not finite".into()));
    }
    let per = frames * joints * 6;
    let data = x.into_data();
    (0..b)
        .map(|i| Tensor::new(vec![frames, joints, 3, 2], data[i * per..(i + 1) * per].to_vec()))
        .collect()
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.train.schedule()
    }

    /// Generates labeled sequences, batched in groups of `batch`.
    pub fn sample_sequences<R: Rng + ?Sized>(
        &self,
        labels: &[String],
        frames: usize,
        batch: usize,
        rng: &mut R,
    ) -> Result<Vec<MotionSequence>> {
        let sched = self.schedule()?;
        let cap = self.weights.config().capacity();
        if frames > cap {
            return Err(Error::Capacity { len: frames, max: cap });
        }
        let mut out = Vec::with_capacity(labels.len());
        for chunk in labels.chunks(batch.max(1)) {
            let tokens = chunk.iter().map(|l| self.weights.tokenize(l)).collect::<Result<Vec<_>>>()?;
            let xs = generate_batch(&self.weights, &tokens, frames, self.weights.config().joints, &sched, rng)?;
            for (x, label) in xs.into_iter().zip(chunk) {
                let mut x = x;
                x.data_mut().iter_mut().for_each(|v| *v /= self.data.scale);
                out.push(MotionSequence::new(x, label.clone(), self.data.fps, self.data.torso_index, true)?);
            }
        }
        Ok(out)
    }
}

fn check_training_data(train: &[&MotionSequence], cfg: &DenoiserConfig) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("no training sequences".into()));
    }
    for s in train {
        if s.joints() != cfg.joints {
            return Err(Error::Data(format!("sequence has {} joints, model expects {}", s.joints(), cfg.joints)));
        }
        if !s.normalized {
            return Err(Error::Contract("training sequences must be normalized".into()));
        }
        if s.len() > cfg.capacity() {
            return Err(Error::Capacity { len: s.len(), max: cfg.capacity() });
        }
    }
    Ok(())
}

/// Pads the selected sequences to a common length, multiplies them by
/// `scale` and draws `t` and `ε`.
pub fn make_batch<R: Rng + ?Sized>(
    seqs: &[&MotionSequence],
    tokens: &[Vec<usize>],
    scale: f64,
    steps: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    let b = seqs.len();
    let n = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let k = seqs.first().map_or(0, |s| s.joints());
    let frame = k * 6;
    let mut x0 = vec![0.0; b * n * frame];
    let mut keep = vec![false; b * n];
    for (i, s) in seqs.iter().enumerate() {
        let len = s.len();
        for (dst, v) in x0[i * n * frame..(i * n + len) * frame].iter_mut().zip(s.frames.data()) {
            *dst = v * scale;
        }
        keep[i * n..i * n + len].fill(true);
    }
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=steps)).collect();
    let eps = gaussian(&[b, n, k, 3, 2], rng);
    Ok(TrainBatch {
        x0: Tensor::new(vec![b, n, k, 3, 2], x0)?,
        eps,
        steps: t,
        tokens: tokens.to_vec(),
        frame_keep: keep,
    })
}

/// Trains (or resumes training) on the train split.
///
/// Epoch `e` shuffles with its own generator and step `s` draws `t`, `ε`
/// and dropout masks from another, so a run resumed from an epoch-boundary
/// checkpoint continues exactly as the uninterrupted run would.
/// `on_checkpoint` is called every `checkpoint_every` epochs and after the
/// last one.
pub fn train_model(
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let mut cfg = cfg.clone();
    if cfg.denoiser.vocab.is_empty() {
        cfg.denoiser.vocab = build_vocab(&dataset.classes);
    }
    cfg.validate()?;
    cfg.denoiser.validate()?;
    let sched = cfg.schedule()?;
    let train = dataset.part(Split::Train);
    check_training_data(&train, &cfg.denoiser)?;

    let mut ckpt = match resume {
        Some(c) => {
            let mut same = c.train.clone();
            same.epochs = cfg.epochs;
            same.checkpoint_every = cfg.checkpoint_every;
            if same != cfg {
                return Err(Error::Config("resume checkpoint was trained with a different configuration".into()));
            }
            Checkpoint { train: cfg.clone(), ..c }
        }
        None => {
            let weights = DenoiserWeights::new(&cfg.denoiser, &mut stream_rng(cfg.seed, DOMAIN_INIT, 0))?;
            Checkpoint {
                weights,
                train: cfg.clone(),
                data: DataInfo {
                    classes: dataset.classes.clone(),
                    fps: train[0].fps,
                    torso_index: train[0].torso_index,
                    scale: data_scale(&train)?,
                },
                epoch: 0,
                step: 0,
                loss_history: Vec::new(),
            }
        }
    };
    let tokens = train
        .iter()
        .map(|s| ckpt.weights.tokenize(&s.label))
        .collect::<Result<Vec<_>>>()?;
    let adam = Adam::new(cfg.lr);
    let mut last_good = ckpt.clone();

    while ckpt.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, DOMAIN_SHUFFLE, ckpt.epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            let step = ckpt.step + 1;
            let mut rng = stream_rng(cfg.seed, DOMAIN_STEP, step);
            let seqs: Vec<&MotionSequence> = idx.iter().map(|&i| train[i]).collect();
            let toks: Vec<Vec<usize>> = idx.iter().map(|&i| tokens[i].clone()).collect();
            let batch = make_batch(&seqs, &toks, ckpt.data.scale, sched.steps(), &mut rng)?;
            let store = &ckpt.weights.store;
            let mut tape = Tape::training(ChaCha8Rng::from_rng(&mut rng));
            let loss = batch_loss(&mut tape, &ckpt.weights.net, store, &batch, &sched)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Diverged { step, last_good: Box::new(last_good) });
            }
            let grads = tape.gradients(loss, store)?;
            drop(tape);
            if !grads.global_norm().is_finite() {
                return Err(Error::Diverged { step, last_good: Box::new(last_good) });
            }
            adam.step(&mut ckpt.weights.store, &grads, step)?;
            ckpt.step = step;
            ckpt.loss_history.push((step, value));
        }
        ckpt.epoch += 1;
        last_good = ckpt.clone();
        if ckpt.epoch % cfg.checkpoint_every == 0 || ckpt.epoch == cfg.epochs {
            on_checkpoint(&ckpt)?;
        }
    }
    Ok(ckpt)
}
