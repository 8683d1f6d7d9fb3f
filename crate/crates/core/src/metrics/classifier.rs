//! Transformer action classifier used for accuracy and deep features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, MotionSequence, Split};
use crate::error::{Error, Result};
use crate::layers::{masked_mean_pool, sinusoidal_table, EncoderLayer, Linear, Norm};
use crate::numerics::{Adam, Init, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { width: 64, heads: 4, layers: 2, epochs: 50, lr: 1e-3, batch_size: 16, seed: 0 }
    }
}

#[derive(Debug, Clone)]
struct ClassifierNet {
    embed: Linear,
    layers: Vec<EncoderLayer>,
    ln: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Trained classifier with its class list and held-out accuracy.
#[derive(Debug, Clone)]
pub struct ClassifierWeights {
    net: ClassifierNet,
    pub store: ParamStore,
    pub config: ClassifierConfig,
    pub classes: Vec<String>,
    pub joints: usize,
    /// Average per-class accuracy on the test split, when one exists.
    pub held_out_accuracy: Option<f64>,
}

impl ClassifierNet {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ClassifierConfig,
        frame_width: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = cfg.width;
        Ok(Self {
            embed: Linear::new(store, "embed", frame_width, w, Init::Xavier, rng)?,
            layers: (0..cfg.layers)
                .map(|i| EncoderLayer::new(store, &format!("layer{i}"), w, cfg.heads, 0.0, rng))
                .collect::<Result<_>>()?,
            ln: Norm::new(store, "ln", w, rng)?,
            fc1: Linear::new(store, "fc1", w, w, Init::Xavier, rng)?,
            fc2: Linear::new(store, "fc2", w, classes, Init::Xavier, rng)?,
        })
    }

    /// Pooled features `[B, width]` and logits `[B, classes]`.
    fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, seqs: &[&MotionSequence], width: usize) -> Result<(Var, Var)> {
        let b = seqs.len();
        let n = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let fw = seqs[0].frames.numel() / seqs[0].len();
        let mut x = vec![0.0; b * n * fw];
        let mut keep = vec![false; b * n];
        for (i, s) in seqs.iter().enumerate() {
            x[i * n * fw..(i * n + s.len()) * fw].copy_from_slice(s.frames.data());
            keep[i * n..i * n + s.len()].fill(true);
        }
        let keep = keep.iter().any(|k| !k).then_some(keep);
        let xv = tape.constant(Tensor::new(vec![b, n, fw], x)?);
        let h = self.embed.forward(tape, store, xv)?;
        let pe = sinusoidal_table(n, width, 0)?;
        let pe = tape.constant(Tensor::from_fn(&[b, n, width], |i| pe.data()[i % (n * width)]));
        let mut h = tape.add(h, pe)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, keep.as_deref())?;
        }
        let h = self.ln.forward(tape, store, h)?;
        let feats = masked_mean_pool(tape, h, keep.as_deref())?;
        let z = self.fc1.forward(tape, store, feats)?;
        let z = tape.gelu(z);
        let logits = self.fc2.forward(tape, store, z)?;
        Ok((feats, logits))
    }
}

/// Per-class and averaged accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// `(class, accuracy, sample count)` for classes with samples.
    pub per_class: Vec<(String, f64, usize)>,
    /// Mean of the per-class accuracies.
    pub average: f64,
}

fn check_input(seq: &MotionSequence, joints: usize) -> Result<()> {
    if !seq.normalized {
        return Err(Error::Contract("classifier input must be normalized".into()));
    }
    if seq.joints() != joints {
        return Err(Error::Data(format!("sequence has {} joints, classifier expects {joints}", seq.joints())));
    }
    Ok(())
}

impl ClassifierWeights {
    pub fn feature_dim(&self) -> usize {
        self.config.width
    }

    fn run(&self, seqs: &[&MotionSequence]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut feats = Vec::with_capacity(seqs.len());
        let mut preds = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            for s in chunk {
                check_input(s, self.joints)?;
            }
            let mut tape = Tape::new();
            let (f, logits) = self.net.forward(&mut tape, &self.store, chunk, self.config.width)?;
            let c = self.classes.len();
            feats.extend(tape.value(f).chunks(self.config.width).map(<[f64]>::to_vec));
            preds.extend(tape.value(logits).chunks(c).map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            }));
        }
        Ok((feats, preds))
    }

    /// Pooled penultimate representation of one normalized sequence.
    pub fn extract_features(&self, seq: &MotionSequence) -> Result<Vec<f64>> {
        Ok(self.run(&[seq])?.0.pop().unwrap())
    }

    pub fn extract_features_batch(&self, seqs: &[&MotionSequence]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(seqs)?.0)
    }

    pub fn predict(&self, seqs: &[&MotionSequence]) -> Result<Vec<usize>> {
        Ok(self.run(seqs)?.1)
    }

    /// Fraction of sequences whose predicted class is their own label.
    pub fn classification_accuracy(&self, seqs: &[&MotionSequence]) -> Result<AccuracyReport> {
        let labels = seqs
            .iter()
            .map(|s| {
                self.classes
                    .iter()
                    .position(|c| c == &s.label)
                    .ok_or_else(|| Error::Data(format!("label `{}` unknown to the classifier", s.label)))
            })
            .collect::<Result<Vec<_>>>()?;
        if seqs.is_empty() {
            return Err(Error::Data("no sequences to classify".into()));
        }
        let preds = self.predict(seqs)?;
        let mut hits = vec![0usize; self.classes.len()];
        let mut totals = vec![0usize; self.classes.len()];
        for (&y, &p) in labels.iter().zip(&preds) {
            totals[y] += 1;
            hits[y] += usize::from(y == p);
        }
        let per_class: Vec<(String, f64, usize)> = (0..self.classes.len())
            .filter(|&c| totals[c] > 0)
            .map(|c| (self.classes[c].clone(), hits[c] as f64 / totals[c] as f64, totals[c]))
            .collect();
        let average = per_class.iter().map(|(_, a, _)| a).sum::<f64>() / per_class.len() as f64;
        Ok(AccuracyReport { per_class, average })
    }
}

/// Cross-entropy training on the train split; the held-out accuracy is
/// measured on the test split.
pub fn train_classifier(dataset: &LabeledDataset, cfg: &ClassifierConfig) -> Result<ClassifierWeights> {
    if cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0 || cfg.width % 2 != 0 {
        return Err(Error::Config(format!("classifier width {} / heads {} invalid", cfg.width, cfg.heads)));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("classifier epochs, batch_size and lr must be positive".into()));
    }
    if dataset.classes.len() < 2 {
        return Err(Error::Data("classifier needs at least 2 classes".into()));
    }
    let train = dataset.part(Split::Train);
    let labels: Vec<usize> = train.iter().map(|s| dataset.class_index(&s.label).unwrap()).collect();
    for (c, name) in dataset.classes.iter().enumerate() {
        let n = labels.iter().filter(|&&y| y == c).count();
        if n < 2 {
            return Err(Error::Data(format!("class `{name}` has {n} training samples, need 2")));
        }
    }
    let joints = train[0].joints();
    for s in &train {
        check_input(s, joints)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let net = ClassifierNet::new(&mut store, cfg, 6 * joints, dataset.classes.len(), &mut rng)?;
    let adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let seqs: Vec<&MotionSequence> = idx.iter().map(|&i| train[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let (_, logits) = net.forward(&mut tape, &store, &seqs, cfg.width)?;
            let loss = tape.cross_entropy(logits, &ys)?;
            if !tape.value(loss)[0].is_finite() {
                return Err(Error::Numerical(format!("classifier loss diverged at step {step}")));
            }
            let grads = tape.gradients(loss, &store)?;
            drop(tape);
            adam.step(&mut store, &grads, step)?;
        }
    }
    let mut clf = ClassifierWeights {
        net,
        store,
        config: cfg.clone(),
        classes: dataset.classes.clone(),
        joints,
        held_out_accuracy: None,
    };
    let test = dataset.part(Split::Test);
    if !test.is_empty() {
        clf.held_out_accuracy = Some(clf.classification_accuracy(&test)?.average);
    }
    Ok(clf)
}
