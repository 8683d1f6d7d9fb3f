use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A two-person skeleton sequence, `frames [N, k, 3, 2]` with the person
/// index innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Tensor,
    pub label: String,
    pub fps: u32,
    pub torso_index: usize,
    pub normalized: bool,
}

impl MotionSequence {
    pub fn new(frames: Tensor, label: impl Into<String>, fps: u32, torso_index: usize, normalized: bool) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 2 {
            return Err(Error::InvalidShape(format!("motion frames must be [N, k, 3, 2], got {s:?}")));
        }
        if s[1] < 2 {
            return Err(Error::InvalidShape(format!("need at least 2 joints, got {}", s[1])));
        }
        if torso_index >= s[1] {
            return Err(Error::InvalidShape(format!("torso index {torso_index} out of range for {} joints", s[1])));
        }
        if !frames.is_finite() {
            return Err(Error::Numerical("motion frames contain non-finite values".into()));
        }
        Ok(Self { frames, label: label.into(), fps, torso_index, normalized })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joints(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Coordinate `c` of joint `j` of person `p` at frame `n`.
    pub fn at(&self, n: usize, j: usize, c: usize, p: usize) -> f64 {
        self.frames.data()[frame_index(self.joints(), n, j, c, p)]
    }
}

#[inline]
pub(crate) fn frame_index(k: usize, n: usize, j: usize, c: usize, p: usize) -> usize {
    ((n * k + j) * 3 + c) * 2 + p
}

/// Brings a raw sequence into the model's coordinate frame: subtract the
/// per-axis mean over everything, divide by the Frobenius norm of the
/// centred array, then translate every frame so the midpoint of the two
/// torso joints is the origin.
pub fn normalize_sequence(seq: &MotionSequence) -> Result<MotionSequence> {
    if seq.normalized {
        return Err(Error::Contract("sequence is already normalized".into()));
    }
    let (n, k) = (seq.len(), seq.joints());
    let mut x = seq.frames.data().to_vec();
    let count = (n * k * 2) as f64;
    let mut mean = [0.0; 3];
    for (i, v) in x.iter().enumerate() {
        mean[(i / 2) % 3] += v;
    }
    for m in &mut mean {
        *m /= count;
    }
    for (i, v) in x.iter_mut().enumerate() {
        *v -= mean[(i / 2) % 3];
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    // Rounding in the mean subtraction leaves residue of order eps · |x|.
    let scale = seq.frames.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if norm <= 16.0 * f64::EPSILON * scale * (x.len() as f64).sqrt() {
        return Err(Error::Degenerate("all points coincide; Frobenius norm is zero".into()));
    }
    for v in &mut x {
        *v /= norm;
    }
    let t = seq.torso_index;
    for f in 0..n {
        for c in 0..3 {
            let mid = 0.5 * (x[frame_index(k, f, t, c, 0)] + x[frame_index(k, f, t, c, 1)]);
            for j in 0..k {
                for p in 0..2 {
                    x[frame_index(k, f, j, c, p)] -= mid;
                }
            }
        }
    }
    Ok(MotionSequence {
        frames: Tensor::new(seq.frames.shape().to_vec(), x)?,
        normalized: true,
        ..seq.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled sequences with a train/test assignment per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub sequences: Vec<MotionSequence>,
    pub split: Vec<Split>,
    /// Labels in order of first appearance.
    pub classes: Vec<String>,
    /// Generator spec or source manifest.
    pub provenance: serde_json::Value,
}

impl LabeledDataset {
    pub fn new(sequences: Vec<MotionSequence>, split: Vec<Split>, provenance: serde_json::Value) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Schema("at least one sequence is required".into()));
        }
        if split.len() != sequences.len() {
            return Err(Error::Data(format!(
                "{} split entries for {} sequences",
                split.len(),
                sequences.len()
            )));
        }
        let mut classes: Vec<String> = Vec::new();
        for s in &sequences {
            if !classes.contains(&s.label) {
                classes.push(s.label.clone());
            }
        }
        Ok(Self { sequences, split, classes, provenance })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Sequences of one split, in dataset order.
    pub fn part(&self, which: Split) -> Vec<&MotionSequence> {
        self.sequences
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(q, _)| q)
            .collect()
    }

    /// A new dataset holding one split, keeping the full class list.
    pub fn subset(&self, which: Split) -> Result<Self> {
        let seqs: Vec<MotionSequence> = self.part(which).into_iter().cloned().collect();
        let n = seqs.len();
        let mut d = Self::new(seqs, vec![which; n], self.provenance.clone())?;
        d.classes = self.classes.clone();
        Ok(d)
    }
}
