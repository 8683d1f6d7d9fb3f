//! Procedural two-person interactions with per-sample jitter.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sequence::{frame_index, normalize_sequence, LabeledDataset, MotionSequence, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Joint order of the generated skeletons.
pub const JOINT_NAMES: [&str; 5] = ["torso", "head", "left_hand", "right_hand", "pelvis"];

/// Rest pose in a body frame facing +z, metres.
const REST: [[f64; 3]; 5] = [
    [0.0, 1.35, 0.0],
    [0.0, 1.70, 0.0],
    [-0.25, 0.95, 0.05],
    [0.25, 0.95, 0.05],
    [0.0, 0.95, 0.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Motion programs to draw from: any of `approach`, `circle`, `wave`.
    pub classes: Vec<String>,
    pub joints: usize,
    pub frames: usize,
    pub fps: u32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Relative spread of amplitude, speed and distance draws.
    pub jitter: f64,
    /// Standard deviation of additive coordinate noise, metres.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: vec!["approach".into(), "circle".into(), "wave".into()],
            joints: 5,
            frames: 16,
            fps: 10,
            train_per_class: 100,
            test_per_class: 30,
            jitter: 0.2,
            noise: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Program {
    Approach,
    Circle,
    Wave,
}

impl Program {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "approach" => Ok(Self::Approach),
            "circle" => Ok(Self::Circle),
            "wave" => Ok(Self::Wave),
            other => Err(Error::Config(format!(
                "unknown motion program `{other}` (expected approach, circle or wave)"
            ))),
        }
    }
}

/// One posed body: root position, heading and joint offsets.
struct Body {
    root: [f64; 2],
    yaw: f64,
    joints: [[f64; 3]; 5],
}

impl Body {
    fn standing(x: f64, z: f64, yaw: f64) -> Self {
        Self { root: [x, z], yaw, joints: REST }
    }

    fn world(&self, j: usize) -> [f64; 3] {
        let [lx, ly, lz] = self.joints[j];
        let (s, c) = self.yaw.sin_cos();
        [self.root[0] + c * lx + s * lz, ly, self.root[1] - s * lx + c * lz]
    }
}

/// Heading that makes a body at `from` face `to` in the ground plane.
fn facing(from: [f64; 2], to: [f64; 2]) -> f64 {
    (to[0] - from[0]).atan2(to[1] - from[1])
}

fn pose(program: Program, time: f64, p: &[f64; 4]) -> [Body; 2] {
    let [a, b, c, phase] = *p;
    match program {
        Program::Approach => {
            let start = 1.8 * a;
            let end = 0.5 * b;
            let gap = start - (start - end) * (time * c / 1.6).min(1.0);
            let swing = 0.12 * (2.0 * PI * 1.8 * time + phase).sin();
            let mut bodies = [
                Body::standing(-gap / 2.0, 0.0, PI / 2.0),
                Body::standing(gap / 2.0, 0.0, -PI / 2.0),
            ];
            for (i, body) in bodies.iter_mut().enumerate() {
                let s = if i == 0 { swing } else { -swing };
                body.joints[2][2] += s;
                body.joints[3][2] -= s;
                body.joints[0][1] += 0.02 * s.abs();
            }
            bodies
        }
        Program::Circle => {
            let r = 0.8 * a;
            let theta = phase + 2.0 * PI * 0.45 * c * time;
            let p0 = [r * theta.cos(), r * theta.sin()];
            let p1 = [-p0[0], -p0[1]];
            [
                Body::standing(p0[0], p0[1], facing(p0, p1)),
                Body::standing(p1[0], p1[1], facing(p1, p0)),
            ]
        }
        Program::Wave => {
            let gap = 1.6 * a;
            let mut bodies = [
                Body::standing(-gap / 2.0, 0.0, PI / 2.0),
                Body::standing(gap / 2.0, 0.0, -PI / 2.0),
            ];
            let sway = (2.0 * PI * 1.5 * c * time + phase).sin();
            bodies[0].joints[3] = [0.35 + 0.18 * b * sway, 1.85, 0.1];
            bodies[1].joints[0][0] += 0.01 * sway;
            bodies
        }
    }
}

fn draw_sequence<R: Rng + ?Sized>(program: Program, spec: &SynthSpec, label: &str, rng: &mut R) -> Result<MotionSequence> {
    let mut jit = || 1.0 + spec.jitter * (2.0 * rng.random::<f64>() - 1.0);
    let (a, b, c) = (jit(), jit(), jit());
    let params = [a, b, c, 2.0 * PI * rng.random::<f64>()];
    let (n, k) = (spec.frames, spec.joints);
    let mut data = vec![0.0; n * k * 6];
    for f in 0..n {
        let bodies = pose(program, f as f64 / spec.fps as f64, &params);
        for (p, body) in bodies.iter().enumerate() {
            for j in 0..k {
                let w = body.world(j);
                for c in 0..3 {
                    let e: f64 = rng.sample(StandardNormal);
                    data[frame_index(k, f, j, c, p)] = w[c] + spec.noise * e;
                }
            }
        }
    }
    let raw = MotionSequence::new(Tensor::new(vec![n, k, 3, 2], data)?, label, spec.fps, 0, false)?;
    normalize_sequence(&raw)
}

/// Generates a normalized dataset from `spec`, reproducible from its seed.
/// Samples are interleaved across classes, training split first.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.classes.len() < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let programs = spec.classes.iter().map(|c| Program::parse(c)).collect::<Result<Vec<_>>>()?;
    let mut seen = spec.classes.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != spec.classes.len() {
        return Err(Error::Config("class names must be distinct".into()));
    }
    if spec.joints != REST.len() {
        return Err(Error::Config(format!(
            "generated skeletons have {} joints, spec asks for {}",
            REST.len(),
            spec.joints
        )));
    }
    if spec.frames == 0 || spec.fps == 0 || spec.train_per_class == 0 {
        return Err(Error::Config("frames, fps and train_per_class must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.jitter) || !(spec.noise >= 0.0) {
        return Err(Error::Config("jitter must lie in [0, 1) and noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seqs = Vec::new();
    let mut split = Vec::new();
    for (count, which) in [(spec.train_per_class, Split::Train), (spec.test_per_class, Split::Test)] {
        for _ in 0..count {
            for (program, label) in programs.iter().zip(&spec.classes) {
                seqs.push(draw_sequence(*program, spec, label, &mut rng)?);
                split.push(which);
            }
        }
    }
    let provenance = serde_json::to_value(spec).map_err(|e| Error::Config(e.to_string()))?;
    LabeledDataset::new(seqs, split, serde_json::json!({ "generator": provenance }))
}
