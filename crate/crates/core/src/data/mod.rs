//! Two-person motion sequences: data model, normalization, file format and
//! a procedural interaction generator.

mod io;
mod sequence;
mod synth;

pub use io::{read_sequences, write_sequences};
pub use sequence::{normalize_sequence, LabeledDataset, MotionSequence, Split};
pub use synth::{generate_synthetic_dataset, SynthSpec, JOINT_NAMES};
