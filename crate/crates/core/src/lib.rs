//! Text-conditioned diffusion model for two-person skeleton interactions.
//!
//! Two skeleton streams share a transformer denoiser and exchange
//! information through a bipartite graph module. The crate includes the
//! autodiff and optimisation kernels it trains with, a procedural
//! interaction dataset, and the evaluation metrics.

pub mod bigraph;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod numerics;
pub mod sampler;
pub mod schedule;

pub use data::{LabeledDataset, MotionSequence, Split};
pub use denoiser::{DenoiserConfig, DenoiserWeights, NoisePredictor};
pub use error::{Error, Result};
pub use numerics::{ParamStore, Tape, Tensor, Var};
pub use sampler::{Checkpoint, TrainConfig};
pub use schedule::NoiseSchedule;
