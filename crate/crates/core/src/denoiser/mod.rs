//! Text-conditioned two-stream denoiser.

mod attention;
pub mod checkpoint;
mod config;
mod model;
mod text;

pub use attention::{efficient_attention, EfficientAttention};
pub use config::DenoiserConfig;
pub use model::{
    positional_encoding, Context, DecoderLayer, DenoiserNet, DenoiserWeights, NoiseBatch, NoisePredictor, StreamBlock,
    Stylization,
};
pub use text::{build_vocab, label_words, ConditionEmbedding, TextEncoder, Vocabulary};
