//! Seeded fixtures shared by the kernel benchmarks.

use bigraphdiff::bigraph::BipartiteGraphParams;
use bigraphdiff::{DenoiserConfig, DenoiserWeights, ParamStore, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor of the given shape.
pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Desk-profile denoiser over the three synthetic interaction labels.
pub fn desk_model(max_len: usize) -> Result<DenoiserWeights> {
    let cfg = DenoiserConfig {
        vocab: ["approach", "circle", "wave"].map(String::from).to_vec(),
        max_len,
        graph_len: max_len,
        ..DenoiserConfig::desk()
    };
    DenoiserWeights::new(&cfg, &mut rng(1))
}

/// Bipartite graph module on `channels`-wide streams of up to `nodes` frames.
pub fn graph_module(channels: usize, nodes: usize) -> Result<(ParamStore, BipartiteGraphParams)> {
    let mut store = ParamStore::new();
    let params = BipartiteGraphParams::new(&mut store, "g", channels, channels / 4, nodes, nodes, &mut rng(2))?;
    Ok((store, params))
}
