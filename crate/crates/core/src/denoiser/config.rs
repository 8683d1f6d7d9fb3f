use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the two-stream denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Latent width of one skeleton stream.
    pub d_l: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Label-token vocabulary.
    pub vocab: Vec<String>,
    /// Longest sequence the model accepts.
    pub max_len: usize,
    /// Joints per skeleton.
    pub joints: usize,
    /// Bipartite graph module on or off.
    pub bigraph: bool,
    /// Node count of the learned adjacency and edge-weight matrices.
    pub graph_len: usize,
    /// Reduced channel count inside the graph module.
    pub graph_channels: usize,
    /// One parameter set applied to both streams.
    pub share_stream_weights: bool,
    pub dropout: f64,
    /// Diffusion length T the timestep embedding is defined over.
    pub diffusion_steps: usize,
}

impl DenoiserConfig {
    /// Runnable single-core profile.
    pub fn desk() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_l: 64,
            text_layers: 4,
            text_heads: 4,
            vocab: Vec::new(),
            max_len: 16,
            joints: 5,
            bigraph: true,
            graph_len: 16,
            graph_channels: 16,
            share_stream_weights: true,
            dropout: 0.0,
            diffusion_steps: 100,
        }
    }

    /// Published hyperparameters (eight layers and heads, four-layer text
    /// encoder). The latent width is not published; 64 is kept.
    pub fn paper() -> Self {
        Self {
            num_layers: 8,
            num_heads: 8,
            text_layers: 4,
            text_heads: 4,
            diffusion_steps: 1000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be positive".into());
        }
        if self.num_heads == 0 || self.d_l % self.num_heads != 0 {
            return fail(format!("d_l={} not divisible by num_heads={}", self.d_l, self.num_heads));
        }
        if self.text_heads == 0 || self.d_l % self.text_heads != 0 {
            return fail(format!("d_l={} not divisible by text_heads={}", self.d_l, self.text_heads));
        }
        if self.d_l % 2 != 0 {
            return fail(format!("d_l={} must be even", self.d_l));
        }
        if self.joints < 2 {
            return fail(format!("need at least 2 joints, got {}", self.joints));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if self.bigraph && (self.graph_len == 0 || self.graph_channels == 0) {
            return fail("graph_len and graph_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.diffusion_steps == 0 {
            return fail("diffusion_steps must be positive".into());
        }
        if self.vocab.is_empty() {
            return fail("vocabulary is empty".into());
        }
        Ok(())
    }

    /// Longest sequence accepted by both the positional horizon and the
    /// graph module.
    pub fn capacity(&self) -> usize {
        if self.bigraph {
            self.max_len.min(self.graph_len)
        } else {
            self.max_len
        }
    }

    pub fn frame_width(&self) -> usize {
        3 * self.joints
    }
}
