//! Label encoder: word tokens through a small transformer encoder.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{sinusoidal_table, EncoderLayer, Norm};
use crate::numerics::{Init, ParamId, ParamStore, Tape, Tensor, Var};

/// Lower-cased words of a class name, split on whitespace, `_` and `-`.
pub fn label_words(label: &str) -> Vec<String> {
    label
        .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Sorted, de-duplicated words of all labels.
pub fn build_vocab<S: AsRef<str>>(labels: &[S]) -> Vec<String> {
    let mut words: Vec<String> = labels.iter().flat_map(|l| label_words(l.as_ref())).collect();
    words.sort();
    words.dedup();
    words
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    size: usize,
}

impl Vocabulary {
    pub fn new(words: &[String]) -> Self {
        Self {
            index: words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect(),
            size: words.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn tokenize(&self, label: &str) -> Result<Vec<usize>> {
        let words = label_words(label);
        if words.is_empty() {
            return Err(Error::Vocabulary(label.to_string()));
        }
        words
            .iter()
            .map(|w| self.index.get(w).copied().ok_or_else(|| Error::Vocabulary(w.clone())))
            .collect()
    }
}

/// Output of the label encoder for one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    /// `[L, d]`, one row per token.
    pub tokens: Tensor,
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub ln_out: Norm,
    pub width: usize,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        width: usize,
        layers: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = store.add("text.embed", &[vocab_size, width], Init::Normal(1.0), rng)?;
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("text.layer{i}"), width, heads, dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            layers,
            ln_out: Norm::new(store, "text.ln_out", width, rng)?,
            width,
            vocab_size,
        })
    }

    /// Encodes a batch of token sequences. Shorter sequences are padded; the
    /// returned mask `[B * L]` marks real tokens (`None` when nothing is
    /// padded).
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        tokens: &[Vec<usize>],
    ) -> Result<(Var, Option<Vec<bool>>)> {
        if tokens.is_empty() || tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::Contract("every condition needs at least one token".into()));
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Vocabulary(format!("token id {bad}")));
        }
        let b = tokens.len();
        let len = tokens.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(b * len);
        let mut keep = Vec::with_capacity(b * len);
        for t in tokens {
            for j in 0..len {
                ids.push(t.get(j).copied().unwrap_or(0));
                keep.push(j < t.len());
            }
        }
        let keep = keep.iter().any(|k| !k).then_some(keep);
        let table = tape.param(store, self.embed);
        let e = tape.gather(table, &ids)?;
        let e = tape.reshape(e, &[b, len, self.width])?;
        let pe = sinusoidal_table(len, self.width, 0)?;
        let pe = Tensor::from_fn(&[b, len, self.width], |i| pe.data()[i % (len * self.width)]);
        let pe = tape.constant(pe);
        let mut h = tape.add(e, pe)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, keep.as_deref())?;
        }
        let h = self.ln_out.forward(tape, store, h)?;
        Ok((h, keep))
    }
}
