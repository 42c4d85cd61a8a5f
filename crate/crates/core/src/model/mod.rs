//! Instrumented decoder-only model contract and its backends.
//!
//! A backend exposes per-layer FFN input/output activations, per-head
//! attention rows and final logits at any traced position, plus an
//! incremental (KV-cached) step API whose traces match a full forward
//! pass. Two backends ship here:
//!
//! - [`toy::ToyModel`] — a seeded random-weight pre-norm transformer;
//! - [`scripted::ScriptedModel`] — a hand-built deterministic backend whose
//!   greedy continuation is known in advance, used as an evaluation oracle.
//!
//! Position and layer conventions: token positions are 0-based; layers are
//! 1-based (`1..=L`), matching the way layer ranges and selections are
//! reported everywhere else in the crate.

pub mod scripted;
pub mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Distribution, LogVector, NumericsError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("cache belongs to a different model instance")]
    CacheMismatch,
    #[error("hidden vector has dimension {got}, model expects {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Shape, seed and special-token configuration of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of decoder blocks L (must be even).
    pub n_layers: usize,
    /// Attention heads per block.
    pub n_heads: usize,
    /// Residual stream width d (divisible by `n_heads`).
    pub d_model: usize,
    /// Vocabulary size. The tokenizer is byte-level (token id == byte
    /// value), so 256 covers arbitrary text.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub eos_token: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            vocab_size: 256,
            max_seq_len: 512,
            seed: 0,
            eos_token: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_layers % 2 != 0 {
            return Err(ModelError::ConfigInvalid(format!(
                "n_layers must be a positive even number, got {}",
                self.n_layers
            )));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(ModelError::ConfigInvalid(
                "n_heads, d_model, vocab_size and max_seq_len must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::ConfigInvalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.eos_token as usize >= self.vocab_size {
            return Err(ModelError::ConfigInvalid(format!(
                "eos_token {} outside vocabulary of size {}",
                self.eos_token, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// A sequence of token ids. The byte-level tokenizer makes text and token
/// sequences interconvertible without an external vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn from_text(text: &str) -> Self {
        Self(text.bytes().map(u32::from).collect())
    }

    pub fn to_text(&self) -> String {
        let bytes: Vec<u8> = self.0.iter().map(|&t| (t & 0xFF) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, token: u32) {
        self.0.push(token);
    }
}

/// Per-layer capture at one traced position.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Residual stream entering the FFN sub-layer (after the attention
    /// residual add).
    pub ffn_in: Vec<f32>,
    /// Residual stream after the FFN residual add (the block output).
    pub ffn_out: Vec<f32>,
    /// One attention row per head: the traced position's distribution over
    /// positions `0..=position`.
    pub attn: Vec<Distribution>,
}

/// Complete instrumentation of one forward pass at one position.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub position: usize,
    pub layers: Vec<LayerTrace>,
    /// Final residual stream (equals `layers.last().ffn_out`).
    pub final_hidden: Vec<f32>,
    /// Next-token logits, produced by the same normalize+unembed path as
    /// [`InstrumentedModel::logit_lens`], so the two agree bit-for-bit.
    pub logits: LogVector,
}

impl ForwardTrace {
    /// Serialize every field to little-endian bytes, for cross-process
    /// determinism audits.
    pub fn digest_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.position as u64).to_le_bytes());
        for layer in &self.layers {
            for &v in layer.ffn_in.iter().chain(&layer.ffn_out) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for row in &layer.attn {
                for &p in row.probs() {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
        }
        for &v in &self.final_hidden {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.logits.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Incremental decoding state. Owned by one decode loop at a time; tied to
/// the model instance that created it via the weight checksum.
#[derive(Debug, Clone)]
pub struct KvCache {
    fingerprint: String,
    tokens: Vec<u32>,
    /// Per layer: keys and values, `d_model` floats per cached position.
    layers: Vec<LayerKv>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

impl KvCache {
    pub fn new(fingerprint: &str, n_layers: usize) -> Self {
        Self {
            fingerprint: fingerprint.to_owned(),
            tokens: Vec::new(),
            layers: vec![LayerKv::default(); n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub(crate) fn push_token(&mut self, token: u32) {
        self.tokens.push(token);
    }

    pub(crate) fn layer_mut(&mut self, layer: usize) -> &mut LayerKv {
        &mut self.layers[layer]
    }

    pub(crate) fn layer(&self, layer: usize) -> &LayerKv {
        &self.layers[layer]
    }
}

/// Contract every backend implements: a pure function of (weights, tokens)
/// with full layer-wise instrumentation. Implementations are immutable
/// after construction and safe to share across threads; caches are
/// single-owner.
pub trait InstrumentedModel: Send + Sync {
    fn config(&self) -> &ModelConfig;

    /// Hex digest identifying the weights; printed for reproducibility
    /// audits and used to bind caches to their model.
    fn checksum(&self) -> &str;

    /// Full forward pass over `tokens`, traced at `position`.
    fn forward_trace(&self, tokens: &TokenSequence, position: usize) -> Result<ForwardTrace> {
        self.forward_trace_masked(tokens, position, &[])
    }

    /// Forward pass with a knockout intervention: attention scores toward
    /// every position flagged in `masked_positions` are filled with -inf
    /// before softmax, at every layer and head. An empty slice disables
    /// masking; otherwise the slice must cover `tokens`.
    fn forward_trace_masked(
        &self,
        tokens: &TokenSequence,
        position: usize,
        masked_positions: &[bool],
    ) -> Result<ForwardTrace>;

    fn new_cache(&self) -> KvCache {
        KvCache::new(self.checksum(), self.config().n_layers)
    }

    /// Process one more token on top of `cache`; returns the trace at the
    /// new final position. Equivalent to a full forward over the
    /// concatenated sequence traced at its last position.
    fn forward_step(&self, cache: &mut KvCache, token: u32) -> Result<ForwardTrace>;

    /// Project a residual-stream vector to vocabulary logits through the
    /// final normalization and the unembedding.
    fn logit_lens(&self, hidden: &[f32]) -> Result<LogVector>;
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfVocab {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}
