//! Seeded random-weight decoder-only transformer with full instrumentation.
//!
//! The model is never trained; every weight comes from one SplitMix64
//! stream so that a config (shape + seed) pins the weights bit-for-bit.
//!
//! # Architecture
//!
//! Pre-norm blocks over a residual stream of width `d`:
//!
//! ```text
//! x0 = token_emb[token] + pos_emb[position]
//! for each block:
//!     a = x + Wo * MHA(rms_norm(x, g_attn))        # causal, scale 1/sqrt(d/M)
//!     y = a + W2 * silu(W1 * rms_norm(a, g_ffn))   # FFN hidden width 2d
//!     x = y                                        # ffn_in = a, ffn_out = y
//! logits = unembed * rms_norm(x, g_final)
//! ```
//!
//! `rms_norm(x, g)_i = g_i * x_i / sqrt(mean(x^2) + 1e-5)` with the mean
//! accumulated in f64; activations are f32 throughout.
//!
//! # Weight layout and draw order
//!
//! Weights are drawn (and checksummed, and dumped) in this exact order,
//! row-major with the output index major for matrices:
//!
//! 1. `token_emb`  (vocab × d),        entries U\[-0.05, 0.05)
//! 2. `pos_emb`    (max_seq_len × d),  entries U\[-0.05, 0.05)
//! 3. per block, for `l = 1..=L`:
//!    `g_attn` (d) U\[0.9, 1.1); `Wq`, `Wk`, `Wv`, `Wo` (each d × d);
//!    `g_ffn` (d) U\[0.9, 1.1); `W1` (2d × d); `W2` (d × 2d)
//! 4. `g_final`    (d), entries U\[0.9, 1.1)
//! 5. `unembed`    (vocab × d)
//!
//! Projection matrices use U\[-sqrt(3/fan_in), sqrt(3/fan_in)) where
//! `fan_in` is the column count. Uniform draws map the top 24 bits of one
//! SplitMix64 output to `[lo, hi)` (see [`crate::rng`]).

use sha2::{Digest, Sha256};

use super::{
    check_tokens, ForwardTrace, InstrumentedModel, KvCache, LayerTrace, ModelConfig, ModelError,
    Result, TokenSequence,
};
use crate::numerics::{self, Distribution, LogVector};
use crate::rng::SplitMix64;

const RMS_EPS: f64 = 1e-5;
const MASK_IDENTITY_TOL: f64 = 1e-9;

struct BlockWeights {
    attn_norm: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ffn_norm: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

/// The seeded toy backend. Immutable after construction; shareable across
/// threads.
pub struct ToyModel {
    cfg: ModelConfig,
    token_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    blocks: Vec<BlockWeights>,
    final_norm: Vec<f32>,
    unembed: Vec<f32>,
    checksum: String,
}

impl ToyModel {
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let d_ffn = 2 * d;
        let lim_d = (3.0f32 / d as f32).sqrt();
        let lim_ffn = (3.0f32 / d_ffn as f32).sqrt();
        let mut rng = SplitMix64::new(cfg.seed);

        let mut draw = |n: usize, lo: f32, hi: f32| -> Vec<f32> {
            (0..n).map(|_| rng.next_f32_range(lo, hi)).collect()
        };

        let token_emb = draw(cfg.vocab_size * d, -0.05, 0.05);
        let pos_emb = draw(cfg.max_seq_len * d, -0.05, 0.05);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(BlockWeights {
                attn_norm: draw(d, 0.9, 1.1),
                wq: draw(d * d, -lim_d, lim_d),
                wk: draw(d * d, -lim_d, lim_d),
                wv: draw(d * d, -lim_d, lim_d),
                wo: draw(d * d, -lim_d, lim_d),
                ffn_norm: draw(d, 0.9, 1.1),
                w1: draw(d_ffn * d, -lim_d, lim_d),
                w2: draw(d * d_ffn, -lim_ffn, lim_ffn),
            });
        }
        let final_norm = draw(d, 0.9, 1.1);
        let unembed = draw(cfg.vocab_size * d, -lim_d, lim_d);

        let mut model = Self {
            cfg,
            token_emb,
            pos_emb,
            blocks,
            final_norm,
            unembed,
            checksum: String::new(),
        };
        let mut hasher = Sha256::new();
        model.for_each_weight(|w| hasher.update(w.to_le_bytes()));
        model.checksum = hex_digest(hasher);
        Ok(model)
    }

    /// FFN hidden width (fixed at `2 * d_model`).
    pub fn d_ffn(&self) -> usize {
        2 * self.cfg.d_model
    }

    fn for_each_weight(&self, mut f: impl FnMut(f32)) {
        for &w in self.token_emb.iter().chain(&self.pos_emb) {
            f(w);
        }
        for b in &self.blocks {
            for &w in b
                .attn_norm
                .iter()
                .chain(&b.wq)
                .chain(&b.wk)
                .chain(&b.wv)
                .chain(&b.wo)
                .chain(&b.ffn_norm)
                .chain(&b.w1)
                .chain(&b.w2)
            {
                f(w);
            }
        }
        for &w in self.final_norm.iter().chain(&self.unembed) {
            f(w);
        }
    }

    /// All weights in the documented layout order.
    pub fn weights_flat(&self) -> Vec<f32> {
        let mut out = Vec::new();
        self.for_each_weight(|w| out.push(w));
        out
    }

    /// Flat little-endian f32 dump in the documented layout order.
    pub fn dump_weights<W: std::io::Write>(&self, writer: &mut W) -> std::io::Result<usize> {
        let mut n = 0;
        let mut err = None;
        self.for_each_weight(|w| {
            if err.is_none() {
                match writer.write_all(&w.to_le_bytes()) {
                    Ok(()) => n += 4,
                    Err(e) => err = Some(e),
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(n),
        }
    }

    /// One token through all blocks. Appends K/V to `cache`, optionally
    /// materializing the trace at this position. `masked` flags knocked-out
    /// key positions (empty = no masking).
    fn process_token(
        &self,
        cache: &mut KvCache,
        token: u32,
        masked: &[bool],
        want_trace: bool,
    ) -> Result<Option<ForwardTrace>> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let pos = cache.len();
        let inv_sqrt_dh = 1.0 / (dh as f32).sqrt();

        let mut x = vec![0.0f32; d];
        for j in 0..d {
            x[j] = self.token_emb[token as usize * d + j] + self.pos_emb[pos * d + j];
        }

        let mut layer_traces = if want_trace {
            Vec::with_capacity(self.cfg.n_layers)
        } else {
            Vec::new()
        };

        for (li, block) in self.blocks.iter().enumerate() {
            let xn = rms_norm(&x, &block.attn_norm);
            let q = matvec(&block.wq, &xn, d);
            let k = matvec(&block.wk, &xn, d);
            let v = matvec(&block.wv, &xn, d);
            {
                let kv = cache.layer_mut(li);
                kv.k.extend_from_slice(&k);
                kv.v.extend_from_slice(&v);
            }

            let kv = cache.layer(li);
            let mut mixed = vec![0.0f32; d];
            let mut rows = if want_trace {
                Vec::with_capacity(heads)
            } else {
                Vec::new()
            };
            for h in 0..heads {
                let q_h = &q[h * dh..(h + 1) * dh];
                let mut scores = Vec::with_capacity(pos + 1);
                for i in 0..=pos {
                    let k_h = &kv.k[i * d + h * dh..i * d + (h + 1) * dh];
                    scores.push((dot(q_h, k_h) * inv_sqrt_dh) as f64);
                }
                let raw = LogVector::new(scores)?;
                let row = if masked.is_empty() {
                    numerics::softmax(&raw)?
                } else {
                    masked_softmax_checked(&raw, &masked[..=pos])?
                };
                for j in 0..dh {
                    let mut acc = 0.0f64;
                    for (i, &w) in row.probs().iter().enumerate() {
                        acc += w * kv.v[i * d + h * dh + j] as f64;
                    }
                    mixed[h * dh + j] = acc as f32;
                }
                if want_trace {
                    rows.push(row);
                }
            }
            let attn_out = matvec(&block.wo, &mixed, d);
            for j in 0..d {
                x[j] += attn_out[j];
            }
            let ffn_in = if want_trace { x.clone() } else { Vec::new() };

            let xn2 = rms_norm(&x, &block.ffn_norm);
            let mut h1 = matvec(&block.w1, &xn2, d);
            for a in h1.iter_mut() {
                *a = silu(*a);
            }
            let y = matvec(&block.w2, &h1, self.d_ffn());
            for j in 0..d {
                x[j] += y[j];
            }

            if want_trace {
                layer_traces.push(LayerTrace {
                    ffn_in,
                    ffn_out: x.clone(),
                    attn: rows,
                });
            }
        }

        cache.push_token(token);
        if !want_trace {
            return Ok(None);
        }
        let logits = self.logit_lens(&x)?;
        Ok(Some(ForwardTrace {
            position: pos,
            layers: layer_traces,
            final_hidden: x,
            logits,
        }))
    }
}

impl InstrumentedModel for ToyModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn checksum(&self) -> &str {
        &self.checksum
    }

    fn forward_trace_masked(
        &self,
        tokens: &TokenSequence,
        position: usize,
        masked_positions: &[bool],
    ) -> Result<ForwardTrace> {
        check_tokens(&self.cfg, tokens.tokens())?;
        if position >= tokens.len() {
            return Err(ModelError::PositionOutOfRange {
                position,
                len: tokens.len(),
            });
        }
        if !masked_positions.is_empty() && masked_positions.len() != tokens.len() {
            return Err(ModelError::DimensionMismatch {
                got: masked_positions.len(),
                want: tokens.len(),
            });
        }
        // Causality: positions after `position` cannot influence the trace,
        // so only the prefix is processed.
        let mut cache = self.new_cache();
        let mut trace = None;
        for (p, &t) in tokens.tokens().iter().enumerate().take(position + 1) {
            trace = self.process_token(&mut cache, t, masked_positions, p == position)?;
        }
        Ok(trace.expect("traced position processed"))
    }

    fn forward_step(&self, cache: &mut KvCache, token: u32) -> Result<ForwardTrace> {
        if cache.fingerprint() != self.checksum {
            return Err(ModelError::CacheMismatch);
        }
        if cache.len() + 1 > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: cache.len() + 1,
                max: self.cfg.max_seq_len,
            });
        }
        if token as usize >= self.cfg.vocab_size {
            return Err(ModelError::TokenOutOfVocab {
                token,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(self
            .process_token(cache, token, &[], true)?
            .expect("trace requested"))
    }

    fn logit_lens(&self, hidden: &[f32]) -> Result<LogVector> {
        let d = self.cfg.d_model;
        if hidden.len() != d {
            return Err(ModelError::DimensionMismatch {
                got: hidden.len(),
                want: d,
            });
        }
        let hn = rms_norm(hidden, &self.final_norm);
        let logits = matvec(&self.unembed, &hn, d);
        Ok(LogVector::from_f32(&logits)?)
    }
}

/// Softmax with pre-softmax -inf filling, asserting the masking identity:
/// the result must equal the restricted-and-renormalized unmasked softmax
/// within 1e-9 on the kept positions.
fn masked_softmax_checked(scores: &LogVector, masked: &[bool]) -> Result<Distribution> {
    let masked_row = scores.mask(masked)?;
    let out = numerics::softmax(&masked_row)?;
    let full = numerics::softmax(scores)?;
    let keep: Vec<bool> = masked.iter().map(|&m| !m).collect();
    let restricted = full.restrict_renormalize(&keep)?;
    let mut ri = restricted.probs().iter();
    for (i, &p) in out.probs().iter().enumerate() {
        if masked[i] {
            debug_assert_eq!(p, 0.0);
            continue;
        }
        let r = ri.next().expect("restricted row covers kept positions");
        assert!(
            (p - r).abs() <= MASK_IDENTITY_TOL,
            "masking identity violated at kept position {i}: {p} vs {r}"
        );
    }
    Ok(out)
}

fn rms_norm(x: &[f32], gains: &[f32]) -> Vec<f32> {
    let ms: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter()
        .zip(gains)
        .map(|(&v, &g)| (v as f64 * inv) as f32 * g)
        .collect()
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// f32 dot product with eight partial accumulators (fixed order, so the
/// result is reproducible while still vectorizing).
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (pa, pb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for j in 0..8 {
            acc[j] += pa[j] * pb[j];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Row-major matrix-vector product: `w` has `w.len() / n_in` rows.
fn matvec(w: &[f32], x: &[f32], n_in: usize) -> Vec<f32> {
    w.chunks_exact(n_in).map(|row| dot(row, x)).collect()
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            n_heads: 2,
            d_model: 16,
            vocab_size: 256,
            max_seq_len: 64,
            seed,
            eos_token: 0,
        }
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = ToyModel::build(small_cfg(1)).unwrap();
        let b = ToyModel::build(small_cfg(1)).unwrap();
        let c = ToyModel::build(small_cfg(2)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn build_rejects_bad_config() {
        let cfg = ModelConfig {
            d_model: 63,
            ..ModelConfig::default()
        };
        assert!(matches!(
            ToyModel::build(cfg),
            Err(ModelError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn single_token_attention_is_trivial() {
        let m = ToyModel::build(small_cfg(3)).unwrap();
        let t = m
            .forward_trace(&TokenSequence::new(vec![65]), 0)
            .unwrap();
        for layer in &t.layers {
            for row in &layer.attn {
                assert_eq!(row.probs(), &[1.0]);
            }
        }
    }

    #[test]
    fn identical_calls_yield_identical_traces() {
        let m = ToyModel::build(small_cfg(4)).unwrap();
        let toks = TokenSequence::from_text("hello world");
        let a = m.forward_trace(&toks, toks.len() - 1).unwrap();
        let b = m.forward_trace(&toks, toks.len() - 1).unwrap();
        assert_eq!(a.digest_bytes(), b.digest_bytes());
    }

    #[test]
    fn logits_match_independent_unembed() {
        // Straight-line recomputation of unembed(rms_norm(final_hidden))
        // without matvec/dot helpers.
        let m = ToyModel::build(small_cfg(5)).unwrap();
        let toks = TokenSequence::from_text("abc");
        let t = m.forward_trace(&toks, 2).unwrap();
        let d = m.cfg.d_model;
        let ms: f64 = t
            .final_hidden
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        let hn: Vec<f32> = t
            .final_hidden
            .iter()
            .zip(&m.final_norm)
            .map(|(&v, &g)| (v as f64 * inv) as f32 * g)
            .collect();
        for v in 0..m.cfg.vocab_size {
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += m.unembed[v * d + j] as f64 * hn[j] as f64;
            }
            let got = t.logits.values()[v];
            assert!((got - acc).abs() < 1e-6, "token {v}: {got} vs {acc}");
        }
    }

    #[test]
    fn logit_lens_of_final_hidden_equals_trace_logits() {
        let m = ToyModel::build(small_cfg(6)).unwrap();
        let toks = TokenSequence::from_text("xyz!");
        let t = m.forward_trace(&toks, 3).unwrap();
        let lens = m.logit_lens(&t.final_hidden).unwrap();
        assert_eq!(lens.values(), t.logits.values());
    }

    #[test]
    fn logit_lens_of_zero_vector() {
        let m = ToyModel::build(small_cfg(6)).unwrap();
        let lens = m.logit_lens(&vec![0.0; 16]).unwrap();
        assert!(lens.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_lens_rejects_wrong_dimension() {
        let m = ToyModel::build(small_cfg(6)).unwrap();
        assert!(matches!(
            m.logit_lens(&vec![0.0; 7]),
            Err(ModelError::DimensionMismatch { got: 7, want: 16 })
        ));
    }

    #[test]
    fn step_by_step_matches_full_forward() {
        let m = ToyModel::build(small_cfg(7)).unwrap();
        let toks = TokenSequence::from_text("0123456789");
        let mut cache = m.new_cache();
        let mut last = None;
        for &t in toks.tokens() {
            last = Some(m.forward_step(&mut cache, t).unwrap());
        }
        let stepped = last.unwrap();
        let full = m.forward_trace(&toks, toks.len() - 1).unwrap();
        let mut max_diff = 0.0f32;
        for (a, b) in stepped.layers.iter().zip(&full.layers) {
            for (x, y) in a.ffn_in.iter().zip(&b.ffn_in) {
                max_diff = max_diff.max((x - y).abs());
            }
            for (x, y) in a.ffn_out.iter().zip(&b.ffn_out) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
        for (x, y) in stepped.final_hidden.iter().zip(&full.final_hidden) {
            max_diff = max_diff.max((x - y).abs());
        }
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn empty_prefix_step_equals_t1_forward() {
        let m = ToyModel::build(small_cfg(8)).unwrap();
        let mut cache = m.new_cache();
        let stepped = m.forward_step(&mut cache, 42).unwrap();
        let full = m.forward_trace(&TokenSequence::new(vec![42]), 0).unwrap();
        assert_eq!(stepped.digest_bytes(), full.digest_bytes());
    }

    #[test]
    fn foreign_cache_is_rejected() {
        let a = ToyModel::build(small_cfg(9)).unwrap();
        let b = ToyModel::build(small_cfg(10)).unwrap();
        let mut cache = b.new_cache();
        assert!(matches!(
            a.forward_step(&mut cache, 1),
            Err(ModelError::CacheMismatch)
        ));
    }

    #[test]
    fn sequence_budget_is_enforced() {
        let m = ToyModel::build(small_cfg(11)).unwrap();
        let mut cache = m.new_cache();
        for i in 0..64 {
            m.forward_step(&mut cache, i % 256).unwrap();
        }
        assert!(matches!(
            m.forward_step(&mut cache, 0),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn causality_under_perturbation() {
        let m = ToyModel::build(small_cfg(12)).unwrap();
        let base = TokenSequence::from_text("causal order test");
        let mut rng = SplitMix64::new(99);
        for _ in 0..20 {
            let j = 1 + rng.next_below(base.len() as u64 - 1) as usize;
            let mut perturbed = base.tokens().to_vec();
            perturbed[j] = rng.next_below(256) as u32;
            let perturbed = TokenSequence::new(perturbed);
            for p in 0..j {
                let a = m.forward_trace(&base, p).unwrap();
                let b = m.forward_trace(&perturbed, p).unwrap();
                assert_eq!(a.digest_bytes(), b.digest_bytes(), "position {p} changed");
            }
        }
    }

    #[test]
    fn attention_rows_are_valid_distributions() {
        let m = ToyModel::build(small_cfg(13)).unwrap();
        let toks = TokenSequence::from_text("distribution check");
        for p in [0, 3, toks.len() - 1] {
            let t = m.forward_trace(&toks, p).unwrap();
            for layer in &t.layers {
                assert_eq!(layer.attn.len(), m.cfg.n_heads);
                for row in &layer.attn {
                    assert_eq!(row.len(), p + 1);
                    let sum: f64 = row.probs().iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn masked_forward_zeroes_masked_positions() {
        let m = ToyModel::build(small_cfg(14)).unwrap();
        let toks = TokenSequence::from_text("mask these words");
        let mut masked = vec![false; toks.len()];
        masked[2] = true;
        masked[3] = true;
        let t = m
            .forward_trace_masked(&toks, toks.len() - 1, &masked)
            .unwrap();
        for layer in &t.layers {
            for row in &layer.attn {
                assert_eq!(row.probs()[2], 0.0);
                assert_eq!(row.probs()[3], 0.0);
            }
        }
    }

    #[test]
    fn weight_dump_matches_flat_order() {
        let m = ToyModel::build(small_cfg(15)).unwrap();
        let mut buf = Vec::new();
        let n = m.dump_weights(&mut buf).unwrap();
        let flat = m.weights_flat();
        assert_eq!(n, flat.len() * 4);
        for (i, w) in flat.iter().enumerate() {
            let got = f32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap());
            assert_eq!(got, *w);
        }
    }
}
