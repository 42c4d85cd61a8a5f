//! Shared numeric kernels: normalized distributions, stable softmax /
//! log-softmax, Jensen-Shannon divergence, cosine similarity and order
//! statistics.
//!
//! Conventions, applied uniformly so scores and thresholds stay comparable
//! across the whole crate:
//!
//! - all divergences use the natural logarithm (JSD is bounded by ln 2);
//! - `0 * log 0` is defined as 0, with no epsilon smoothing — the JSD
//!   mixture is positive wherever either argument is;
//! - every reduction here runs in f64, whatever precision the activations
//!   were produced in.

use thiserror::Error;

/// Natural-log upper bound of the Jensen-Shannon divergence.
pub const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("every entry is -inf")]
    AllNegInf,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("rank {rank} out of range: only {finite} finite entries")]
    RankOutOfRange { rank: usize, finite: usize },
    #[error("entry {index} is not finite-or-neg-inf")]
    NonFiniteEntry { index: usize },
    #[error("invalid distribution: {reason}")]
    InvalidDistribution { reason: String },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// A probability vector: non-negative entries summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(NumericsError::InvalidDistribution {
                    reason: format!("entry {i} = {p}"),
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NumericsError::InvalidDistribution {
                reason: format!("sum = {sum}"),
            });
        }
        Ok(Self(probs))
    }

    /// Trusted constructor for values already normalized by this module.
    fn from_normalized(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Keep the entries where `keep` is true and renormalize over them.
    ///
    /// Errors if the kept mass is zero (no distribution remains).
    pub fn restrict_renormalize(&self, keep: &[bool]) -> Result<Distribution> {
        if keep.len() != self.0.len() {
            return Err(NumericsError::LengthMismatch {
                left: self.0.len(),
                right: keep.len(),
            });
        }
        let mass: f64 = self
            .0
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&p, _)| p)
            .sum();
        if mass <= 0.0 {
            return Err(NumericsError::InvalidDistribution {
                reason: "restriction keeps zero mass".into(),
            });
        }
        Ok(Distribution::from_normalized(
            self.0
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&p, _)| p / mass)
                .collect(),
        ))
    }
}

/// A vector of raw or normalized log-values. Entries are finite or -inf;
/// NaN and +inf are rejected at construction. A log-softmax output is
/// "normalized": its exponentials sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct LogVector(Vec<f64>);

impl LogVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (index, &v) in values.iter().enumerate() {
            if v.is_nan() || v == f64::INFINITY {
                return Err(NumericsError::NonFiniteEntry { index });
            }
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with the flagged entries forced to -inf (pre-softmax masking).
    pub fn mask(&self, masked: &[bool]) -> Result<LogVector> {
        if masked.len() != self.0.len() {
            return Err(NumericsError::LengthMismatch {
                left: self.0.len(),
                right: masked.len(),
            });
        }
        Ok(Self(
            self.0
                .iter()
                .zip(masked)
                .map(|(&v, &m)| if m { f64::NEG_INFINITY } else { v })
                .collect(),
        ))
    }
}

fn max_finite(values: &[f64]) -> Option<f64> {
    values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

/// Max-subtracted stable softmax. `-inf` inputs map to exactly 0.
pub fn softmax(x: &LogVector) -> Result<Distribution> {
    let m = max_finite(x.values()).ok_or(NumericsError::AllNegInf)?;
    let exps: Vec<f64> = x
        .values()
        .iter()
        .map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - m).exp() })
        .collect();
    let z: f64 = exps.iter().sum();
    Ok(Distribution::from_normalized(
        exps.into_iter().map(|e| e / z).collect(),
    ))
}

/// Log-softmax; exponentiating the result reproduces [`softmax`] within
/// 1e-12 componentwise, and `-inf` entries are preserved.
pub fn log_softmax(x: &LogVector) -> Result<LogVector> {
    let m = max_finite(x.values()).ok_or(NumericsError::AllNegInf)?;
    let z: f64 = x
        .values()
        .iter()
        .filter(|v| v.is_finite())
        .map(|&v| (v - m).exp())
        .sum();
    let lse = m + z.ln();
    Ok(LogVector(
        x.values()
            .iter()
            .map(|&v| if v == f64::NEG_INFINITY { v } else { v - lse })
            .collect(),
    ))
}

/// Jensen-Shannon divergence in nats: `0.5*KL(p||m) + 0.5*KL(q||m)` with
/// `m = (p+q)/2`. Symmetric bit-for-bit (each index contributes one term
/// that is itself symmetric in p and q), bounded by ln 2.
pub fn jsd(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(NumericsError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut acc = 0.0f64;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        let mi = 0.5 * (pi + qi);
        let tp = if pi > 0.0 { 0.5 * pi * (pi / mi).ln() } else { 0.0 };
        let tq = if qi > 0.0 { 0.5 * qi * (qi / mi).ln() } else { 0.0 };
        acc += tp + tq;
    }
    // Rounding can push an identical-distribution sum a hair below zero.
    Ok(acc.max(0.0))
}

/// Cosine similarity with f64 accumulation, clamped into [-1, 1].
///
/// The denominator is `sqrt(|a|^2 * |b|^2)`, so `cosine(a, a)` is exactly 1
/// (`sqrt(x*x) == x` under round-to-nearest).
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NumericsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::ZeroVector);
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// The s-th largest finite entry (s = 1 is the maximum); ties count with
/// multiplicity.
pub fn kth_max(x: &LogVector, s: usize) -> Result<f64> {
    let mut finite: Vec<f64> = x.values().iter().copied().filter(|v| v.is_finite()).collect();
    if s == 0 || s > finite.len() {
        return Err(NumericsError::RankOutOfRange {
            rank: s,
            finite: finite.len(),
        });
    }
    let idx = s - 1;
    finite.select_nth_unstable_by(idx, |a, b| b.total_cmp(a));
    Ok(finite[idx])
}
