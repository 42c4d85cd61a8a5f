//! Deterministic pseudo-random stream used wherever reproducibility matters.
//!
//! Everything random in this crate (weight initialization, noise-document
//! placement, random layer selection, corpus synthesis) draws from
//! SplitMix64 so that a run is fully determined by its seed and can be
//! reproduced from the constants below in any language:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z  = state
//! z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
//! z ^= z >> 27;  z *= 0x94D049BB133111EB
//! z ^= z >> 31
//! ```
//!
//! Uniform floats take the top 24 bits of the output divided by 2^24;
//! bounded integers use the 128-bit multiply-shift reduction.

/// SplitMix64 generator. Copy-free, `Copy`-cheap, one `u64` of state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform f32 in `[lo, hi)` from the top 24 bits of one draw.
    pub fn next_f32_range(&mut self, lo: f32, hi: f32) -> f32 {
        let u = (self.next_u64() >> 40) as f64 / (1u64 << 24) as f64;
        (lo as f64 + (hi as f64 - lo as f64) * u) as f32
    }

    /// Uniform f64 in `[0, 1)` from the top 53 bits of one draw.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in `[0, n)` via 128-bit multiply-shift.
    ///
    /// The residual bias is below `n / 2^64`, irrelevant at the sizes used
    /// here, and the reduction is branch-free and portable.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices out of `[0, n)`, in draw order (partial
    /// Fisher-Yates over an index table).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_indices: k > n");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// Fold a text label into a base seed (FNV-1a over the label bytes, XORed
/// into the seed). Used to give every corpus sample its own stream that is
/// independent of corpus order.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    base ^ h
}
