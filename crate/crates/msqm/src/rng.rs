//! Splittable counter-based random numbers.
//!
//! Everything stochastic in this crate (parameter init, synthetic clips,
//! shuffling, token-drop masks) draws from a [`SplitMix64`] stream whose seed
//! is derived from the config `seed` plus a list of context words via
//! [`derive_seed`]. Drop masks use
//! `derive_seed(seed, &[tag("drop"), layer, scale, step])`, so any mask can be
//! reproduced from the run seed and its position in the schedule.

/// SplitMix64 stream. Cheap to construct, so sub-streams are made freely.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        // 24 mantissa bits
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound). Lemire reduction, bias is negligible
    /// for the bounds used here (< 2^32).
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_i64(&mut self, lo: i64, hi: i64) -> i64 {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as usize) as i64
    }

    /// Standard normal via Box-Muller. Two uniforms per sample, no caching,
    /// so the stream position is a pure function of the call count.
    pub fn normal_f32(&mut self) -> f32 {
        let u1 = self.next_f64().max(1e-12);
        let u2 = self.next_f64();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Partial Fisher-Yates: k distinct indices from 0..n, returned sorted
    /// ascending.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed from a base seed and a list of context words.
/// Order-sensitive: `derive_seed(s, &[a, b]) != derive_seed(s, &[b, a])`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = mix(seed ^ 0x9e3779b97f4a7c15);
    for &p in parts {
        h = mix(h.wrapping_mul(0xff51afd7ed558ccd) ^ p);
    }
    h
}

/// FNV-1a of a string, for turning context labels into seed words.
pub fn tag(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
