//! Seed-deterministic 64-bit generator with Box-Muller Gaussian sampling.
//!
//! SplitMix64 keeps the whole generator in one u64 of state, so streams can
//! be derived cheaply for (layer, sample, step) tuples and the integer
//! stream is reproducible bit-for-bit from the seed alone. The Gaussian
//! transform goes through libm's `ln`/`cos`/`sqrt`; those are deterministic
//! per platform, while the underlying u64 stream is portable everywhere.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Deterministic generator. Identical seed, identical stream.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derive an independent stream from this seed and a list of tags
    /// (layer index, sample index, ...). Derivation does not advance the
    /// parent generator, so adding streams never perturbs existing ones.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut s = mix(seed ^ GOLDEN);
        for &t in tags {
            s = mix(s ^ t.wrapping_mul(GOLDEN));
        }
        Rng { state: s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe as a `ln` argument.
    #[inline]
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-bound, bound).
    pub fn uniform_symmetric(&mut self, bound: f64) -> f64 {
        (self.uniform() * 2.0 - 1.0) * bound
    }

    /// Standard normal via Box-Muller. Consumes two uniforms per sample and
    /// keeps no carry-over, so the state stays a single u64.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
