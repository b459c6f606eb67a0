//! SplitMix64 random source.
//!
//! Every stochastic component (scene generation, random test instances,
//! parameter initialization) draws from this generator so that results are
//! reproducible across platforms and implementations:
//!
//! * state advances by `0x9E3779B97F4A7C15` per draw, output is the standard
//!   SplitMix64 finalizer;
//! * `uniform()` is `(next_u64() >> 11) * 2^-53`, in `[0, 1)`;
//! * `normal()` is one Box–Muller draw from two uniforms,
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; no second value is cached.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        finalize(self.state)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`; `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as u64).min(n - 1)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of stream indices.
pub fn derive_seed(seed: u64, indices: &[u64]) -> u64 {
    indices.iter().fold(finalize(seed), |acc, &i| {
        finalize(acc ^ finalize(i.wrapping_add(GOLDEN_GAMMA)))
    })
}
