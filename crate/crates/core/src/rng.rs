//! Deterministic random streams.
//!
//! Every random quantity in the crate is drawn from xoshiro256** seeded through
//! SplitMix64 (the `rand_xoshiro` `seed_from_u64` construction). Derived values
//! are defined on top of raw 64-bit outputs so that a reimplementation only
//! needs those two published generators:
//!
//! * bits: one `u64` yields 64 Bernoulli(1/2) bits, least significant first;
//! * uniform: `(u >> 11) * 2^-53`, in `[0, 1)`;
//! * normal: Box–Muller on `u1 = 1 - uniform`, `u2 = uniform`, returning the
//!   cosine branch first and the sine branch on the next call.
//!
//! Sub-streams are addressed with [`derive_seed`], so the seed of (say) the
//! noise of frame `t` never depends on how many values other streams consumed.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_mul(GOLDEN_GAMMA).wrapping_add(1)))
}

/// Stream tags used across the crate.
pub mod streams {
    pub const LIBRARY: u64 = 0x4C49_4252;
    pub const NOISE: u64 = 0x4E4F_4953;
    pub const POSE: u64 = 0x504F_5345;
    pub const IDENTITY: u64 = 0x4944_454E;
    pub const BACKGROUND: u64 = 0x4247_4E44;
    pub const LABEL: u64 = 0x4C41_424C;
    pub const TRIAL: u64 = 0x5452_4941;
    pub const PROBE: u64 = 0x5052_4F42;
    pub const PERMUTE: u64 = 0x5045_524D;
    pub const INSTANCE: u64 = 0x494E_5354;
}

#[derive(Debug, Clone)]
pub struct SpxRng {
    inner: Xoshiro256StarStar,
    spare_normal: Option<f64>,
}

impl SpxRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Generator for sub-stream `stream` of `seed`.
    pub fn substream(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)` by multiply-shift (n > 0).
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle driven by [`SpxRng::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
