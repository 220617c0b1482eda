//! Counter-based deterministic random number generation.
//!
//! Every draw is a pure function of `(seed, stream, a, b, c)`, so batch
//! simulations can be evaluated in any order (or in parallel) and still
//! produce bit-identical results, and growing a batch never reshuffles
//! the draws of earlier paths.

/// Domain-separation tags for the independent streams of one experiment.
pub mod stream {
    pub const INITIAL_STATE: u64 = 0x11;
    pub const INCREMENTS: u64 = 0x22;
    pub const NET_INIT: u64 = 0x33;
    pub const VALIDATION: u64 = 0x44;
    pub const TRAIN_PATHS: u64 = 0x55;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Absorb one word into the running state, splitmix-style.
#[inline]
fn absorb(state: u64, word: u64) -> u64 {
    splitmix(state ^ word.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))
}

/// Stateless counter-based generator. Cloning or sharing is free; all
/// methods take the counters explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            seed: splitmix(seed ^ GOLDEN),
        }
    }

    /// Derive an independent sub-stream (e.g. per training step or stage).
    pub fn derive(&self, tag: u64, index: u64) -> CounterRng {
        CounterRng {
            seed: absorb(absorb(self.seed, tag), index),
        }
    }

    #[inline]
    pub fn raw(&self, a: u64, b: u64, c: u64) -> u64 {
        absorb(absorb(absorb(self.seed, a), b), c)
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&self, a: u64, b: u64, c: u64) -> f64 {
        (self.raw(a, b, c) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-width, width).
    #[inline]
    pub fn uniform_symmetric(&self, width: f64, a: u64, b: u64, c: u64) -> f64 {
        width * (2.0 * self.uniform(a, b, c) - 1.0)
    }

    /// Standard normal via Box-Muller; one draw per counter triple.
    #[inline]
    pub fn normal(&self, a: u64, b: u64, c: u64) -> f64 {
        let u1 = ((self.raw(a, b, 2 * c) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.raw(a, b, 2 * c + 1) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
