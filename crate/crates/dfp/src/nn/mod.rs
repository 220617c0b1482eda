//! Feedforward networks with reverse-mode gradients.
//!
//! The only architecture used by the solver: affine -> batch norm (optional)
//! -> tanh hidden blocks with a final affine layer, trained by Adam in 64-bit
//! floats. Forward in train mode normalizes with batch statistics and updates
//! exponential running averages; infer mode uses the running statistics and is
//! a pure function of (params, stats, input).

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{read_container, read_mlp, write_container, write_mlp, CheckpointEntry};
pub use gradcheck::{gradient_check_suite, GradCheckReport};
pub use mlp::{Cache, Mlp};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    GlorotUniform,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub batchnorm: bool,
    pub init_seed: u64,
    pub init: InitScheme,
    /// Exponential moving-average momentum for the running batch-norm stats.
    pub bn_momentum: f64,
    /// Number of independent batch-norm scale/shift/statistics sets. A
    /// time-conditioned net evaluated once per partition step uses one set per
    /// step: the batch at a step is normalized by that step's own statistics,
    /// so infer mode reproduces what training optimized.
    #[serde(default = "default_bn_sets")]
    pub bn_sets: usize,
}

fn default_bn_sets() -> usize {
    1
}

impl MlpConfig {
    pub fn new(input_dim: usize, output_dim: usize, hidden: Vec<usize>) -> Self {
        MlpConfig {
            input_dim,
            output_dim,
            hidden,
            activation: Activation::Tanh,
            batchnorm: true,
            init_seed: 0,
            init: InitScheme::GlorotUniform,
            bn_momentum: 0.99,
            bn_sets: 1,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.batchnorm = on;
        self
    }
}

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
