//! Solver library for Markovian Nash equilibria of N-player stochastic
//! differential games: iterated decoupling (fictitious play or policy update)
//! with each stage's sub-problem solved by the deep BSDE method, validated
//! against the closed-form inter-bank systemic-risk game.

pub mod bsde;
pub mod driver;
pub mod error;
pub mod evaluation;
pub mod game;
pub mod grid;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod sde;
pub mod systemic_risk;

pub use error::{DfpError, Result};
pub use grid::Partition;
