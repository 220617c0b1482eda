//! Time partitions of [0, T].

use crate::error::{DfpError, Result};
use serde::{Deserialize, Serialize};

/// A partition 0 = t_0 < t_1 < ... < t_{N_T} = T with step-function lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    times: Vec<f64>,
}

impl Partition {
    /// Uniform grid with `n_steps` intervals on [0, horizon].
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || n_steps == 0 {
            return Err(DfpError::Domain(format!(
                "partition needs horizon > 0 and n_steps >= 1, got T={horizon}, N_T={n_steps}"
            )));
        }
        let times = (0..=n_steps)
            .map(|k| horizon * k as f64 / n_steps as f64)
            .collect();
        Ok(Partition { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(DfpError::Domain("partition needs at least two nodes".into()));
        }
        if times[0] != 0.0 {
            return Err(DfpError::Domain(format!("t_0 must be 0, got {}", times[0])));
        }
        if !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(DfpError::Domain("partition times must be strictly increasing".into()));
        }
        Ok(Partition { times })
    }

    /// Number of intervals N_T.
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Mesh of the partition: the largest step.
    pub fn mesh(&self) -> f64 {
        (0..self.n_steps())
            .map(|k| self.dt(k))
            .fold(0.0, f64::max)
    }

    /// Index of the step function pi(t): the k with t in [t_k, t_{k+1}).
    /// t = T maps to the last interval.
    pub fn step_index(&self, t: f64) -> Result<usize> {
        if t < 0.0 || t > self.horizon() {
            return Err(DfpError::Domain(format!(
                "t = {t} outside [0, {}]",
                self.horizon()
            )));
        }
        let k = match self
            .times
            .binary_search_by(|node| node.partial_cmp(&t).unwrap())
        {
            Ok(idx) => idx,
            Err(idx) => idx - 1,
        };
        Ok(k.min(self.n_steps() - 1))
    }

    /// Exact grid node index of `t`, if `t` is a node.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        self.times
            .binary_search_by(|node| node.partial_cmp(&t).unwrap())
            .ok()
    }
}
