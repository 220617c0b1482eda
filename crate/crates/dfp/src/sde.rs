//! Euler-Maruyama forward simulation and Monte Carlo costs.
//!
//! The driftless process X_{k+1} = X_k + Sigma(t_k, X_k) dW_k feeds every
//! sub-problem of a stage (the increments are stored so one batch serves all
//! N of them); the controlled recursion adds the full drift b and is used for
//! cost evaluation and path comparisons.

use crate::error::{DfpError, Result};
use crate::game::{GameSpec, JointControl, Policy};
use crate::grid::Partition;
use crate::rng::{stream, CounterRng};
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

static BATCH_IDS: AtomicU64 = AtomicU64::new(1);

/// A batch of simulated forward trajectories plus the Brownian increments
/// that generated them.
#[derive(Debug, Clone)]
pub struct PathBatch {
    /// B x (N_T + 1) x n states.
    pub states: Array3<f64>,
    /// B x N_T x k increments.
    pub increments: Array3<f64>,
    pub partition: Partition,
    pub seed: u64,
    id: u64,
}

impl PathBatch {
    pub fn batch_size(&self) -> usize {
        self.states.dim().0
    }

    /// Identity for policy-evaluation memoization.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Export as CSV (`path_id,k,t,x_1..x_n`).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let (b, steps1, n) = self.states.dim();
        write!(out, "path_id,k,t")?;
        for l in 1..=n {
            write!(out, ",x_{l}")?;
        }
        writeln!(out)?;
        for j in 0..b {
            for k in 0..steps1 {
                write!(out, "{j},{k},{}", self.partition.time(k))?;
                for l in 0..n {
                    write!(out, ",{}", self.states[[j, k, l]])?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// I.i.d. uniform[-delta0, delta0] initial states; same seed, same batch.
pub fn sample_initial(delta0: f64, state_dim: usize, batch: usize, seed: u64) -> Result<Array2<f64>> {
    if delta0 < 0.0 {
        return Err(DfpError::Domain(format!("delta0 must be >= 0, got {delta0}")));
    }
    let rng = CounterRng::new(seed).derive(stream::INITIAL_STATE, 0);
    Ok(Array2::from_shape_fn((batch, state_dim), |(j, l)| {
        rng.uniform_symmetric(delta0, j as u64, l as u64, 0)
    }))
}

/// Brownian increments for the partition, keyed by (seed, path, step, coord).
pub fn sample_increments(partition: &Partition, noise_dim: usize, batch: usize, seed: u64) -> Array3<f64> {
    let rng = CounterRng::new(seed).derive(stream::INCREMENTS, 0);
    let n_steps = partition.n_steps();
    let mut increments = Array3::zeros((batch, n_steps, noise_dim));
    for j in 0..batch {
        for k in 0..n_steps {
            let sqrt_dt = partition.dt(k).sqrt();
            for c in 0..noise_dim {
                increments[[j, k, c]] = sqrt_dt * rng.normal(j as u64, k as u64, c as u64);
            }
        }
    }
    increments
}

fn check_x0(game: &GameSpec, x0: &ArrayView2<f64>) -> Result<()> {
    if x0.ncols() != game.state_dim {
        return Err(DfpError::shape("simulate x0", game.state_dim, x0.ncols()));
    }
    Ok(())
}

/// Driftless forward paths X_{k+1} = X_k + Sigma(t_k, X_k) dW_k.
pub fn simulate_driftless(
    game: &GameSpec,
    partition: &Partition,
    x0: ArrayView2<f64>,
    seed: u64,
) -> Result<PathBatch> {
    check_x0(game, &x0)?;
    let increments = sample_increments(partition, game.noise_dim, x0.nrows(), seed);
    let states = roll_forward(game, partition, x0, increments.view(), None)?;
    Ok(PathBatch {
        states,
        increments,
        partition: partition.clone(),
        seed,
        id: BATCH_IDS.fetch_add(1, Ordering::Relaxed),
    })
}

/// Controlled forward paths with the full drift b(t, X, policy(t, X)).
pub fn simulate_controlled(
    game: &GameSpec,
    policy: &dyn Policy,
    partition: &Partition,
    x0: ArrayView2<f64>,
    seed: u64,
) -> Result<PathBatch> {
    check_x0(game, &x0)?;
    let increments = sample_increments(partition, game.noise_dim, x0.nrows(), seed);
    let states = roll_forward(game, partition, x0, increments.view(), Some(policy))?;
    Ok(PathBatch {
        states,
        increments,
        partition: partition.clone(),
        seed,
        id: BATCH_IDS.fetch_add(1, Ordering::Relaxed),
    })
}

/// Controlled recursion under externally supplied increments (common random
/// numbers across policies).
pub fn simulate_controlled_with_noise(
    game: &GameSpec,
    policy: &dyn Policy,
    partition: &Partition,
    x0: ArrayView2<f64>,
    increments: ArrayView3<f64>,
) -> Result<Array3<f64>> {
    check_x0(game, &x0)?;
    roll_forward(game, partition, x0, increments, Some(policy))
}

fn roll_forward(
    game: &GameSpec,
    partition: &Partition,
    x0: ArrayView2<f64>,
    increments: ArrayView3<f64>,
    policy: Option<&dyn Policy>,
) -> Result<Array3<f64>> {
    let batch = x0.nrows();
    let n = game.state_dim;
    let n_steps = partition.n_steps();
    if increments.dim() != (batch, n_steps, game.noise_dim) {
        return Err(DfpError::shape(
            "increments",
            format!("{batch}x{n_steps}x{}", game.noise_dim),
            format!("{:?}", increments.dim()),
        ));
    }
    let mut states = Array3::zeros((batch, n_steps + 1, n));
    states.index_axis_mut(Axis(1), 0).assign(&x0);
    let constant_sigma = game.constant_diffusion();
    for k in 0..n_steps {
        let t = partition.time(k);
        let dt = partition.dt(k);
        let current = states.index_axis(Axis(1), k).to_owned();
        let controls = match policy {
            Some(p) => Some(p.controls(t, current.view()).map_err(|e| DfpError::Simulation {
                step: k,
                detail: format!("policy evaluation failed: {e}"),
            })?),
            None => None,
        };
        let mut next = current.clone();
        for j in 0..batch {
            let x = current.row(j);
            let dw = increments.index_axis(Axis(0), j);
            let dw_k = dw.index_axis(Axis(0), k);
            // diffusion term
            let noise = match constant_sigma {
                Some(sigma) => sigma.dot(&dw_k),
                None => game.diffusion(t, x).dot(&dw_k),
            };
            let mut row = next.row_mut(j);
            row += &noise;
            // drift term
            if let Some(controls) = &controls {
                let alpha = JointControl::from_flat(controls.row(j), game.n_players, game.d_alpha)?;
                let b = game.drift(t, x, &alpha);
                row += &(&b * dt);
            }
            for v in row.iter() {
                if !v.is_finite() {
                    return Err(DfpError::Simulation {
                        step: k,
                        detail: format!("state became non-finite on path {j}"),
                    });
                }
            }
        }
        states.index_axis_mut(Axis(1), k + 1).assign(&next);
    }
    Ok(states)
}

/// Monte Carlo cost estimate per player with its standard error.
#[derive(Debug, Clone)]
pub struct CostEstimate {
    pub mean: Array1<f64>,
    pub stderr: Array1<f64>,
    /// Per-path, per-player realized costs (B x N), for paired comparisons.
    pub per_path: Array2<f64>,
}

/// Discrete cost along simulated paths: batch mean of
/// sum_k f^i(t_k, X_k, policy(t_k, X_k)) dt_k + g^i(X_T).
pub fn mc_cost(game: &GameSpec, policy: &dyn Policy, paths: &PathBatch) -> Result<CostEstimate> {
    let (batch, _, _) = paths.states.dim();
    if batch == 0 {
        return Err(DfpError::Domain("mc_cost on an empty batch".into()));
    }
    let n_steps = paths.partition.n_steps();
    let mut per_path = Array2::zeros((batch, game.n_players));
    for k in 0..n_steps {
        let t = paths.partition.time(k);
        let dt = paths.partition.dt(k);
        let states_k = paths.states.index_axis(Axis(1), k);
        let controls = policy.controls(t, states_k)?;
        for j in 0..batch {
            let alpha = JointControl::from_flat(controls.row(j), game.n_players, game.d_alpha)?;
            let f = game.running_costs(t, states_k.row(j), &alpha);
            for i in 0..game.n_players {
                per_path[[j, i]] += f[i] * dt;
            }
        }
    }
    let terminal_states = paths.states.index_axis(Axis(1), n_steps);
    for j in 0..batch {
        let g = game.terminal_costs(terminal_states.row(j));
        for i in 0..game.n_players {
            per_path[[j, i]] += g[i];
        }
    }
    let mean = per_path.mean_axis(Axis(0)).unwrap();
    let mut stderr = Array1::zeros(game.n_players);
    if batch > 1 {
        for i in 0..game.n_players {
            let var = per_path
                .column(i)
                .iter()
                .map(|v| (v - mean[i]) * (v - mean[i]))
                .sum::<f64>()
                / (batch - 1) as f64;
            stderr[i] = (var / batch as f64).sqrt();
        }
    }
    Ok(CostEstimate {
        mean,
        stderr,
        per_path,
    })
}

#[derive(Debug, Clone)]
pub struct Delta0Config {
    pub batch: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub partition: Partition,
    pub seed: u64,
    pub initial: f64,
}

impl Delta0Config {
    pub fn new(partition: Partition, seed: u64) -> Self {
        Delta0Config {
            batch: 2000,
            max_iter: 20,
            rel_tol: 0.05,
            partition,
            seed,
            initial: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Delta0Result {
    pub delta: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Fixed point of delta -> time-averaged per-coordinate stddev of controlled
/// paths started from uniform[-delta, delta]^n.
pub fn delta0_fixed_point(
    game: &GameSpec,
    policy: &dyn Policy,
    config: &Delta0Config,
) -> Result<Delta0Result> {
    let mut delta = config.initial;
    for iter in 0..config.max_iter {
        let x0 = sample_initial(delta, game.state_dim, config.batch, config.seed ^ iter as u64)?;
        let paths = simulate_controlled(game, policy, &config.partition, x0.view(), config.seed ^ iter as u64)?;
        let next = average_std(&paths);
        let change = (next - delta).abs() / delta.max(1e-12);
        delta = next;
        if change < config.rel_tol {
            return Ok(Delta0Result {
                delta,
                converged: true,
                iterations: iter + 1,
            });
        }
    }
    Ok(Delta0Result {
        delta,
        converged: false,
        iterations: config.max_iter,
    })
}

/// Stddev over the batch, per (time, coordinate), averaged over both.
fn average_std(paths: &PathBatch) -> f64 {
    let (batch, steps1, n) = paths.states.dim();
    let mut acc = 0.0;
    for k in 0..steps1 {
        for l in 0..n {
            let col = paths.states.slice(ndarray::s![.., k, l]);
            let mean = col.sum() / batch as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / batch as f64;
            acc += var.sqrt();
        }
    }
    acc / (steps1 * n) as f64
}
