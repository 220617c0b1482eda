//! Deep BSDE sub-solver.
//!
//! A generic decoupled BSDE Y_t = g(X_T) + int F(s, X_s, Z_s) ds - int Z dW is
//! discretized on the partition as
//!   Y_{k+1} = Y_k - F(t_k, X_k, Z_k) dt_k + Z_k . dW_k,
//! with Y_0 = psi_0(X_0) and Z_k parameterized by networks. Training minimizes
//! the expected squared terminal mismatch E|g(X_T) - Y_T|^2 by Adam, with the
//! gradient flowing through the whole rollout (including F's z-argument).

use crate::error::{DfpError, Result};
use crate::grid::Partition;
use crate::nn::{adam_step, AdamHyper, AdamState, Cache, Mlp, MlpConfig};
use crate::sde::PathBatch;
use rayon::prelude::*;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use std::sync::Arc;

/// Driver F(t, x, z) with its gradient in z (needed for exact backprop).
/// `prepare` may precompute per-(path, step) payloads that do not depend on z
/// (e.g. frozen previous-stage controls); the payload row is handed back to
/// `value_and_grad_z`.
pub trait BsdeDriver: Send + Sync {
    fn prepare(&self, _paths: &PathBatch) -> Result<Option<Arc<Array3<f64>>>> {
        Ok(None)
    }

    fn value_and_grad_z(
        &self,
        t: f64,
        x: ArrayView1<f64>,
        z: ArrayView1<f64>,
        prep: Option<ArrayView1<f64>>,
    ) -> Result<(f64, Array1<f64>)>;
}

/// Driver F == 0.
pub struct ZeroDriver {
    pub noise_dim: usize,
}

impl BsdeDriver for ZeroDriver {
    fn value_and_grad_z(
        &self,
        _t: f64,
        _x: ArrayView1<f64>,
        _z: ArrayView1<f64>,
        _prep: Option<ArrayView1<f64>>,
    ) -> Result<(f64, Array1<f64>)> {
        Ok((0.0, Array1::zeros(self.noise_dim)))
    }
}

/// One player's sub-problem.
pub struct BsdeProblem {
    pub driver: Arc<dyn BsdeDriver>,
    pub terminal: Arc<dyn Fn(ArrayView1<f64>) -> f64 + Send + Sync>,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub partition: Partition,
}

/// Z-network representation: one time-conditioned net phi(t, x), or one net
/// per partition step phi_k(x).
#[derive(Debug, Clone)]
pub enum ZNets {
    TimeConditioned(Mlp),
    PerStep(Vec<Mlp>),
}

/// The trainable maps of one sub-problem: psi_0 for Y_0 and the Z nets.
#[derive(Debug, Clone)]
pub struct StageNets {
    pub y0: Mlp,
    pub z: ZNets,
    pub partition: Partition,
}

/// Network shape configuration shared by Y_0 and Z nets.
#[derive(Debug, Clone)]
pub struct StageNetConfig {
    pub hidden: Vec<usize>,
    pub batchnorm: bool,
    pub activation: crate::nn::Activation,
    pub time_conditioned: bool,
    pub seed: u64,
}

impl StageNetConfig {
    pub fn new(hidden: Vec<usize>, seed: u64) -> Self {
        StageNetConfig {
            hidden,
            batchnorm: true,
            activation: crate::nn::Activation::Tanh,
            time_conditioned: true,
            seed,
        }
    }
}

impl StageNets {
    pub fn new(state_dim: usize, noise_dim: usize, partition: &Partition, config: &StageNetConfig) -> Self {
        let mk = |input: usize, output: usize, salt: u64, bn_sets: usize| {
            let mut c = MlpConfig::new(input, output, config.hidden.clone())
                .with_seed(config.seed.wrapping_add(salt))
                .with_batchnorm(config.batchnorm);
            c.activation = config.activation;
            c.bn_sets = bn_sets;
            Mlp::new(c)
        };
        let y0 = mk(state_dim, 1, 0x10, 1);
        // the time-conditioned net is evaluated once per partition step on a
        // batch at a fixed t, so each step gets its own batch-norm set
        let z = if config.time_conditioned {
            ZNets::TimeConditioned(mk(state_dim + 1, noise_dim, 0x20, partition.n_steps()))
        } else {
            ZNets::PerStep(
                (0..partition.n_steps())
                    .map(|k| mk(state_dim, noise_dim, 0x20 + 1 + k as u64, 1))
                    .collect(),
            )
        };
        StageNets {
            y0,
            z,
            partition: partition.clone(),
        }
    }

    /// Infer-mode Z at grid step k (time t must be the k-th node for per-step nets).
    pub fn z_infer(&self, k: usize, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.z {
            ZNets::TimeConditioned(net) => {
                net.forward_infer_set(k, with_time_column(t, x).view())
            }
            ZNets::PerStep(nets) => {
                let net = nets.get(k).ok_or_else(|| {
                    DfpError::Domain(format!("step index {k} out of range for per-step nets"))
                })?;
                net.forward_infer(x)
            }
        }
    }

    /// Infer-mode (Y, Z) at time t. Per-step nets require t to be a grid node;
    /// a time-conditioned net accepts any t in [0, T] and uses the batch-norm
    /// set of the step containing t.
    pub fn evaluate_yz(&self, t: f64, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        if t < 0.0 || t > self.partition.horizon() {
            return Err(DfpError::Domain(format!(
                "t = {t} outside [0, {}]",
                self.partition.horizon()
            )));
        }
        let y = self.y0.forward_infer(x)?.column(0).to_owned();
        let z = match &self.z {
            ZNets::TimeConditioned(net) => {
                let k = self.partition.step_index(t)?;
                net.forward_infer_set(k, with_time_column(t, x).view())?
            }
            ZNets::PerStep(nets) => {
                let k = self.partition.node_index(t).ok_or_else(|| {
                    DfpError::Domain(format!("t = {t} is not a grid node; per-step Z nets are defined on the grid only"))
                })?;
                let k = k.min(nets.len() - 1);
                nets[k].forward_infer(x)?
            }
        };
        Ok((y, z))
    }

    pub fn all_nets_mut(&mut self) -> Vec<&mut Mlp> {
        let mut out = vec![&mut self.y0];
        match &mut self.z {
            ZNets::TimeConditioned(net) => out.push(net),
            ZNets::PerStep(nets) => out.extend(nets.iter_mut()),
        }
        out
    }

    pub fn all_nets(&self) -> Vec<&Mlp> {
        let mut out = vec![&self.y0];
        match &self.z {
            ZNets::TimeConditioned(net) => out.push(net),
            ZNets::PerStep(nets) => out.extend(nets.iter()),
        }
        out
    }
}

fn with_time_column(t: f64, x: ArrayView2<f64>) -> Array2<f64> {
    let (b, n) = x.dim();
    let mut out = Array2::zeros((b, n + 1));
    out.column_mut(0).fill(t);
    out.slice_mut(ndarray::s![.., 1..]).assign(&x);
    out
}

/// Source of (Y_0, Z_k) values along a rollout; implemented by trained nets
/// and by closed-form oracles.
pub trait YzSource {
    fn y0_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>>;
    fn z_batch(&self, k: usize, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl YzSource for StageNets {
    fn y0_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.y0.forward_infer(x)?.column(0).to_owned())
    }

    fn z_batch(&self, k: usize, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.z_infer(k, t, x)
    }
}

/// (Y, Z) identically zero.
pub struct ZeroYzSource {
    pub noise_dim: usize,
}

impl YzSource for ZeroYzSource {
    fn y0_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(Array1::zeros(x.nrows()))
    }

    fn z_batch(&self, _k: usize, _t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros((x.nrows(), self.noise_dim)))
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// B x (N_T + 1) backward-process path.
    pub y: Array2<f64>,
    /// g(X_T) - Y_T per path.
    pub terminal_mismatch: Array1<f64>,
}

impl Rollout {
    pub fn loss(&self) -> f64 {
        self.terminal_mismatch
            .iter()
            .map(|m| m * m)
            .sum::<f64>()
            / self.terminal_mismatch.len().max(1) as f64
    }
}

/// Forward recursion of the discrete BSDE under a fixed (Y, Z) source.
pub fn rollout(problem: &BsdeProblem, source: &dyn YzSource, paths: &PathBatch) -> Result<Rollout> {
    let batch = paths.batch_size();
    let n_steps = problem.partition.n_steps();
    if paths.partition != problem.partition {
        return Err(DfpError::Usage("paths were simulated on a different partition".into()));
    }
    let prep = problem.driver.prepare(paths)?;
    let mut y = Array2::zeros((batch, n_steps + 1));
    let x0 = paths.states.index_axis(Axis(1), 0);
    y.column_mut(0).assign(&source.y0_batch(x0)?);
    for k in 0..n_steps {
        let t = problem.partition.time(k);
        let dt = problem.partition.dt(k);
        let x_k = paths.states.index_axis(Axis(1), k);
        let z = source.z_batch(k, t, x_k)?;
        for j in 0..batch {
            let prep_row = prep
                .as_ref()
                .map(|p| p.slice(ndarray::s![j, k, ..]));
            let (f, _) = problem
                .driver
                .value_and_grad_z(t, x_k.row(j), z.row(j), prep_row)?;
            let dw = paths.increments.slice(ndarray::s![j, k, ..]);
            let next = y[[j, k]] - f * dt + z.row(j).dot(&dw);
            if !next.is_finite() {
                return Err(DfpError::Rollout {
                    step: k,
                    detail: format!("Y became non-finite on path {j} (driver value {f})"),
                });
            }
            y[[j, k + 1]] = next;
        }
    }
    let x_t = paths.states.index_axis(Axis(1), n_steps);
    let mut mismatch = Array1::zeros(batch);
    for j in 0..batch {
        mismatch[j] = (problem.terminal)(x_t.row(j)) - y[[j, n_steps]];
    }
    Ok(Rollout {
        y,
        terminal_mismatch: mismatch,
    })
}

/// Batch mean of the squared terminal mismatch.
pub fn loss(problem: &BsdeProblem, source: &dyn YzSource, paths: &PathBatch) -> Result<f64> {
    Ok(rollout(problem, source, paths)?.loss())
}

/// Networks for the N sub-problems of a stage: either one shared set (trained
/// on player 0's problem, mapped to the others by the game's symmetry) or one
/// set per player.
#[derive(Debug, Clone)]
pub enum PlayersNets {
    Shared(StageNets),
    PerPlayer(Vec<StageNets>),
}

impl PlayersNets {
    pub fn trained_players(&self) -> usize {
        match self {
            PlayersNets::Shared(_) => 1,
            PlayersNets::PerPlayer(nets) => nets.len(),
        }
    }

    pub fn net_for_training(&mut self, player: usize) -> &mut StageNets {
        match self {
            PlayersNets::Shared(nets) => nets,
            PlayersNets::PerPlayer(nets) => &mut nets[player],
        }
    }

    pub fn primary(&self) -> &StageNets {
        match self {
            PlayersNets::Shared(nets) => nets,
            PlayersNets::PerPlayer(nets) => &nets[0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Record a history row every this many steps (and at the last step).
    pub eval_every: u64,
    /// Clone the nets into the report every this many steps (0 = never).
    pub snapshot_every: u64,
}

impl TrainConfig {
    pub fn new(steps: u64, batch: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch,
            lr,
            seed,
            eval_every: 100,
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub step: u64,
    pub loss: f64,
    pub rse: Option<f64>,
}

pub struct TrainReport {
    /// One history per trained player.
    pub histories: Vec<Vec<HistoryRow>>,
    /// (step, nets) snapshots when requested.
    pub snapshots: Vec<(u64, PlayersNets)>,
}

/// History CSV: `step,loss,rse` with rse blank when absent.
pub fn write_history_csv<W: std::io::Write>(mut out: W, history: &[HistoryRow]) -> Result<()> {
    writeln!(out, "step,loss,rse")?;
    for row in history {
        match row.rse {
            Some(r) => writeln!(out, "{},{},{}", row.step, row.loss, r)?,
            None => writeln!(out, "{},{},", row.step, row.loss)?,
        }
    }
    Ok(())
}

struct NetOptimizer {
    adam: Vec<AdamState>,
}

impl NetOptimizer {
    fn new(nets: &StageNets) -> Self {
        NetOptimizer {
            adam: nets.all_nets().iter().map(|n| AdamState::new(n.n_params())).collect(),
        }
    }
}

/// Train the stage's sub-problems by stochastic gradient descent on the
/// terminal-mismatch loss. `path_source` must yield a fresh driftless batch
/// for every step; the same batch feeds every player's problem.
pub fn train(
    problems: &[BsdeProblem],
    nets: &mut PlayersNets,
    config: &TrainConfig,
    path_source: &mut dyn FnMut(u64) -> Result<PathBatch>,
    eval_hook: Option<&dyn Fn(u64, &PlayersNets) -> Option<f64>>,
) -> Result<TrainReport> {
    let trained = nets.trained_players();
    if matches!(nets, PlayersNets::PerPlayer(_)) && problems.len() < trained {
        return Err(DfpError::Usage(format!(
            "need one problem per player: {} problems for {trained} players",
            problems.len()
        )));
    }
    let hyper = AdamHyper::with_lr(config.lr);
    let mut optimizers: Vec<NetOptimizer> = (0..trained)
        .map(|p| {
            let n = match nets {
                PlayersNets::Shared(n) => n,
                PlayersNets::PerPlayer(v) => &v[p],
            };
            NetOptimizer::new(n)
        })
        .collect();
    let mut histories: Vec<Vec<HistoryRow>> = vec![Vec::new(); trained];
    let mut snapshots = Vec::new();

    for step in 0..config.steps {
        let paths = path_source(step)?;
        if paths.batch_size() != config.batch {
            return Err(DfpError::Usage(format!(
                "path source produced batch {} but config.batch is {}",
                paths.batch_size(),
                config.batch
            )));
        }
        let mut step_losses = vec![0.0; trained];
        for p in 0..trained {
            let problem = &problems[p];
            let prep = problem.driver.prepare(&paths)?;
            let loss = train_one_step(
                problem,
                nets.net_for_training(p),
                &mut optimizers[p],
                &paths,
                prep.as_deref(),
                &hyper,
            )
            .map_err(|e| DfpError::Training {
                step,
                detail: format!("player {p}: {e}"),
            })?;
            step_losses[p] = loss;
        }
        let last = step + 1 == config.steps;
        if config.eval_every > 0 && (step % config.eval_every == 0 || last) {
            let rse = eval_hook.and_then(|hook| hook(step, nets));
            for p in 0..trained {
                histories[p].push(HistoryRow {
                    step,
                    loss: step_losses[p],
                    rse,
                });
            }
        }
        if config.snapshot_every > 0 && ((step + 1) % config.snapshot_every == 0 || last) {
            snapshots.push((step + 1, nets.clone()));
        }
    }
    Ok(TrainReport {
        histories,
        snapshots,
    })
}

/// One SGD step on one sub-problem: full rollout, reverse sweep, Adam update.
fn train_one_step(
    problem: &BsdeProblem,
    nets: &mut StageNets,
    optimizer: &mut NetOptimizer,
    paths: &PathBatch,
    prep: Option<&Array3<f64>>,
    hyper: &AdamHyper,
) -> Result<f64> {
    let batch = paths.batch_size();
    let n_steps = problem.partition.n_steps();
    let noise_dim = problem.noise_dim;

    // forward
    let x0 = paths.states.index_axis(Axis(1), 0);
    let (y0_out, y0_cache) = nets.y0.forward_train(x0)?;
    let mut y = y0_out.column(0).to_owned();
    let mut z_caches: Vec<Cache> = Vec::with_capacity(n_steps);
    let mut z_coeffs: Vec<Array2<f64>> = Vec::with_capacity(n_steps); // dY_T/dz_k per path
    for k in 0..n_steps {
        let t = problem.partition.time(k);
        let dt = problem.partition.dt(k);
        let x_k = paths.states.index_axis(Axis(1), k);
        let (z, cache) = match &mut nets.z {
            ZNets::TimeConditioned(net) => {
                net.forward_train_set(k, with_time_column(t, x_k).view())?
            }
            ZNets::PerStep(nets) => nets[k].forward_train(x_k)?,
        };
        z_caches.push(cache);
        let mut coeff = Array2::zeros((batch, noise_dim));
        let mut f_vals = vec![0.0; batch];
        {
            // data-parallel driver evaluation with slot-disjoint writes keeps
            // the result independent of the thread schedule
            let coeff_slice = coeff.as_slice_mut().expect("standard layout");
            f_vals
                .par_iter_mut()
                .zip(coeff_slice.par_chunks_mut(noise_dim))
                .enumerate()
                .try_for_each(|(j, (f_out, coeff_row))| -> Result<()> {
                    let prep_row = prep.map(|p| p.slice(ndarray::s![j, k, ..]));
                    let (f, df_dz) = problem
                        .driver
                        .value_and_grad_z(t, x_k.row(j), z.row(j), prep_row)?;
                    *f_out = f;
                    let dw = paths.increments.slice(ndarray::s![j, k, ..]);
                    for c in 0..noise_dim {
                        coeff_row[c] = -df_dz[c] * dt + dw[c];
                    }
                    Ok(())
                })?;
        }
        for j in 0..batch {
            let dw = paths.increments.slice(ndarray::s![j, k, ..]);
            let next = y[j] - f_vals[j] * dt + z.row(j).dot(&dw);
            if !next.is_finite() {
                return Err(DfpError::Rollout {
                    step: k,
                    detail: format!("Y became non-finite on path {j}"),
                });
            }
            y[j] = next;
        }
        z_coeffs.push(coeff);
    }
    let x_t = paths.states.index_axis(Axis(1), n_steps);
    let mut loss = 0.0;
    let mut seed_grad = Array1::zeros(batch);
    for j in 0..batch {
        let mismatch = (problem.terminal)(x_t.row(j)) - y[j];
        loss += mismatch * mismatch;
        seed_grad[j] = -2.0 * mismatch / batch as f64; // dLoss/dY_T
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(DfpError::non_finite("loss", "terminal mismatch"));
    }

    // backward: dY_{k+1}/dY_k = 1, so the Y-seed reaches every subnetwork
    match &mut nets.z {
        ZNets::TimeConditioned(net) => {
            let mut grads = vec![0.0; net.n_params()];
            for k in (0..n_steps).rev() {
                let mut upstream = z_coeffs[k].clone();
                for j in 0..batch {
                    for c in 0..noise_dim {
                        upstream[[j, c]] *= seed_grad[j];
                    }
                }
                net.backward(&z_caches[k], upstream.view(), &mut grads)?;
            }
            adam_step(&mut optimizer.adam[1], net.params_mut(), &grads, hyper)?;
            net.train_steps += 1;
        }
        ZNets::PerStep(step_nets) => {
            for k in (0..n_steps).rev() {
                let net = &mut step_nets[k];
                let mut grads = vec![0.0; net.n_params()];
                let mut upstream = z_coeffs[k].clone();
                for j in 0..batch {
                    for c in 0..noise_dim {
                        upstream[[j, c]] *= seed_grad[j];
                    }
                }
                net.backward(&z_caches[k], upstream.view(), &mut grads)?;
                adam_step(&mut optimizer.adam[1 + k], net.params_mut(), &grads, hyper)?;
                net.train_steps += 1;
            }
        }
    }
    let mut y0_grads = vec![0.0; nets.y0.n_params()];
    let upstream = seed_grad.insert_axis(Axis(1));
    nets.y0.backward(&y0_cache, upstream.view(), &mut y0_grads)?;
    adam_step(&mut optimizer.adam[0], nets.y0.params_mut(), &y0_grads, hyper)?;
    nets.y0.train_steps += 1;
    Ok(loss)
}
