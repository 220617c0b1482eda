//! Ground-truth comparisons against the closed-form solution: the relative
//! squared error of predicted value gradients along oracle paths, coupled
//! path comparisons, and loss-versus-error instrumentation.

use crate::bsde::{rollout, BsdeProblem, StageNets, YzSource};
use crate::error::{DfpError, Result};
use crate::game::{GameSpec, Policy};
use crate::grid::Partition;
use crate::linalg;
use crate::sde::{sample_initial, simulate_controlled_with_noise, simulate_driftless, PathBatch};
use crate::systemic_risk::{RiccatiPolicy, RiccatiSolution};
use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RseProfileRow {
    pub k: usize,
    pub t: f64,
    pub sq_err: f64,
    pub sq_dev: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RseReport {
    pub rse: f64,
    pub j_paths: usize,
    pub n_steps: usize,
    pub profile: Vec<RseProfileRow>,
}

impl RseReport {
    /// CSV schema: `k,t,sq_err,sq_dev`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,t,sq_err,sq_dev")?;
        for row in &self.profile {
            writeln!(out, "{},{},{},{}", row.k, row.t, row.sq_err, row.sq_dev)?;
        }
        Ok(())
    }
}

/// Relative squared error: sum of squared prediction errors over the sum of
/// squared deviations of the truth from its grand mean (mean over all path
/// and time indices, per component).
pub fn rse(truth: ArrayView3<f64>, pred: ArrayView3<f64>) -> Result<f64> {
    Ok(rse_report_on_times(truth, pred, None)?.rse)
}

pub fn rse_report(truth: ArrayView3<f64>, pred: ArrayView3<f64>, partition: &Partition) -> Result<RseReport> {
    rse_report_on_times(truth, pred, Some(partition))
}

fn rse_report_on_times(
    truth: ArrayView3<f64>,
    pred: ArrayView3<f64>,
    partition: Option<&Partition>,
) -> Result<RseReport> {
    if truth.dim() != pred.dim() {
        return Err(DfpError::shape(
            "rse",
            format!("{:?}", truth.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let (j_paths, n_steps, n) = truth.dim();
    if j_paths == 0 || n_steps == 0 {
        return Err(DfpError::Domain("rse needs a non-empty sample".into()));
    }
    // grand mean of the truth over paths and times, per component
    let mut mean = vec![0.0; n];
    for j in 0..j_paths {
        for k in 0..n_steps {
            for l in 0..n {
                mean[l] += truth[[j, k, l]];
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= (j_paths * n_steps) as f64;
    }
    let mut profile = Vec::with_capacity(n_steps);
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..n_steps {
        let mut sq_err = 0.0;
        let mut sq_dev = 0.0;
        for j in 0..j_paths {
            for l in 0..n {
                let e = truth[[j, k, l]] - pred[[j, k, l]];
                sq_err += e * e;
                let d = truth[[j, k, l]] - mean[l];
                sq_dev += d * d;
            }
        }
        num += sq_err;
        den += sq_dev;
        profile.push(RseProfileRow {
            k,
            t: partition.map(|p| p.time(k)).unwrap_or(k as f64),
            sq_err,
            sq_dev,
        });
    }
    if den <= 0.0 {
        return Err(DfpError::Domain(
            "rse denominator is zero (degenerate truth sample)".into(),
        ));
    }
    Ok(RseReport {
        rse: num / den,
        j_paths,
        n_steps,
        profile,
    })
}

#[derive(Debug, Clone)]
pub struct GroundTruthConfig {
    pub j_paths: usize,
    pub seed: u64,
    pub partition: Partition,
    pub delta0: f64,
}

impl GroundTruthConfig {
    pub fn new(partition: Partition, delta0: f64, seed: u64) -> Self {
        GroundTruthConfig {
            j_paths: 256,
            seed,
            partition,
            delta0,
        }
    }
}

/// Driftless evaluation paths with player 1's true value gradient along them
/// (J x N_T x n, at the left grid nodes).
pub fn ground_truth_paths(
    game: &GameSpec,
    solution: &RiccatiSolution,
    config: &GroundTruthConfig,
) -> Result<(PathBatch, Array3<f64>)> {
    let x0 = sample_initial(config.delta0, game.state_dim, config.j_paths, config.seed)?;
    let paths = simulate_driftless(game, &config.partition, x0.view(), config.seed ^ 0x6F)?;
    let truth = oracle_gradients(solution, &paths, 0)?;
    Ok((paths, truth))
}

/// grad_x V^player along the paths at grid nodes 0..N_T-1.
pub fn oracle_gradients(
    solution: &RiccatiSolution,
    paths: &PathBatch,
    player: usize,
) -> Result<Array3<f64>> {
    let (batch, _, n) = paths.states.dim();
    let n_steps = paths.partition.n_steps();
    let mut out = Array3::zeros((batch, n_steps, n));
    for k in 0..n_steps {
        let t = paths.partition.time(k);
        let states = paths.states.index_axis(Axis(1), k);
        for j in 0..batch {
            let (_, grads) = solution.value_and_gradient(t, states.row(j))?;
            for l in 0..n {
                out[[j, k, l]] = grads[[l, player]];
            }
        }
    }
    Ok(out)
}

/// Predicted gradients recovered from a trained Z map: grad V = (Sigma^T)^+ Z,
/// using the constant diffusion's pseudoinverse.
pub fn predicted_gradients(
    game: &GameSpec,
    nets: &StageNets,
    paths: &PathBatch,
) -> Result<Array3<f64>> {
    let sigma = game.constant_diffusion().ok_or_else(|| {
        DfpError::Usage("gradient recovery needs a constant diffusion".into())
    })?;
    // (Sigma^T)^+ = (Sigma Sigma^T)^{-1} Sigma
    let gram_inv = linalg::invert(&sigma.dot(&sigma.t()))
        .ok_or_else(|| DfpError::Usage("diffusion Gram matrix is singular".into()))?;
    let recover = gram_inv.dot(sigma); // n x k
    let (batch, _, n) = paths.states.dim();
    let n_steps = paths.partition.n_steps();
    let mut out = Array3::zeros((batch, n_steps, n));
    for k in 0..n_steps {
        let t = paths.partition.time(k);
        let states = paths.states.index_axis(Axis(1), k);
        let z = nets.z_infer(k, t, states)?;
        for j in 0..batch {
            let grad = recover.dot(&z.row(j));
            for l in 0..n {
                out[[j, k, l]] = grad[l];
            }
        }
    }
    Ok(out)
}

/// RSE of a trained stage's player-0 Z map against the closed-form gradient.
pub fn rse_of_nets(
    game: &GameSpec,
    solution: &RiccatiSolution,
    nets: &StageNets,
    config: &GroundTruthConfig,
) -> Result<RseReport> {
    let (paths, truth) = ground_truth_paths(game, solution, config)?;
    let pred = predicted_gradients(game, nets, &paths)?;
    rse_report(truth.view(), pred.view(), &config.partition)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub t: f64,
    pub player: usize,
    pub x_true: f64,
    pub x_pred: f64,
    pub alpha_true: f64,
    pub alpha_pred: f64,
}

/// CSV schema: `t,player,x_true,x_pred,alpha_true,alpha_pred`.
pub fn write_comparison_csv<W: Write>(mut out: W, rows: &[ComparisonRow]) -> Result<()> {
    writeln!(out, "t,player,x_true,x_pred,alpha_true,alpha_pred")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.t, r.player, r.x_true, r.x_pred, r.alpha_true, r.alpha_pred
        )?;
    }
    Ok(())
}

/// One realized Brownian path drives both the closed-form-controlled and the
/// learned-policy-controlled state recursions; controls are recorded alongside.
pub fn path_comparison(
    game: &GameSpec,
    solution: &Arc<RiccatiSolution>,
    learned: &dyn Policy,
    partition: &Partition,
    delta0: f64,
    seed: u64,
) -> Result<Vec<ComparisonRow>> {
    let x0 = sample_initial(delta0, game.state_dim, 1, seed)?;
    let oracle = RiccatiPolicy {
        solution: Arc::clone(solution),
    };
    let reference = simulate_driftless(game, partition, x0.view(), seed ^ 0x9C)?;
    let increments = reference.increments.view();
    let states_true = simulate_controlled_with_noise(game, &oracle, partition, x0.view(), increments)?;
    let states_pred = simulate_controlled_with_noise(game, learned, partition, x0.view(), increments)?;
    let n_steps = partition.n_steps();
    let mut rows = Vec::with_capacity((n_steps + 1) * game.n_players);
    for k in 0..=n_steps {
        let t = partition.time(k);
        let xt = states_true.index_axis(Axis(1), k);
        let xp = states_pred.index_axis(Axis(1), k);
        // controls are defined on the left nodes; at T repeat the last ones
        let t_ctrl = partition.time(k.min(n_steps - 1));
        let a_true = oracle.controls(t_ctrl, xt)?;
        let a_pred = learned.controls(t_ctrl, xp)?;
        for i in 0..game.n_players {
            rows.push(ComparisonRow {
                t,
                player: i,
                x_true: xt[[0, i.min(game.state_dim - 1)]],
                x_pred: xp[[0, i.min(game.state_dim - 1)]],
                alpha_true: a_true[[0, i * game.d_alpha]],
                alpha_pred: a_pred[[0, i * game.d_alpha]],
            });
        }
    }
    Ok(rows)
}

/// Loss, sup-time squared Y error, and integrated squared Z error of a (Y, Z)
/// source against the closed-form solution along fixed driftless paths. The
/// rollout uses the supplied sub-problem driver.
pub fn loss_and_errors_vs_oracle(
    problem: &BsdeProblem,
    source: &dyn YzSource,
    paths: &PathBatch,
    solution: &RiccatiSolution,
    game: &GameSpec,
    player: usize,
) -> Result<(f64, f64, f64)> {
    let roll = rollout(problem, source, paths)?;
    let batch = paths.batch_size();
    let n_steps = paths.partition.n_steps();
    let mut y_err_sup = 0.0f64;
    for k in 0..=n_steps {
        let t = paths.partition.time(k);
        let states = paths.states.index_axis(Axis(1), k);
        let mut acc = 0.0;
        for j in 0..batch {
            let (values, _) = solution.value_and_gradient(t, states.row(j))?;
            let d = roll.y[[j, k]] - values[player];
            acc += d * d;
        }
        y_err_sup = y_err_sup.max(acc / batch as f64);
    }
    let mut z_err_int = 0.0;
    for k in 0..n_steps {
        let t = paths.partition.time(k);
        let dt = paths.partition.dt(k);
        let states = paths.states.index_axis(Axis(1), k);
        let z = source.z_batch(k, t, states)?;
        let sigma_t = game.diffusion(t, states.row(0)).t().to_owned();
        let mut acc = 0.0;
        for j in 0..batch {
            let (_, grads) = solution.value_and_gradient(t, states.row(j))?;
            let z_true = sigma_t.dot(&grads.column(player));
            for c in 0..z_true.len() {
                let d = z[[j, c]] - z_true[c];
                acc += d * d;
            }
        }
        z_err_int += acc / batch as f64 * dt;
    }
    Ok((roll.loss(), y_err_sup, z_err_int))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systemic_risk::{build_game, riccati_solve, InterBankParams};
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    #[test]
    fn rse_trivial_values() {
        let truth = Array3::from_shape_fn((4, 3, 2), |(j, k, l)| (j + 2 * k + l) as f64 * 0.25);
        // pred == truth -> 0
        assert_eq!(rse(truth.view(), truth.view()).unwrap(), 0.0);
        // pred == grand mean everywhere -> 1
        let mut mean = vec![0.0; 2];
        for j in 0..4 {
            for k in 0..3 {
                for l in 0..2 {
                    mean[l] += truth[[j, k, l]] / 12.0;
                }
            }
        }
        let pred = Array3::from_shape_fn((4, 3, 2), |(_, _, l)| mean[l]);
        assert_abs_diff_eq!(rse(truth.view(), pred.view()).unwrap(), 1.0, epsilon = 1e-12);
        // degenerate truth -> error
        let flat = Array3::from_elem((4, 3, 2), 1.0);
        assert!(rse(flat.view(), flat.view()).is_err());
    }

    #[test]
    fn rse_shift_invariance() {
        let truth = Array3::from_shape_fn((5, 4, 3), |(j, k, l)| ((j * 7 + k * 3 + l) as f64).sin());
        let pred = Array3::from_shape_fn((5, 4, 3), |(j, k, l)| {
            ((j * 7 + k * 3 + l) as f64).sin() + 0.1 * ((j + k) as f64).cos()
        });
        let base = rse(truth.view(), pred.view()).unwrap();
        let shifted_truth = truth.mapv(|v| v + 2.5);
        let shifted_pred = pred.mapv(|v| v + 2.5);
        let shifted = rse(shifted_truth.view(), shifted_pred.view()).unwrap();
        assert_abs_diff_eq!(base, shifted, epsilon = 1e-12);
    }

    #[test]
    fn ground_truth_contract() {
        let params = InterBankParams::baseline(4, 1.0);
        let game = build_game(&params).unwrap();
        let solution = riccati_solve(&params, 1001).unwrap();
        let config = GroundTruthConfig::new(Partition::uniform(1.0, 5).unwrap(), 0.5, 11);
        assert_eq!(config.j_paths, 256);
        let (paths_a, truth_a) = ground_truth_paths(&game, &solution, &config).unwrap();
        let (paths_b, truth_b) = ground_truth_paths(&game, &solution, &config).unwrap();
        assert_eq!(paths_a.states, paths_b.states);
        assert_eq!(truth_a, truth_b);
        // all-equal coordinates have zero gradient
        let flat_x0 = ndarray::Array2::from_elem((3, 4), 0.2);
        let flat_paths = crate::sde::simulate_driftless(
            &game,
            &config.partition,
            flat_x0.view(),
            3,
        )
        .unwrap();
        let grads = oracle_gradients(&solution, &flat_paths, 0).unwrap();
        for l in 0..4 {
            assert!(grads[[0, 0, l]].abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_recovery_inverts_sigma_transpose() {
        // feeding Z = Sigma^T g through predicted_gradients returns g
        let params = InterBankParams::baseline(3, 1.0);
        let game = build_game(&params).unwrap();
        let solution = riccati_solve(&params, 1001).unwrap();
        let config = GroundTruthConfig {
            j_paths: 8,
            seed: 5,
            partition: Partition::uniform(1.0, 4).unwrap(),
            delta0: 0.5,
        };
        let (paths, truth) = ground_truth_paths(&game, &solution, &config).unwrap();
        // oracle Z source
        let oracle = crate::systemic_risk::RiccatiYzSource::new(
            &game,
            std::sync::Arc::new(solution),
            0,
        );
        let sigma = game.constant_diffusion().unwrap();
        let gram_inv = crate::linalg::invert(&sigma.dot(&sigma.t())).unwrap();
        let recover = gram_inv.dot(sigma);
        for k in 0..4 {
            let t = paths.partition.time(k);
            let states = paths.states.index_axis(Axis(1), k);
            let z = oracle.z_batch(k, t, states).unwrap();
            for j in 0..8 {
                let grad = recover.dot(&z.row(j));
                for l in 0..3 {
                    assert_abs_diff_eq!(grad[l], truth[[j, k, l]], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn identical_policy_comparison_is_bitwise_equal() {
        let params = InterBankParams::baseline(3, 1.0);
        let game = build_game(&params).unwrap();
        let solution = Arc::new(riccati_solve(&params, 1001).unwrap());
        let partition = Partition::uniform(1.0, 6).unwrap();
        let oracle = RiccatiPolicy {
            solution: Arc::clone(&solution),
        };
        let rows = path_comparison(&game, &solution, &oracle, &partition, 0.5, 42).unwrap();
        assert_eq!(rows.len(), 7 * 3);
        for row in &rows {
            assert_eq!(row.x_true.to_bits(), row.x_pred.to_bits());
            assert_eq!(row.alpha_true.to_bits(), row.alpha_pred.to_bits());
        }
        let mut csv = Vec::new();
        write_comparison_csv(&mut csv, &rows).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("t,player,x_true,x_pred,alpha_true,alpha_pred\n"));
    }

    #[test]
    fn vanishing_diffusion_comparison_ignores_seed() {
        // sigma ~ 0 and a point initial condition: the trajectory is driven
        // by the drift alone, so different noise seeds give the same path
        let mut params = InterBankParams::baseline(2, 1.0);
        params.sigma = 1e-8;
        params.rho = 0.0;
        let game = build_game(&params).unwrap();
        let solution = Arc::new(riccati_solve(&params, 1001).unwrap());
        let partition = Partition::uniform(1.0, 4).unwrap();
        let oracle = RiccatiPolicy {
            solution: Arc::clone(&solution),
        };
        let a = path_comparison(&game, &solution, &oracle, &partition, 0.0, 1).unwrap();
        let b = path_comparison(&game, &solution, &oracle, &partition, 0.0, 999).unwrap();
        for (r1, r2) in a.iter().zip(b.iter()) {
            assert!((r1.x_true - r2.x_true).abs() < 1e-6);
            assert!((r1.alpha_true - r2.alpha_true).abs() < 1e-6);
        }
        // and per fixed seed the rows are bit-identical across calls
        let c = path_comparison(&game, &solution, &oracle, &partition, 0.0, 1).unwrap();
        for (r1, r2) in a.iter().zip(c.iter()) {
            assert_eq!(r1.x_true.to_bits(), r2.x_true.to_bits());
        }
    }

    #[test]
    fn oracle_source_hits_discretization_floor() {
        // with the closed-form (Y, Z) plugged in, the rollout loss is O(mesh)
        // and halves as the partition refines
        let params = InterBankParams::baseline(4, 1.0);
        let game = std::sync::Arc::new(build_game(&params).unwrap());
        let solution = std::sync::Arc::new(riccati_solve(&params, 2001).unwrap());
        let mut losses = Vec::new();
        for n_steps in [10usize, 20, 40] {
            let partition = Partition::uniform(1.0, n_steps).unwrap();
            let prev = crate::driver::StagePolicy::initial(
                std::sync::Arc::clone(&game),
                std::sync::Arc::new(RiccatiPolicy {
                    solution: std::sync::Arc::clone(&solution),
                }),
            );
            let problem = crate::driver::stage_problem(
                &game,
                &prev,
                0,
                crate::driver::DecoupleMode::PolicyUpdate,
                &partition,
            );
            let x0 = sample_initial(0.5, 4, 2000, 3).unwrap();
            let paths = simulate_driftless(&game, &partition, x0.view(), 5).unwrap();
            let oracle = crate::systemic_risk::RiccatiYzSource::new(
                &game,
                std::sync::Arc::clone(&solution),
                0,
            );
            losses.push(crate::bsde::loss(&problem, &oracle, &paths).unwrap());
        }
        let r1 = losses[0] / losses[1];
        let r2 = losses[1] / losses[2];
        assert!(
            r1 > 1.5 && r1 < 2.7 && r2 > 1.5 && r2 < 2.7,
            "refinement ratios {r1}, {r2} (losses {losses:?})"
        );
        // and the oracle loss is far below the zero-net loss
        let partition = Partition::uniform(1.0, 40).unwrap();
        let prev = crate::driver::StagePolicy::initial(
            std::sync::Arc::clone(&game),
            std::sync::Arc::new(RiccatiPolicy {
                solution: std::sync::Arc::clone(&solution),
            }),
        );
        let problem = crate::driver::stage_problem(
            &game,
            &prev,
            0,
            crate::driver::DecoupleMode::PolicyUpdate,
            &partition,
        );
        let x0 = sample_initial(0.5, 4, 2000, 3).unwrap();
        let paths = simulate_driftless(&game, &partition, x0.view(), 5).unwrap();
        let oracle = crate::systemic_risk::RiccatiYzSource::new(
            &game,
            std::sync::Arc::clone(&solution),
            0,
        );
        let oracle_loss = crate::bsde::loss(&problem, &oracle, &paths).unwrap();
        let zero_loss = crate::bsde::loss(
            &problem,
            &crate::bsde::ZeroYzSource { noise_dim: 5 },
            &paths,
        )
        .unwrap();
        assert!(
            oracle_loss < 0.2 * zero_loss,
            "oracle loss {oracle_loss} vs zero-net loss {zero_loss}"
        );
    }
}
