//! The inter-bank lending game and its closed-form quadratic solution.
//!
//! N banks with log-monetary reserves X^i follow
//!   dX^i = [a (xbar - X^i) + alpha^i] dt + sigma (rho dW^0 + sqrt(1-rho^2) dW^i),
//! each minimizing running cost
//!   f^i = 1/2 (alpha^i)^2 - q alpha^i (xbar - X^i) + eps/2 (xbar - X^i)^2
//! and terminal cost g^i = c/2 (xbar - X^i)^2.
//!
//! The game value admits the quadratic form V^i(t,x) = eta(t)/2 (xbar - x^i)^2 + mu(t)
//! with
//!   eta' = 2(a+q) eta + (1 - 1/N^2) eta^2 - (eps - q^2),      eta(T) = c,
//!   mu'  = -1/2 sigma^2 (1 - rho^2)(1 - 1/N) eta,             mu(T)  = 0,
//! and equilibrium policy alpha^{i,*} = (q + (1 - 1/N) eta(t)) (xbar - x^i).
//! `riccati_solve` refuses to hand out a solution whose HJB residual check fails,
//! so a wrong derivation cannot silently become ground truth.

use crate::error::{DfpError, Result};
use crate::game::{AdjointColumns, GameSpec, JointControl, PlayerSymmetry, Policy};
use crate::linalg;
use crate::rng::{stream, CounterRng};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterBankParams {
    /// Mean-reversion rate of the lending market.
    pub a: f64,
    /// Control-cost cross coefficient.
    pub q: f64,
    /// Terminal cost weight.
    pub c: f64,
    /// Running deviation weight.
    pub eps: f64,
    /// Common-noise correlation in [0, 1].
    pub rho: f64,
    /// Volatility.
    pub sigma: f64,
    /// Number of banks.
    pub n_players: usize,
    /// Horizon T.
    pub horizon: f64,
}

impl InterBankParams {
    /// Baseline parameter set used throughout the experiments.
    pub fn baseline(n_players: usize, horizon: f64) -> Self {
        InterBankParams {
            a: 0.1,
            q: 0.1,
            c: 0.5,
            eps: 0.5,
            rho: 0.2,
            sigma: 1.0,
            n_players,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(DfpError::Construction(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(DfpError::Construction(format!("rho must lie in [0,1], got {}", self.rho)));
        }
        if self.c < 0.0 {
            return Err(DfpError::Construction(format!("c must be >= 0, got {}", self.c)));
        }
        if self.n_players == 0 || self.horizon <= 0.0 {
            return Err(DfpError::Construction("need n_players >= 1 and horizon > 0".into()));
        }
        Ok(())
    }

    /// The model's convexity condition q^2 <= eps; violations are flagged but
    /// not fatal.
    pub fn convexity_warning(&self) -> Option<String> {
        if self.q * self.q > self.eps {
            Some(format!(
                "q^2 = {} exceeds eps = {}: the running cost may lose convexity",
                self.q * self.q,
                self.eps
            ))
        } else {
            None
        }
    }
}

/// The N x (N+1) diffusion: column 0 carries the common noise, the diagonal
/// block the idiosyncratic noises.
pub fn sigma_matrix(params: &InterBankParams) -> Array2<f64> {
    let n = params.n_players;
    let mut m = Array2::zeros((n, n + 1));
    let idio = params.sigma * (1.0 - params.rho * params.rho).sqrt();
    for j in 0..n {
        m[[j, 0]] = params.sigma * params.rho;
        m[[j, j + 1]] = idio;
    }
    m
}

fn mean(x: ArrayView1<f64>) -> f64 {
    x.sum() / x.len() as f64
}

/// Build the GameSpec: n = N, k = N+1, scalar controls, phi through the
/// precomputed pseudoinverse of the constant diffusion, and the closed-form
/// best response.
pub fn build_game(params: &InterBankParams) -> Result<GameSpec> {
    params.validate()?;
    let n = params.n_players;
    let sigma = sigma_matrix(params);
    if linalg::right_pseudoinverse(&sigma).is_none() {
        return Err(DfpError::Construction(
            "inter-bank diffusion is rank deficient (rho = 1 with several banks?); cannot factor the drift".into(),
        ));
    }
    // best-response helper: grad of phi . p^i in alpha^i is ((Sigma Sigma^T)^{-1} Sigma p^i)_i
    let gram_inv = linalg::invert(&sigma.dot(&sigma.t()))
        .ok_or_else(|| DfpError::Construction("diffusion Gram matrix is singular".into()))?;
    let response_mat = Arc::new(gram_inv.dot(&sigma)); // N x (N+1)
    let response_mat_fp = Arc::clone(&response_mat);

    let (a, q, eps_w, cterm) = (params.a, params.q, params.eps, params.c);

    let drift = move |_t: f64, x: ArrayView1<f64>, alpha: &JointControl| {
        let xbar = mean(x);
        Array1::from_iter(
            x.iter()
                .enumerate()
                .map(|(i, xi)| a * (xbar - xi) + alpha.0[[i, 0]]),
        )
    };

    let running = move |_t: f64, x: ArrayView1<f64>, alpha: &JointControl| {
        let xbar = mean(x);
        Array1::from_iter(x.iter().enumerate().map(|(i, xi)| {
            let m = xbar - xi;
            let ai = alpha.0[[i, 0]];
            0.5 * ai * ai - q * ai * m + 0.5 * eps_w * m * m
        }))
    };

    let terminal = move |x: ArrayView1<f64>| {
        let xbar = mean(x);
        Array1::from_iter(x.iter().map(|xi| {
            let m = xbar - xi;
            0.5 * cterm * m * m
        }))
    };

    let best_response = {
        let response_mat = Arc::clone(&response_mat);
        move |player: usize, _t: f64, x: ArrayView1<f64>, _others: &JointControl, p_i: ArrayView1<f64>| {
            let m = mean(x) - x[player];
            let grad_phi_term = response_mat.row(player).dot(&p_i);
            Array1::from_elem(1, q * m - grad_phi_term)
        }
    };

    // the best response is opponent-free, so the joint fixed point is immediate
    let fixed_point = move |_t: f64, x: ArrayView1<f64>, p: &AdjointColumns| {
        let xbar = mean(x);
        let mut out = Array2::zeros((x.len(), 1));
        for i in 0..x.len() {
            let m = xbar - x[i];
            out[[i, 0]] = q * m - response_mat_fp.row(i).dot(&p.column(i));
        }
        JointControl(out)
    };

    // exchangeability: player j's functions are player 0's with state coords
    // 0<->j swapped and noise components 1<->1+j swapped.
    let mut state_perms = Vec::with_capacity(n);
    let mut noise_perms = Vec::with_capacity(n);
    for j in 0..n {
        let mut sp: Vec<usize> = (0..n).collect();
        sp.swap(0, j);
        let mut np: Vec<usize> = (0..n + 1).collect();
        np.swap(1, 1 + j);
        state_perms.push(sp);
        noise_perms.push(np);
    }

    GameSpec::builder(n, n, n + 1, 1, params.horizon)
        .drift(drift)
        .constant_diffusion(sigma)
        .phi_from_pseudoinverse()?
        .running_costs(running)
        .terminal_costs(terminal)
        .analytic_best_response(best_response)
        .analytic_fixed_point(fixed_point)
        .player_symmetry(PlayerSymmetry {
            state_perms,
            noise_perms,
        })
        // dH^i/dalpha^i = alpha^i - q(xbar - x^i) + (G Sigma p^i)_i has no
        // alpha^{-i} term, so the best response ignores the opponents
        .opponent_free_best_response()
        .build()
}

/// Scalar Riccati coefficient grid with the value offset mu.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: Vec<f64>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub params: InterBankParams,
}

/// Default grid density for `riccati_solve`.
pub const DEFAULT_RICCATI_GRID: usize = 4001;

/// Integrate eta backward from eta(T) = c with classic RK4 and validate the
/// result against the HJB system before returning it.
pub fn riccati_solve(params: &InterBankParams, n_grid: usize) -> Result<RiccatiSolution> {
    let solution = riccati_integrate(params, n_grid)?;
    let game = build_game(params)?;
    let worst = solution.hjb_residual(&game, 2000, 0x52C4)?;
    if worst > 1e-8 {
        return Err(DfpError::Derivation(format!(
            "HJB residual of the quadratic ansatz is {worst:.3e} > 1e-8; the Riccati ODE or its integration is wrong"
        )));
    }
    Ok(solution)
}

/// RK4 integration only, without the residual gate (used by the gate itself
/// and by step-halving studies).
pub fn riccati_integrate(params: &InterBankParams, n_grid: usize) -> Result<RiccatiSolution> {
    params.validate()?;
    if n_grid < 2 {
        return Err(DfpError::Domain(format!("n_grid must be >= 2, got {n_grid}")));
    }
    let n = params.n_players as f64;
    let (a, q, c, eps) = (params.a, params.q, params.c, params.eps);
    let t_grid: Vec<f64> = (0..n_grid)
        .map(|j| params.horizon * j as f64 / (n_grid - 1) as f64)
        .collect();
    let h = params.horizon / (n_grid - 1) as f64;

    let eta_dot = |e: f64| 2.0 * (a + q) * e + (1.0 - 1.0 / (n * n)) * e * e - (eps - q * q);
    let mu_dot_coeff = -0.5
        * params.sigma
        * params.sigma
        * (1.0 - params.rho * params.rho)
        * (1.0 - 1.0 / n);

    let mut eta = vec![0.0; n_grid];
    let mut mu = vec![0.0; n_grid];
    eta[n_grid - 1] = c;
    mu[n_grid - 1] = 0.0;
    for j in (1..n_grid).rev() {
        // backward RK4 step of size h for the coupled system (eta, mu)
        let e = eta[j];
        let k1 = eta_dot(e);
        let e2 = e - 0.5 * h * k1;
        let k2 = eta_dot(e2);
        let e3 = e - 0.5 * h * k2;
        let k3 = eta_dot(e3);
        let e4 = e - h * k3;
        let k4 = eta_dot(e4);
        eta[j - 1] = e - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        // mu' = coeff * eta, evaluated at the same RK4 stages
        let (m1, m2, m3, m4) = (
            mu_dot_coeff * e,
            mu_dot_coeff * e2,
            mu_dot_coeff * e3,
            mu_dot_coeff * e4,
        );
        mu[j - 1] = mu[j] - h / 6.0 * (m1 + 2.0 * m2 + 2.0 * m3 + m4);
        if !eta[j - 1].is_finite() {
            return Err(DfpError::NonFinite {
                what: "riccati_solve".into(),
                context: format!("eta blew up at t = {}", t_grid[j - 1]),
            });
        }
    }
    Ok(RiccatiSolution {
        grid: t_grid,
        eta,
        mu,
        params: *params,
    })
}

impl RiccatiSolution {
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if t < 0.0 || t > self.params.horizon + 1e-12 {
            return Err(DfpError::Domain(format!(
                "t = {t} outside [0, {}]",
                self.params.horizon
            )));
        }
        let h = self.grid[1] - self.grid[0];
        let j = ((t / h) as usize).min(self.grid.len() - 2);
        let w = ((t - self.grid[j]) / h).clamp(0.0, 1.0);
        Ok((j, w))
    }

    /// eta(t), linearly interpolated.
    pub fn eta_at(&self, t: f64) -> Result<f64> {
        let (j, w) = self.locate(t)?;
        Ok(self.eta[j] * (1.0 - w) + self.eta[j + 1] * w)
    }

    pub fn mu_at(&self, t: f64) -> Result<f64> {
        let (j, w) = self.locate(t)?;
        Ok(self.mu[j] * (1.0 - w) + self.mu[j + 1] * w)
    }

    /// Coefficient of (xbar - x^i) in the optimal policy.
    pub fn policy_coefficient(&self, t: f64) -> Result<f64> {
        let n = self.params.n_players as f64;
        Ok(self.params.q + (1.0 - 1.0 / n) * self.eta_at(t)?)
    }

    /// Closed-form equilibrium policy.
    pub fn optimal_policy(&self, t: f64, x: ArrayView1<f64>) -> Result<JointControl> {
        let beta = self.policy_coefficient(t)?;
        let xbar = mean(x);
        let mut out = Array2::zeros((x.len(), 1));
        for (i, xi) in x.iter().enumerate() {
            out[[i, 0]] = beta * (xbar - xi);
        }
        Ok(JointControl(out))
    }

    /// Value vector V(t,x) in R^N and gradient matrix in R^{n x N}
    /// (column i is grad_x V^i).
    pub fn value_and_gradient(&self, t: f64, x: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let eta = self.eta_at(t)?;
        let mu = self.mu_at(t)?;
        let n = x.len();
        let xbar = mean(x);
        let mut values = Array1::zeros(n);
        let mut grads = Array2::zeros((n, n));
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let m = xbar - x[i];
            values[i] = 0.5 * eta * m * m + mu;
            for l in 0..n {
                let indicator = if l == i { 1.0 } else { 0.0 };
                grads[[l, i]] = eta * m * (inv_n - indicator);
            }
        }
        Ok((values, grads))
    }

    /// Adjoint columns Z = Sigma^T grad V at (t, x).
    pub fn adjoint_columns(&self, game: &GameSpec, t: f64, x: ArrayView1<f64>) -> Result<AdjointColumns> {
        let (_, grads) = self.value_and_gradient(t, x)?;
        let sigma = game.diffusion(t, x);
        Ok(AdjointColumns(sigma.t().dot(&grads)))
    }

    /// Max HJB residual of the quadratic ansatz over `samples` random interior
    /// grid nodes and states, with eta'/mu' from five-point finite differences.
    pub fn hjb_residual(&self, game: &GameSpec, samples: usize, seed: u64) -> Result<f64> {
        let n_grid = self.grid.len();
        if n_grid < 7 {
            return Err(DfpError::Domain("residual check needs at least 7 grid nodes".into()));
        }
        let h = self.grid[1] - self.grid[0];
        let n = self.params.n_players;
        let rng = CounterRng::new(seed).derive(stream::VALIDATION, 0);
        let deriv5 = |v: &[f64], j: usize| {
            (-v[j + 2] + 8.0 * v[j + 1] - 8.0 * v[j - 1] + v[j - 2]) / (12.0 * h)
        };
        let mut worst = 0.0f64;
        for s in 0..samples as u64 {
            let j = 2 + (rng.raw(s, 0, 0) as usize) % (n_grid - 4);
            let t = self.grid[j];
            let x = Array1::from_iter((0..n).map(|l| rng.uniform_symmetric(1.5, s, 1, l as u64)));
            let eta = self.eta[j];
            let eta_dot = deriv5(&self.eta, j);
            let mu_dot = deriv5(&self.mu, j);
            let alpha = self.optimal_policy(t, x.view())?;
            let (_, grads) = self.value_and_gradient(t, x.view())?;
            let sigma = game.diffusion(t, x.view());
            let xbar = mean(x.view());
            for i in 0..n {
                let m = xbar - x[i];
                let p_i = sigma.t().dot(&grads.column(i));
                let hamiltonian = game.hamiltonian(i, t, x.view(), &alpha, p_i.view())?;
                // 1/2 Tr(Sigma^T Hess V^i Sigma) with Hess V^i = eta v v^T
                let v = Array1::from_iter(
                    (0..n).map(|l| 1.0 / n as f64 - if l == i { 1.0 } else { 0.0 }),
                );
                let w = sigma.t().dot(&v);
                let trace_term = 0.5 * eta * w.dot(&w);
                let residual = 0.5 * eta_dot * m * m + mu_dot + hamiltonian + trace_term;
                worst = worst.max(residual.abs());
            }
        }
        Ok(worst)
    }
}

/// The closed-form equilibrium policy as a batched `Policy`.
#[derive(Debug, Clone)]
pub struct RiccatiPolicy {
    pub solution: Arc<RiccatiSolution>,
}

impl Policy for RiccatiPolicy {
    fn controls(&self, t: f64, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let beta = self.solution.policy_coefficient(t)?;
        let n = states.ncols();
        let mut out = Array2::zeros((states.nrows(), n));
        for (j, x) in states.outer_iter().enumerate() {
            let xbar = mean(x);
            for i in 0..n {
                out[[j, i]] = beta * (xbar - x[i]);
            }
        }
        Ok(out)
    }
}

/// Oracle (Y, Z) source along driftless paths: Y_0 = V(0, .), Z = Sigma^T grad V.
pub struct RiccatiYzSource {
    pub solution: Arc<RiccatiSolution>,
    pub sigma_t: Array2<f64>,
    pub player: usize,
}

impl RiccatiYzSource {
    pub fn new(game: &GameSpec, solution: Arc<RiccatiSolution>, player: usize) -> Self {
        let sigma = game
            .constant_diffusion()
            .expect("inter-bank diffusion is constant")
            .clone();
        RiccatiYzSource {
            solution,
            sigma_t: sigma.t().to_owned(),
            player,
        }
    }
}

impl crate::bsde::YzSource for RiccatiYzSource {
    fn y0_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(x.nrows());
        for (j, row) in x.outer_iter().enumerate() {
            let (values, _) = self.solution.value_and_gradient(0.0, row)?;
            out[j] = values[self.player];
        }
        Ok(out)
    }

    fn z_batch(&self, _k: usize, t: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.sigma_t.nrows()));
        for (j, row) in x.outer_iter().enumerate() {
            let (_, grads) = self.solution.value_and_gradient(t, row)?;
            let z = self.sigma_t.dot(&grads.column(self.player));
            out.row_mut(j).assign(&z);
        }
        Ok(out)
    }
}
