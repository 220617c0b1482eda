//! N-player game description and the Hamiltonian machinery.
//!
//! A game is a common state dX = b(t,X,alpha) dt + Sigma(t,X) dW with per-player
//! running costs f^i and terminal costs g^i. The drift factors through the
//! diffusion, Sigma(t,x) phi(t,x,alpha) = b(t,x,alpha), so player i's Hamiltonian
//! is H^i = phi . p^i + f^i with p^i the i-th adjoint column. Best responses
//! minimize H^i over the player's own control; their simultaneous fixed point
//! is the equilibrium control map.

use crate::error::{DfpError, Result};
use crate::rng::CounterRng;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use std::sync::Arc;

/// Joint control of all players, player-major: row i is player i's control.
#[derive(Debug, Clone, PartialEq)]
pub struct JointControl(pub Array2<f64>);

impl JointControl {
    pub fn zeros(n_players: usize, d_alpha: usize) -> Self {
        JointControl(Array2::zeros((n_players, d_alpha)))
    }

    pub fn n_players(&self) -> usize {
        self.0.nrows()
    }

    pub fn d_alpha(&self) -> usize {
        self.0.ncols()
    }

    pub fn player(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn set_player(&mut self, i: usize, control: ArrayView1<f64>) {
        self.0.row_mut(i).assign(&control);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Flattened player-major view of length N * d_alpha.
    pub fn flat(&self) -> Array1<f64> {
        Array1::from_iter(self.0.iter().copied())
    }

    pub fn from_flat(flat: ArrayView1<f64>, n_players: usize, d_alpha: usize) -> Result<Self> {
        if flat.len() != n_players * d_alpha {
            return Err(DfpError::shape(
                "JointControl::from_flat",
                n_players * d_alpha,
                flat.len(),
            ));
        }
        Ok(JointControl(
            Array2::from_shape_vec((n_players, d_alpha), flat.to_vec()).unwrap(),
        ))
    }
}

/// Adjoint columns p in R^{k x N}; column i is player i's adjoint p^i.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointColumns(pub Array2<f64>);

impl AdjointColumns {
    pub fn zeros(k: usize, n_players: usize) -> Self {
        AdjointColumns(Array2::zeros((k, n_players)))
    }

    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.column(i)
    }
}

pub type DriftFn = dyn Fn(f64, ArrayView1<f64>, &JointControl) -> Array1<f64> + Send + Sync;
pub type DiffusionFn = dyn Fn(f64, ArrayView1<f64>) -> Array2<f64> + Send + Sync;
pub type PhiFn = dyn Fn(f64, ArrayView1<f64>, &JointControl) -> Array1<f64> + Send + Sync;
pub type RunningCostFn = dyn Fn(f64, ArrayView1<f64>, &JointControl) -> Array1<f64> + Send + Sync;
pub type TerminalCostFn = dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync;
/// (player, t, x, joint control providing the opponents' rows, p_i) -> own control.
pub type BestResponseFn =
    dyn Fn(usize, f64, ArrayView1<f64>, &JointControl, ArrayView1<f64>) -> Array1<f64> + Send + Sync;
pub type FixedPointFn = dyn Fn(f64, ArrayView1<f64>, &AdjointColumns) -> JointControl + Send + Sync;

/// Exchangeability data: how to obtain player j's value/adjoint functions by
/// permuting player 0's. Used when one trained network is shared by all players.
#[derive(Debug, Clone)]
pub struct PlayerSymmetry {
    /// state_perms[j][l] = source coordinate of x feeding slot l when evaluating player j.
    pub state_perms: Vec<Vec<usize>>,
    /// noise_perms[j][c] = source component of player-0's Z giving component c of player j's Z.
    pub noise_perms: Vec<Vec<usize>>,
}

impl PlayerSymmetry {
    pub fn permute_state(&self, player: usize, x: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(self.state_perms[player].iter().map(|&l| x[l]))
    }

    pub fn permute_noise(&self, player: usize, z: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(self.noise_perms[player].iter().map(|&c| z[c]))
    }
}

/// Complete description of an N-player game. Immutable after construction and
/// safe to share across threads; all operations are pure.
pub struct GameSpec {
    pub state_dim: usize,
    pub n_players: usize,
    pub noise_dim: usize,
    pub d_alpha: usize,
    pub horizon: f64,
    drift: Box<DriftFn>,
    diffusion: Box<DiffusionFn>,
    constant_diffusion: Option<Array2<f64>>,
    phi: Box<PhiFn>,
    running_costs: Box<RunningCostFn>,
    terminal_costs: Box<TerminalCostFn>,
    analytic_best_response: Option<Box<BestResponseFn>>,
    analytic_fixed_point: Option<Box<FixedPointFn>>,
    pub player_symmetry: Option<PlayerSymmetry>,
    /// True when a^i(t, x, alpha^{-i}, p^i) does not depend on alpha^{-i}
    /// (e.g. costs and own-drift separable in the controls). Lets policy
    /// chains collapse to their last stage, which is then exact.
    pub opponent_free_best_response: bool,
}

impl std::fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GameSpec")
            .field("state_dim", &self.state_dim)
            .field("n_players", &self.n_players)
            .field("noise_dim", &self.noise_dim)
            .field("d_alpha", &self.d_alpha)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

pub struct GameSpecBuilder {
    state_dim: usize,
    n_players: usize,
    noise_dim: usize,
    d_alpha: usize,
    horizon: f64,
    drift: Option<Box<DriftFn>>,
    diffusion: Option<Box<DiffusionFn>>,
    constant_diffusion: Option<Array2<f64>>,
    phi: Option<Box<PhiFn>>,
    running_costs: Option<Box<RunningCostFn>>,
    terminal_costs: Option<Box<TerminalCostFn>>,
    analytic_best_response: Option<Box<BestResponseFn>>,
    analytic_fixed_point: Option<Box<FixedPointFn>>,
    player_symmetry: Option<PlayerSymmetry>,
    opponent_free_best_response: bool,
}

impl GameSpec {
    pub fn builder(
        state_dim: usize,
        n_players: usize,
        noise_dim: usize,
        d_alpha: usize,
        horizon: f64,
    ) -> GameSpecBuilder {
        GameSpecBuilder {
            state_dim,
            n_players,
            noise_dim,
            d_alpha,
            horizon,
            drift: None,
            diffusion: None,
            constant_diffusion: None,
            phi: None,
            running_costs: None,
            terminal_costs: None,
            analytic_best_response: None,
            analytic_fixed_point: None,
            player_symmetry: None,
            opponent_free_best_response: false,
        }
    }

    pub fn drift(&self, t: f64, x: ArrayView1<f64>, alpha: &JointControl) -> Array1<f64> {
        (self.drift)(t, x, alpha)
    }

    pub fn diffusion(&self, t: f64, x: ArrayView1<f64>) -> Array2<f64> {
        match &self.constant_diffusion {
            Some(m) => m.clone(),
            None => (self.diffusion)(t, x),
        }
    }

    /// The constant diffusion matrix, when the game declared one.
    pub fn constant_diffusion(&self) -> Option<&Array2<f64>> {
        self.constant_diffusion.as_ref()
    }

    pub fn phi(&self, t: f64, x: ArrayView1<f64>, alpha: &JointControl) -> Array1<f64> {
        (self.phi)(t, x, alpha)
    }

    pub fn running_costs(&self, t: f64, x: ArrayView1<f64>, alpha: &JointControl) -> Array1<f64> {
        (self.running_costs)(t, x, alpha)
    }

    pub fn terminal_costs(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (self.terminal_costs)(x)
    }

    pub fn has_analytic_best_response(&self) -> bool {
        self.analytic_best_response.is_some()
    }

    fn check_point(&self, what: &str, t: f64, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(DfpError::shape(what, self.state_dim, x.len()));
        }
        if !t.is_finite() {
            return Err(DfpError::non_finite(what, format!("t = {t}")));
        }
        Ok(())
    }

    fn check_control(&self, what: &str, alpha: &JointControl) -> Result<()> {
        if alpha.n_players() != self.n_players || alpha.d_alpha() != self.d_alpha {
            return Err(DfpError::shape(
                what,
                format!("{}x{}", self.n_players, self.d_alpha),
                format!("{}x{}", alpha.n_players(), alpha.d_alpha()),
            ));
        }
        Ok(())
    }

    /// Player i's Hamiltonian H^i = phi(t,x,alpha) . p_i + f^i(t,x,alpha).
    pub fn hamiltonian(
        &self,
        player: usize,
        t: f64,
        x: ArrayView1<f64>,
        alpha: &JointControl,
        p_i: ArrayView1<f64>,
    ) -> Result<f64> {
        if player >= self.n_players {
            return Err(DfpError::Domain(format!(
                "player index {player} out of range (N = {})",
                self.n_players
            )));
        }
        self.check_point("hamiltonian", t, x)?;
        self.check_control("hamiltonian", alpha)?;
        if p_i.len() != self.noise_dim {
            return Err(DfpError::shape("hamiltonian adjoint", self.noise_dim, p_i.len()));
        }
        let phi = self.phi(t, x, alpha);
        if phi.len() != self.noise_dim {
            return Err(DfpError::shape("phi output", self.noise_dim, phi.len()));
        }
        if !phi.iter().all(|v| v.is_finite()) {
            return Err(DfpError::non_finite("phi", format!("t = {t}")));
        }
        let f = self.running_costs(t, x, alpha);
        if f.len() != self.n_players {
            return Err(DfpError::shape("running_costs output", self.n_players, f.len()));
        }
        if !f[player].is_finite() {
            return Err(DfpError::non_finite("running_costs", format!("player {player}, t = {t}")));
        }
        Ok(phi.dot(&p_i) + f[player])
    }

    /// Minimizer of H^i over player i's own control, opponents frozen at
    /// `others`' rows. Uses the analytic callback when available, otherwise
    /// damped Newton from zero with finite-difference derivatives.
    pub fn best_response(
        &self,
        player: usize,
        t: f64,
        x: ArrayView1<f64>,
        others: &JointControl,
        p_i: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        if player >= self.n_players {
            return Err(DfpError::Domain(format!(
                "player index {player} out of range (N = {})",
                self.n_players
            )));
        }
        if let Some(br) = &self.analytic_best_response {
            return Ok(br(player, t, x, others, p_i));
        }
        self.newton_best_response(player, t, x, others, p_i)
    }

    fn newton_best_response(
        &self,
        player: usize,
        t: f64,
        x: ArrayView1<f64>,
        others: &JointControl,
        p_i: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        const TOL: f64 = 1e-10;
        const MAX_ITER: usize = 50;
        const FD_STEP: f64 = 1e-5;
        let d = self.d_alpha;
        let mut alpha = others.clone();
        let mut own = Array1::<f64>::zeros(d);

        let eval = |own: &Array1<f64>, alpha: &mut JointControl| -> Result<f64> {
            alpha.set_player(player, own.view());
            self.hamiltonian(player, t, x, alpha, p_i)
        };

        let mut h0 = eval(&own, &mut alpha)?;
        let mut damping = 1.0;
        for iter in 0..MAX_ITER {
            // central-difference gradient and Hessian
            let mut grad = Array1::<f64>::zeros(d);
            let mut hess = Array2::<f64>::zeros((d, d));
            for a in 0..d {
                let mut up = own.clone();
                let mut dn = own.clone();
                up[a] += FD_STEP;
                dn[a] -= FD_STEP;
                let hu = eval(&up, &mut alpha)?;
                let hd = eval(&dn, &mut alpha)?;
                grad[a] = (hu - hd) / (2.0 * FD_STEP);
                hess[[a, a]] = (hu - 2.0 * h0 + hd) / (FD_STEP * FD_STEP);
                for b in (a + 1)..d {
                    let mut pp = own.clone();
                    let mut pm = own.clone();
                    let mut mp = own.clone();
                    let mut mm = own.clone();
                    pp[a] += FD_STEP;
                    pp[b] += FD_STEP;
                    pm[a] += FD_STEP;
                    pm[b] -= FD_STEP;
                    mp[a] -= FD_STEP;
                    mp[b] += FD_STEP;
                    mm[a] -= FD_STEP;
                    mm[b] -= FD_STEP;
                    let v = (eval(&pp, &mut alpha)? - eval(&pm, &mut alpha)?
                        - eval(&mp, &mut alpha)?
                        + eval(&mm, &mut alpha)?)
                        / (4.0 * FD_STEP * FD_STEP);
                    hess[[a, b]] = v;
                    hess[[b, a]] = v;
                }
            }
            let step = solve_spd(&hess, &grad).ok_or_else(|| DfpError::NonConvex {
                player,
                detail: format!("Hessian estimate not positive definite at t = {t}"),
            })?;
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < TOL {
                return Ok(own);
            }
            let mut trial = &own - &(&step * damping);
            let mut h1 = eval(&trial, &mut alpha)?;
            // halve the damping while the objective worsens
            let mut halvings = 0;
            while h1 > h0 + 1e-14 && halvings < 30 {
                damping *= 0.5;
                trial = &own - &(&step * damping);
                h1 = eval(&trial, &mut alpha)?;
                halvings += 1;
            }
            if halvings == 0 {
                damping = (damping * 2.0).min(1.0);
            }
            own = trial;
            h0 = h1;
            if iter == MAX_ITER - 1 {
                return Err(DfpError::NoConvergence {
                    what: format!("best_response Newton (player {player}, last iterate {own})"),
                    iterations: MAX_ITER,
                    residual: gnorm,
                });
            }
        }
        unreachable!()
    }

    /// Fixed point of the simultaneous best-response map, by damped iteration.
    pub fn nash_fixed_point(
        &self,
        t: f64,
        x: ArrayView1<f64>,
        adjoints: &AdjointColumns,
        init: &JointControl,
    ) -> Result<JointControl> {
        const TOL: f64 = 1e-10;
        const MAX_ITER: usize = 200;
        self.check_control("nash_fixed_point", init)?;
        if !init.is_finite() {
            return Err(DfpError::non_finite("nash_fixed_point", "initial control"));
        }
        if adjoints.0.nrows() != self.noise_dim || adjoints.0.ncols() != self.n_players {
            return Err(DfpError::shape(
                "nash_fixed_point adjoints",
                format!("{}x{}", self.noise_dim, self.n_players),
                format!("{}x{}", adjoints.0.nrows(), adjoints.0.ncols()),
            ));
        }
        if let Some(fp) = &self.analytic_fixed_point {
            return Ok(fp(t, x, adjoints));
        }
        let mut alpha = init.clone();
        let mut damping = 1.0;
        let mut last_residual = f64::INFINITY;
        for _ in 0..MAX_ITER {
            let mut next = alpha.clone();
            for i in 0..self.n_players {
                let response = self.best_response(i, t, x, &alpha, adjoints.column(i))?;
                next.set_player(i, response.view());
            }
            let residual = (&next.0 - &alpha.0)
                .iter()
                .map(|d| d * d)
                .sum::<f64>()
                .sqrt();
            if residual >= last_residual {
                damping = f64::max(damping * 0.5, 1.0 / 64.0);
            }
            let blended = JointControl(&alpha.0 + &((&next.0 - &alpha.0) * damping));
            alpha = blended;
            last_residual = residual;
            if residual < TOL {
                return Ok(alpha);
            }
        }
        Err(DfpError::NoConvergence {
            what: "nash_fixed_point".into(),
            iterations: MAX_ITER,
            residual: last_residual,
        })
    }

    /// The minimized Hamiltonian vector at the equilibrium control map,
    /// evaluated through the fixed point.
    pub fn minimized_hamiltonian(
        &self,
        t: f64,
        x: ArrayView1<f64>,
        adjoints: &AdjointColumns,
    ) -> Result<Array1<f64>> {
        let alpha = self.nash_fixed_point(
            t,
            x,
            adjoints,
            &JointControl::zeros(self.n_players, self.d_alpha),
        )?;
        let mut out = Array1::zeros(self.n_players);
        for i in 0..self.n_players {
            out[i] = self.hamiltonian(i, t, x, &alpha, adjoints.column(i))?;
        }
        Ok(out)
    }

    /// Sampled check of the drift factorization Sigma phi = b
    /// (relative residual <= tol at every sampled point).
    pub fn check_drift_factorization(&self, samples: usize, seed: u64, tol: f64) -> Result<f64> {
        let rng = CounterRng::new(seed);
        let mut worst = 0.0f64;
        for s in 0..samples as u64 {
            let t = self.horizon * rng.uniform(s, 0, 0);
            let x = Array1::from_iter(
                (0..self.state_dim).map(|l| rng.uniform_symmetric(2.0, s, 1, l as u64)),
            );
            let alpha = JointControl(Array2::from_shape_fn(
                (self.n_players, self.d_alpha),
                |(i, a)| rng.uniform_symmetric(2.0, s, 2 + i as u64, a as u64),
            ));
            let b = self.drift(t, x.view(), &alpha);
            let sigma = self.diffusion(t, x.view());
            let phi = self.phi(t, x.view(), &alpha);
            let reconstructed = sigma.dot(&phi);
            let err = (&reconstructed - &b).iter().map(|d| d * d).sum::<f64>().sqrt();
            let scale = 1.0 + b.iter().map(|d| d * d).sum::<f64>().sqrt();
            let rel = err / scale;
            worst = worst.max(rel);
            if rel > tol {
                return Err(DfpError::Construction(format!(
                    "Sigma phi = b violated: relative residual {rel:.3e} > {tol:.1e} at sample {s}"
                )));
            }
        }
        Ok(worst)
    }
}

impl GameSpecBuilder {
    pub fn drift(mut self, f: impl Fn(f64, ArrayView1<f64>, &JointControl) -> Array1<f64> + Send + Sync + 'static) -> Self {
        self.drift = Some(Box::new(f));
        self
    }

    pub fn diffusion(mut self, f: impl Fn(f64, ArrayView1<f64>) -> Array2<f64> + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Box::new(f));
        self
    }

    /// Constant diffusion matrix; also enables fast paths in the simulators.
    pub fn constant_diffusion(mut self, sigma: Array2<f64>) -> Self {
        self.constant_diffusion = Some(sigma);
        self
    }

    pub fn phi(mut self, f: impl Fn(f64, ArrayView1<f64>, &JointControl) -> Array1<f64> + Send + Sync + 'static) -> Self {
        self.phi = Some(Box::new(f));
        self
    }

    /// Derive phi as the minimum-norm solution of Sigma phi = b for a constant
    /// Sigma, via its precomputed pseudoinverse. Requires full row rank.
    pub fn phi_from_pseudoinverse(mut self) -> Result<Self> {
        let sigma = self.constant_diffusion.clone().ok_or_else(|| {
            DfpError::Construction("phi_from_pseudoinverse needs a constant diffusion".into())
        })?;
        let pinv = crate::linalg::right_pseudoinverse(&sigma).ok_or_else(|| {
            DfpError::Construction(
                "diffusion matrix is rank deficient; Sigma phi = b has no general solution".into(),
            )
        })?;
        let drift = self
            .drift
            .take()
            .ok_or_else(|| DfpError::Construction("drift must be set before phi_from_pseudoinverse".into()))?;
        let drift = Arc::new(drift);
        let drift_for_phi = Arc::clone(&drift);
        self.phi = Some(Box::new(move |t, x, alpha| {
            pinv.dot(&drift_for_phi(t, x, alpha))
        }));
        self.drift = Some(Box::new(move |t, x, alpha| drift(t, x, alpha)));
        Ok(self)
    }

    pub fn running_costs(mut self, f: impl Fn(f64, ArrayView1<f64>, &JointControl) -> Array1<f64> + Send + Sync + 'static) -> Self {
        self.running_costs = Some(Box::new(f));
        self
    }

    pub fn terminal_costs(mut self, f: impl Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync + 'static) -> Self {
        self.terminal_costs = Some(Box::new(f));
        self
    }

    pub fn analytic_best_response(
        mut self,
        f: impl Fn(usize, f64, ArrayView1<f64>, &JointControl, ArrayView1<f64>) -> Array1<f64> + Send + Sync + 'static,
    ) -> Self {
        self.analytic_best_response = Some(Box::new(f));
        self
    }

    pub fn analytic_fixed_point(
        mut self,
        f: impl Fn(f64, ArrayView1<f64>, &AdjointColumns) -> JointControl + Send + Sync + 'static,
    ) -> Self {
        self.analytic_fixed_point = Some(Box::new(f));
        self
    }

    pub fn player_symmetry(mut self, sym: PlayerSymmetry) -> Self {
        self.player_symmetry = Some(sym);
        self
    }

    /// Declare that best responses do not read the opponents' controls.
    pub fn opponent_free_best_response(mut self) -> Self {
        self.opponent_free_best_response = true;
        self
    }

    pub fn build(self) -> Result<GameSpec> {
        let diffusion: Box<DiffusionFn> = match (&self.constant_diffusion, self.diffusion) {
            (Some(m), _) => {
                let m = m.clone();
                Box::new(move |_, _| m.clone())
            }
            (None, Some(f)) => f,
            (None, None) => {
                return Err(DfpError::Construction("diffusion is required".into()));
            }
        };
        Ok(GameSpec {
            state_dim: self.state_dim,
            n_players: self.n_players,
            noise_dim: self.noise_dim,
            d_alpha: self.d_alpha,
            horizon: self.horizon,
            drift: self
                .drift
                .ok_or_else(|| DfpError::Construction("drift is required".into()))?,
            diffusion,
            constant_diffusion: self.constant_diffusion,
            phi: self
                .phi
                .ok_or_else(|| DfpError::Construction("phi is required".into()))?,
            running_costs: self
                .running_costs
                .ok_or_else(|| DfpError::Construction("running_costs is required".into()))?,
            terminal_costs: self
                .terminal_costs
                .ok_or_else(|| DfpError::Construction("terminal_costs is required".into()))?,
            analytic_best_response: self.analytic_best_response,
            analytic_fixed_point: self.analytic_fixed_point,
            player_symmetry: self.player_symmetry,
            opponent_free_best_response: self.opponent_free_best_response,
        })
    }
}

/// Solve H s = g for symmetric positive definite H (Cholesky); None when the
/// factorization hits a non-positive pivot.
fn solve_spd(h: &Array2<f64>, g: &Array1<f64>) -> Option<Array1<f64>> {
    let n = h.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = h[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    // forward then backward substitution
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = g[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut xsol = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * xsol[k];
        }
        xsol[i] = sum / l[[i, i]];
    }
    Some(xsol)
}

/// Markovian policy evaluated on a batch of states.
///
/// `controls` returns a B x (N * d_alpha) array, player-major per row.
pub trait Policy: Send + Sync {
    fn controls(&self, t: f64, states: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// Joint control at a single point.
    fn joint_control(&self, t: f64, x: ArrayView1<f64>, n_players: usize, d_alpha: usize) -> Result<JointControl> {
        let states = x.insert_axis(Axis(0));
        let out = self.controls(t, states)?;
        JointControl::from_flat(out.row(0), n_players, d_alpha)
    }
}

/// The zero policy (always an admissible initial guess in R^{d_alpha}).
#[derive(Debug, Clone)]
pub struct ZeroPolicy {
    pub n_players: usize,
    pub d_alpha: usize,
}

impl Policy for ZeroPolicy {
    fn controls(&self, _t: f64, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros((states.nrows(), self.n_players * self.d_alpha)))
    }
}

/// Policy defined by a closure on (t, x).
pub struct FnPolicy<F>
where
    F: Fn(f64, ArrayView1<f64>) -> Array1<f64> + Send + Sync,
{
    pub f: F,
    pub out_dim: usize,
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(f64, ArrayView1<f64>) -> Array1<f64> + Send + Sync,
{
    fn controls(&self, t: f64, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((states.nrows(), self.out_dim));
        for (j, x) in states.outer_iter().enumerate() {
            let c = (self.f)(t, x);
            if c.len() != self.out_dim {
                return Err(DfpError::shape("FnPolicy output", self.out_dim, c.len()));
            }
            out.row_mut(j).assign(&c);
        }
        Ok(out)
    }
}

/// Wraps a policy, scaling one player's control entries by a constant factor.
pub struct ScaledPlayerPolicy<P: Policy> {
    pub inner: P,
    pub player: usize,
    pub d_alpha: usize,
    pub factor: f64,
}

impl<P: Policy> Policy for ScaledPlayerPolicy<P> {
    fn controls(&self, t: f64, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = self.inner.controls(t, states)?;
        let start = self.player * self.d_alpha;
        for mut row in out.outer_iter_mut() {
            for a in 0..self.d_alpha {
                row[start + a] *= self.factor;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Single-player toy: H = 0.5 a^2 + c a + (phi-free terms); minimizer -c.
    fn quadratic_game(c: f64) -> GameSpec {
        GameSpec::builder(1, 1, 1, 1, 1.0)
            .drift(|_, _, _| Array1::zeros(1))
            .constant_diffusion(Array2::eye(1))
            .phi(|_, _, _| Array1::zeros(1))
            .running_costs(move |_, _, alpha: &JointControl| {
                let a = alpha.0[[0, 0]];
                Array1::from_elem(1, 0.5 * a * a + c * a)
            })
            .terminal_costs(|_| Array1::zeros(1))
            .build()
            .unwrap()
    }

    #[test]
    fn hamiltonian_zero_cases() {
        let game = quadratic_game(0.0);
        let x = Array1::zeros(1);
        let alpha = JointControl::zeros(1, 1);
        let p = Array1::from_elem(1, 3.0);
        // phi == 0 and f == 0 at alpha = 0 -> H = 0
        let h = game.hamiltonian(0, 0.5, x.view(), &alpha, p.view()).unwrap();
        assert_eq!(h, 0.0);
        // p_i = 0 -> H = f^i
        let alpha = JointControl(Array2::from_elem((1, 1), 2.0));
        let p = Array1::zeros(1);
        let h = game.hamiltonian(0, 0.5, x.view(), &alpha, p.view()).unwrap();
        assert_abs_diff_eq!(h, 0.5 * 4.0, epsilon = 1e-15);
    }

    #[test]
    fn hamiltonian_shape_errors() {
        let game = quadratic_game(0.0);
        let x = Array1::zeros(2);
        let alpha = JointControl::zeros(1, 1);
        let p = Array1::zeros(1);
        assert!(matches!(
            game.hamiltonian(0, 0.0, x.view(), &alpha, p.view()),
            Err(DfpError::Shape { .. })
        ));
        let x = Array1::zeros(1);
        assert!(game.hamiltonian(3, 0.0, x.view(), &alpha, p.view()).is_err());
    }

    #[test]
    fn newton_minimizes_scalar_quadratics() {
        // H contribution 0.5 a^2 -> minimizer 0
        let game = quadratic_game(0.0);
        let x = Array1::zeros(1);
        let others = JointControl::zeros(1, 1);
        let p = Array1::zeros(1);
        let a = game.best_response(0, 0.0, x.view(), &others, p.view()).unwrap();
        assert!(a[0].abs() < 1e-9);
        // H contribution 0.5 a^2 + 2a -> minimizer -2
        let game = quadratic_game(2.0);
        let a = game.best_response(0, 0.0, x.view(), &others, p.view()).unwrap();
        assert_abs_diff_eq!(a[0], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn newton_rejects_concave_objective() {
        let game = GameSpec::builder(1, 1, 1, 1, 1.0)
            .drift(|_, _, _| Array1::zeros(1))
            .constant_diffusion(Array2::eye(1))
            .phi(|_, _, _| Array1::zeros(1))
            .running_costs(|_, _, alpha: &JointControl| {
                let a = alpha.0[[0, 0]];
                Array1::from_elem(1, -0.5 * a * a)
            })
            .terminal_costs(|_| Array1::zeros(1))
            .build()
            .unwrap();
        let x = Array1::zeros(1);
        let others = JointControl::zeros(1, 1);
        let p = Array1::zeros(1);
        assert!(matches!(
            game.best_response(0, 0.0, x.view(), &others, p.view()),
            Err(DfpError::NonConvex { .. })
        ));
    }

    /// Two-player scalar LQ toy with cross terms:
    /// f^1 = 0.5 a1^2 + c12 a1 a2 + d1 a1, f^2 = 0.5 a2^2 + c21 a1 a2 + d2 a2.
    fn lq_cross_game(c12: f64, c21: f64, d1: f64, d2: f64) -> GameSpec {
        GameSpec::builder(2, 2, 2, 1, 1.0)
            .drift(|_, _, _| Array1::zeros(2))
            .constant_diffusion(Array2::eye(2))
            .phi(|_, _, _| Array1::zeros(2))
            .running_costs(move |_, _, alpha: &JointControl| {
                let a1 = alpha.0[[0, 0]];
                let a2 = alpha.0[[1, 0]];
                Array1::from_vec(vec![
                    0.5 * a1 * a1 + c12 * a1 * a2 + d1 * a1,
                    0.5 * a2 * a2 + c21 * a1 * a2 + d2 * a2,
                ])
            })
            .terminal_costs(|_| Array1::zeros(2))
            .build()
            .unwrap()
    }

    #[test]
    fn fixed_point_matches_direct_linear_solve() {
        // Stationarity: a1 + c12 a2 + d1 = 0, a2 + c21 a1 + d2 = 0.
        let (c12, c21, d1, d2) = (0.3, -0.2, 1.0, -0.5);
        let game = lq_cross_game(c12, c21, d1, d2);
        let x = Array1::zeros(2);
        let p = AdjointColumns::zeros(2, 2);
        let init = JointControl::zeros(2, 1);
        let fp = game.nash_fixed_point(0.0, x.view(), &p, &init).unwrap();
        // direct 2x2 solve: [1 c12; c21 1] [a1 a2]^T = [-d1 -d2]^T
        let det = 1.0 - c12 * c21;
        let a1 = (-d1 - c12 * (-d2)) / det;
        let a2 = (-d2 - c21 * (-d1)) / det;
        assert_abs_diff_eq!(fp.0[[0, 0]], a1, epsilon = 1e-8);
        assert_abs_diff_eq!(fp.0[[1, 0]], a2, epsilon = 1e-8);
        // residual of the fixed-point property
        let mut reapplied = fp.clone();
        for i in 0..2 {
            let r = game.best_response(i, 0.0, x.view(), &fp, p.column(i)).unwrap();
            reapplied.set_player(i, r.view());
        }
        let resid = (&reapplied.0 - &fp.0).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(resid <= 1e-9, "fixed point residual {resid}");
    }

    #[test]
    fn fixed_point_returns_input_when_already_fixed() {
        // decoupled responses: a_i = -d_i regardless of others
        let game = lq_cross_game(0.0, 0.0, 1.5, -0.25);
        let x = Array1::zeros(2);
        let p = AdjointColumns::zeros(2, 2);
        let init = JointControl(Array2::from_shape_vec((2, 1), vec![-1.5, 0.25]).unwrap());
        let fp = game.nash_fixed_point(0.0, x.view(), &p, &init).unwrap();
        assert_abs_diff_eq!(fp.0[[0, 0]], -1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(fp.0[[1, 0]], 0.25, epsilon = 1e-9);
    }

    #[test]
    fn constant_map_converges_in_one_iteration() {
        let game = lq_cross_game(0.0, 0.0, 2.0, 3.0);
        let x = Array1::zeros(2);
        let p = AdjointColumns::zeros(2, 2);
        let init = JointControl(Array2::from_elem((2, 1), 99.0));
        let fp = game.nash_fixed_point(0.0, x.view(), &p, &init).unwrap();
        assert_abs_diff_eq!(fp.0[[0, 0]], -2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fp.0[[1, 0]], -3.0, epsilon = 1e-9);
    }

    #[test]
    fn best_response_first_order_optimality_sampled() {
        let game = lq_cross_game(0.4, 0.1, -0.7, 0.2);
        let x = Array1::zeros(2);
        let others = JointControl(Array2::from_shape_vec((2, 1), vec![0.3, -0.8]).unwrap());
        let p = AdjointColumns::zeros(2, 2);
        let beta = game.best_response(0, 0.0, x.view(), &others, p.column(0)).unwrap();
        let mut at_min = others.clone();
        at_min.set_player(0, beta.view());
        let h_min = game.hamiltonian(0, 0.0, x.view(), &at_min, p.column(0)).unwrap();
        let rng = CounterRng::new(11);
        for s in 0..100 {
            let delta = rng.uniform_symmetric(1e-2, s, 0, 0);
            let mut perturbed = at_min.clone();
            let shifted = Array1::from_elem(1, beta[0] + delta);
            perturbed.set_player(0, shifted.view());
            let h = game.hamiltonian(0, 0.0, x.view(), &perturbed, p.column(0)).unwrap();
            assert!(h >= h_min - 1e-12, "perturbation {delta} lowered H: {h} < {h_min}");
        }
    }
}
