use nalgebra::{DMatrix, DVector};

use super::{mbccp_with_model, PolicyWeights};
use crate::dynamics::{Observation, Policy};
use crate::equilibrium::{build_prediction_model, EstimatorState, PredictionModel};
use crate::error::{invalid, Error, Result};
use crate::graph::SocialNetwork;
use crate::qpsolve::{solve_qp_with, QpOptions, QpProblem, QpStatus};

/// Default weight of the soft terminal penalty.
pub const DEFAULT_SOFT_PENALTY: f64 = 1e3;

/// Where the controller's initial condition comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcMode {
    /// Exact expected inclination.
    Oracle,
    /// Running average of observed acceptance.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalMode {
    /// `mu(T|t)` must equal the steady state of the optimal constant input.
    Hard,
    /// Adds `rho ||mu(T|t) - mu_mb||^2` instead of the equality.
    Soft(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StageCost {
    /// `||1 - mu(k)||_Q^2 + ||u(k)||_R^2`.
    #[default]
    Acceptance,
    /// `||mu(k) - mu_mb||_Q^2 + ||u(k) - u_mb||_R^2`, which has the terminal
    /// target as its unconstrained fixed point.
    Tracking,
}

/// Result of one receding-horizon solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    pub t: usize,
    /// First block of the plan, the input actually applied.
    pub u: DVector<f64>,
    /// Full stacked plan of `n * T` inputs.
    pub plan: DVector<f64>,
    /// Optimal finite-horizon stage cost.
    pub cost: f64,
    /// Value minimized by the solver, including any terminal penalty.
    pub objective: f64,
    /// `max |mu(T|t) - mu_mb|` under the plan.
    pub terminal_gap: f64,
    /// `<mu(0|t), 1 - mu(0|t)>_[Q]`, not part of the optimized cost.
    pub variance_term: f64,
    pub terminal: TerminalMode,
    pub active_constraints: usize,
    pub iterations: usize,
}

/// Finite-horizon predictor and QP data for receding-horizon control.
#[derive(Debug, Clone)]
pub struct MpcController {
    model: PredictionModel,
    weights: PolicyWeights,
    eta0: DVector<f64>,
    horizon: usize,
    mode: MpcMode,
    terminal: TerminalMode,
    stage: StageCost,
    u_mb: DVector<f64>,
    mu_mb: DVector<f64>,
    u_bound: DVector<f64>,
    /// `A^k` for `k = 0..=T`.
    phi: Vec<DMatrix<f64>>,
    /// Input-to-mean blocks: `mu(k) = phi[k] mu0 + psi[k] + gamma[k] U`.
    gamma: Vec<DMatrix<f64>>,
    psi: Vec<DVector<f64>>,
    /// Stage Hessian and linear term `c0 + c1 mu0`.
    h: DMatrix<f64>,
    c0: DVector<f64>,
    c1: DMatrix<f64>,
    soft_cache: Option<(f64, DMatrix<f64>)>,
    last_plan: Option<DVector<f64>>,
    history: Vec<f64>,
}

pub fn mpc_setup(
    net: &SocialNetwork,
    w: &PolicyWeights,
    horizon: usize,
    mode: MpcMode,
    terminal: TerminalMode,
) -> Result<MpcController> {
    MpcController::new(net, w, horizon, mode, terminal, StageCost::Acceptance)
}

impl MpcController {
    pub fn new(
        net: &SocialNetwork,
        w: &PolicyWeights,
        horizon: usize,
        mode: MpcMode,
        terminal: TerminalMode,
        stage: StageCost,
    ) -> Result<Self> {
        if horizon < 2 {
            return Err(invalid(format!("prediction horizon must be at least 2, got {horizon}")));
        }
        if let TerminalMode::Soft(rho) = terminal {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(invalid(format!("terminal penalty must be positive, got {rho}")));
            }
        }
        let model = build_prediction_model(net)?;
        let mb = mbccp_with_model(net, &model, w)?;
        let u_mb = mb.u;
        let mu_mb = &model.v * (net.eta0() + &u_mb);
        let n = net.n();
        let m = n * horizon;
        let bmat = model.b_matrix();

        let mut phi = vec![DMatrix::identity(n, n)];
        let mut gamma = vec![DMatrix::zeros(n, m)];
        let mut psi = vec![DVector::zeros(n)];
        let drift = model.b.component_mul(net.eta0());
        for k in 0..horizon {
            phi.push(&model.a * &phi[k]);
            let mut g = &model.a * &gamma[k];
            g.view_mut((0, k * n), (n, n)).copy_from(&bmat);
            gamma.push(g);
            psi.push(&model.a * &psi[k] + &drift);
        }

        let mut ctrl = Self {
            model,
            weights: w.clone(),
            eta0: net.eta0().clone(),
            horizon,
            mode,
            terminal,
            stage,
            u_mb,
            mu_mb,
            u_bound: net.input_upper_bound(),
            phi,
            gamma,
            psi,
            h: DMatrix::zeros(0, 0),
            c0: DVector::zeros(0),
            c1: DMatrix::zeros(0, 0),
            soft_cache: None,
            last_plan: None,
            history: Vec::new(),
        };
        ctrl.build_cost();
        Ok(ctrl)
    }

    /// Switches the stage cost and clears the receding-horizon state.
    pub fn with_stage_cost(mut self, stage: StageCost) -> Self {
        self.stage = stage;
        self.build_cost();
        self.reset();
        self
    }

    fn stage_target(&self) -> DVector<f64> {
        match self.stage {
            StageCost::Acceptance => DVector::from_element(self.n(), 1.0),
            StageCost::Tracking => self.mu_mb.clone(),
        }
    }

    fn build_cost(&mut self) {
        let n = self.n();
        let m = n * self.horizon;
        let q = self.weights.q();
        let r = self.weights.r();
        let target = self.stage_target();
        let mut h = DMatrix::zeros(m, m);
        let mut c0 = DVector::zeros(m);
        let mut c1 = DMatrix::zeros(m, n);
        for k in 1..self.horizon {
            let gq = self.gamma[k].transpose() * q;
            h += &gq * &self.gamma[k];
            c0 -= &gq * (&target - &self.psi[k]) * 2.0;
            c1 += &gq * &self.phi[k] * 2.0;
        }
        for k in 0..self.horizon {
            let mut block = h.view_mut((k * n, k * n), (n, n));
            block += r;
        }
        if self.stage == StageCost::Tracking {
            let ru = r * &self.u_mb * 2.0;
            for k in 0..self.horizon {
                let mut seg = c0.rows_mut(k * n, n);
                seg -= &ru;
            }
        }
        self.h = 0.5 * (&h + h.transpose());
        self.c0 = c0;
        self.c1 = c1;
        self.soft_cache = None;
    }

    pub fn n(&self) -> usize {
        self.eta0.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn mode(&self) -> MpcMode {
        self.mode
    }

    pub fn terminal(&self) -> TerminalMode {
        self.terminal
    }

    pub fn stage_cost(&self) -> StageCost {
        self.stage
    }

    pub fn model(&self) -> &PredictionModel {
        &self.model
    }

    pub fn weights(&self) -> &PolicyWeights {
        &self.weights
    }

    pub fn u_mb(&self) -> &DVector<f64> {
        &self.u_mb
    }

    pub fn mu_mb(&self) -> &DVector<f64> {
        &self.mu_mb
    }

    /// Optimal costs of all solves so far.
    pub fn cost_history(&self) -> &[f64] {
        &self.history
    }

    pub fn last_plan(&self) -> Option<&DVector<f64>> {
        self.last_plan.as_ref()
    }

    pub fn reset(&mut self) {
        self.last_plan = None;
        self.history.clear();
    }

    /// Predicted means `mu(0..=T)` under the stacked plan.
    pub fn predict(&self, mu0: &DVector<f64>, plan: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..=self.horizon).map(|k| &self.phi[k] * mu0 + &self.psi[k] + &self.gamma[k] * plan).collect()
    }

    /// Stage cost of a plan evaluated along its predicted means.
    pub fn plan_cost(&self, mu0: &DVector<f64>, plan: &DVector<f64>) -> f64 {
        let n = self.n();
        let target = self.stage_target();
        let mus = self.predict(mu0, plan);
        let mut total = 0.0;
        for k in 0..self.horizon {
            let e = &target - &mus[k];
            let mut u = plan.rows(k * n, n).clone_owned();
            if self.stage == StageCost::Tracking {
                u -= &self.u_mb;
            }
            total += e.dot(&(self.weights.q() * &e)) + u.dot(&(self.weights.r() * &u));
        }
        total
    }

    /// The shifted previous plan with `u_mb` appended, or `u_mb` repeated.
    pub fn warm_start(&self) -> DVector<f64> {
        let n = self.n();
        let m = n * self.horizon;
        let mut z = DVector::zeros(m);
        for k in 0..self.horizon {
            let block = match &self.last_plan {
                Some(prev) if k + 1 < self.horizon => prev.rows((k + 1) * n, n).clone_owned(),
                _ => self.u_mb.clone(),
            };
            z.rows_mut(k * n, n).copy_from(&block);
        }
        z
    }

    fn problem(&mut self, mu0: &DVector<f64>, terminal: TerminalMode) -> Result<(QpProblem, f64)> {
        let n = self.n();
        let m = n * self.horizon;
        let tn = self.horizon;
        let d_t = &self.mu_mb - &self.phi[tn] * mu0 - &self.psi[tn];
        let mut c = &self.c0 + &self.c1 * mu0;
        let mut h = match terminal {
            TerminalMode::Hard => self.h.clone(),
            TerminalMode::Soft(rho) => {
                if !(rho > 0.0 && rho.is_finite()) {
                    return Err(invalid(format!("terminal penalty must be positive, got {rho}")));
                }
                let cached = matches!(&self.soft_cache, Some((r, _)) if *r == rho);
                if !cached {
                    let gt = &self.gamma[tn];
                    let soft = &self.h + gt.transpose() * gt * rho;
                    self.soft_cache = Some((rho, 0.5 * (&soft + soft.transpose())));
                }
                c -= self.gamma[tn].transpose() * &d_t * (2.0 * rho);
                self.soft_cache.as_ref().expect("cached above").1.clone()
            }
        };
        h = 0.5 * (&h + h.transpose());
        let lo = DVector::zeros(m);
        let mut hi = DVector::zeros(m);
        for k in 0..self.horizon {
            hi.rows_mut(k * n, n).copy_from(&self.u_bound);
        }
        let mut p = QpProblem::new(h, c, lo, hi)?;
        for k in 0..self.horizon {
            p = p.with_budget((k * n..(k + 1) * n).collect(), self.weights.beta())?;
        }
        let penalty_const = match terminal {
            TerminalMode::Hard => 0.0,
            TerminalMode::Soft(rho) => rho * d_t.norm_squared(),
        };
        if terminal == TerminalMode::Hard {
            p = p.with_equalities(self.gamma[tn].clone(), d_t)?;
        }
        Ok((p, penalty_const))
    }

    /// One receding-horizon solve with the configured terminal mode.
    pub fn step(&mut self, mu0: &DVector<f64>, t: usize) -> Result<MpcStep> {
        self.step_with_terminal(mu0, t, self.terminal)
    }

    pub fn step_with_terminal(&mut self, mu0: &DVector<f64>, t: usize, terminal: TerminalMode) -> Result<MpcStep> {
        let n = self.n();
        if mu0.len() != n {
            return Err(invalid(format!("initial mean has {} entries for {n} nodes", mu0.len())));
        }
        if mu0.iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v)) {
            return Err(invalid("initial mean must lie in [0, 1]"));
        }
        let (problem, penalty_const) = self.problem(mu0, terminal)?;
        let opts = QpOptions { warm_start: Some(self.warm_start()), ..QpOptions::default() };
        let sol = solve_qp_with(&problem, &opts);
        match &sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible(reason) => {
                let gap = (&self.mu_mb - &self.phi[self.horizon] * mu0 - &self.psi[self.horizon]).amax();
                return Err(Error::Infeasible(format!(
                    "t={t}: terminal target unreachable in {} steps (zero-input terminal gap {gap:.3e}): {reason}",
                    self.horizon
                )));
            }
            QpStatus::MaxIter => {
                return Err(Error::Numerical(format!(
                    "t={t}: receding-horizon QP did not certify (KKT residual {:.3e})",
                    sol.residuals.max()
                )));
            }
        }
        let plan = sol.z.map(|v| v.max(0.0));
        let cost = self.plan_cost(mu0, &plan);
        let objective = problem.objective(&plan) + penalty_const + self.constant_term(mu0);
        let terminal_mu = &self.phi[self.horizon] * mu0 + &self.psi[self.horizon] + &self.gamma[self.horizon] * &plan;
        let terminal_gap = (&terminal_mu - &self.mu_mb).amax();
        let q = self.weights.q();
        let variance_term = (0..n).map(|v| q[(v, v)] * mu0[v] * (1.0 - mu0[v])).sum();
        let u = plan.rows(0, n).clone_owned();
        self.history.push(cost);
        self.last_plan = Some(plan.clone());
        Ok(MpcStep {
            t,
            u,
            plan,
            cost,
            objective,
            terminal_gap,
            variance_term,
            terminal,
            active_constraints: sol.active_set.as_ref().map_or(0, |a| a.active_count()),
            iterations: sol.iterations,
        })
    }

    /// Part of the stage cost that does not depend on the plan.
    fn constant_term(&self, mu0: &DVector<f64>) -> f64 {
        self.plan_cost(mu0, &DVector::zeros(self.n() * self.horizon))
    }
}

/// Per-step record kept by [`MpcPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct MpcLogEntry {
    pub t: usize,
    pub cost: f64,
    pub terminal_gap: f64,
    pub variance_term: f64,
    pub active_constraints: usize,
    /// The hard terminal QP was infeasible and the soft fallback was used.
    pub fallback: bool,
}

/// Closed-loop wrapper that feeds the controller either the exact mean or the
/// running acceptance average.
#[derive(Debug, Clone)]
pub struct MpcPolicy {
    name: String,
    ctrl: MpcController,
    estimator: Option<EstimatorState>,
    fallback: Option<f64>,
    infeasible: usize,
    log: Vec<MpcLogEntry>,
}

impl MpcPolicy {
    /// The estimator prior is only used in estimated mode.
    pub fn new(ctrl: MpcController, prior: DVector<f64>) -> Self {
        let estimator = (ctrl.mode() == MpcMode::Estimated).then(|| EstimatorState::new(prior));
        let name = match ctrl.mode() {
            MpcMode::Oracle => "mpc-oracle",
            MpcMode::Estimated => "mpc",
        };
        Self { name: name.into(), ctrl, estimator, fallback: None, infeasible: 0, log: Vec::new() }
    }

    pub fn with_estimator(mut self, estimator: EstimatorState) -> Self {
        self.estimator = Some(estimator);
        self
    }

    /// Retries hard-terminal steps that are infeasible or cannot be certified
    /// with a soft penalty `rho`.
    pub fn with_fallback(mut self, rho: f64) -> Self {
        self.fallback = Some(rho);
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn controller(&self) -> &MpcController {
        &self.ctrl
    }

    pub fn log(&self) -> &[MpcLogEntry] {
        &self.log
    }
}

impl Policy for MpcPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn requires_mean(&self) -> bool {
        self.ctrl.mode() == MpcMode::Oracle
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<DVector<f64>> {
        let mu0 = match self.ctrl.mode() {
            MpcMode::Oracle => obs.mean.cloned().ok_or_else(|| invalid("oracle controller needs the exact mean"))?,
            MpcMode::Estimated => {
                let est = self.estimator.as_mut().ok_or_else(|| invalid("estimated controller has no estimator"))?;
                if let Some(y) = obs.last_acceptance {
                    est.update(y);
                }
                est.mu_hat()
            }
        };
        let (res, fallback) = match (self.ctrl.step(&mu0, obs.t), self.fallback) {
            (Err(Error::Infeasible(_) | Error::Numerical(_)), Some(rho)) => {
                self.infeasible += 1;
                (self.ctrl.step_with_terminal(&mu0, obs.t, TerminalMode::Soft(rho)), true)
            }
            (res, _) => (res, false),
        };
        let step = res?;
        self.log.push(MpcLogEntry {
            t: obs.t,
            cost: step.cost,
            terminal_gap: step.terminal_gap,
            variance_term: step.variance_term,
            active_constraints: step.active_constraints,
            fallback,
        });
        Ok(step.u)
    }

    fn infeasible_steps(&self) -> usize {
        self.infeasible
    }
}
