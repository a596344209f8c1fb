//! Budget-constrained nudging policies: a uniform model-free input, the
//! steady-state optimal constant input, and receding-horizon control.

mod costs;
mod mpc;

pub use costs::{bernoulli_cost_direct, cost_bounds, expected_acceptance_cost, CostBounds};
pub use mpc::{
    mpc_setup, MpcController, MpcLogEntry, MpcMode, MpcPolicy, MpcStep, StageCost, TerminalMode, DEFAULT_SOFT_PENALTY,
};

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::equilibrium::{build_prediction_model, steady_state, PredictionModel};
use crate::error::{invalid, Error, Result};
use crate::graph::SocialNetwork;
use crate::qpsolve::{solve_qp, ActiveSet, KktResiduals, QpProblem, QpStatus};

/// Tolerance for comparing the closed form with the QP solution.
pub const CLOSED_FORM_TOL: f64 = 1e-8;

/// Acceptance-shortfall weight `Q`, effort weight `R` and per-step budget.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    beta: f64,
}

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(invalid(format!("{name} must be square")));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(invalid(format!("{name} must be symmetric")));
    }
    if Cholesky::new(m.clone()).is_none() {
        return Err(invalid(format!("{name} must be positive definite")));
    }
    Ok(())
}

impl PolicyWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, beta: f64) -> Result<Self> {
        check_spd(&q, "Q")?;
        check_spd(&r, "R")?;
        if q.shape() != r.shape() {
            return Err(invalid("Q and R must have the same size"));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(invalid(format!("budget must be finite and >= 0, got {beta}")));
        }
        Ok(Self { q, r, beta })
    }

    /// `Q = I`, `R = r I`.
    pub fn scaled_identity(n: usize, r: f64, beta: f64) -> Result<Self> {
        if !(r > 0.0) {
            return Err(invalid(format!("effort weight r must be positive, got {r}")));
        }
        Self::new(DMatrix::identity(n, n), DMatrix::identity(n, n) * r, beta)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    /// Diagonal part `[Q]`.
    pub fn q_diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.q.diagonal())
    }
}

/// Uniform split of the budget, capped by each node's input ceiling.
pub fn mfccp(net: &SocialNetwork, beta: f64) -> Result<DVector<f64>> {
    if !(beta >= 0.0) {
        return Err(invalid(format!("budget must be >= 0, got {beta}")));
    }
    let share = beta / net.n() as f64;
    Ok(net.input_upper_bound().map(|ub| ub.min(share).max(0.0)))
}

/// Quadratic form of the asymptotic cost: `J(u) = u'Wu + c'u + gamma_const`.
#[derive(Debug, Clone, PartialEq)]
pub struct MbccpTerms {
    pub w: DMatrix<f64>,
    pub c: DVector<f64>,
    pub gamma_const: f64,
    pub u_bound: DVector<f64>,
}

impl MbccpTerms {
    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.w * u)) + self.c.dot(u) + self.gamma_const
    }
}

pub fn mbccp_terms(net: &SocialNetwork, w: &PolicyWeights) -> Result<MbccpTerms> {
    let model = build_prediction_model(net)?;
    mbccp_terms_with_model(net, &model, w)
}

pub fn mbccp_terms_with_model(net: &SocialNetwork, model: &PredictionModel, w: &PolicyWeights) -> Result<MbccpTerms> {
    let n = net.n();
    if w.n() != n {
        return Err(invalid(format!("weights are {}x{} for {n} nodes", w.n(), w.n())));
    }
    let v = &model.v;
    let qd = w.q_diag();
    let q_off = w.q() - &qd;
    let mixed = &qd - w.q() * 2.0;
    let ones = DVector::from_element(n, 1.0);
    let a = v * net.eta0();
    let vt_qoff = v.transpose() * &q_off;
    let wmat = w.r() + &vt_qoff * v;
    let wmat = 0.5 * (&wmat + wmat.transpose());
    let c = v.transpose() * (&mixed * &ones) + &vt_qoff * &a * 2.0;
    let gamma_const = ones.dot(&(w.q() * &ones)) + a.dot(&(&q_off * &a)) + ones.dot(&(&mixed * &a));
    Ok(MbccpTerms { w: wmat, c, gamma_const, u_bound: net.input_upper_bound() })
}

/// The unconstrained minimizer `-W^-1 c / 2` and whether it lies strictly
/// inside the budget and box.
pub fn inactive_candidate(terms: &MbccpTerms, beta: f64) -> Result<(DVector<f64>, bool)> {
    let lu = terms.w.clone().lu();
    let u = lu.solve(&(-0.5 * &terms.c)).ok_or_else(|| Error::Numerical("W is singular".into()))?;
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("W is singular".into()));
    }
    let inside = u.sum() < beta && u.iter().zip(terms.u_bound.iter()).all(|(&x, &ub)| x > 0.0 && x < ub);
    Ok((u, inside))
}

pub fn check_inactive_conditions(terms: &MbccpTerms, beta: f64) -> Result<bool> {
    inactive_candidate(terms, beta).map(|(_, inside)| inside)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbccpSolution {
    pub u: DVector<f64>,
    pub terms: MbccpTerms,
    pub budget_multiplier: f64,
    pub residuals: KktResiduals,
    pub active_set: Option<ActiveSet>,
    pub inactive_conditions: bool,
    /// Closed form and its distance to the solver output when the inactive
    /// conditions hold.
    pub closed_form: Option<(DVector<f64>, f64)>,
}

impl MbccpSolution {
    pub fn active_count(&self) -> usize {
        self.active_set.as_ref().map_or(0, ActiveSet::active_count)
    }
}

pub fn mbccp(net: &SocialNetwork, w: &PolicyWeights) -> Result<MbccpSolution> {
    let model = build_prediction_model(net)?;
    mbccp_with_model(net, &model, w)
}

pub fn mbccp_with_model(net: &SocialNetwork, model: &PredictionModel, w: &PolicyWeights) -> Result<MbccpSolution> {
    let terms = mbccp_terms_with_model(net, model, w)?;
    if Cholesky::new(terms.w.clone()).is_none() {
        return Err(Error::Numerical(
            "W = R + V'(Q - [Q])V is not positive definite, so the steady-state cost is not convex".into(),
        ));
    }
    let n = net.n();
    let problem = QpProblem::new(terms.w.clone(), terms.c.clone(), DVector::zeros(n), terms.u_bound.clone())?
        .with_budget((0..n).collect(), w.beta())?;
    let sol = solve_qp(&problem);
    match &sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible(reason) => {
            return Err(Error::Infeasible(format!("steady-state policy QP: {reason}")));
        }
        QpStatus::MaxIter => {
            return Err(Error::Numerical(format!(
                "steady-state policy QP did not certify (KKT residual {:.3e})",
                sol.residuals.max()
            )));
        }
    }
    let (candidate, inside) = inactive_candidate(&terms, w.beta())?;
    let closed_form = inside.then(|| {
        let gap = (&candidate - &sol.z).amax();
        (candidate, gap)
    });
    if let Some((_, gap)) = &closed_form {
        if *gap > CLOSED_FORM_TOL {
            return Err(Error::Numerical(format!(
                "closed form and solver disagree by {gap:.3e} with all constraints inactive"
            )));
        }
    }
    Ok(MbccpSolution {
        u: sol.z.map(|x| x.max(0.0)),
        terms,
        budget_multiplier: sol.nu1[0],
        residuals: sol.residuals,
        active_set: sol.active_set,
        inactive_conditions: inside,
        closed_form,
    })
}

/// Steady state reached under a constant input.
pub fn steady_state_under(net: &SocialNetwork, model: &PredictionModel, u: &DVector<f64>) -> Result<DVector<f64>> {
    steady_state(model, net.eta0(), u)
}
