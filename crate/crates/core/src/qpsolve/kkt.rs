use nalgebra::DVector;

use super::{lagrangian_gradient, QpProblem, QpSolution};

/// Infinity-norm KKT residuals. `complementarity` also absorbs any sign
/// violation of the inequality multipliers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn within(&self, tol: f64) -> bool {
        self.stationarity <= tol && self.primal <= tol && self.complementarity <= tol
    }

    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

/// Evaluates the KKT conditions at the point and multipliers stored in `s`.
pub fn kkt_residual(p: &QpProblem, s: &QpSolution) -> KktResiduals {
    let m = p.dim();
    let mut grad = lagrangian_gradient(p, &s.z, &s.nu1, &s.xi);
    grad -= &s.nu2;
    grad += &s.nu3;
    let stationarity = grad.amax();
    let primal = p.max_violation(&s.z).max(0.0);

    let mut comp = 0.0f64;
    for i in 0..m {
        comp = comp.max((s.nu2[i] * (s.z[i] - p.lo[i])).abs());
        comp = comp.max((s.nu3[i] * (p.hi[i] - s.z[i])).abs());
        comp = comp.max(-s.nu2[i]).max(-s.nu3[i]);
    }
    for k in 0..p.budgets.len() {
        let slack = p.budgets[k].bound - p.budget_activity(k, &s.z);
        comp = comp.max((s.nu1[k] * slack).abs()).max(-s.nu1[k]);
    }
    KktResiduals { stationarity, primal, complementarity: comp }
}

/// Residuals when box multipliers are read off the gradient.
pub(super) fn residuals_from_gradient(
    p: &QpProblem,
    z: &DVector<f64>,
    nu1: &DVector<f64>,
    xi: &DVector<f64>,
) -> KktResiduals {
    let grad = lagrangian_gradient(p, z, nu1, xi);
    let sol = QpSolution {
        z: z.clone(),
        nu1: nu1.clone(),
        nu2: grad.map(|g| g.max(0.0)),
        nu3: grad.map(|g| (-g).max(0.0)),
        xi: xi.clone(),
        residuals: KktResiduals::default(),
        status: super::QpStatus::Optimal,
        iterations: 0,
        active_set: None,
    };
    kkt_residual(p, &sol)
}
