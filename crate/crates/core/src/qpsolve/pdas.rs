//! Primal-dual active-set iteration.
//!
//! Each iterate fixes a guess of which bounds and budget rows hold with
//! equality, solves the resulting equality-constrained QP exactly, and
//! re-guesses from the signs of the multipliers and the primal violations.
//! A repeated guess means the KKT conditions hold; a revisited older guess
//! means the iteration cycles and the caller falls back.

use std::collections::HashSet;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::ipm::Point;
use super::kkt::residuals_from_gradient;
use super::{InnerSolution, QpProblem, QpStatus, FEAS_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActiveSet {
    pub bounds: Vec<Bound>,
    pub budgets: Vec<bool>,
}

impl ActiveSet {
    pub(super) fn initial(p: &QpProblem, warm: Option<&DVector<f64>>) -> Self {
        match warm {
            Some(z) => Self::from_primal(p, z, 1e-10),
            None => Self { bounds: vec![Bound::Free; p.dim()], budgets: vec![false; p.budgets.len()] },
        }
    }

    /// Constraints holding with equality at `z`, up to `tol`.
    pub(super) fn from_primal(p: &QpProblem, z: &DVector<f64>, tol: f64) -> Self {
        let bounds = (0..p.dim())
            .map(|i| {
                if z[i] <= p.lo[i] + tol {
                    Bound::Lower
                } else if z[i] >= p.hi[i] - tol {
                    Bound::Upper
                } else {
                    Bound::Free
                }
            })
            .collect();
        let budgets = (0..p.budgets.len()).map(|k| p.budget_activity(k, z) >= p.budgets[k].bound - tol).collect();
        Self { bounds, budgets }
    }

    pub(super) fn from_ipm(p: &QpProblem, point: &Point) -> Self {
        let bounds = (0..p.dim())
            .map(|i| {
                if point.lam_lo[i] > point.s_lo[i] {
                    Bound::Lower
                } else if point.lam_hi[i] > point.s_hi[i] {
                    Bound::Upper
                } else {
                    Bound::Free
                }
            })
            .collect();
        let budgets = (0..p.budgets.len()).map(|k| point.nu_budget[k] > point.s_budget[k]).collect();
        Self { bounds, budgets }
    }

    /// Number of bounds and budget rows held with equality.
    pub fn active_count(&self) -> usize {
        self.bounds.iter().filter(|&&b| b != Bound::Free).count() + self.budgets.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.active_count() == 0
    }

    pub fn budget_active(&self, k: usize) -> bool {
        self.budgets[k]
    }
}

pub(super) struct RunResult {
    pub solution: Option<InnerSolution>,
    pub iterations: usize,
}

pub(super) fn run(p: &QpProblem, start: ActiveSet, cap: usize, tol: f64) -> RunResult {
    let mut seen = HashSet::new();
    let mut current = start;
    for it in 1..=cap {
        if !seen.insert(current.clone()) {
            return RunResult { solution: None, iterations: it };
        }
        let Some(sub) = solve_active(p, &current) else {
            return RunResult { solution: None, iterations: it };
        };
        let next = update(p, &current, &sub);
        if next == current {
            let res = residuals_from_gradient(p, &sub.z, &sub.nu1, &sub.xi);
            let signs_ok = sub.nu1.iter().all(|&v| v >= -1e-10);
            if res.within(tol) && signs_ok {
                let solution = InnerSolution { z: sub.z, nu1: sub.nu1, xi: sub.xi, status: QpStatus::Optimal };
                return RunResult { solution: Some(solution), iterations: it };
            }
            return RunResult { solution: None, iterations: it };
        }
        current = next;
    }
    RunResult { solution: None, iterations: cap }
}

pub(super) struct Subproblem {
    pub z: DVector<f64>,
    pub nu1: DVector<f64>,
    pub xi: DVector<f64>,
    /// Gradient of the Lagrangian without box terms.
    pub grad: DVector<f64>,
}

enum SchurFactor {
    Chol(Cholesky<f64, Dyn>),
    Pinv(DMatrix<f64>),
}

impl SchurFactor {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            SchurFactor::Chol(c) => c.solve(rhs),
            SchurFactor::Pinv(p) => p * rhs,
        }
    }
}

/// Minimizes the objective with the guessed active constraints as equalities.
pub(super) fn solve_active(p: &QpProblem, set: &ActiveSet) -> Option<Subproblem> {
    let m = p.dim();
    let free: Vec<usize> = (0..m).filter(|&i| set.bounds[i] == Bound::Free).collect();
    let nf = free.len();
    let mut z = DVector::zeros(m);
    for i in 0..m {
        match set.bounds[i] {
            Bound::Lower => z[i] = p.lo[i],
            Bound::Upper => z[i] = p.hi[i],
            Bound::Free => {}
        }
    }
    let mut position = vec![usize::MAX; m];
    for (a, &i) in free.iter().enumerate() {
        position[i] = a;
    }

    let active_budgets: Vec<usize> = (0..p.budgets.len()).filter(|&k| set.budgets[k]).collect();
    let n_eq = p.equalities.as_ref().map_or(0, |eq| eq.f.len());
    let k = active_budgets.len() + n_eq;
    let mut g = DMatrix::zeros(k, nf);
    let mut r = DVector::zeros(k);
    for (row, &b) in active_budgets.iter().enumerate() {
        let mut rhs = p.budgets[b].bound;
        for &i in &p.budgets[b].indices {
            if position[i] == usize::MAX {
                rhs -= z[i];
            } else {
                g[(row, position[i])] = 1.0;
            }
        }
        r[row] = rhs;
    }
    if let Some(eq) = &p.equalities {
        let shift = &eq.e * &z;
        for q in 0..n_eq {
            let row = active_budgets.len() + q;
            for (a, &i) in free.iter().enumerate() {
                g[(row, a)] = eq.e[(q, i)];
            }
            r[row] = eq.f[q] - shift[q];
        }
    }

    let hz = &p.h * &z;
    let q = DVector::from_fn(nf, |a, _| p.c[free[a]] + 2.0 * hz[free[a]]);
    let kmat = DMatrix::from_fn(nf, nf, |a, b| 2.0 * p.h[(free[a], free[b])]);
    let chol = Cholesky::new(kmat.clone())?;
    let y = chol.solve(&g.transpose());
    let s = &g * &y;
    let s = 0.5 * (&s + s.transpose());
    let schur = factor_schur(s);

    let solve = |r1: &DVector<f64>, r2: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let w = chol.solve(r1);
        let mu = schur.solve(&(r2 - &g * &w));
        let x = -w - &y * &mu;
        (x, mu)
    };
    let (mut x, mut mu) = solve(&q, &(-&r));
    let res1 = &kmat * &x + &q + g.transpose() * &mu;
    let res2 = &g * &x - &r;
    let (dx, dmu) = solve(&res1, &res2);
    x += dx;
    mu += dmu;
    if x.iter().chain(mu.iter()).any(|v| !v.is_finite()) {
        return None;
    }

    for (a, &i) in free.iter().enumerate() {
        z[i] = x[a];
    }
    let mut nu1 = DVector::zeros(p.budgets.len());
    for (row, &b) in active_budgets.iter().enumerate() {
        nu1[b] = mu[row];
    }
    let xi = DVector::from_fn(n_eq, |q, _| mu[active_budgets.len() + q]);
    let grad = super::lagrangian_gradient(p, &z, &nu1, &xi);
    Some(Subproblem { z, nu1, xi, grad })
}

fn factor_schur(s: DMatrix<f64>) -> SchurFactor {
    let n = s.nrows();
    if n == 0 {
        return SchurFactor::Pinv(s);
    }
    let diag_max = s.diagonal().amax();
    let well_posed = (0..n).all(|i| s[(i, i)] > 1e-10 * diag_max.max(1e-300));
    if well_posed {
        if let Some(c) = Cholesky::new(s.clone()) {
            let d = c.l_dirty().diagonal();
            let ratio = d.amin() / d.amax();
            if ratio > 1e-7 {
                return SchurFactor::Chol(c);
            }
        }
    }
    let eps = 1e-12 * diag_max.max(1e-300);
    let pinv = s.pseudo_inverse(eps).unwrap_or_else(|_| DMatrix::zeros(n, n));
    SchurFactor::Pinv(pinv)
}

fn update(p: &QpProblem, current: &ActiveSet, sub: &Subproblem) -> ActiveSet {
    let m = p.dim();
    let mut bounds = Vec::with_capacity(m);
    for i in 0..m {
        let z = sub.z[i];
        let slack = 1e-12 * (1.0 + p.hi[i].abs().max(p.lo[i].abs()));
        // Combined multiplier: positive at an active upper bound, negative
        // at an active lower bound, zero for free coordinates.
        let lambda = match current.bounds[i] {
            Bound::Free => 0.0,
            _ => -sub.grad[i],
        };
        let next = if lambda + (z - p.hi[i]) > slack {
            Bound::Upper
        } else if lambda + (z - p.lo[i]) < -slack {
            Bound::Lower
        } else {
            Bound::Free
        };
        bounds.push(next);
    }
    let budgets = (0..p.budgets.len())
        .map(|k| {
            let bound = p.budgets[k].bound;
            let excess = p.budget_activity(k, &sub.z) - bound;
            let slack = 1e-12 * (1.0 + bound.abs());
            if current.budgets[k] {
                sub.nu1[k] + excess > 0.0
            } else {
                excess > slack.max(FEAS_TOL * 1e-3)
            }
        })
        .collect();
    ActiveSet { bounds, budgets }
}
