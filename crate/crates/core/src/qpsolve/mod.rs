//! Dense convex QP with box bounds, scalar budget rows and optional linear
//! equalities:
//!
//! ```text
//! minimize   z'Hz + c'z
//! subject to lo <= z <= hi
//!            sum_{i in G_k} z_i <= beta_k   for every budget group k
//!            E z = f
//! ```
//!
//! The primary engine is a primal-dual active-set iteration that solves the
//! reduced KKT system exactly for each guessed active set. When it cycles or
//! stalls, a Mehrotra interior-point method takes over and its output is
//! polished by the active-set engine. Every returned solution carries KKT
//! residuals computed independently of the solve path.

mod brute;
mod ipm;
mod kkt;
mod pdas;
mod primal;

pub use brute::solve_qp_bruteforce;
pub use kkt::{kkt_residual, KktResiduals};
pub use pdas::ActiveSet;

use kkt::residuals_from_gradient;
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

pub const KKT_TOL: f64 = 1e-8;
pub const FEAS_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Primal-dual active-set iterations tried from a feasible warm start before
/// the slower primal method, which changes one constraint per iteration.
const PDAS_QUICK: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetGroup {
    pub indices: Vec<usize>,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equalities {
    pub e: DMatrix<f64>,
    pub f: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub budgets: Vec<BudgetGroup>,
    pub equalities: Option<Equalities>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, c: DVector<f64>, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        let m = c.len();
        if h.nrows() != m || h.ncols() != m || lo.len() != m || hi.len() != m {
            return Err(invalid(format!(
                "QP dimension mismatch: H {}x{}, c {m}, lo {}, hi {}",
                h.nrows(),
                h.ncols(),
                lo.len(),
                hi.len()
            )));
        }
        let asym = (&h - h.transpose()).amax();
        if asym > 1e-12 * h.amax().max(1.0) {
            return Err(invalid(format!("H is not symmetric (max asymmetry {asym:e})")));
        }
        Ok(Self { h, c, lo, hi, budgets: Vec::new(), equalities: None })
    }

    pub fn with_budget(mut self, indices: Vec<usize>, bound: f64) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.dim()) {
            return Err(invalid(format!("budget index {i} out of range")));
        }
        self.budgets.push(BudgetGroup { indices, bound });
        Ok(self)
    }

    pub fn with_equalities(mut self, e: DMatrix<f64>, f: DVector<f64>) -> Result<Self> {
        if e.ncols() != self.dim() || e.nrows() != f.len() {
            return Err(invalid(format!(
                "equality block is {}x{} with {} right-hand sides for {} variables",
                e.nrows(),
                e.ncols(),
                f.len(),
                self.dim()
            )));
        }
        self.equalities = Some(Equalities { e, f });
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.h * z)) + self.c.dot(z)
    }

    pub fn budget_activity(&self, k: usize, z: &DVector<f64>) -> f64 {
        self.budgets[k].indices.iter().map(|&i| z[i]).sum()
    }

    /// Largest violation of any constraint at `z`.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim() {
            worst = worst.max(self.lo[i] - z[i]).max(z[i] - self.hi[i]);
        }
        for k in 0..self.budgets.len() {
            worst = worst.max(self.budget_activity(k, z) - self.budgets[k].bound);
        }
        if let Some(eq) = &self.equalities {
            worst = worst.max((&eq.e * z - &eq.f).amax());
        }
        worst
    }

    fn n_eq(&self) -> usize {
        self.equalities.as_ref().map_or(0, |eq| eq.f.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpStatus {
    Optimal,
    Infeasible(String),
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// One multiplier per budget group.
    pub nu1: DVector<f64>,
    /// Lower-bound multipliers.
    pub nu2: DVector<f64>,
    /// Upper-bound multipliers.
    pub nu3: DVector<f64>,
    /// Equality multipliers.
    pub xi: DVector<f64>,
    pub residuals: KktResiduals,
    pub status: QpStatus,
    pub iterations: usize,
    pub active_set: Option<ActiveSet>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    fn empty(p: &QpProblem, status: QpStatus) -> Self {
        let m = p.dim();
        Self {
            z: DVector::zeros(m),
            nu1: DVector::zeros(p.budgets.len()),
            nu2: DVector::zeros(m),
            nu3: DVector::zeros(m),
            xi: DVector::zeros(p.n_eq()),
            residuals: KktResiduals::default(),
            status,
            iterations: 0,
            active_set: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpOptions {
    pub max_iter: usize,
    pub kkt_tol: f64,
    /// Primal guess used to seed the active set.
    pub warm_start: Option<DVector<f64>>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { max_iter: DEFAULT_MAX_ITER, kkt_tol: KKT_TOL, warm_start: None }
    }
}

pub fn solve_qp(p: &QpProblem) -> QpSolution {
    solve_qp_with(p, &QpOptions::default())
}

pub fn solve_qp_with(p: &QpProblem, opts: &QpOptions) -> QpSolution {
    if let Err(reason) = presolve(p) {
        return QpSolution::empty(p, QpStatus::Infeasible(reason));
    }
    let reduced = match Reduction::new(p) {
        Ok(r) => r,
        Err(reason) => return QpSolution::empty(p, QpStatus::Infeasible(reason)),
    };
    let rp = &reduced.problem;
    let warm = opts.warm_start.as_ref().map(|z| reduced.restrict(z));
    let (inner, iterations) = solve_reduced(rp, warm.as_ref(), opts);
    let mut sol = reduced.expand(p, inner);
    sol.iterations = iterations;
    sol.residuals = kkt_residual(p, &sol);
    let certified = sol.residuals.within(opts.kkt_tol);
    match sol.status {
        QpStatus::Optimal if !certified => sol.status = QpStatus::MaxIter,
        QpStatus::MaxIter if certified => sol.status = QpStatus::Optimal,
        _ => {}
    }
    sol
}

/// Raw multipliers for the reduced problem.
#[derive(Debug, Clone)]
struct InnerSolution {
    z: DVector<f64>,
    nu1: DVector<f64>,
    xi: DVector<f64>,
    status: QpStatus,
}

fn solve_reduced(p: &QpProblem, warm: Option<&DVector<f64>>, opts: &QpOptions) -> (InnerSolution, usize) {
    let m = p.dim();
    if m == 0 {
        let sol = InnerSolution {
            z: DVector::zeros(0),
            nu1: DVector::zeros(p.budgets.len()),
            xi: DVector::zeros(p.n_eq()),
            status: QpStatus::Optimal,
        };
        return (sol, 0);
    }
    let pdas_cap = opts.max_iter.min(60);
    let feasible_warm = warm.filter(|w| p.max_violation(w) <= FEAS_TOL);
    let mut iterations = 0;
    // Without a feasible starting point the active-set iteration rarely
    // settles on problems with equality rows, so those go straight to the
    // interior-point method.
    let try_pdas = p.equalities.is_none() || feasible_warm.is_some();
    if let Some(w) = feasible_warm {
        let quick = pdas::run(p, ActiveSet::initial(p, Some(w)), pdas_cap.min(PDAS_QUICK), opts.kkt_tol);
        iterations += quick.iterations;
        if let Some(sol) = quick.solution {
            return (sol, iterations);
        }
        let cap = 5 * m + 50;
        match primal::run(p, w, cap) {
            Some((sol, it)) => return (sol, iterations + it),
            None => iterations += cap,
        }
    } else if try_pdas {
        let first = pdas::run(p, ActiveSet::initial(p, warm), pdas_cap, opts.kkt_tol);
        iterations += first.iterations;
        if let Some(sol) = first.solution {
            return (sol, iterations);
        }
    }
    let budget = opts.max_iter.saturating_sub(iterations).max(1);
    let ipm_result = ipm::run(p, budget.min(500));
    iterations += ipm_result.iterations;
    let fallback = match ipm_result.outcome {
        ipm::Outcome::Converged(point) => {
            let (sol, polish_iters) = polish_or_accept(p, point, pdas_cap, QpStatus::Optimal, opts);
            return (sol, iterations + polish_iters);
        }
        ipm::Outcome::Certified(reason) => {
            let mut sol = first_fallback(p);
            sol.status = QpStatus::Infeasible(reason);
            return (sol, iterations);
        }
        ipm::Outcome::Infeasible => None,
        ipm::Outcome::MaxIter(point) => {
            let (sol, polish_iters) = polish_or_accept(p, point, pdas_cap, QpStatus::MaxIter, opts);
            iterations += polish_iters;
            if sol.status == QpStatus::Optimal {
                return (sol, iterations);
            }
            Some(sol)
        }
    };
    // Infeasibility is only reported with a certificate; presolve already
    // rules it out when there are no equalities.
    if p.equalities.is_some() {
        if let Some(reason) = equality_infeasibility(p, opts) {
            let mut sol = first_fallback(p);
            sol.status = QpStatus::Infeasible(reason);
            return (sol, iterations);
        }
    }
    (fallback.unwrap_or_else(|| first_fallback(p)), iterations)
}

/// Tries to recover an exact active-set solution from an interior point,
/// otherwise keeps the point itself, which counts as optimal when its KKT
/// residuals are within tolerance.
fn polish_or_accept(
    p: &QpProblem,
    point: ipm::Point,
    pdas_cap: usize,
    status: QpStatus,
    opts: &QpOptions,
) -> (InnerSolution, usize) {
    let guess = ActiveSet::from_ipm(p, &point);
    let polish = pdas::run(p, guess, pdas_cap.min(30), opts.kkt_tol);
    if let Some(sol) = polish.solution {
        return (sol, polish.iterations);
    }
    let mut iterations = polish.iterations;
    let res = residuals_from_gradient(p, &point.z, &point.nu_budget, &point.xi);
    if res.within(opts.kkt_tol) {
        let sol = InnerSolution { z: point.z, nu1: point.nu_budget, xi: point.xi, status: QpStatus::Optimal };
        return (sol, iterations);
    }
    if res.primal <= FEAS_TOL {
        if let Some((sol, it)) = primal::run(p, &point.z, 5 * p.dim() + 50) {
            return (sol, iterations + it);
        }
        iterations += 5 * p.dim() + 50;
    }
    let sol = InnerSolution { z: point.z, nu1: point.nu_budget, xi: point.xi, status };
    (sol, iterations)
}

fn first_fallback(p: &QpProblem) -> InnerSolution {
    InnerSolution {
        z: DVector::zeros(p.dim()),
        nu1: DVector::zeros(p.budgets.len()),
        xi: DVector::zeros(p.n_eq()),
        status: QpStatus::MaxIter,
    }
}

/// Closed-form checks that need no iteration: crossed bounds, budget groups
/// whose lower bounds already exceed the budget, and equality rows whose
/// target lies outside the range attainable over the box and budgets.
fn presolve(p: &QpProblem) -> std::result::Result<(), String> {
    for i in 0..p.dim() {
        if !(p.lo[i] <= p.hi[i] + FEAS_TOL) {
            return Err(format!("box is empty at coordinate {i}: lo {} > hi {}", p.lo[i], p.hi[i]));
        }
    }
    for (k, g) in p.budgets.iter().enumerate() {
        let floor: f64 = g.indices.iter().map(|&i| p.lo[i]).sum();
        if floor > g.bound + FEAS_TOL {
            return Err(format!("budget group {k}: lower bounds sum to {floor} which exceeds the budget {}", g.bound));
        }
    }
    if let Some(eq) = &p.equalities {
        let groups = disjoint_groups(p);
        for r in 0..eq.f.len() {
            let row: Vec<f64> = eq.e.row(r).iter().copied().collect();
            let hi = row_extreme(p, &row, groups.as_deref(), 1.0);
            let lo = -row_extreme(p, &row, groups.as_deref(), -1.0);
            let slack = FEAS_TOL * (1.0 + eq.f[r].abs());
            if eq.f[r] > hi + slack || eq.f[r] < lo - slack {
                return Err(format!(
                    "equality row {r} needs {} but only [{lo}, {hi}] is attainable within the box and budget",
                    eq.f[r]
                ));
            }
        }
    }
    Ok(())
}

/// Group membership when budget groups do not overlap.
fn disjoint_groups(p: &QpProblem) -> Option<Vec<Option<usize>>> {
    let mut owner = vec![None; p.dim()];
    for (k, g) in p.budgets.iter().enumerate() {
        for &i in &g.indices {
            if owner[i].is_some() {
                return None;
            }
            owner[i] = Some(k);
        }
    }
    Some(owner)
}

/// Maximum of `sign * row'z` over the box, and over budgets when the groups
/// are disjoint (a fractional knapsack per group).
fn row_extreme(p: &QpProblem, row: &[f64], owner: Option<&[Option<usize>]>, sign: f64) -> f64 {
    let m = p.dim();
    let coef: Vec<f64> = row.iter().map(|&a| sign * a).collect();
    let mut total = 0.0;
    let Some(owner) = owner else {
        for i in 0..m {
            total += if coef[i] > 0.0 { coef[i] * p.hi[i] } else { coef[i] * p.lo[i] };
        }
        return total;
    };
    let mut per_group: Vec<Vec<usize>> = vec![Vec::new(); p.budgets.len()];
    for i in 0..m {
        match owner[i] {
            Some(k) => per_group[k].push(i),
            None => total += if coef[i] > 0.0 { coef[i] * p.hi[i] } else { coef[i] * p.lo[i] },
        }
    }
    for (k, members) in per_group.into_iter().enumerate() {
        let mut room = p.budgets[k].bound - members.iter().map(|&i| p.lo[i]).sum::<f64>();
        total += members.iter().map(|&i| coef[i] * p.lo[i]).sum::<f64>();
        let mut gains: Vec<usize> = members.into_iter().filter(|&i| coef[i] > 0.0).collect();
        gains.sort_by(|&a, &b| coef[b].total_cmp(&coef[a]).then(a.cmp(&b)));
        for i in gains {
            if room <= 0.0 {
                break;
            }
            let step = (p.hi[i] - p.lo[i]).min(room);
            total += coef[i] * step;
            room -= step;
        }
    }
    total
}

/// Decides whether `E z = f` can be met inside the box and budgets. The
/// residual `r` of the closest point gives a separating direction, and
/// infeasibility is only reported when an exact bound over the box and
/// budgets shows `r'(E z - f) > 0` for every admissible `z`.
fn equality_infeasibility(p: &QpProblem, opts: &QpOptions) -> Option<String> {
    let eq = p.equalities.as_ref()?;
    let m = p.dim();
    let ete = eq.e.transpose() * &eq.e;
    let reg = 1e-12 * (1.0 + ete.amax());
    let h = &ete + DMatrix::identity(m, m) * reg;
    let c = -2.0 * eq.e.transpose() * &eq.f;
    let aux = QpProblem {
        h: 0.5 * (&h + h.transpose()),
        c,
        lo: p.lo.clone(),
        hi: p.hi.clone(),
        budgets: p.budgets.clone(),
        equalities: None,
    };
    let (sol, _) = solve_reduced(&aux, None, &QpOptions { warm_start: None, ..opts.clone() });
    let r = &eq.e * &sol.z - &eq.f;
    equality_certificate(p, &r).map(|margin| {
        format!(
            "equality constraints cannot be met within the box and budget (closest residual {:.3e}, separation {margin:.3e})",
            r.amax()
        )
    })
}

/// Checks whether `y'(E z - f)` keeps one sign over the box and budgets,
/// which proves `E z = f` unattainable. Returns the separation margin.
pub(crate) fn equality_certificate(p: &QpProblem, y: &DVector<f64>) -> Option<f64> {
    let eq = p.equalities.as_ref()?;
    if y.amax() == 0.0 || y.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let groups = disjoint_groups(p);
    let target = y.dot(&eq.f);
    let row: Vec<f64> = (eq.e.transpose() * y).iter().copied().collect();
    let scale = 1.0
        + target.abs()
        + row.iter().zip(p.lo.iter().zip(p.hi.iter())).map(|(a, (l, h))| a.abs() * l.abs().max(h.abs())).sum::<f64>();
    let lowest = -row_extreme(p, &row, groups.as_deref(), -1.0);
    let highest = row_extreme(p, &row, groups.as_deref(), 1.0);
    let margin = (lowest - target).max(target - highest);
    (margin > 1e-10 * scale).then_some(margin)
}

/// Removes coordinates whose bounds coincide.
struct Reduction {
    problem: QpProblem,
    free: Vec<usize>,
    fixed_value: DVector<f64>,
    kept_groups: Vec<Option<usize>>,
    kept_rows: Vec<Option<usize>>,
}

impl Reduction {
    fn new(p: &QpProblem) -> std::result::Result<Self, String> {
        let m = p.dim();
        let mut is_fixed = vec![false; m];
        let mut fixed_value = DVector::zeros(m);
        for i in 0..m {
            if p.hi[i] - p.lo[i] <= 1e-14 * (1.0 + p.lo[i].abs()) {
                is_fixed[i] = true;
                fixed_value[i] = 0.5 * (p.lo[i] + p.hi[i]);
            }
        }
        let free: Vec<usize> = (0..m).filter(|&i| !is_fixed[i]).collect();
        let mut position = vec![usize::MAX; m];
        for (k, &i) in free.iter().enumerate() {
            position[i] = k;
        }
        let r = free.len();
        let h = DMatrix::from_fn(r, r, |a, b| p.h[(free[a], free[b])]);
        let hz = &p.h * &fixed_value;
        let c = DVector::from_fn(r, |a, _| p.c[free[a]] + 2.0 * hz[free[a]]);
        let lo = DVector::from_fn(r, |a, _| p.lo[free[a]]);
        let hi = DVector::from_fn(r, |a, _| p.hi[free[a]]);
        let mut budgets = Vec::new();
        let mut kept_groups = Vec::with_capacity(p.budgets.len());
        for (k, g) in p.budgets.iter().enumerate() {
            let used: f64 = g.indices.iter().filter(|&&i| is_fixed[i]).map(|&i| fixed_value[i]).sum();
            let indices: Vec<usize> = g.indices.iter().filter(|&&i| !is_fixed[i]).map(|&i| position[i]).collect();
            if indices.is_empty() {
                if used > g.bound + FEAS_TOL {
                    return Err(format!("budget group {k} is exceeded by fixed coordinates"));
                }
                kept_groups.push(None);
            } else {
                kept_groups.push(Some(budgets.len()));
                budgets.push(BudgetGroup { indices, bound: g.bound - used });
            }
        }
        let mut kept_rows = Vec::new();
        let mut equalities = None;
        if let Some(eq) = &p.equalities {
            let shift = &eq.e * &fixed_value;
            let mut rows = Vec::new();
            for row in 0..eq.f.len() {
                let target = eq.f[row] - shift[row];
                let support = free.iter().map(|&i| eq.e[(row, i)].abs()).fold(0.0, f64::max);
                if support == 0.0 {
                    if target.abs() > FEAS_TOL * (1.0 + eq.f[row].abs()) {
                        return Err(format!(
                            "equality row {row} involves only fixed coordinates and is violated by {target:e}"
                        ));
                    }
                    kept_rows.push(None);
                } else {
                    kept_rows.push(Some(rows.len()));
                    rows.push((row, target));
                }
            }
            if !rows.is_empty() {
                let e = DMatrix::from_fn(rows.len(), r, |a, b| eq.e[(rows[a].0, free[b])]);
                let f = DVector::from_fn(rows.len(), |a, _| rows[a].1);
                equalities = Some(Equalities { e, f });
            }
        }
        let problem = QpProblem { h, c, lo, hi, budgets, equalities };
        Ok(Self { problem, free, fixed_value, kept_groups, kept_rows })
    }

    fn restrict(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.free.len(), |a, _| z[self.free[a]])
    }

    fn expand(&self, p: &QpProblem, inner: InnerSolution) -> QpSolution {
        let mut z = self.fixed_value.clone();
        for (a, &i) in self.free.iter().enumerate() {
            z[i] = inner.z[a].clamp(p.lo[i], p.hi[i]);
        }
        let nu1 = DVector::from_fn(p.budgets.len(), |k, _| self.kept_groups[k].map_or(0.0, |g| inner.nu1[g]));
        let xi = DVector::from_fn(p.n_eq(), |r, _| self.kept_rows[r].map_or(0.0, |q| inner.xi[q]));
        // Box multipliers are read off the stationarity residual. A wrong
        // sign shows up as a complementarity violation in the certificate.
        let grad = lagrangian_gradient(p, &z, &nu1, &xi);
        let nu2 = grad.map(|g| g.max(0.0));
        let nu3 = grad.map(|g| (-g).max(0.0));
        let active_set = Some(ActiveSet::from_primal(p, &z, 1e-9));
        QpSolution {
            z,
            nu1,
            nu2,
            nu3,
            xi,
            residuals: KktResiduals::default(),
            status: inner.status,
            iterations: 0,
            active_set,
        }
    }
}

/// `2Hz + c + sum_k nu1_k 1_{G_k} + E'xi`, the stationarity residual before
/// box multipliers.
pub(crate) fn lagrangian_gradient(
    p: &QpProblem,
    z: &DVector<f64>,
    nu1: &DVector<f64>,
    xi: &DVector<f64>,
) -> DVector<f64> {
    let mut g = &p.h * z * 2.0 + &p.c;
    for (k, group) in p.budgets.iter().enumerate() {
        for &i in &group.indices {
            g[i] += nu1[k];
        }
    }
    if let Some(eq) = &p.equalities {
        g += eq.e.transpose() * xi;
    }
    g
}
