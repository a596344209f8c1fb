//! Mehrotra predictor-corrector interior-point method for the reduced
//! problem (every coordinate has `lo < hi`).
//!
//! Inequalities are written as `C z - d = s >= 0` with rows `z - lo`,
//! `hi - z` and `beta_k - 1'z_{G_k}`. Newton systems are reduced to the
//! normal form `(2H + C'DC) dz + E'dxi = r` and solved by Cholesky with a
//! Schur complement for the equality block.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::QpProblem;

const MAX_STEP_FRACTION: f64 = 0.995;

#[derive(Debug, Clone)]
pub(super) struct Point {
    pub z: DVector<f64>,
    pub xi: DVector<f64>,
    pub lam_lo: DVector<f64>,
    pub lam_hi: DVector<f64>,
    pub nu_budget: DVector<f64>,
    pub s_lo: DVector<f64>,
    pub s_hi: DVector<f64>,
    pub s_budget: DVector<f64>,
}

pub(super) enum Outcome {
    Converged(Point),
    /// Residuals behave like an inconsistent problem; not a certificate.
    Infeasible,
    /// The equality residual or multiplier gave a separating direction.
    Certified(String),
    MaxIter(Point),
}

pub(super) struct IpmResult {
    pub outcome: Outcome,
    pub iterations: usize,
}

struct Residuals {
    dual: DVector<f64>,
    eq: DVector<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    budget: DVector<f64>,
}

impl Residuals {
    fn primal_norm(&self) -> f64 {
        self.eq.amax().max(self.lo.amax()).max(self.hi.amax()).max(amax(&self.budget))
    }
}

fn amax(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

/// Sum of `v_k` over each group, scattered back onto coordinates.
fn scatter_budget(p: &QpProblem, v: &DVector<f64>, out: &mut DVector<f64>, sign: f64) {
    for (k, g) in p.budgets.iter().enumerate() {
        for &i in &g.indices {
            out[i] += sign * v[k];
        }
    }
}

fn residuals(p: &QpProblem, x: &Point) -> Residuals {
    let mut dual = &p.h * &x.z * 2.0 + &p.c - &x.lam_lo + &x.lam_hi;
    scatter_budget(p, &x.nu_budget, &mut dual, 1.0);
    let eq = match &p.equalities {
        Some(e) => {
            dual += e.e.transpose() * &x.xi;
            &e.e * &x.z - &e.f
        }
        None => DVector::zeros(0),
    };
    let lo = &x.z - &p.lo - &x.s_lo;
    let hi = &p.hi - &x.z - &x.s_hi;
    let budget =
        DVector::from_fn(p.budgets.len(), |k, _| p.budgets[k].bound - p.budget_activity(k, &x.z) - x.s_budget[k]);
    Residuals { dual, eq, lo, hi, budget }
}

fn complementarity(x: &Point) -> f64 {
    let total = x.s_lo.dot(&x.lam_lo) + x.s_hi.dot(&x.lam_hi) + x.s_budget.dot(&x.nu_budget);
    let count = x.s_lo.len() + x.s_hi.len() + x.s_budget.len();
    total / count as f64
}

struct Direction {
    z: DVector<f64>,
    xi: DVector<f64>,
    lam_lo: DVector<f64>,
    lam_hi: DVector<f64>,
    nu_budget: DVector<f64>,
    s_lo: DVector<f64>,
    s_hi: DVector<f64>,
    s_budget: DVector<f64>,
}

struct Factorization {
    mat: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    schur: Option<(DMatrix<f64>, Cholesky<f64, nalgebra::Dyn>)>,
}

fn factor(p: &QpProblem, x: &Point) -> Option<Factorization> {
    let m = p.dim();
    let mut mat = &p.h * 2.0;
    for i in 0..m {
        mat[(i, i)] += x.lam_lo[i] / x.s_lo[i] + x.lam_hi[i] / x.s_hi[i];
    }
    for (k, g) in p.budgets.iter().enumerate() {
        let d = x.nu_budget[k] / x.s_budget[k];
        for &i in &g.indices {
            for &j in &g.indices {
                mat[(i, j)] += d;
            }
        }
    }
    let chol = Cholesky::new(mat.clone())?;
    let schur = match &p.equalities {
        Some(e) => {
            let y = chol.solve(&e.e.transpose());
            let mut s = &e.e * &y;
            s = 0.5 * (&s + s.transpose());
            let reg = 1e-14 * (1.0 + s.diagonal().amax());
            for i in 0..s.nrows() {
                s[(i, i)] += reg;
            }
            Some((y, Cholesky::new(s)?))
        }
        None => None,
    };
    Some(Factorization { mat, chol, schur })
}

impl Factorization {
    /// Solves `M dz + E'dxi = r1`, `E dz = r2`.
    fn solve_once(&self, p: &QpProblem, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match (&p.equalities, &self.schur) {
            (Some(e), Some((y, sc))) => {
                let v = self.chol.solve(r1);
                let dxi = sc.solve(&(&e.e * &v - r2));
                let dz = v - y * &dxi;
                (dz, dxi)
            }
            _ => (self.chol.solve(r1), DVector::zeros(0)),
        }
    }

    /// [`Self::solve_once`] followed by two refinement sweeps.
    fn solve(&self, p: &QpProblem, r1: &DVector<f64>, r2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (mut dz, mut dxi) = self.solve_once(p, r1, r2);
        for _ in 0..2 {
            let mut res1 = r1 - &self.mat * &dz;
            let mut res2 = r2.clone();
            if let Some(e) = &p.equalities {
                res1 -= e.e.transpose() * &dxi;
                res2 -= &e.e * &dz;
            }
            let (cz, cxi) = self.solve_once(p, &res1, &res2);
            dz += cz;
            dxi += cxi;
        }
        (dz, dxi)
    }
}

/// Newton direction for complementarity targets `target_* = -s.*lam + ...`.
fn direction(
    p: &QpProblem,
    x: &Point,
    r: &Residuals,
    f: &Factorization,
    t_lo: &DVector<f64>,
    t_hi: &DVector<f64>,
    t_b: &DVector<f64>,
) -> Direction {
    // dlam = S^-1 (t - Lam r_i) - D C dz, where C rows are e_i, -e_i, -1_G.
    let w_lo = DVector::from_fn(p.dim(), |i, _| (t_lo[i] - x.lam_lo[i] * r.lo[i]) / x.s_lo[i]);
    let w_hi = DVector::from_fn(p.dim(), |i, _| (t_hi[i] - x.lam_hi[i] * r.hi[i]) / x.s_hi[i]);
    let w_b = DVector::from_fn(p.budgets.len(), |k, _| (t_b[k] - x.nu_budget[k] * r.budget[k]) / x.s_budget[k]);
    let mut rhs = -&r.dual + &w_lo - &w_hi;
    scatter_budget(p, &w_b, &mut rhs, -1.0);

    let (dz, dxi) = f.solve(p, &rhs, &(-&r.eq));

    let d_lo = x.lam_lo.component_div(&x.s_lo);
    let d_hi = x.lam_hi.component_div(&x.s_hi);
    let dlam_lo = &w_lo - d_lo.component_mul(&dz);
    let dlam_hi = &w_hi + d_hi.component_mul(&dz);
    let dnu = DVector::from_fn(p.budgets.len(), |k, _| {
        let cdz: f64 = -p.budgets[k].indices.iter().map(|&i| dz[i]).sum::<f64>();
        w_b[k] - x.nu_budget[k] / x.s_budget[k] * cdz
    });
    let ds_lo = &dz + &r.lo;
    let ds_hi = -&dz + &r.hi;
    let ds_b = DVector::from_fn(p.budgets.len(), |k, _| {
        -p.budgets[k].indices.iter().map(|&i| dz[i]).sum::<f64>() + r.budget[k]
    });
    Direction {
        z: dz,
        xi: dxi,
        lam_lo: dlam_lo,
        lam_hi: dlam_hi,
        nu_budget: dnu,
        s_lo: ds_lo,
        s_hi: ds_hi,
        s_budget: ds_b,
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut step = f64::INFINITY;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            step = step.min(-v[i] / dv[i]);
        }
    }
    step
}

fn step_lengths(x: &Point, d: &Direction) -> (f64, f64) {
    let primal = max_step(&x.s_lo, &d.s_lo).min(max_step(&x.s_hi, &d.s_hi)).min(max_step(&x.s_budget, &d.s_budget));
    let dual =
        max_step(&x.lam_lo, &d.lam_lo).min(max_step(&x.lam_hi, &d.lam_hi)).min(max_step(&x.nu_budget, &d.nu_budget));
    (primal.min(1.0), dual.min(1.0))
}

fn apply(x: &Point, d: &Direction, ap: f64, ad: f64) -> Point {
    Point {
        z: &x.z + &d.z * ap,
        xi: &x.xi + &d.xi * ad,
        lam_lo: &x.lam_lo + &d.lam_lo * ad,
        lam_hi: &x.lam_hi + &d.lam_hi * ad,
        nu_budget: &x.nu_budget + &d.nu_budget * ad,
        s_lo: &x.s_lo + &d.s_lo * ap,
        s_hi: &x.s_hi + &d.s_hi * ap,
        s_budget: &x.s_budget + &d.s_budget * ap,
    }
}

fn start(p: &QpProblem) -> Point {
    let m = p.dim();
    let z = DVector::from_fn(m, |i, _| 0.5 * (p.lo[i] + p.hi[i]));
    let s_lo = DVector::from_fn(m, |i, _| (z[i] - p.lo[i]).max(1.0));
    let s_hi = DVector::from_fn(m, |i, _| (p.hi[i] - z[i]).max(1.0));
    let s_budget = DVector::from_fn(p.budgets.len(), |k, _| (p.budgets[k].bound - p.budget_activity(k, &z)).max(1.0));
    let scale = 1.0f64.max(p.c.amax());
    Point {
        z,
        xi: DVector::zeros(p.equalities.as_ref().map_or(0, |e| e.f.len())),
        lam_lo: DVector::from_element(m, scale),
        lam_hi: DVector::from_element(m, scale),
        nu_budget: DVector::from_element(p.budgets.len(), scale),
        s_lo,
        s_hi,
        s_budget,
    }
}

pub(super) fn run(p: &QpProblem, max_iter: usize) -> IpmResult {
    let mut x = start(p);
    let data_norm = 1.0 + p.h.amax() + p.c.amax() + p.lo.amax() + p.hi.amax();
    let mut best_phi = f64::INFINITY;
    let mut best = x.clone();
    for it in 1..=max_iter {
        let r = residuals(p, &x);
        let mu = complementarity(&x);
        let dual_norm = r.dual.amax();
        let primal_norm = r.primal_norm();
        if dual_norm <= 1e-11 * (1.0 + p.c.amax()) && primal_norm <= 1e-11 && mu <= 1e-12 {
            return IpmResult { outcome: Outcome::Converged(x), iterations: it };
        }
        let phi = (dual_norm.max(primal_norm) + mu) / data_norm;
        if phi < best_phi {
            best_phi = phi;
            best = x.clone();
        }
        if it > 20 && phi > 1e-8 && phi >= 1e4 * best_phi {
            return IpmResult { outcome: Outcome::Infeasible, iterations: it };
        }
        if mu < 1e-14 && primal_norm > 1e-6 && it > 50 {
            return IpmResult { outcome: Outcome::Infeasible, iterations: it };
        }
        if it >= 3 && primal_norm > 1e-9 {
            for y in [&r.eq, &x.xi] {
                if let Some(margin) = super::equality_certificate(p, y) {
                    return IpmResult {
                        outcome: Outcome::Certified(format!(
                            "equality constraints cannot be met within the box and budget (residual {primal_norm:.3e}, separation {margin:.3e})"
                        )),
                        iterations: it,
                    };
                }
            }
        }
        // Past this point the iterates only lose accuracy.
        if best_phi < 1e-10 && phi > 1e3 * best_phi {
            return IpmResult { outcome: Outcome::MaxIter(best), iterations: it };
        }
        let Some(f) = factor(p, &x) else {
            return IpmResult { outcome: Outcome::MaxIter(best), iterations: it };
        };

        let t_lo = -x.s_lo.component_mul(&x.lam_lo);
        let t_hi = -x.s_hi.component_mul(&x.lam_hi);
        let t_b = -x.s_budget.component_mul(&x.nu_budget);
        let aff = direction(p, &x, &r, &f, &t_lo, &t_hi, &t_b);
        let (ap, ad) = step_lengths(&x, &aff);
        let trial = apply(&x, &aff, ap, ad);
        let mu_aff = complementarity(&trial);
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        let t_lo = &t_lo - aff.s_lo.component_mul(&aff.lam_lo) + DVector::from_element(p.dim(), sigma * mu);
        let t_hi = &t_hi - aff.s_hi.component_mul(&aff.lam_hi) + DVector::from_element(p.dim(), sigma * mu);
        let t_b =
            &t_b - aff.s_budget.component_mul(&aff.nu_budget) + DVector::from_element(p.budgets.len(), sigma * mu);
        let d = direction(p, &x, &r, &f, &t_lo, &t_hi, &t_b);
        let (ap, ad) = step_lengths(&x, &d);
        x = apply(&x, &d, (MAX_STEP_FRACTION * ap).min(1.0), (MAX_STEP_FRACTION * ad).min(1.0));
    }
    IpmResult { outcome: Outcome::MaxIter(best), iterations: max_iter }
}
