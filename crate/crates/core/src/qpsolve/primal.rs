//! Primal active-set method started from a feasible point. Each added
//! constraint blocks a step that the working set allows, so the working set
//! stays linearly independent even when the optimal multipliers are not
//! unique. Used when the faster engines fail to certify a solution.

use std::collections::HashSet;

use nalgebra::{Cholesky, DMatrix, DVector};

use super::pdas::{solve_active, ActiveSet, Bound};
use super::{InnerSolution, QpProblem, QpStatus};

/// Rows of the budget and equality constraints restricted to free coordinates
/// are independent when their Gram matrix factors with a healthy pivot.
fn rows_independent(p: &QpProblem, set: &ActiveSet) -> bool {
    let free: Vec<usize> = (0..p.dim()).filter(|&i| set.bounds[i] == Bound::Free).collect();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for (k, g) in p.budgets.iter().enumerate() {
        if set.budgets[k] {
            let mut r = DVector::zeros(free.len());
            for (a, &i) in free.iter().enumerate() {
                if g.indices.contains(&i) {
                    r[a] = 1.0;
                }
            }
            rows.push(r);
        }
    }
    if let Some(eq) = &p.equalities {
        for q in 0..eq.f.len() {
            rows.push(DVector::from_fn(free.len(), |a, _| eq.e[(q, free[a])]));
        }
    }
    if rows.is_empty() {
        return true;
    }
    if rows.len() > free.len() {
        return false;
    }
    let gram = DMatrix::from_fn(rows.len(), rows.len(), |a, b| rows[a].dot(&rows[b]));
    let Some(chol) = Cholesky::new(gram) else { return false };
    let d = chol.l_dirty().diagonal();
    d.amin() > 1e-7 * d.amax()
}

/// Bounds tight at `z` plus the tight budgets that keep the working rows
/// independent. Bounds are released, largest equality column first, when
/// the equality rows alone are dependent on the free coordinates.
fn initial_working_set(p: &QpProblem, z: &DVector<f64>) -> ActiveSet {
    let m = p.dim();
    let mut set = ActiveSet::from_primal(p, z, 1e-12);
    let tight_budgets = std::mem::replace(&mut set.budgets, vec![false; p.budgets.len()]);
    if !rows_independent(p, &set) {
        let mut order: Vec<usize> = (0..m).filter(|&i| set.bounds[i] != Bound::Free).collect();
        if let Some(eq) = &p.equalities {
            order.sort_by(|&a, &b| eq.e.column(b).norm().total_cmp(&eq.e.column(a).norm()));
        }
        for i in order {
            set.bounds[i] = Bound::Free;
            if rows_independent(p, &set) {
                break;
            }
        }
    }
    for k in 0..p.budgets.len() {
        if tight_budgets[k] {
            set.budgets[k] = true;
            if !rows_independent(p, &set) {
                set.budgets[k] = false;
            }
        }
    }
    set
}

pub(super) fn run(p: &QpProblem, start: &DVector<f64>, cap: usize) -> Option<(InnerSolution, usize)> {
    let m = p.dim();
    let mut z = DVector::from_fn(m, |i, _| start[i].clamp(p.lo[i], p.hi[i]));
    for k in 0..p.budgets.len() {
        if p.budget_activity(k, &z) > p.budgets[k].bound + 1e-9 {
            return None;
        }
    }
    let mut work = initial_working_set(p, &z);
    for i in 0..m {
        match work.bounds[i] {
            Bound::Lower => z[i] = p.lo[i],
            Bound::Upper => z[i] = p.hi[i],
            Bound::Free => {}
        }
    }
    let mut visited = HashSet::new();
    for it in 1..=cap {
        let sub = solve_active(p, &work)?;
        let step = &sub.z - &z;
        let scale = 1.0 + z.amax();
        if step.amax() <= 1e-9 * scale {
            // Drop the most negative multiplier, or the first negative one
            // (Bland's rule) once a working set repeats.
            let bland = !visited.insert(work.clone());
            let threshold = -1e-12 * scale;
            let mut worst: Option<(f64, Result<usize, usize>)> = None;
            let consider = |mult: f64, id: Result<usize, usize>, worst: &mut Option<(f64, Result<usize, usize>)>| {
                let better = match worst {
                    None => mult < threshold,
                    Some((w, _)) => !bland && mult < *w,
                };
                if better {
                    *worst = Some((mult, id));
                }
            };
            for i in 0..m {
                let mult = match work.bounds[i] {
                    Bound::Free => continue,
                    Bound::Lower => sub.grad[i],
                    Bound::Upper => -sub.grad[i],
                };
                consider(mult, Ok(i), &mut worst);
            }
            for k in 0..p.budgets.len() {
                if work.budgets[k] {
                    consider(sub.nu1[k], Err(k), &mut worst);
                }
            }
            match worst {
                None => {
                    let sol = InnerSolution { z: sub.z, nu1: sub.nu1, xi: sub.xi, status: QpStatus::Optimal };
                    return Some((sol, it));
                }
                Some((_, Ok(i))) => work.bounds[i] = Bound::Free,
                Some((_, Err(k))) => work.budgets[k] = false,
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking: Option<Result<(usize, Bound), usize>> = None;
        for i in 0..m {
            if work.bounds[i] != Bound::Free {
                continue;
            }
            if step[i] < 0.0 {
                let t = ((p.lo[i] - z[i]) / step[i]).max(0.0);
                if t < alpha {
                    alpha = t;
                    blocking = Some(Ok((i, Bound::Lower)));
                }
            } else if step[i] > 0.0 {
                let t = ((p.hi[i] - z[i]) / step[i]).max(0.0);
                if t < alpha {
                    alpha = t;
                    blocking = Some(Ok((i, Bound::Upper)));
                }
            }
        }
        for (k, g) in p.budgets.iter().enumerate() {
            if work.budgets[k] {
                continue;
            }
            let rate: f64 = g.indices.iter().map(|&i| step[i]).sum();
            if rate > 0.0 {
                let t = ((g.bound - p.budget_activity(k, &z)) / rate).max(0.0);
                if t < alpha {
                    alpha = t;
                    blocking = Some(Err(k));
                }
            }
        }
        z += &step * alpha;
        match blocking {
            Some(Ok((i, b))) => {
                z[i] = if b == Bound::Lower { p.lo[i] } else { p.hi[i] };
                work.bounds[i] = b;
            }
            Some(Err(k)) => work.budgets[k] = true,
            None => {}
        }
        for i in 0..m {
            z[i] = z[i].clamp(p.lo[i], p.hi[i]);
        }
    }
    None
}
