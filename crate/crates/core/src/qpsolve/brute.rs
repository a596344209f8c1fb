use nalgebra::{DMatrix, DVector};

use super::{QpProblem, FEAS_TOL};
use crate::error::{invalid, Result};

/// Best feasible point of a uniform grid with `grid + 1` points per axis.
/// Coordinates pinned by equality rows are solved for instead of gridded.
/// Returns `None` when no grid point is feasible. Test oracle only.
pub fn solve_qp_bruteforce(p: &QpProblem, grid: usize) -> Result<Option<DVector<f64>>> {
    let m = p.dim();
    if m > 4 {
        return Err(invalid(format!("brute force supports at most 4 variables, got {m}")));
    }
    if grid == 0 || grid > 200 {
        return Err(invalid(format!("grid resolution must lie in 1..=200, got {grid}")));
    }
    let (pivots, rest) = match &p.equalities {
        Some(eq) => pivot_columns(&eq.e)?,
        None => (Vec::new(), (0..m).collect()),
    };
    let pivot_solver = p.equalities.as_ref().map(|eq| {
        let k = pivots.len();
        let ep = DMatrix::from_fn(k, k, |r, c| eq.e[(r, pivots[c])]);
        (ep.lu(), eq)
    });

    let axis = |i: usize, step: usize| -> f64 {
        if step == grid {
            p.hi[i]
        } else {
            p.lo[i] + (p.hi[i] - p.lo[i]) * step as f64 / grid as f64
        }
    };
    let total = (grid + 1).pow(rest.len() as u32);
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut z = DVector::zeros(m);
    for code in 0..total {
        let mut c = code;
        for &i in &rest {
            z[i] = axis(i, c % (grid + 1));
            c /= grid + 1;
        }
        if let Some((lu, eq)) = &pivot_solver {
            let mut rhs = eq.f.clone();
            for r in 0..rhs.len() {
                for &i in &rest {
                    rhs[r] -= eq.e[(r, i)] * z[i];
                }
            }
            let Some(sol) = lu.solve(&rhs) else { return Ok(None) };
            for (a, &i) in pivots.iter().enumerate() {
                z[i] = sol[a];
            }
        }
        if p.max_violation(&z) > FEAS_TOL {
            continue;
        }
        let value = p.objective(&z);
        if best.as_ref().is_none_or(|(v, _)| value < *v) {
            best = Some((value, z.clone()));
        }
    }
    Ok(best.map(|(_, z)| z))
}

/// Column indices that make the equality block square and invertible,
/// chosen by Gaussian elimination with full pivoting.
fn pivot_columns(e: &DMatrix<f64>) -> Result<(Vec<usize>, Vec<usize>)> {
    let (k, m) = e.shape();
    if k > m {
        return Err(invalid("more equality rows than variables"));
    }
    let mut a = e.clone();
    let mut used_rows = vec![false; k];
    let mut used_cols = vec![false; m];
    let mut pivots = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best = (0.0, 0, 0);
        for r in (0..k).filter(|&r| !used_rows[r]) {
            for c in (0..m).filter(|&c| !used_cols[c]) {
                if a[(r, c)].abs() > best.0 {
                    best = (a[(r, c)].abs(), r, c);
                }
            }
        }
        let (val, pr, pc) = best;
        if val <= 1e-12 {
            return Err(invalid("equality block is rank deficient"));
        }
        used_rows[pr] = true;
        used_cols[pc] = true;
        pivots.push(pc);
        for r in 0..k {
            if r != pr {
                let factor = a[(r, pc)] / a[(pr, pc)];
                for c in 0..m {
                    a[(r, c)] -= factor * a[(pr, c)];
                }
            }
        }
    }
    let rest = (0..m).filter(|&c| !used_cols[c]).collect();
    Ok((pivots, rest))
}
