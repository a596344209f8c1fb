use nalgebra::{DMatrix, DVector};

use super::PolicyWeights;

/// `E ||1 - y||_Q^2` for independent `y_v ~ Bernoulli(x_v)`, written as the
/// deterministic shortfall plus the diagonal variance term.
pub fn expected_acceptance_cost(x: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    let gap = x.map(|v| 1.0 - v);
    let variance: f64 = (0..x.len()).map(|v| q[(v, v)] * x[v] * (1.0 - x[v])).sum();
    gap.dot(&(q * &gap)) + variance
}

/// The same expectation summed entry by entry.
pub fn bernoulli_cost_direct(x: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for v in 0..n {
        for w in 0..n {
            let joint = if v == w { 1.0 - x[v] } else { (1.0 - x[v]) * (1.0 - x[w]) };
            total += q[(v, w)] * joint;
        }
    }
    total
}

/// Partial sums of the expected realized cost along a mean trajectory, with
/// the bracket obtained by dropping or doubling the variance term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBounds {
    pub lower: f64,
    pub exact: f64,
    pub upper: f64,
}

pub fn cost_bounds(mus: &[DVector<f64>], us: &[DVector<f64>], w: &PolicyWeights) -> CostBounds {
    let n = w.n();
    let trace_q: f64 = w.q().diagonal().sum();
    let mut out = CostBounds { lower: 0.0, exact: 0.0, upper: 0.0 };
    for (mu, u) in mus.iter().zip(us) {
        let gap = DVector::from_element(n, 1.0) - mu;
        let base = gap.dot(&(w.q() * &gap)) + u.dot(&(w.r() * u));
        let variance: f64 = (0..n).map(|v| w.q()[(v, v)] * mu[v] * (1.0 - mu[v])).sum();
        out.lower += base - trace_q;
        out.exact += base + variance;
        out.upper += base + trace_q;
    }
    out
}
