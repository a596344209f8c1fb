use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Immutable network and model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialNetwork {
    p: DMatrix<f64>,
    lambda: DVector<f64>,
    alpha: f64,
    eta0: DVector<f64>,
    sigma: DVector<f64>,
    clusters: Option<Vec<usize>>,
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl SocialNetwork {
    pub fn new(
        p: DMatrix<f64>,
        lambda: DVector<f64>,
        alpha: f64,
        eta0: DVector<f64>,
        sigma: DVector<f64>,
    ) -> Result<Self> {
        let n = lambda.len();
        if n < 3 {
            return Err(invalid(format!("network needs at least 3 nodes, got {n}")));
        }
        if p.nrows() != n || p.ncols() != n || eta0.len() != n || sigma.len() != n {
            return Err(invalid(format!(
                "dimension mismatch: P is {}x{}, lambda {n}, eta0 {}, sigma {}",
                p.nrows(),
                p.ncols(),
                eta0.len(),
                sigma.len()
            )));
        }
        for i in 0..n {
            if p.row(i).iter().any(|&x| !(x >= 0.0)) {
                return Err(invalid(format!("row {i} of P has a negative or NaN entry")));
            }
            let s: f64 = p.row(i).iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("row {i} of P sums to {s}")));
            }
        }
        if !in_unit(alpha) {
            return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if let Some(v) = lambda.iter().position(|&x| !in_unit(x)) {
            return Err(invalid(format!("lambda[{v}] = {} outside [0, 1]", lambda[v])));
        }
        if let Some(v) = eta0.iter().position(|&x| !in_unit(x)) {
            return Err(invalid(format!("eta0[{v}] = {} outside [0, 1]", eta0[v])));
        }
        if let Some(v) = sigma.iter().position(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(invalid(format!("sigma[{v}] = {} must be finite and >= 0", sigma[v])));
        }
        Ok(Self { p, lambda, alpha, eta0, sigma, clusters: None })
    }

    pub fn with_clusters(mut self, clusters: Vec<usize>) -> Result<Self> {
        if clusters.len() != self.n() {
            return Err(invalid(format!("{} cluster labels for {} nodes", clusters.len(), self.n())));
        }
        self.clusters = Some(clusters);
        Ok(self)
    }

    /// Same network with a different imitation probability.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !in_unit(alpha) {
            return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(Self { alpha, ..self.clone() })
    }

    /// Same network with a different bias vector.
    pub fn with_eta0(&self, eta0: DVector<f64>) -> Result<Self> {
        let mut net = Self::new(self.p.clone(), self.lambda.clone(), self.alpha, eta0, self.sigma.clone())?;
        net.clusters = self.clusters.clone();
        Ok(net)
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    pub fn influence(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eta0(&self) -> &DVector<f64> {
        &self.eta0
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn clusters(&self) -> Option<&[usize]> {
        self.clusters.as_deref()
    }

    /// Conservative per-node input ceiling `max(0, 1 - eta0 - 2 sigma)`.
    pub fn input_upper_bound(&self) -> DVector<f64> {
        DVector::from_fn(self.n(), |v, _| (1.0 - self.eta0[v] - 2.0 * self.sigma[v]).max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, n, 1.0 / n as f64)
    }

    #[test]
    fn validates_invariants() {
        let ok = |p: DMatrix<f64>, l: f64, a: f64, e: f64, s: f64| {
            SocialNetwork::new(
                p,
                DVector::from_element(3, l),
                a,
                DVector::from_element(3, e),
                DVector::from_element(3, s),
            )
        };
        assert!(ok(uniform(3), 0.5, 0.5, 0.2, 0.1).is_ok());
        assert!(ok(uniform(3), 1.5, 0.5, 0.2, 0.1).is_err());
        assert!(ok(uniform(3), 0.5, -0.1, 0.2, 0.1).is_err());
        assert!(ok(uniform(3), 0.5, 0.5, 1.2, 0.1).is_err());
        assert!(ok(uniform(3), 0.5, 0.5, 0.2, -0.1).is_err());
        assert!(ok(uniform(3) * 2.0, 0.5, 0.5, 0.2, 0.1).is_err());
        assert!(SocialNetwork::new(
            uniform(2),
            DVector::from_element(2, 0.5),
            0.5,
            DVector::from_element(2, 0.5),
            DVector::zeros(2)
        )
        .is_err());
    }

    #[test]
    fn upper_bound_is_floored() {
        let net = SocialNetwork::new(
            uniform(3),
            DVector::from_element(3, 0.5),
            0.5,
            DVector::from_vec(vec![0.1, 0.9, 0.5]),
            DVector::from_element(3, 0.1),
        )
        .unwrap();
        let ub = net.input_upper_bound();
        assert!((ub[0] - 0.7).abs() < 1e-15);
        assert_eq!(ub[1], 0.0);
        assert!((ub[2] - 0.3).abs() < 1e-15);
    }
}
