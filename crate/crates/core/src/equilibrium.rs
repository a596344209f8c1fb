//! Expected dynamics, steady states, spectral stability, running averages
//! and the acceptance-based mean estimator.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::{check_influence_reachability, SocialNetwork};

pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanState {
    pub mu: DVector<f64>,
    pub t: usize,
}

/// Mean transition `mu+ = A mu + B (eta0 + u)` with `A = Lambda Pbar`,
/// `B = I - Lambda`, and the steady-state map `V`.
#[derive(Debug, Clone)]
pub struct PredictionModel {
    pub pbar: DMatrix<f64>,
    pub a: DMatrix<f64>,
    /// Diagonal of `B`.
    pub b: DVector<f64>,
    pub v: DMatrix<f64>,
    pub spectral_radius: f64,
    pub reachable: bool,
}

impl PredictionModel {
    pub fn n(&self) -> usize {
        self.b.len()
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.b)
    }
}

/// Perron root of a nonnegative matrix.
///
/// The spectral radius of a nonnegative matrix is the largest Perron root
/// over its strongly connected components, so each irreducible diagonal
/// block is handled separately. On a block, power iteration runs on
/// `A + I` (primitive, so the dominant eigenvalue is strictly dominant)
/// from the all-ones vector, followed by shifted inverse iteration when the
/// Collatz-Wielandt bounds have not yet agreed within [`SPECTRAL_TOL`].
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    let mut rho = 0.0f64;
    for comp in strongly_connected_components(a) {
        let block = if comp.len() == 1 {
            a[(comp[0], comp[0])]
        } else {
            let sub = DMatrix::from_fn(comp.len(), comp.len(), |i, j| a[(comp[i], comp[j])]);
            irreducible_radius(&sub)
        };
        rho = rho.max(block);
    }
    rho
}

fn collatz_wielandt(a: &DMatrix<f64>, x: &DVector<f64>) -> Option<(f64, f64)> {
    let y = a * x;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..x.len() {
        if !(x[i] > 0.0) {
            return None;
        }
        let r = y[i] / x[i];
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Some((lo, hi))
}

fn irreducible_radius(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let (mut lo, mut hi) = collatz_wielandt(a, &x).expect("positive start");
    for _ in 0..SPECTRAL_MAX_ITER.min(200) {
        if hi - lo <= SPECTRAL_TOL {
            return 0.5 * (hi + lo);
        }
        let y = a * &x + &x;
        x = &y / y.norm();
        (lo, hi) = collatz_wielandt(a, &x).expect("power iterates stay positive");
    }
    // Slow separation from the next eigenvalue: switch to inverse iteration
    // with a shift above the upper bound, where (sI - A)^-1 is positive.
    let mut best = (lo, hi);
    for _ in 0..SPECTRAL_MAX_ITER {
        if best.1 - best.0 <= SPECTRAL_TOL {
            break;
        }
        let shift = best.1 + (best.1 - best.0);
        let m = DMatrix::identity(n, n) * shift - a;
        let Some(y) = m.lu().solve(&x) else { break };
        let next = &y / y.norm();
        let Some((l, h)) = collatz_wielandt(a, &next) else { break };
        x = next;
        let improved = (best.0.max(l), best.1.min(h));
        if improved.1 - improved.0 >= 0.5 * (best.1 - best.0) && h - l >= best.1 - best.0 {
            best = improved;
            break;
        }
        best = improved;
    }
    0.5 * (best.0 + best.1)
}

/// Kosaraju's algorithm on the pattern `a[(i, j)] != 0`.
fn strongly_connected_components(a: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = a.nrows();
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for root in 0..n {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut stack = vec![(root, 0usize)];
        while let Some((v, next)) = stack.pop() {
            if let Some(w) = (next..n).find(|&w| a[(v, w)] != 0.0 && !seen[w]) {
                stack.push((v, w + 1));
                seen[w] = true;
                stack.push((w, 0));
            } else {
                order.push(v);
            }
        }
    }
    let mut comp_of = vec![usize::MAX; n];
    let mut comps = Vec::new();
    for &root in order.iter().rev() {
        if comp_of[root] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![root];
        comp_of[root] = id;
        let mut i = 0;
        while i < members.len() {
            let v = members[i];
            for u in 0..n {
                if a[(u, v)] != 0.0 && comp_of[u] == usize::MAX {
                    comp_of[u] = id;
                    members.push(u);
                }
            }
            i += 1;
        }
        comps.push(members);
    }
    comps
}

pub fn build_prediction_model(net: &SocialNetwork) -> Result<PredictionModel> {
    let n = net.n();
    let alpha = net.alpha();
    let lambda = net.lambda();
    let pbar = DMatrix::identity(n, n) * (1.0 - alpha) + net.influence() * alpha;
    let mut a = pbar.clone();
    for i in 0..n {
        a.row_mut(i).scale_mut(lambda[i]);
    }
    let b = lambda.map(|l| 1.0 - l);
    let rho = spectral_radius(&a);
    let reachable = check_influence_reachability(net.influence(), lambda);
    if !reachable {
        return Err(Error::Unreachable(
            "some nodes cannot reach any node with lambda < 1, so I - Lambda Pbar is singular".into(),
        ));
    }
    if rho >= 1.0 - 1e-12 {
        return Err(Error::Unstable { spectral_radius: rho, detail: "mean dynamics are not Schur stable".into() });
    }
    let m = DMatrix::identity(n, n) - &a;
    let lu = m.lu();
    let rhs = DMatrix::from_diagonal(&b);
    let v = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Unstable { spectral_radius: rho, detail: "I - Lambda Pbar is singular".into() })?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("steady-state map has non-finite entries".into()));
    }
    Ok(PredictionModel { pbar, a, b, v, spectral_radius: rho, reachable })
}

pub fn mean_step(mu: &DVector<f64>, model: &PredictionModel, eta0: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut next = &model.a * mu;
    for i in 0..next.len() {
        next[i] += model.b[i] * (eta0[i] + u[i]);
    }
    next
}

pub fn mean_state_step(state: &MeanState, model: &PredictionModel, eta0: &DVector<f64>, u: &DVector<f64>) -> MeanState {
    MeanState { mu: mean_step(&state.mu, model, eta0, u), t: state.t + 1 }
}

/// `x* = V (eta0 + u)`.
pub fn steady_state(model: &PredictionModel, eta0: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if model.spectral_radius >= 1.0 {
        return Err(Error::Unstable { spectral_radius: model.spectral_radius, detail: "no steady state".into() });
    }
    Ok(&model.v * (eta0 + u))
}

/// Running average after folding in the `(t+1)`-th sample.
pub fn cesaro_update(avg: &DVector<f64>, t: usize, sample: &DVector<f64>) -> DVector<f64> {
    avg + (sample - avg) / (t as f64 + 1.0)
}

/// Running mean of acceptance observations, with a prior used before the
/// first observation and an optional sliding window.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    count: usize,
    running_sum: DVector<f64>,
    prior: DVector<f64>,
    window: Option<(usize, VecDeque<DVector<f64>>)>,
}

impl EstimatorState {
    pub fn new(prior: DVector<f64>) -> Self {
        let n = prior.len();
        Self { count: 0, running_sum: DVector::zeros(n), prior, window: None }
    }

    /// Average over at most the last `width` observations.
    pub fn windowed(prior: DVector<f64>, width: usize) -> Self {
        let mut est = Self::new(prior);
        est.window = Some((width.max(1), VecDeque::new()));
        est
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn running_sum(&self) -> &DVector<f64> {
        &self.running_sum
    }

    pub fn update(&mut self, y: &DVector<f64>) {
        self.count += 1;
        self.running_sum += y;
        if let Some((width, buf)) = &mut self.window {
            buf.push_back(y.clone());
            if buf.len() > *width {
                let old = buf.pop_front().expect("window is nonempty");
                self.running_sum -= old;
                self.count -= 1;
            }
        }
    }

    pub fn mu_hat(&self) -> DVector<f64> {
        if self.count == 0 {
            self.prior.clone()
        } else {
            (&self.running_sum / self.count as f64).map(|v| v.clamp(0.0, 1.0))
        }
    }
}

pub fn estimator_update(mut est: EstimatorState, y: &DVector<f64>) -> EstimatorState {
    est.update(y);
    est
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::row_normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(p: DMatrix<f64>, lambda: DVector<f64>, alpha: f64, eta0: DVector<f64>) -> SocialNetwork {
        let n = lambda.len();
        SocialNetwork::new(p, lambda, alpha, eta0, DVector::zeros(n)).unwrap()
    }

    fn swap3() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    }

    fn eigen_radius(a: &DMatrix<f64>) -> f64 {
        a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn fully_anchored_model_is_identity_map() {
        let n = net(
            row_normalize(&DMatrix::from_element(4, 4, 1.0)),
            DVector::zeros(4),
            0.5,
            DVector::from_element(4, 0.3),
        );
        let m = build_prediction_model(&n).unwrap();
        assert!((m.v.clone() - DMatrix::identity(4, 4)).amax() < 1e-15);
        assert_eq!(m.spectral_radius, 0.0);
    }

    #[test]
    fn fully_stubborn_model_is_rejected() {
        let n = net(
            row_normalize(&DMatrix::from_element(4, 4, 1.0)),
            DVector::from_element(4, 1.0),
            0.5,
            DVector::from_element(4, 0.3),
        );
        assert!(build_prediction_model(&n).is_err());
        let a = DMatrix::from_element(4, 4, 0.25);
        assert!((spectral_radius(&a) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn swap_example_closed_form() {
        let n = net(swap3(), DVector::from_element(3, 0.5), 1.0, DVector::from_vec(vec![0.2, 0.8, 0.5]));
        let m = build_prediction_model(&n).unwrap();
        assert!((m.spectral_radius - 0.5).abs() < 1e-10);
        let expected = [[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.v[(i, j)] - expected[i][j]).abs() < 1e-14);
            }
        }
        let mu = mean_step(&DVector::from_vec(vec![0.0, 1.0, 0.5]), &m, n.eta0(), &DVector::zeros(3));
        assert!((mu[0] - 0.6).abs() < 1e-15 && (mu[1] - 0.4).abs() < 1e-15);

        let xs = steady_state(&m, n.eta0(), &DVector::zeros(3)).unwrap();
        let mut it = DVector::zeros(3);
        for _ in 0..200 {
            it = mean_step(&it, &m, n.eta0(), &DVector::zeros(3));
        }
        assert!((xs[0] - 0.4).abs() < 1e-12 && (xs[1] - 0.6).abs() < 1e-12);
        assert!((&xs - &it).amax() < 1e-12);
    }

    #[test]
    fn stubborn_mean_step_preserves_consensus() {
        let p = row_normalize(&DMatrix::from_fn(4, 4, |i, j| ((i + 2 * j) % 3) as f64));
        let n = net(p, DVector::from_element(4, 1.0), 0.6, DVector::from_element(4, 0.3));
        // The model is unstable here; assemble the transition by hand.
        let pbar = DMatrix::identity(4, 4) * 0.4 + n.influence() * 0.6;
        let m = PredictionModel {
            a: pbar.clone(),
            pbar,
            b: DVector::zeros(4),
            v: DMatrix::zeros(4, 4),
            spectral_radius: 1.0,
            reachable: false,
        };
        let c = DVector::from_element(4, 0.37);
        let next = mean_step(&c, &m, n.eta0(), &DVector::zeros(4));
        assert!((next - c).amax() < 1e-15);
        assert!(steady_state(&m, n.eta0(), &DVector::zeros(4)).is_err());
    }

    #[test]
    fn no_imitation_steady_state_is_bias_plus_input() {
        let p = row_normalize(&DMatrix::from_element(5, 5, 1.0));
        let eta0 = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let u = DVector::from_element(5, 0.05);
        for alpha_lambda in [(0.0, 0.7), (0.3, 0.0)] {
            let n = net(p.clone(), DVector::from_element(5, alpha_lambda.1), alpha_lambda.0, eta0.clone());
            let m = build_prediction_model(&n).unwrap();
            let xs = steady_state(&m, &eta0, &u).unwrap();
            assert!((xs - (&eta0 + &u)).amax() < 1e-14);
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 8;
        let p = row_normalize(&DMatrix::from_fn(n, n, |_, _| rng.random::<f64>()));
        let lambda = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let eta0 = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let net = net(p, lambda, 0.4, eta0.clone());
        let m = build_prediction_model(&net).unwrap();
        let u = DVector::from_element(n, 0.02);
        let xs = steady_state(&m, &eta0, &u).unwrap();
        assert!((mean_step(&xs, &m, &eta0, &u) - &xs).amax() <= 1e-10);
        let x0 = steady_state(&m, &eta0, &DVector::zeros(n)).unwrap();
        assert!(((&xs - &x0) - &m.v * &u).amax() <= 1e-10);
        for i in 0..n {
            assert!((m.v.row(i).sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn cesaro_examples() {
        let c = DVector::from_element(2, 0.3);
        let mut avg = DVector::zeros(2);
        for t in 0..10 {
            avg = cesaro_update(&avg, t, &c);
            assert!((&avg - &c).amax() < 1e-15);
        }
        let mut avg = DVector::zeros(1);
        for t in 0..1000 {
            avg = cesaro_update(&avg, t, &DVector::from_element(1, (t % 2) as f64));
            if t % 2 == 1 {
                assert!((avg[0] - 0.5).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn estimator_examples() {
        let prior = DVector::from_element(2, 0.2);
        let mut est = EstimatorState::new(prior.clone());
        assert_eq!(est.mu_hat(), prior);
        for _ in 0..5 {
            est.update(&DVector::from_element(2, 1.0));
        }
        assert_eq!(est.mu_hat(), DVector::from_element(2, 1.0));

        let est = estimator_update(EstimatorState::new(prior.clone()), &DVector::from_element(2, 1.0));
        let est = estimator_update(est, &DVector::zeros(2));
        assert_eq!(est.mu_hat(), DVector::from_element(2, 0.5));
        assert_eq!(est.count(), 2);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut est = EstimatorState::new(DVector::zeros(1));
        for _ in 0..10_000 {
            est.update(&DVector::from_element(1, f64::from(u8::from(rng.random::<f64>() < 0.3))));
        }
        assert!((est.mu_hat()[0] - 0.3).abs() <= 0.014);
    }

    #[test]
    fn windowed_estimator_forgets() {
        let mut est = EstimatorState::windowed(DVector::zeros(1), 3);
        for y in [1.0, 1.0, 1.0, 0.0, 0.0, 0.0] {
            est.update(&DVector::from_element(1, y));
        }
        assert_eq!(est.mu_hat()[0], 0.0);
        assert_eq!(est.count(), 3);
    }

    proptest! {
        #[test]
        fn power_iteration_matches_eigensolve(seed in any::<u64>(), n in 3usize..20, sparse in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let adj = DMatrix::from_fn(n, n, |_, _| {
                if sparse && rng.random::<f64>() < 0.7 { 0.0 } else { rng.random::<f64>() }
            });
            let p = row_normalize(&adj);
            let lambda = DVector::from_fn(n, |_, _| rng.random::<f64>());
            let alpha: f64 = rng.random();
            let net = net(p, lambda, alpha, DVector::from_element(n, 0.5));
            let m = build_prediction_model(&net).unwrap();
            prop_assert!((m.spectral_radius - eigen_radius(&m.a)).abs() <= 1e-8);
            prop_assert!(m.spectral_radius < 1.0);
            for i in 0..n {
                prop_assert!((m.pbar.row(i).sum() - 1.0).abs() <= 1e-12);
                prop_assert!((m.v.row(i).sum() - 1.0).abs() <= 1e-10);
            }
        }

        #[test]
        fn estimator_tracks_sum(bits in proptest::collection::vec(any::<bool>(), 1..200)) {
            let mut est = EstimatorState::new(DVector::from_element(1, 0.5));
            for &b in &bits {
                est.update(&DVector::from_element(1, f64::from(u8::from(b))));
            }
            let ones = bits.iter().filter(|&&b| b).count() as f64;
            prop_assert_eq!(est.running_sum()[0], ones);
            prop_assert!((est.mu_hat()[0] * bits.len() as f64 - ones).abs() < 1e-9);
        }
    }
}
