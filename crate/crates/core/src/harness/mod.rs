//! Monte Carlo experiment orchestration: matched-seed policy comparisons,
//! social and control cost KPIs, parameter sweeps and the topology study.

mod config;
mod sweep;
mod topology;

pub use config::{ExperimentConfig, NetConfig, PolicyConfig, PolicyKind, SweepConfig, TerminalKind};
pub use sweep::{build_policy, run_sweep, CellSummary, KpiReport, RunRecord, SweepOptions};
pub use topology::{run_topology_study, TopologyRecord, TopologyReport};

use std::io::BufReader;

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dynamics::Trajectory;
use crate::equilibrium::{mean_step, PredictionModel};
use crate::error::{invalid, Error, Result};
use crate::graph::{
    check_influence_reachability, generate_modular_graph, read_network, row_normalize, ModularGraphSpec, SocialNetwork,
};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Initial inclinations: `favorable` randomly chosen nodes at
/// `favorable_level`, the rest uniform on `unfavorable`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub n: usize,
    pub favorable: usize,
    pub favorable_level: f64,
    pub unfavorable: (f64, f64),
}

impl PopulationSpec {
    /// Every node at `level`.
    pub fn uniform(n: usize, level: f64) -> Self {
        Self { n, favorable: n, favorable_level: level, unfavorable: (level, level) }
    }
}

pub fn init_population(spec: &PopulationSpec, seed: u64) -> Result<DVector<f64>> {
    let PopulationSpec { n, favorable, favorable_level, unfavorable: (lo, hi) } = *spec;
    if favorable > n {
        return Err(invalid(format!("{favorable} favorable nodes requested out of {n}")));
    }
    if !(0.0..=1.0).contains(&favorable_level) || !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(invalid("population levels must lie in [0, 1]"));
    }
    let mut rng = stream_rng(seed, Stream::Population, 0);
    let mut x = DVector::from_fn(n, |_, _| if hi > lo { rng.random_range(lo..=hi) } else { lo });
    for v in index::sample(&mut rng, n, favorable) {
        x[v] = favorable_level;
    }
    Ok(x)
}

/// Network and initial condition described by `cfg.net`, with imitation
/// probability `alpha`. A generated network uses the initial condition as its
/// bias vector.
pub fn build_network(cfg: &ExperimentConfig, alpha: f64) -> Result<(SocialNetwork, DVector<f64>)> {
    let net_cfg = &cfg.net;
    let root = cfg.sweep.seed;
    if let Some(path) = &net_cfg.file {
        let file = std::fs::File::open(path)?;
        let net = read_network(BufReader::new(file))?.with_alpha(alpha)?;
        if !check_influence_reachability(net.influence(), net.lambda()) {
            return Err(Error::Unreachable(format!(
                "{}: some node cannot reach a node with lambda < 1",
                path.display()
            )));
        }
        let x0 = net.eta0().clone();
        return Ok((net, x0));
    }
    let pop = PopulationSpec {
        n: net_cfg.n,
        favorable: net_cfg.favorable,
        favorable_level: net_cfg.favorable_level,
        unfavorable: (net_cfg.unfavorable[0], net_cfg.unfavorable[1]),
    };
    let x0 = init_population(&pop, root)?;
    let graph_seed = net_cfg.seed.unwrap_or_else(|| derive_seed(root, Stream::Network, 0));
    let spec =
        ModularGraphSpec { n: net_cfg.n, n_clusters: net_cfg.clusters, density: net_cfg.density, gamma: net_cfg.gamma };
    let lambda = match net_cfg.lambda {
        Some(l) => DVector::from_element(net_cfg.n, l),
        None => {
            let mut rng = stream_rng(graph_seed, Stream::Network, 1);
            DVector::from_fn(net_cfg.n, |_, _| rng.random::<f64>())
        }
    };
    let net = network_from_graph(&spec, graph_seed, lambda, alpha, x0.clone(), net_cfg.sigma)?;
    Ok((net, x0))
}

/// Generates a clustered graph and wraps it with the given parameters,
/// rejecting networks whose mean dynamics have no stubborn anchor.
pub fn network_from_graph(
    spec: &ModularGraphSpec,
    seed: u64,
    lambda: DVector<f64>,
    alpha: f64,
    eta0: DVector<f64>,
    sigma: f64,
) -> Result<SocialNetwork> {
    let graph = generate_modular_graph(spec, seed)?;
    let p = row_normalize(&graph.adjacency());
    if !check_influence_reachability(&p, &lambda) {
        return Err(Error::Unreachable("some node cannot reach a node with lambda < 1".into()));
    }
    let n = spec.n;
    SocialNetwork::new(p, lambda, alpha, eta0, DVector::from_element(n, sigma))?
        .with_clusters(graph.clusters().to_vec())
}

/// Rejection count of one run: `sum_{t < t_sim} ||1 - y(t)||^2`.
pub fn run_social_cost(traj: &Trajectory, t_sim: usize) -> Result<f64> {
    if traj.ys.len() < t_sim {
        return Err(invalid(format!("trajectory has {} steps, need {t_sim}", traj.ys.len())));
    }
    Ok(traj.ys[..t_sim].iter().map(|y| y.iter().map(|v| (1.0 - v).powi(2)).sum::<f64>()).sum())
}

/// Social cost averaged over Monte Carlo runs.
pub fn social_cost(trajectories: &[Trajectory], t_sim: usize) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(invalid("social cost needs at least one trajectory"));
    }
    let n = trajectories[0].n();
    let mut total = 0.0;
    for traj in trajectories {
        if traj.n() != n {
            return Err(invalid("trajectories come from networks of different sizes"));
        }
        total += run_social_cost(traj, t_sim)?;
    }
    Ok(total / trajectories.len() as f64)
}

/// `sum_{t < t_sim} ||u(t)||^2`.
pub fn control_cost(traj: &Trajectory, t_sim: usize) -> f64 {
    traj.us.iter().take(t_sim).map(|u| u.norm_squared()).sum()
}

pub fn relative_improvement(gamma_policy: f64, gamma_ol: f64) -> Result<f64> {
    if !(gamma_ol > 0.0 && gamma_ol.is_finite()) {
        return Err(invalid(format!("open-loop social cost must be positive, got {gamma_ol}")));
    }
    Ok((gamma_policy - gamma_ol).abs() / gamma_ol)
}

/// Expected social cost of an open-loop input sequence, computed from the
/// propagated mean: `E||1 - y||^2 = ||1 - mu||^2 + <mu, 1 - mu>`.
pub fn expected_social_cost(
    model: &PredictionModel,
    eta0: &DVector<f64>,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> f64 {
    let mut mu = x0.clone();
    let mut total = 0.0;
    for u in inputs {
        total += mu.iter().map(|m| (1.0 - m).powi(2) + m * (1.0 - m)).sum::<f64>();
        mu = mean_step(&mu, model, eta0, u);
    }
    total
}

/// Sample mean and, with at least two samples, the unbiased standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Welch's unequal-variance t-test of `mean(a) = mean(b)`.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("Welch test needs at least two samples per group"));
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let va = sa.unwrap_or(0.0).powi(2) / a.len() as f64;
    let vb = sb.unwrap_or(0.0).powi(2) / b.len() as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        let (t, p) = if ma == mb { (0.0, 1.0) } else { ((ma - mb).signum() * f64::INFINITY, 0.0) };
        return Ok(WelchTest { t, df: f64::INFINITY, p });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(WelchTest { t, df, p })
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests;
