use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use super::sweep::{build_mpc, make_mpc_policy, run_seed};
use super::{
    mean_std, median, network_from_graph, relative_improvement, run_social_cost, ExperimentConfig, SweepOptions,
};
use crate::dynamics::{simulate, Policy, SimulationSetup, ZeroPolicy};
use crate::error::{ErrorClass, Result};
use crate::graph::ModularGraphSpec;
use crate::policies::{MpcMode, PolicyWeights};
use crate::rng::{derive_seed, Stream};

/// Receding-horizon versus no control on one graph at one imitation probability.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyRecord {
    pub alpha: f64,
    pub gamma: f64,
    pub graph: usize,
    pub graph_seed: u64,
    pub gamma_ol: f64,
    pub gamma_mpc: f64,
    pub relative_improvement: f64,
    pub infeasible_steps: usize,
    /// Set when the controller could not complete the runs; the record then
    /// carries NaN costs.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TopologyReport {
    pub seed: u64,
    pub records: Vec<TopologyRecord>,
}

impl TopologyReport {
    /// Completed relative improvements for one (alpha, gamma) pair.
    pub fn improvements(&self, alpha: f64, gamma: f64) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.alpha == alpha && r.gamma == gamma && r.aborted.is_none())
            .map(|r| r.relative_improvement)
            .collect()
    }

    pub fn median(&self, alpha: f64, gamma: f64) -> Option<f64> {
        median(&self.improvements(alpha, gamma))
    }

    /// One row per (alpha, gamma, graph).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# seed={}", self.seed)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "alpha",
            "gamma",
            "graph",
            "graph_seed",
            "gamma_ol",
            "gamma_mpc",
            "relative_improvement",
            "infeasible_steps",
            "aborted",
        ])?;
        for r in &self.records {
            w.write_record([
                r.alpha.to_string(),
                r.gamma.to_string(),
                r.graph.to_string(),
                r.graph_seed.to_string(),
                r.gamma_ol.to_string(),
                r.gamma_mpc.to_string(),
                r.relative_improvement.to_string(),
                r.infeasible_steps.to_string(),
                r.aborted.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (alpha, gamma) with the median and mean improvement.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# seed={}", self.seed)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "gamma", "graphs", "median", "mean", "std"])?;
        let mut keys: Vec<(f64, f64)> = Vec::new();
        for r in &self.records {
            if !keys.contains(&(r.alpha, r.gamma)) {
                keys.push((r.alpha, r.gamma));
            }
        }
        for (alpha, gamma) in keys {
            let xs = self.improvements(alpha, gamma);
            let (mean, std) = if xs.is_empty() { (f64::NAN, None) } else { mean_std(&xs) };
            w.write_record([
                alpha.to_string(),
                gamma.to_string(),
                xs.len().to_string(),
                median(&xs).map(|m| m.to_string()).unwrap_or_default(),
                mean.to_string(),
                std.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `topology.csv` and `topology_summary.csv` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(BufWriter::new(File::create(dir.join("topology.csv"))?))?;
        self.write_summary_csv(BufWriter::new(File::create(dir.join("topology_summary.csv"))?))?;
        Ok(())
    }
}

fn graph_seed(root: u64, gi: usize, graph: usize) -> u64 {
    derive_seed(root, Stream::Network, (((gi as u64) + 1) << 32) | graph as u64)
}

fn study_graph(cfg: &ExperimentConfig, gi: usize, gamma: f64, graph: usize) -> Result<Vec<TopologyRecord>> {
    let sw = &cfg.sweep;
    let n = cfg.net.n;
    let seed = graph_seed(sw.seed, gi, graph);
    let spec = ModularGraphSpec { n, n_clusters: cfg.net.clusters, density: cfg.net.density, gamma };
    let x0 = DVector::from_element(n, sw.topology_x0);
    let lambda = DVector::from_element(n, sw.topology_lambda);
    let base = network_from_graph(&spec, seed, lambda, sw.topology_alphas[0], x0.clone(), cfg.net.sigma)?;
    let mut out = Vec::with_capacity(sw.topology_alphas.len());
    for (ai, &alpha) in sw.topology_alphas.iter().enumerate() {
        let net = base.with_alpha(alpha)?;
        let weights = PolicyWeights::scaled_identity(n, sw.topology_r, cfg.policy.beta)?;
        let ctrl = build_mpc(cfg, &net, &weights, MpcMode::Estimated)?;
        let cell = (1u64 << 40) | ((gi as u64) << 32) | ((graph as u64) << 8) | ai as u64;
        let (mut ol, mut closed, mut infeasible) = (Vec::new(), Vec::new(), 0);
        let mut aborted = None;
        for run in 0..sw.topology_monte_carlo {
            let setup = SimulationSetup {
                x0: x0.clone(),
                horizon: sw.t_sim,
                seed: run_seed(sw.seed, cell, run),
                beta: cfg.policy.beta,
            };
            let traj = simulate(&net, &mut ZeroPolicy::new(n), &setup)?;
            ol.push(run_social_cost(&traj, sw.t_sim)?);
            let mut policy = make_mpc_policy(cfg, &ctrl, net.eta0());
            match simulate(&net, &mut policy, &setup) {
                Ok(traj) => {
                    infeasible += policy.infeasible_steps();
                    closed.push(run_social_cost(&traj, sw.t_sim)?);
                }
                Err(e) if e.class() == ErrorClass::Infeasible => {
                    aborted = Some(format!("run {run}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let record = match aborted {
            None => {
                let gamma_ol = mean_std(&ol).0;
                let gamma_mpc = mean_std(&closed).0;
                TopologyRecord {
                    alpha,
                    gamma,
                    graph,
                    graph_seed: seed,
                    gamma_ol,
                    gamma_mpc,
                    relative_improvement: relative_improvement(gamma_mpc, gamma_ol)?,
                    infeasible_steps: infeasible,
                    aborted: None,
                }
            }
            Some(reason) => TopologyRecord {
                alpha,
                gamma,
                graph,
                graph_seed: seed,
                gamma_ol: f64::NAN,
                gamma_mpc: f64::NAN,
                relative_improvement: f64::NAN,
                infeasible_steps: infeasible,
                aborted: Some(reason),
            },
        };
        out.push(record);
    }
    Ok(out)
}

/// Relative improvement of the estimated-mean controller over no control on
/// fresh graphs for every configured edge placement probability, with
/// homogeneous self-weights and initial inclinations.
pub fn run_topology_study(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<TopologyReport> {
    cfg.validate()?;
    let sw = &cfg.sweep;
    let jobs: Vec<(usize, f64, usize)> =
        sw.gammas.iter().enumerate().flat_map(|(gi, &g)| (0..sw.graphs_per_gamma).map(move |k| (gi, g, k))).collect();
    let results: Vec<Result<Vec<TopologyRecord>>> =
        opts.install(|| jobs.par_iter().map(|&(gi, g, k)| study_graph(cfg, gi, g, k)).collect())?;
    let mut records = Vec::new();
    for res in results {
        records.extend(res?);
    }
    records.sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.gamma.total_cmp(&b.gamma)).then(a.graph.cmp(&b.graph)));
    Ok(TopologyReport { seed: sw.seed, records })
}
