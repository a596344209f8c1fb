//! Experiment configuration. The file is TOML with three sections, usually
//! written as flat dotted keys:
//!
//! ```toml
//! net.n = 100
//! net.clusters = 7
//! policy.r = [0.05, 0.5, 1.0, 2.5, 5.0]
//! sweep.alphas = [0.25, 0.5, 0.75, 1.0]
//! ```
//!
//! Every key has a default; an empty file describes the reference study.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policies::DEFAULT_SOFT_PENALTY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub n: usize,
    pub clusters: usize,
    pub density: f64,
    /// Probability that an edge is placed inside a cluster.
    pub gamma: f64,
    /// Graph seed; derived from the root seed when absent.
    pub seed: Option<u64>,
    /// Constant self-weight; drawn uniformly on [0, 1] per node when absent.
    pub lambda: Option<f64>,
    pub sigma: f64,
    /// Load the network from this file instead of generating it. The file's
    /// bias vector is then also used as the initial condition.
    pub file: Option<PathBuf>,
    pub favorable: usize,
    pub favorable_level: f64,
    pub unfavorable: [f64; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n: 100,
            clusters: 7,
            density: 0.05,
            gamma: 0.9,
            seed: None,
            lambda: None,
            sigma: 0.1,
            file: None,
            favorable: 10,
            favorable_level: 0.7,
            unfavorable: [0.0, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    NoControl,
    Mfccp,
    Mbccp,
    /// Receding horizon fed the running acceptance average.
    Mpc,
    /// Receding horizon fed the exact mean.
    MpcOracle,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::NoControl => "no-control",
            PolicyKind::Mfccp => "mfccp",
            PolicyKind::Mbccp => "mbccp",
            PolicyKind::Mpc => "mpc",
            PolicyKind::MpcOracle => "mpc-oracle",
        }
    }

    /// Whether the policy depends on the input weight `r`.
    pub fn uses_weights(self) -> bool {
        matches!(self, PolicyKind::Mbccp | PolicyKind::Mpc | PolicyKind::MpcOracle)
    }

    pub fn is_mpc(self) -> bool {
        matches!(self, PolicyKind::Mpc | PolicyKind::MpcOracle)
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PolicyKind::NoControl, PolicyKind::Mfccp, PolicyKind::Mbccp, PolicyKind::Mpc, PolicyKind::MpcOracle]
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| invalid(format!("unknown policy kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalKind {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kinds: Vec<PolicyKind>,
    pub beta: f64,
    /// Prediction horizon of the receding-horizon controller.
    pub horizon: usize,
    /// Input weight grid, `R = r I`.
    pub r: Vec<f64>,
    pub terminal: TerminalKind,
    /// Penalty of the soft terminal, also used when retrying infeasible hard steps.
    pub soft_penalty: f64,
    /// Retry infeasible hard-terminal steps with the soft terminal.
    pub fallback: bool,
    /// A cell is abandoned once this fraction of its steps needed the fallback.
    pub max_infeasible_rate: f64,
    /// Sliding window for the acceptance average; full history when absent.
    pub estimator_window: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kinds: vec![PolicyKind::NoControl, PolicyKind::Mfccp, PolicyKind::Mbccp, PolicyKind::Mpc],
            beta: 10.0,
            horizon: 5,
            r: vec![0.05, 0.5, 1.0, 2.5, 5.0],
            terminal: TerminalKind::Hard,
            soft_penalty: DEFAULT_SOFT_PENALTY,
            fallback: true,
            max_infeasible_rate: 1.0,
            estimator_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Root seed for every random stream.
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub t_sim: usize,
    pub monte_carlo: usize,
    /// Edge placement probabilities for the topology study.
    pub gammas: Vec<f64>,
    pub graphs_per_gamma: usize,
    pub topology_alphas: Vec<f64>,
    pub topology_r: f64,
    pub topology_lambda: f64,
    pub topology_x0: f64,
    /// Noise realizations averaged per graph in the topology study.
    pub topology_monte_carlo: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            alphas: vec![0.25, 0.5, 0.75, 1.0],
            t_sim: 20,
            monte_carlo: 20,
            gammas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            graphs_per_gamma: 50,
            topology_alphas: vec![0.25, 0.75],
            topology_r: 1.0,
            topology_lambda: 0.9,
            topology_x0: 0.1,
            topology_monte_carlo: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub policy: PolicyConfig,
    pub sweep: SweepConfig,
}

fn unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in [0, 1], got {x}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let net = &self.net;
        if net.file.is_none() {
            if net.n < 3 {
                return Err(invalid(format!("net.n must be at least 3, got {}", net.n)));
            }
            if net.favorable > net.n {
                return Err(invalid(format!("net.favorable = {} exceeds net.n = {}", net.favorable, net.n)));
            }
        }
        unit("net.gamma", net.gamma)?;
        unit("net.favorable_level", net.favorable_level)?;
        if let Some(l) = net.lambda {
            unit("net.lambda", l)?;
        }
        let [lo, hi] = net.unfavorable;
        unit("net.unfavorable", lo)?;
        unit("net.unfavorable", hi)?;
        if lo > hi {
            return Err(invalid(format!("net.unfavorable range [{lo}, {hi}] is empty")));
        }
        if !(net.sigma >= 0.0 && net.sigma.is_finite()) {
            return Err(invalid(format!("net.sigma must be finite and >= 0, got {}", net.sigma)));
        }

        let pol = &self.policy;
        if pol.kinds.is_empty() {
            return Err(invalid("policy.kinds is empty"));
        }
        if !(pol.beta >= 0.0 && pol.beta.is_finite()) {
            return Err(invalid(format!("policy.beta must be finite and >= 0, got {}", pol.beta)));
        }
        if pol.horizon < 2 {
            return Err(invalid(format!("policy.horizon must be at least 2, got {}", pol.horizon)));
        }
        if pol.r.is_empty() {
            return Err(invalid("policy.r is empty"));
        }
        for &r in pol.r.iter().chain(std::iter::once(&self.sweep.topology_r)) {
            if !(r > 0.0 && r.is_finite()) {
                return Err(invalid(format!("input weight r must be positive, got {r}")));
            }
        }
        if !(pol.soft_penalty > 0.0 && pol.soft_penalty.is_finite()) {
            return Err(invalid(format!("policy.soft_penalty must be positive, got {}", pol.soft_penalty)));
        }
        if !(pol.max_infeasible_rate >= 0.0 && pol.max_infeasible_rate <= 1.0) {
            return Err(invalid(format!(
                "policy.max_infeasible_rate must lie in [0, 1], got {}",
                pol.max_infeasible_rate
            )));
        }
        if pol.estimator_window == Some(0) {
            return Err(invalid("policy.estimator_window must be at least 1"));
        }

        let sw = &self.sweep;
        if sw.t_sim < 1 {
            return Err(invalid("sweep.t_sim must be at least 1"));
        }
        if sw.monte_carlo < 1 || sw.topology_monte_carlo < 1 {
            return Err(invalid("Monte Carlo counts must be at least 1"));
        }
        if sw.alphas.is_empty() {
            return Err(invalid("sweep.alphas is empty"));
        }
        for &a in sw.alphas.iter().chain(&sw.topology_alphas) {
            unit("alpha", a)?;
        }
        for &g in &sw.gammas {
            unit("sweep.gammas", g)?;
        }
        unit("sweep.topology_lambda", sw.topology_lambda)?;
        unit("sweep.topology_x0", sw.topology_x0)?;
        Ok(())
    }
}
