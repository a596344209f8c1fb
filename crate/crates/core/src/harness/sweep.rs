use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;

use super::{build_network, control_cost, mean_std, relative_improvement, run_social_cost, welch_test};
use super::{ExperimentConfig, PolicyKind, TerminalKind};
use crate::dynamics::{simulate, write_trajectory_csv, ConstantPolicy, Policy, SimulationSetup, ZeroPolicy};
use crate::equilibrium::EstimatorState;
use crate::error::{Error, ErrorClass, Result};
use crate::graph::{write_network, SocialNetwork};
use crate::policies::{mbccp, mfccp, mpc_setup, MpcController, MpcMode, MpcPolicy, PolicyWeights, TerminalMode};
use crate::rng::{derive_seed, Stream};

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker threads; the global pool when absent.
    pub jobs: Option<usize>,
    /// Write one trajectory CSV per run into this directory.
    pub trajectory_dir: Option<PathBuf>,
}

impl SweepOptions {
    pub(super) fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.jobs {
            Some(j) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(j.max(1))
                    .build()
                    .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub policy: PolicyKind,
    pub alpha: f64,
    pub r: f64,
    pub run: usize,
    pub seed: u64,
    pub gamma_social: f64,
    pub delta_u: f64,
    pub clip_rate: f64,
    pub infeasible_steps: usize,
    pub noise_checksum: u64,
    pub imitation_checksum: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub policy: PolicyKind,
    pub alpha: f64,
    pub r: f64,
    pub runs: usize,
    pub gamma_mean: f64,
    pub gamma_std: Option<f64>,
    pub delta_u_mean: f64,
    pub delta_u_std: Option<f64>,
    pub clip_rate_mean: f64,
    pub infeasible_steps: usize,
    /// Against the no-control mean of the same cell.
    pub relative_improvement: Option<f64>,
    /// Two-sided Welch p-value against the no-control runs of the same cell.
    pub welch_p: Option<f64>,
    /// Why the cell stopped early, if it did.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct KpiReport {
    pub seed: u64,
    pub t_sim: usize,
    /// Network at the first imitation probability of the sweep.
    pub network: SocialNetwork,
    pub runs: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
}

/// Run-seed key: cells differ in their noise, policies within a cell do not.
pub(super) fn run_seed(root: u64, cell: u64, run: usize) -> u64 {
    derive_seed(root, Stream::Run, (cell << 24) | run as u64)
}

struct Cell {
    index: u64,
    alpha: f64,
    r: f64,
    net: SocialNetwork,
    x0: DVector<f64>,
    u_mf: Option<DVector<f64>>,
    u_mb: Option<DVector<f64>>,
    mpc: Option<MpcController>,
    mpc_oracle: Option<MpcController>,
}

struct Unit<'a> {
    cell: &'a Cell,
    kind: PolicyKind,
}

struct UnitResult {
    records: Vec<RunRecord>,
    aborted: Option<String>,
}

fn terminal_mode(cfg: &ExperimentConfig) -> TerminalMode {
    match cfg.policy.terminal {
        TerminalKind::Hard => TerminalMode::Hard,
        TerminalKind::Soft => TerminalMode::Soft(cfg.policy.soft_penalty),
    }
}

/// Builds the configured policy for one run.
pub(super) fn make_mpc_policy(cfg: &ExperimentConfig, ctrl: &MpcController, prior: &DVector<f64>) -> MpcPolicy {
    let mut policy = MpcPolicy::new(ctrl.clone(), prior.clone());
    if let (Some(w), MpcMode::Estimated) = (cfg.policy.estimator_window, ctrl.mode()) {
        policy = policy.with_estimator(EstimatorState::windowed(prior.clone(), w));
    }
    if cfg.policy.terminal == TerminalKind::Hard && cfg.policy.fallback {
        policy = policy.with_fallback(cfg.policy.soft_penalty);
    }
    policy
}

pub(super) fn build_mpc(
    cfg: &ExperimentConfig,
    net: &SocialNetwork,
    weights: &PolicyWeights,
    mode: MpcMode,
) -> Result<MpcController> {
    mpc_setup(net, weights, cfg.policy.horizon, mode, terminal_mode(cfg))
}

fn build_cell(cfg: &ExperimentConfig, kinds: &[PolicyKind], index: u64, alpha: f64, r: f64) -> Result<Cell> {
    let (net, x0) = build_network(cfg, alpha)?;
    build_cell_for(cfg, kinds, net, x0, index, r)
}

fn build_cell_for(
    cfg: &ExperimentConfig,
    kinds: &[PolicyKind],
    net: SocialNetwork,
    x0: DVector<f64>,
    index: u64,
    r: f64,
) -> Result<Cell> {
    let alpha = net.alpha();
    let beta = cfg.policy.beta;
    let weights = PolicyWeights::scaled_identity(net.n(), r, beta)?;
    let has = |k: PolicyKind| kinds.contains(&k);
    let u_mf = if has(PolicyKind::Mfccp) { Some(mfccp(&net, beta)?) } else { None };
    let mpc = if has(PolicyKind::Mpc) { Some(build_mpc(cfg, &net, &weights, MpcMode::Estimated)?) } else { None };
    let mpc_oracle =
        if has(PolicyKind::MpcOracle) { Some(build_mpc(cfg, &net, &weights, MpcMode::Oracle)?) } else { None };
    let u_mb = if has(PolicyKind::Mbccp) {
        match mpc.as_ref().or(mpc_oracle.as_ref()) {
            Some(ctrl) => Some(ctrl.u_mb().clone()),
            None => Some(mbccp(&net, &weights)?.u),
        }
    } else {
        None
    };
    Ok(Cell { index, alpha, r, net, x0, u_mf, u_mb, mpc, mpc_oracle })
}

fn make_policy(cfg: &ExperimentConfig, cell: &Cell, kind: PolicyKind) -> Box<dyn Policy> {
    let missing = "cell was built for this policy";
    match kind {
        PolicyKind::NoControl => Box::new(ZeroPolicy::new(cell.net.n())),
        PolicyKind::Mfccp => Box::new(ConstantPolicy::new("mfccp", cell.u_mf.clone().expect(missing))),
        PolicyKind::Mbccp => Box::new(ConstantPolicy::new("mbccp", cell.u_mb.clone().expect(missing))),
        PolicyKind::Mpc => Box::new(make_mpc_policy(cfg, cell.mpc.as_ref().expect(missing), cell.net.eta0())),
        PolicyKind::MpcOracle => {
            Box::new(make_mpc_policy(cfg, cell.mpc_oracle.as_ref().expect(missing), cell.net.eta0()))
        }
    }
}

/// Builds one policy of the given kind for `net`, configured as in a sweep
/// cell with input weight `r`.
pub fn build_policy(cfg: &ExperimentConfig, net: &SocialNetwork, kind: PolicyKind, r: f64) -> Result<Box<dyn Policy>> {
    let cell = build_cell_for(cfg, &[kind], net.clone(), net.eta0().clone(), 0, r)?;
    Ok(make_policy(cfg, &cell, kind))
}

fn trajectory_path(dir: &Path, kind: PolicyKind, alpha: f64, r: f64, run: usize) -> PathBuf {
    dir.join(format!("traj_{}_alpha{alpha}_r{r}_run{run}.csv", kind.label()))
}

fn run_unit(cfg: &ExperimentConfig, unit: &Unit<'_>, opts: &SweepOptions) -> Result<UnitResult> {
    let cell = unit.cell;
    let t_sim = cfg.sweep.t_sim;
    let mc = cfg.sweep.monte_carlo;
    let allowed = cfg.policy.max_infeasible_rate * (mc * t_sim) as f64;
    let mut records = Vec::with_capacity(mc);
    let mut infeasible_total = 0usize;
    let mut aborted = None;
    for run in 0..mc {
        let seed = run_seed(cfg.sweep.seed, cell.index, run);
        let setup = SimulationSetup { x0: cell.x0.clone(), horizon: t_sim, seed, beta: cfg.policy.beta };
        let mut policy = make_policy(cfg, cell, unit.kind);
        let traj = match simulate(&cell.net, policy.as_mut(), &setup) {
            Ok(traj) => traj,
            Err(e) if e.class() == ErrorClass::Infeasible && unit.kind.is_mpc() => {
                aborted = Some(format!("run {run}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(dir) = &opts.trajectory_dir {
            let file = File::create(trajectory_path(dir, unit.kind, cell.alpha, cell.r, run))?;
            write_trajectory_csv(&traj, BufWriter::new(file))?;
        }
        infeasible_total += traj.infeasible_steps;
        records.push(RunRecord {
            policy: unit.kind,
            alpha: cell.alpha,
            r: cell.r,
            run,
            seed,
            gamma_social: run_social_cost(&traj, t_sim)?,
            delta_u: control_cost(&traj, t_sim),
            clip_rate: traj.clip_rate(),
            infeasible_steps: traj.infeasible_steps,
            noise_checksum: traj.noise_checksum,
            imitation_checksum: traj.imitation_checksum,
        });
        if infeasible_total as f64 > allowed {
            aborted = Some(format!(
                "{infeasible_total} infeasible terminal steps exceed the allowed rate {}",
                cfg.policy.max_infeasible_rate
            ));
            break;
        }
    }
    Ok(UnitResult { records, aborted })
}

/// Policies of the sweep in configured order, with the no-control baseline first.
pub(super) fn sweep_kinds(cfg: &ExperimentConfig) -> Vec<PolicyKind> {
    let mut kinds = vec![PolicyKind::NoControl];
    for &k in &cfg.policy.kinds {
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    kinds
}

/// Runs every (alpha, r, policy) cell of the configuration with matched
/// random streams across policies.
pub fn run_sweep(cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<KpiReport> {
    cfg.validate()?;
    if let Some(dir) = &opts.trajectory_dir {
        std::fs::create_dir_all(dir)?;
    }
    let kinds = sweep_kinds(cfg);
    let mut cells = Vec::new();
    for (ai, &alpha) in cfg.sweep.alphas.iter().enumerate() {
        for (ri, &r) in cfg.policy.r.iter().enumerate() {
            let index = ((ai as u64) << 16) | ri as u64;
            cells.push(build_cell(cfg, &kinds, index, alpha, r)?);
        }
    }
    let units: Vec<Unit<'_>> =
        cells.iter().flat_map(|cell| kinds.iter().map(move |&kind| Unit { cell, kind })).collect();
    let results: Vec<Result<UnitResult>> =
        opts.install(|| units.par_iter().map(|u| run_unit(cfg, u, opts)).collect())?;

    let mut runs = Vec::new();
    let mut aborted = Vec::new();
    for res in results {
        let res = res?;
        runs.extend(res.records);
        aborted.push(res.aborted);
    }
    check_matched_streams(&runs)?;
    let summaries =
        units.iter().zip(aborted).map(|(unit, abort)| summarize(&runs, unit.cell, unit.kind, abort)).collect();
    let network = cells.into_iter().next().expect("at least one cell").net;
    Ok(KpiReport { seed: cfg.sweep.seed, t_sim: cfg.sweep.t_sim, network, runs, cells: summaries })
}

fn check_matched_streams(runs: &[RunRecord]) -> Result<()> {
    let mut seen: BTreeMap<u64, (u64, u64, PolicyKind)> = BTreeMap::new();
    for rec in runs {
        let sums = (rec.noise_checksum, rec.imitation_checksum);
        match seen.get(&rec.seed) {
            Some(&(noise, imitation, other)) if (noise, imitation) != sums => {
                return Err(Error::Numerical(format!(
                    "random streams of {} and {} differ for run seed {}",
                    other, rec.policy, rec.seed
                )));
            }
            Some(_) => {}
            None => {
                seen.insert(rec.seed, (sums.0, sums.1, rec.policy));
            }
        }
    }
    Ok(())
}

fn cell_runs<'a>(runs: &'a [RunRecord], kind: PolicyKind, alpha: f64, r: f64) -> impl Iterator<Item = &'a RunRecord> {
    runs.iter().filter(move |rec| rec.policy == kind && rec.alpha == alpha && rec.r == r)
}

fn summarize(runs: &[RunRecord], cell: &Cell, kind: PolicyKind, aborted: Option<String>) -> CellSummary {
    let mine: Vec<&RunRecord> = cell_runs(runs, kind, cell.alpha, cell.r).collect();
    let gammas: Vec<f64> = mine.iter().map(|rec| rec.gamma_social).collect();
    let efforts: Vec<f64> = mine.iter().map(|rec| rec.delta_u).collect();
    let (gamma_mean, gamma_std) = if gammas.is_empty() { (f64::NAN, None) } else { mean_std(&gammas) };
    let (delta_u_mean, delta_u_std) = if efforts.is_empty() { (f64::NAN, None) } else { mean_std(&efforts) };
    let clip_rate_mean = mine.iter().map(|rec| rec.clip_rate).sum::<f64>() / mine.len().max(1) as f64;
    let infeasible_steps = mine.iter().map(|rec| rec.infeasible_steps).sum();

    let (mut rel, mut welch_p) = (None, None);
    if kind != PolicyKind::NoControl && !gammas.is_empty() {
        let base: Vec<f64> =
            cell_runs(runs, PolicyKind::NoControl, cell.alpha, cell.r).map(|rec| rec.gamma_social).collect();
        if !base.is_empty() {
            rel = relative_improvement(gamma_mean, mean_std(&base).0).ok();
            welch_p = welch_test(&gammas, &base).ok().map(|w| w.p);
        }
    }
    CellSummary {
        policy: kind,
        alpha: cell.alpha,
        r: cell.r,
        runs: mine.len(),
        gamma_mean,
        gamma_std,
        delta_u_mean,
        delta_u_std,
        clip_rate_mean,
        infeasible_steps,
        relative_improvement: rel,
        welch_p,
        aborted,
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl KpiReport {
    pub fn cell(&self, kind: PolicyKind, alpha: f64, r: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.policy == kind && c.alpha == alpha && c.r == r)
    }

    /// Per-run social costs of one cell, in run order.
    pub fn social_costs(&self, kind: PolicyKind, alpha: f64, r: f64) -> Vec<f64> {
        cell_runs(&self.runs, kind, alpha, r).map(|rec| rec.gamma_social).collect()
    }

    /// One row per run and policy.
    pub fn write_runs_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# seed={}", self.seed)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "policy",
            "alpha",
            "r",
            "seed",
            "gamma_social",
            "delta_u",
            "clip_rate",
            "infeasible_steps",
            "run",
            "noise_checksum",
            "imitation_checksum",
        ])?;
        for rec in &self.runs {
            w.write_record([
                rec.policy.label().to_string(),
                rec.alpha.to_string(),
                rec.r.to_string(),
                rec.seed.to_string(),
                rec.gamma_social.to_string(),
                rec.delta_u.to_string(),
                rec.clip_rate.to_string(),
                rec.infeasible_steps.to_string(),
                rec.run.to_string(),
                format!("{:016x}", rec.noise_checksum),
                format!("{:016x}", rec.imitation_checksum),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (policy, alpha, r) cell with means and standard deviations.
    pub fn write_aggregate_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# seed={}", self.seed)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "policy",
            "alpha",
            "r",
            "runs",
            "gamma_mean",
            "gamma_std",
            "delta_u_mean",
            "delta_u_std",
            "clip_rate_mean",
            "infeasible_steps",
            "relative_improvement",
            "welch_p",
            "aborted",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.policy.label().to_string(),
                c.alpha.to_string(),
                c.r.to_string(),
                c.runs.to_string(),
                c.gamma_mean.to_string(),
                opt(c.gamma_std),
                c.delta_u_mean.to_string(),
                opt(c.delta_u_std),
                c.clip_rate_mean.to_string(),
                c.infeasible_steps.to_string(),
                opt(c.relative_improvement),
                opt(c.welch_p),
                c.aborted.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `runs.csv`, `aggregate.csv` and `network.txt` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_runs_csv(BufWriter::new(File::create(dir.join("runs.csv"))?))?;
        self.write_aggregate_csv(BufWriter::new(File::create(dir.join("aggregate.csv"))?))?;
        let mut net = BufWriter::new(File::create(dir.join("network.txt"))?);
        writeln!(net, "# seed={}", self.seed)?;
        write_network(&self.network, &mut net)?;
        net.flush()?;
        Ok(())
    }
}
