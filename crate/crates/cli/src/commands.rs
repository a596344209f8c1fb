use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use nudge_core::dynamics::{simulate, write_trajectory_csv, SimulationSetup};
use nudge_core::equilibrium::build_prediction_model;
use nudge_core::graph::{read_network, write_network, SocialNetwork};
use nudge_core::harness::{
    build_network, build_policy, control_cost, run_social_cost, run_sweep, run_topology_study, ExperimentConfig,
    PolicyKind, SweepOptions,
};
use nudge_core::policies::{check_inactive_conditions, mbccp, mbccp_terms, mfccp, PolicyWeights};
use nudge_core::rng::{derive_seed, Stream};
use nudge_core::{Error, Result};

use crate::{Command, Common};

pub fn run(command: &Command, common: &Common, cfg: &ExperimentConfig) -> Result<()> {
    let report = Report { quiet: common.quiet };
    match command {
        Command::GenNet { alpha } => gen_net(cfg, *alpha, &common.out, &report),
        Command::Simulate { policy, alpha, r } => simulate_one(cfg, *policy, *alpha, *r, &common.out, &report),
        Command::Policy { kind, alpha, r, write } => {
            let out = write.then_some(common.out.as_path());
            constant_policy(cfg, *kind, *alpha, *r, out, &report)
        }
        Command::Sweep => sweep(cfg, common, &report),
        Command::TopologyStudy => topology(cfg, common, &report),
        Command::Validate => validate(cfg, &report),
    }
}

struct Report {
    quiet: bool,
}

impl Report {
    fn line(&self, text: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", text.as_ref());
        }
    }
}

fn default_r(cfg: &ExperimentConfig) -> f64 {
    let grid = &cfg.policy.r;
    grid[grid.len() / 2]
}

/// The configured network at `alpha`; a network file keeps its own
/// imitation probability when none is given.
fn load_network(cfg: &ExperimentConfig, alpha: Option<f64>) -> Result<(SocialNetwork, DVector<f64>)> {
    let alpha = match (alpha, &cfg.net.file) {
        (Some(a), _) => a,
        (None, Some(path)) => read_network(BufReader::new(File::open(path)?))?.alpha(),
        (None, None) => cfg.sweep.alphas[0],
    };
    build_network(cfg, alpha)
}

fn join(values: &DVector<f64>) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

fn gen_net(cfg: &ExperimentConfig, alpha: Option<f64>, out: &Path, report: &Report) -> Result<()> {
    let (net, _) = load_network(cfg, alpha)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("network.txt");
    let mut w = BufWriter::new(File::create(&path)?);
    writeln!(w, "# seed={}", cfg.sweep.seed)?;
    write_network(&net, &mut w)?;
    w.flush()?;
    report.line(format!("wrote {} (n={}, alpha={})", path.display(), net.n(), net.alpha()));
    Ok(())
}

fn simulate_one(
    cfg: &ExperimentConfig,
    kind: PolicyKind,
    alpha: Option<f64>,
    r: Option<f64>,
    out: &Path,
    report: &Report,
) -> Result<()> {
    let (net, x0) = load_network(cfg, alpha)?;
    let r = r.unwrap_or_else(|| default_r(cfg));
    let mut policy = build_policy(cfg, &net, kind, r)?;
    let seed = derive_seed(cfg.sweep.seed, Stream::Run, 0);
    let t_sim = cfg.sweep.t_sim;
    let setup = SimulationSetup { x0, horizon: t_sim, seed, beta: cfg.policy.beta };
    let traj = simulate(&net, policy.as_mut(), &setup)?;

    std::fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("trajectory.csv"))?);
    write_trajectory_csv(&traj, &mut w)?;
    w.flush()?;

    let gamma = run_social_cost(&traj, t_sim)?;
    let delta_u = control_cost(&traj, t_sim);
    let lines = [
        format!("policy={kind}"),
        format!("alpha={}", net.alpha()),
        format!("r={r}"),
        format!("steps={t_sim}"),
        format!("gamma_social={gamma}"),
        format!("delta_u={delta_u}"),
        format!("clip_rate={}", traj.clip_rate()),
        format!("infeasible_steps={}", traj.infeasible_steps),
    ];
    let mut s = BufWriter::new(File::create(out.join("summary.txt"))?);
    writeln!(s, "# seed={seed}")?;
    for l in &lines {
        writeln!(s, "{l}")?;
        report.line(l);
    }
    s.flush()?;
    Ok(())
}

fn constant_policy(
    cfg: &ExperimentConfig,
    kind: PolicyKind,
    alpha: Option<f64>,
    r: Option<f64>,
    out: Option<&Path>,
    report: &Report,
) -> Result<()> {
    let (net, _) = load_network(cfg, alpha)?;
    let beta = cfg.policy.beta;
    report.line(format!("policy: {kind}"));
    report.line(format!("alpha: {}", net.alpha()));
    let u = match kind {
        PolicyKind::Mfccp => {
            let u = mfccp(&net, beta)?;
            let capped = u.iter().zip(net.input_upper_bound().iter()).filter(|(x, ub)| **x >= **ub).count();
            report.line(format!("u: {}", join(&u)));
            report.line(format!("budget used: {} of {beta}", u.sum()));
            report.line(format!("nodes at their input bound: {capped}"));
            u
        }
        _ => {
            let r = r.unwrap_or_else(|| default_r(cfg));
            let weights = PolicyWeights::scaled_identity(net.n(), r, beta)?;
            let sol = mbccp(&net, &weights)?;
            report.line(format!("r: {r}"));
            report.line(format!("u: {}", join(&sol.u)));
            report.line(format!("budget used: {} of {beta}", sol.u.sum()));
            report.line(format!("asymptotic cost: {}", sol.terms.cost(&sol.u)));
            report.line(format!("budget multiplier: {}", sol.budget_multiplier));
            report.line(format!("kkt stationarity: {:e}", sol.residuals.stationarity));
            report.line(format!("kkt primal: {:e}", sol.residuals.primal));
            report.line(format!("kkt complementarity: {:e}", sol.residuals.complementarity.abs()));
            report.line(format!("active bounds: {}", sol.active_count()));
            report.line(format!("constraints inactive: {}", sol.inactive_conditions));
            if let Some((_, gap)) = &sol.closed_form {
                report.line(format!("closed form gap: {gap:e}"));
            }
            sol.u
        }
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("policy.csv");
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "# seed={}", cfg.sweep.seed)?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["node", "u"])?;
        for (v, x) in u.iter().enumerate() {
            csv.write_record([v.to_string(), x.to_string()])?;
        }
        csv.flush()?;
        report.line(format!("wrote {}", path.display()));
    }
    Ok(())
}

fn sweep_options(common: &Common) -> SweepOptions {
    SweepOptions { jobs: common.jobs, trajectory_dir: common.trajectories.then(|| common.out.join("trajectories")) }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn sweep(cfg: &ExperimentConfig, common: &Common, report: &Report) -> Result<()> {
    let kpi = run_sweep(cfg, &sweep_options(common))?;
    kpi.write_artifacts(&common.out)?;
    report.line("policy       alpha  r      gamma_mean  gamma_std  delta_u   rel_impr  welch_p");
    for c in &kpi.cells {
        let note = c.aborted.as_deref().map(|a| format!("  aborted: {a}")).unwrap_or_default();
        report.line(format!(
            "{:<12} {:<6} {:<6} {:<11.3} {:<10} {:<9.4} {:<9} {}{note}",
            c.policy.label(),
            c.alpha,
            c.r,
            c.gamma_mean,
            fmt_opt(c.gamma_std),
            c.delta_u_mean,
            fmt_opt(c.relative_improvement),
            c.welch_p.map_or_else(|| "-".into(), |p| format!("{p:.2e}")),
        ));
    }
    report.line(format!("wrote {} runs to {}", kpi.runs.len(), common.out.display()));
    Ok(())
}

fn topology(cfg: &ExperimentConfig, common: &Common, report: &Report) -> Result<()> {
    let study = run_topology_study(cfg, &sweep_options(common))?;
    study.write_artifacts(&common.out)?;
    report.line("alpha  gamma  graphs  median_improvement");
    for &alpha in &cfg.sweep.topology_alphas {
        for &gamma in &cfg.sweep.gammas {
            let done = study.improvements(alpha, gamma).len();
            report.line(format!("{alpha:<6} {gamma:<6} {done:<7} {}", fmt_opt(study.median(alpha, gamma))));
        }
    }
    report.line(format!("wrote {} records to {}", study.records.len(), common.out.display()));
    Ok(())
}

fn validate(cfg: &ExperimentConfig, report: &Report) -> Result<()> {
    report.line(format!("# seed={}", cfg.sweep.seed));
    let source = cfg.net.file.as_ref().map_or_else(|| "generated".into(), |p| p.display().to_string());
    let mut first_error = None;
    for &alpha in &cfg.sweep.alphas {
        let net = match build_network(cfg, alpha) {
            Ok((net, _)) => net,
            Err(e @ Error::Unreachable(_)) => {
                report.line(format!("network: {source}"));
                report.line("reachability assumption: violated");
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if alpha == cfg.sweep.alphas[0] {
            report.line(format!("network: {source} (n={})", net.n()));
            report.line("reachability assumption: satisfied");
            let ub = net.input_upper_bound();
            let blocked = ub.iter().filter(|&&x| x <= 0.0).count();
            report.line(format!(
                "input headroom: total {:.6} against budget {}, {blocked} nodes without headroom",
                ub.sum(),
                cfg.policy.beta
            ));
        }
        match build_prediction_model(&net) {
            Ok(model) => report.line(format!("alpha {alpha}: spectral radius {:.6} (stable)", model.spectral_radius)),
            Err(e) => {
                report.line(format!("alpha {alpha}: {e}"));
                first_error.get_or_insert(e);
                continue;
            }
        }
        for &r in &cfg.policy.r {
            let weights = PolicyWeights::scaled_identity(net.n(), r, cfg.policy.beta)?;
            let terms = mbccp_terms(&net, &weights)?;
            let inactive = check_inactive_conditions(&terms, cfg.policy.beta)?;
            report.line(format!("alpha {alpha} r {r}: steady-state constraints inactive: {inactive}"));
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
