mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nudge_core::harness::{ExperimentConfig, PolicyKind, TerminalKind};
use nudge_core::{Error, ErrorClass};

/// Simulation, policy design and Monte Carlo experiments for nudging a
/// stochastic opinion network toward acceptance.
#[derive(Debug, Parser)]
#[command(name = "nudge", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (flat `net.*`, `policy.*`, `sweep.*` keys). Defaults apply without one.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root seed, overriding `sweep.seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory, created if absent.
    #[arg(long, global = true, value_name = "DIR", default_value = "nudge-out")]
    out: PathBuf,

    /// Worker threads for sweeps; all cores by default.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Write one trajectory CSV per Monte Carlo run.
    #[arg(long, global = true)]
    trajectories: bool,

    /// Use a soft terminal penalty of this weight instead of the hard terminal constraint.
    #[arg(long, global = true, value_name = "RHO")]
    soft_terminal: Option<f64>,

    /// Suppress the report on stdout.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a network and write it to network.txt.
    GenNet {
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Simulate one run and write trajectory.csv and summary.txt.
    Simulate {
        #[arg(long, value_parser = parse_kind, default_value = "no-control")]
        policy: PolicyKind,
        #[arg(long)]
        alpha: Option<f64>,
        /// Input weight; the middle of the configured grid by default.
        #[arg(long)]
        r: Option<f64>,
    },
    /// Compute a constant policy and print it with its diagnostics.
    Policy {
        #[arg(long, value_parser = parse_constant_kind)]
        kind: PolicyKind,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        r: Option<f64>,
        /// Also write policy.csv to the output directory.
        #[arg(long)]
        write: bool,
    },
    /// Run the policy comparison sweep over imitation probabilities and input weights.
    Sweep,
    /// Run the clustering study over random graphs.
    TopologyStudy,
    /// Check reachability, stability, input headroom and when the steady-state constraints bind.
    Validate,
}

fn parse_kind(s: &str) -> Result<PolicyKind, Error> {
    s.parse()
}

fn parse_constant_kind(s: &str) -> Result<PolicyKind, Error> {
    match s.parse()? {
        k @ (PolicyKind::Mfccp | PolicyKind::Mbccp) => Ok(k),
        k => Err(Error::InvalidParameter(format!("{k} is not a constant policy (use mfccp or mbccp)"))),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.sweep.seed = seed;
    }
    if let Some(rho) = common.soft_terminal {
        cfg.policy.terminal = TerminalKind::Soft;
        cfg.policy.soft_penalty = rho;
    }
    if common.jobs == Some(0) {
        return Err(Error::InvalidParameter("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn class_name(class: ErrorClass) -> &'static str {
    match class {
        ErrorClass::Config => "config",
        ErrorClass::Infeasible => "infeasible",
        ErrorClass::Numerical => "numerical",
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Infeasible => 3,
        ErrorClass::Numerical => 4,
    }
}

fn fail(class: ErrorClass, message: &str) -> ExitCode {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    let code = exit_code(class);
    eprintln!("nudge-error: code={code} class={} message={message}", class_name(class));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return fail(ErrorClass::Config, first.trim_start_matches("error: "));
        }
    };
    let result = load_config(&cli.common).and_then(|cfg| commands::run(&cli.command, &cli.common, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.class(), &e.to_string()),
    }
}
