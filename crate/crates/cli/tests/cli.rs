use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nudge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nudge")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_error_line(o: &Output, code: i32, class: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<_> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with(&format!("nudge-error: code={code} class={class} message=")), "{}", lines[0]);
}

const TOY: &str = "n 3
alpha 0.5
P
0 0.5 0.5
0.5 0 0.5
0.5 0.5 0
lambda 0 0 0
eta0 0 0 0
sigma 0 0 0
clusters none
";

const SMALL: &str = "net.n = 12
net.clusters = 3
net.density = 0.25
net.favorable = 3
policy.kinds = [\"no-control\", \"mfccp\", \"mbccp\"]
policy.r = [0.5, 2.0]
sweep.alphas = [0.25, 0.75]
sweep.t_sim = 6
sweep.monte_carlo = 3
";

fn body(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")
}

#[test]
fn validate_rejects_network_without_stubborn_anchor() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "net.lambda = 1.0\n").unwrap();
    let o = nudge(dir.path(), &["validate", "--config", "c.toml"]);
    assert_one_error_line(&o, 3, "infeasible");
    assert!(stderr(&o).contains("reachability"));
    assert!(stdout(&o).contains("reachability assumption: violated"));
}

#[test]
fn validate_reports_stable_default_network() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = nudge(dir.path(), &["validate", "--config", "c.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("reachability assumption: satisfied"));
    assert_eq!(out.matches("(stable)").count(), 2);
    assert_eq!(out.matches("steady-state constraints inactive:").count(), 4);
}

#[test]
fn steady_state_policy_on_memoryless_toy_is_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.txt"), TOY).unwrap();
    fs::write(dir.path().join("c.toml"), "net.file = \"toy.txt\"\n").unwrap();
    for r in [0.75, 2.0, 4.0] {
        let rs = r.to_string();
        let o = nudge(dir.path(), &["policy", "--config", "c.toml", "--kind", "mbccp", "--r", &rs, "--write"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.contains("constraints inactive: true"), "{out}");
        let u_line = out.lines().find(|l| l.starts_with("u: ")).unwrap();
        let u: Vec<f64> = u_line[3..].split_whitespace().map(|x| x.parse().unwrap()).collect();
        assert_eq!(u.len(), 3);
        for x in u {
            assert!((x - 1.0 / (2.0 * r)).abs() < 1e-8, "r={r}: {x}");
        }
        let csv = body(&dir.path().join("nudge-out/policy.csv"));
        assert_eq!(csv.lines().count(), 4);
    }
}

#[test]
fn sweep_writes_one_row_per_run_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let run = |out: &str| {
        let o =
            nudge(dir.path(), &["sweep", "--config", "c.toml", "--out", out, "--jobs", "1", "--trajectories", "-q"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).is_empty());
    };
    run("a");
    run("b");
    let runs = body(&dir.path().join("a/runs.csv"));
    // no-control and MFCCP ignore r but still run once per cell.
    assert_eq!(runs.lines().count(), 1 + 2 * 2 * 3 * 3);
    assert!(runs
        .lines()
        .next()
        .unwrap()
        .starts_with("policy,alpha,r,seed,gamma_social,delta_u,clip_rate,infeasible_steps"));
    for f in ["runs.csv", "aggregate.csv", "network.txt"] {
        assert_eq!(body(&dir.path().join("a").join(f)), body(&dir.path().join("b").join(f)), "{f}");
    }
    let trajs = fs::read_dir(dir.path().join("a/trajectories")).unwrap().count();
    assert_eq!(trajs, 2 * 2 * 3 * 3);
}

#[test]
fn seed_override_changes_the_experiment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    for (seed, out) in [("5", "a"), ("6", "b")] {
        let o = nudge(dir.path(), &["gen-net", "--config", "c.toml", "--seed", seed, "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read_to_string(dir.path().join("a/network.txt")).unwrap();
    assert!(a.starts_with("# seed=5\n"));
    assert_ne!(body(&dir.path().join("a/network.txt")), body(&dir.path().join("b/network.txt")));
}

#[test]
fn simulate_writes_trajectory_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o =
        nudge(dir.path(), &["simulate", "--config", "c.toml", "--policy", "mpc", "--r", "1", "--soft-terminal", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = body(&dir.path().join("nudge-out/trajectory.csv"));
    assert_eq!(traj.lines().count(), 1 + 6 * 12);
    let summary = fs::read_to_string(dir.path().join("nudge-out/summary.txt")).unwrap();
    assert!(summary.contains("policy=mpc\n"));
    assert!(summary.contains("infeasible_steps=0\n"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "net.bogus = 1\n").unwrap();
    fs::write(dir.path().join("neg.toml"), "policy.beta = -1.0\n").unwrap();
    assert_one_error_line(&nudge(dir.path(), &["validate", "--config", "bad.toml"]), 2, "config");
    assert_one_error_line(&nudge(dir.path(), &["sweep", "--config", "neg.toml"]), 2, "config");
    assert_one_error_line(&nudge(dir.path(), &["validate", "--config", "missing.toml"]), 2, "config");
    assert_one_error_line(&nudge(dir.path(), &["policy", "--kind", "mpc"]), 2, "config");
    assert_one_error_line(&nudge(dir.path(), &["frobnicate"]), 2, "config");
    assert_one_error_line(&nudge(dir.path(), &[]), 2, "config");
}

#[test]
fn help_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = nudge(dir.path(), &["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("topology-study"));
}
