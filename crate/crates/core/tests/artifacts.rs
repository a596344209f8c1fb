//! Column schemas and row structure of every CSV artifact the experiment
//! drivers write. Plotting scripts read these files by column name.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nudge_core::dynamics::{simulate, write_trajectory_csv, SimulationSetup};
use nudge_core::graph::read_network;
use nudge_core::harness::{
    build_network, build_policy, run_sweep, run_topology_study, ExperimentConfig, PolicyKind, SweepOptions,
};

fn small_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(
        r#"
        net.n = 15
        net.clusters = 3
        net.density = 0.2
        net.favorable = 3
        policy.kinds = ["no-control", "mfccp", "mbccp", "mpc"]
        policy.r = [1.0]
        policy.beta = 2.0
        policy.horizon = 3
        sweep.alphas = [0.5, 1.0]
        sweep.t_sim = 8
        sweep.monte_carlo = 3
        sweep.gammas = [0.2, 0.8]
        sweep.graphs_per_gamma = 2
        sweep.topology_alphas = [0.75]
        "#,
    )
    .unwrap()
}

/// Seed header, column names and data rows.
fn read_csv(path: &Path) -> (String, Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let (header, body) = text.split_once('\n').unwrap();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let cols = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header.to_string(), cols, rows)
}

fn column<'a>(cols: &[String], rows: &'a [Vec<String>], name: &str) -> Vec<&'a str> {
    let i = cols.iter().position(|c| c == name).unwrap_or_else(|| panic!("missing column {name}"));
    rows.iter().map(|r| r[i].as_str()).collect()
}

#[test]
fn sweep_artifacts_have_documented_schema() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let traj_dir = dir.path().join("traj");
    let opts = SweepOptions { jobs: Some(1), trajectory_dir: Some(traj_dir.clone()) };
    run_sweep(&cfg, &opts).unwrap().write_artifacts(dir.path()).unwrap();

    let (seed, cols, rows) = read_csv(&dir.path().join("runs.csv"));
    assert_eq!(seed, "# seed=1");
    assert_eq!(
        cols,
        [
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
            "imitation_checksum"
        ]
    );
    assert_eq!(rows.len(), 4 * 2 * 3);
    let policies: BTreeSet<_> = column(&cols, &rows, "policy").into_iter().collect();
    assert_eq!(policies, BTreeSet::from(["mbccp", "mfccp", "mpc", "no-control"]));
    for v in column(&cols, &rows, "gamma_social") {
        assert!(v.parse::<f64>().unwrap() >= 0.0);
    }

    let (_, cols, rows) = read_csv(&dir.path().join("aggregate.csv"));
    assert_eq!(
        cols,
        [
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
            "aborted"
        ]
    );
    assert_eq!(rows.len(), 4 * 2);
    // The no-control reference has no improvement or test against itself.
    for (policy, imp) in column(&cols, &rows, "policy").iter().zip(column(&cols, &rows, "relative_improvement")) {
        assert_eq!(*policy == "no-control", imp.is_empty(), "{policy}: {imp:?}");
    }

    let net = read_network(std::io::BufReader::new(fs::File::open(dir.path().join("network.txt")).unwrap())).unwrap();
    assert_eq!(net.n(), 15);

    assert_eq!(fs::read_dir(&traj_dir).unwrap().count(), 4 * 2 * 3);
    let one = traj_dir.join("traj_mpc_alpha0.5_r1_run2.csv");
    let (_, cols, rows) = read_csv(&one);
    assert_eq!(cols, ["t", "node", "x", "y", "u", "imitation_flag"]);
    assert_eq!(rows.len(), 8 * 15);
}

#[test]
fn topology_artifacts_have_documented_schema() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let study = run_topology_study(&cfg, &SweepOptions { jobs: Some(1), trajectory_dir: None }).unwrap();
    study.write_artifacts(dir.path()).unwrap();

    let (seed, cols, rows) = read_csv(&dir.path().join("topology.csv"));
    assert_eq!(seed, "# seed=1");
    assert_eq!(
        cols,
        [
            "alpha",
            "gamma",
            "graph",
            "graph_seed",
            "gamma_ol",
            "gamma_mpc",
            "relative_improvement",
            "infeasible_steps",
            "aborted"
        ]
    );
    assert_eq!(rows.len(), 2 * 2);

    let (_, cols, rows) = read_csv(&dir.path().join("topology_summary.csv"));
    assert_eq!(cols, ["alpha", "gamma", "graphs", "median", "mean", "std"]);
    assert_eq!(rows.len(), 2);
}

#[test]
fn single_run_trajectory_supports_time_averages() {
    let cfg = small_config();
    let (net, x0) = build_network(&cfg, 0.25).unwrap();
    let mut policy = build_policy(&cfg, &net, PolicyKind::NoControl, 1.0).unwrap();
    let setup = SimulationSetup { x0, horizon: 50, seed: 9, beta: cfg.policy.beta };
    let traj = simulate(&net, policy.as_mut(), &setup).unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(&traj, &mut buf).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("free.csv");
    fs::write(&path, &buf).unwrap();

    let (_, cols, rows) = read_csv(&path);
    let ts = column(&cols, &rows, "t");
    let nodes = column(&cols, &rows, "node");
    let xs = column(&cols, &rows, "x");
    let ys = column(&cols, &rows, "y");
    // Rebuild the running averages of node 0 from the file alone.
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0.0);
    for i in 0..rows.len() {
        if nodes[i] != "0" {
            continue;
        }
        let t: usize = ts[i].parse().unwrap();
        sx += xs[i].parse::<f64>().unwrap();
        sy += ys[i].parse::<f64>().unwrap();
        count += 1.0;
        assert_eq!(t + 1, count as usize);
        assert!(ys[i] == "0" || ys[i] == "1");
    }
    assert_eq!(count, 50.0);
    let direct_x: f64 = traj.xs[..50].iter().map(|x| x[0]).sum::<f64>() / 50.0;
    let direct_y: f64 = traj.ys[..50].iter().map(|y| y[0]).sum::<f64>() / 50.0;
    assert!((sx / count - direct_x).abs() < 1e-12);
    assert!((sy / count - direct_y).abs() < 1e-12);
}
