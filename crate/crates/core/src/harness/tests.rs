use super::*;
use crate::dynamics::Trajectory;

fn table_trajectory(ys: Vec<Vec<f64>>, us: Vec<Vec<f64>>) -> Trajectory {
    let n = ys[0].len();
    let horizon = ys.len();
    Trajectory {
        xs: vec![DVector::zeros(n); horizon + 1],
        ys: ys.into_iter().map(DVector::from_vec).collect(),
        us: us.into_iter().map(DVector::from_vec).collect(),
        imitation_flags: vec![false; horizon],
        clip_events: 0,
        seed: 0,
        infeasible_steps: 0,
        noise_checksum: 0,
        imitation_checksum: 0,
    }
}

fn constant_trajectory(n: usize, horizon: usize, y: f64, u: f64) -> Trajectory {
    table_trajectory(vec![vec![y; n]; horizon], vec![vec![u; n]; horizon])
}

#[test]
fn reference_population_has_ten_favorable_nodes() {
    let spec = PopulationSpec { n: 100, favorable: 10, favorable_level: 0.7, unfavorable: (0.0, 0.1) };
    let x = init_population(&spec, 3).unwrap();
    assert_eq!(x.iter().filter(|&&v| v == 0.7).count(), 10);
    assert_eq!(x.iter().filter(|&&v| (0.0..=0.1).contains(&v)).count(), 90);
    assert_eq!(x, init_population(&spec, 3).unwrap());
    assert_ne!(x, init_population(&spec, 4).unwrap());
}

#[test]
fn all_favorable_population_is_constant() {
    let spec = PopulationSpec { n: 7, favorable: 7, favorable_level: 0.4, unfavorable: (0.0, 0.1) };
    assert_eq!(init_population(&spec, 1).unwrap(), DVector::from_element(7, 0.4));
    assert_eq!(init_population(&PopulationSpec::uniform(5, 0.1), 9).unwrap(), DVector::from_element(5, 0.1));
}

#[test]
fn too_many_favorable_nodes_is_rejected() {
    let spec = PopulationSpec { n: 4, favorable: 5, favorable_level: 0.7, unfavorable: (0.0, 0.1) };
    assert!(init_population(&spec, 1).is_err());
}

#[test]
fn social_cost_extremes() {
    assert_eq!(social_cost(&[constant_trajectory(100, 20, 1.0, 0.0)], 20).unwrap(), 0.0);
    assert_eq!(social_cost(&[constant_trajectory(100, 20, 0.0, 0.0)], 20).unwrap(), 2000.0);
    assert!(social_cost(&[], 20).is_err());
    assert!(social_cost(&[constant_trajectory(3, 4, 0.0, 0.0)], 5).is_err());
}

#[test]
fn social_cost_of_two_node_table() {
    let a = table_trajectory(vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]], vec![vec![0.0; 2]; 3]);
    let b = table_trajectory(vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 1.0]], vec![vec![0.0; 2]; 3]);
    // rejections: a = 1 + 2 + 0, b = 1 + 0 + 1
    assert_eq!(run_social_cost(&a, 3).unwrap(), 3.0);
    assert_eq!(run_social_cost(&b, 3).unwrap(), 2.0);
    assert_eq!(social_cost(&[a.clone(), b], 3).unwrap(), 2.5);
    assert_eq!(run_social_cost(&a, 2).unwrap(), 3.0);
}

#[test]
fn control_cost_examples() {
    assert_eq!(control_cost(&constant_trajectory(10, 5, 0.0, 0.0), 5), 0.0);
    let mf = control_cost(&constant_trajectory(100, 20, 0.0, 0.1), 20);
    assert!((mf - 20.0).abs() < 1e-12);
    let u = vec![0.3, 0.0, 0.2];
    let traj = table_trajectory(vec![vec![0.0; 3]; 6], vec![u; 6]);
    assert!((control_cost(&traj, 6) - 6.0 * 0.13).abs() < 1e-12);
}

#[test]
fn relative_improvement_examples() {
    assert_eq!(relative_improvement(2000.0, 2000.0).unwrap(), 0.0);
    assert_eq!(relative_improvement(0.0, 2000.0).unwrap(), 1.0);
    assert_eq!(relative_improvement(1500.0, 2000.0).unwrap(), 0.25);
    assert!(relative_improvement(1.0, 0.0).is_err());
}

#[test]
fn welch_matches_reference_values() {
    let w = welch_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap();
    assert!((w.t + 1.8973665961010275).abs() < 1e-12);
    assert!((w.df - 5.882352941176471).abs() < 1e-12);
    assert!((w.p - 0.10753119493062718).abs() < 1e-9);
    let w = welch_test(&[10.1, 9.8, 10.4, 10.0, 9.7, 10.2], &[9.1, 9.5, 9.9, 8.8]).unwrap();
    assert!((w.t - 2.708325198477959).abs() < 1e-9);
    assert!((w.df - 4.1820944416905546).abs() < 1e-9);
    assert!((w.p - 0.05113429956669392).abs() < 1e-9);
}

#[test]
fn welch_degenerate_groups() {
    assert_eq!(welch_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap().p, 1.0);
    assert_eq!(welch_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap().p, 0.0);
    assert!(welch_test(&[1.0], &[2.0, 3.0]).is_err());
}

#[test]
fn summary_statistics() {
    assert_eq!(mean_std(&[2.0]), (2.0, None));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(&[]), None);
}

#[test]
fn default_config_is_valid_and_round_trips() {
    let cfg = ExperimentConfig::default();
    cfg.validate().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
    assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
}

#[test]
fn flat_keys_parse() {
    let cfg = ExperimentConfig::from_toml_str(
        "net.n = 30\nnet.lambda = 0.9\npolicy.kinds = [\"mbccp\", \"mpc-oracle\"]\npolicy.terminal = \"soft\"\nsweep.alphas = [0.5]\nsweep.seed = 42\n",
    )
    .unwrap();
    assert_eq!(cfg.net.n, 30);
    assert_eq!(cfg.net.lambda, Some(0.9));
    assert_eq!(cfg.policy.kinds, vec![PolicyKind::Mbccp, PolicyKind::MpcOracle]);
    assert_eq!(cfg.policy.terminal, TerminalKind::Soft);
    assert_eq!(cfg.sweep.alphas, vec![0.5]);
    assert_eq!(cfg.sweep.seed, 42);
}

#[test]
fn invalid_configs_are_rejected() {
    for text in [
        "policy.r = [0.0]",
        "policy.r = [-1.0]",
        "sweep.t_sim = 0",
        "sweep.alphas = [1.5]",
        "net.favorable = 200",
        "net.unfavorable = [0.5, 0.1]",
        "policy.horizon = 1",
        "net.bogus = 1",
        "net.n = \"many\"",
    ] {
        assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
    }
    assert!(matches!(ExperimentConfig::from_toml_str("net.bogus = 1"), Err(Error::Parse(_))));
}

#[test]
fn policy_kind_labels_round_trip() {
    for k in [PolicyKind::NoControl, PolicyKind::Mfccp, PolicyKind::Mbccp, PolicyKind::Mpc, PolicyKind::MpcOracle] {
        assert_eq!(k.label().parse::<PolicyKind>().unwrap(), k);
    }
    assert!("pid".parse::<PolicyKind>().is_err());
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.net.n = 15;
    cfg.net.clusters = 3;
    cfg.net.density = 0.15;
    cfg.net.favorable = 3;
    cfg.policy.beta = 1.5;
    cfg.policy.horizon = 3;
    cfg.policy.r = vec![0.5, 2.0];
    cfg.policy.kinds = vec![PolicyKind::Mfccp, PolicyKind::Mbccp, PolicyKind::Mpc, PolicyKind::MpcOracle];
    cfg.sweep.alphas = vec![0.25, 1.0];
    cfg.sweep.t_sim = 8;
    cfg.sweep.monte_carlo = 3;
    cfg
}

#[test]
fn sweep_covers_every_cell_with_a_baseline() {
    let cfg = small_config();
    let report = run_sweep(&cfg, &SweepOptions::default()).unwrap();
    assert_eq!(report.runs.len(), 2 * 2 * 5 * 3);
    assert_eq!(report.cells.len(), 2 * 2 * 5);
    for &alpha in &cfg.sweep.alphas {
        for &r in &cfg.policy.r {
            let base = report.cell(PolicyKind::NoControl, alpha, r).unwrap();
            assert_eq!(base.runs, 3);
            assert!(base.relative_improvement.is_none());
            let mpc = report.cell(PolicyKind::Mpc, alpha, r).unwrap();
            assert!(mpc.welch_p.is_some());
            assert!(mpc.gamma_mean >= 0.0 && mpc.delta_u_mean >= 0.0);
        }
    }
    let mut sums = std::collections::BTreeMap::new();
    for rec in &report.runs {
        let entry = sums.entry(rec.seed).or_insert((rec.noise_checksum, rec.imitation_checksum));
        assert_eq!(*entry, (rec.noise_checksum, rec.imitation_checksum));
    }
    // three runs in each of four cells share seeds across the five policies
    assert_eq!(sums.len(), 12);
}

#[test]
fn zero_noise_baseline_is_reproducible() {
    let mut cfg = small_config();
    cfg.net.sigma = 0.0;
    cfg.policy.kinds = vec![PolicyKind::NoControl];
    cfg.policy.r = vec![1.0];
    cfg.sweep.alphas = vec![1.0];
    cfg.sweep.monte_carlo = 1;
    let a = run_sweep(&cfg, &SweepOptions::default()).unwrap();
    let b = run_sweep(&cfg, &SweepOptions { jobs: Some(1), trajectory_dir: None }).unwrap();
    assert_eq!(a.runs, b.runs);
    assert_eq!(a.runs.len(), 1);
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    a.write_runs_csv(&mut ca).unwrap();
    b.write_runs_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn hard_terminal_without_fallback_aborts_cell() {
    let mut cfg = small_config();
    cfg.policy.kinds = vec![PolicyKind::Mpc];
    cfg.policy.fallback = false;
    cfg.policy.beta = 0.05;
    cfg.policy.r = vec![1.0];
    cfg.sweep.alphas = vec![0.5];
    let report = run_sweep(&cfg, &SweepOptions::default()).unwrap();
    let cell = report.cell(PolicyKind::Mpc, 0.5, 1.0).unwrap();
    assert!(cell.aborted.is_some(), "{cell:?}");
    assert!(cell.runs < 3);
    assert_eq!(report.cell(PolicyKind::NoControl, 0.5, 1.0).unwrap().runs, 3);
}

#[test]
fn infeasibility_rate_limit_aborts_cell() {
    let mut cfg = small_config();
    cfg.policy.kinds = vec![PolicyKind::Mpc];
    cfg.policy.beta = 0.05;
    cfg.policy.r = vec![1.0];
    cfg.policy.max_infeasible_rate = 0.0;
    cfg.sweep.alphas = vec![0.5];
    let report = run_sweep(&cfg, &SweepOptions::default()).unwrap();
    let cell = report.cell(PolicyKind::Mpc, 0.5, 1.0).unwrap();
    assert!(cell.infeasible_steps > 0);
    assert!(cell.aborted.as_deref().unwrap().contains("infeasible"));
}

#[test]
fn artifacts_are_written() {
    let mut cfg = small_config();
    cfg.policy.kinds = vec![PolicyKind::Mfccp];
    cfg.policy.r = vec![1.0];
    cfg.sweep.alphas = vec![0.5];
    cfg.sweep.monte_carlo = 2;
    let dir = tempfile::tempdir().unwrap();
    let traj_dir = dir.path().join("traj");
    let opts = SweepOptions { jobs: Some(1), trajectory_dir: Some(traj_dir.clone()) };
    let report = run_sweep(&cfg, &opts).unwrap();
    report.write_artifacts(dir.path()).unwrap();
    let runs = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    let mut lines = runs.lines();
    assert_eq!(lines.next(), Some("# seed=1"));
    assert!(lines.next().unwrap().starts_with("policy,alpha,r,seed,gamma_social,delta_u,clip_rate,infeasible_steps"));
    assert_eq!(lines.count(), 4);
    let agg = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 2 + 2);
    let net = std::fs::read_to_string(dir.path().join("network.txt")).unwrap();
    let loaded = read_network(std::io::Cursor::new(net)).unwrap();
    assert_eq!(&loaded, &report.network);
    assert_eq!(std::fs::read_dir(&traj_dir).unwrap().count(), 4);
}

#[test]
fn loaded_network_uses_its_bias_as_initial_condition() {
    let cfg = small_config();
    let (net, _) = build_network(&cfg, 0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.txt");
    crate::graph::write_network(&net, std::fs::File::create(&path).unwrap()).unwrap();
    let mut cfg = cfg;
    cfg.net.file = Some(path);
    let (loaded, x0) = build_network(&cfg, 0.75).unwrap();
    assert_eq!(loaded.alpha(), 0.75);
    assert_eq!(&x0, net.eta0());
}

#[test]
fn topology_study_records_every_graph() {
    let mut cfg = small_config();
    cfg.sweep.gammas = vec![0.2, 0.8];
    cfg.sweep.graphs_per_gamma = 2;
    cfg.sweep.topology_alphas = vec![0.25, 0.75];
    let report = run_topology_study(&cfg, &SweepOptions::default()).unwrap();
    assert_eq!(report.records.len(), 2 * 2 * 2);
    for rec in &report.records {
        assert!(rec.aborted.is_none());
        assert!(rec.gamma_ol > 0.0);
        let expected = (rec.gamma_mpc - rec.gamma_ol).abs() / rec.gamma_ol;
        assert_eq!(rec.relative_improvement, expected);
    }
    assert!(report.median(0.75, 0.8).is_some());
    let dir = tempfile::tempdir().unwrap();
    report.write_artifacts(dir.path()).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("topology_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2 + 4);
}

#[test]
fn expected_social_cost_of_stubborn_population() {
    // with lambda = 0 the mean jumps to eta0 after one step
    let n = 4;
    let p = nalgebra::DMatrix::from_element(n, n, 0.25);
    let eta0 = DVector::from_vec(vec![0.2, 0.4, 0.6, 0.8]);
    let net = SocialNetwork::new(p, DVector::zeros(n), 0.5, eta0.clone(), DVector::zeros(n)).unwrap();
    let model = crate::equilibrium::build_prediction_model(&net).unwrap();
    let x0 = DVector::from_element(n, 0.5);
    let inputs = vec![DVector::zeros(n); 3];
    // E||1 - y||^2 = sum (1 - mu)
    let expected = 4.0 * 0.5 + 2.0 * eta0.map(|m| 1.0 - m).sum();
    assert!((expected_social_cost(&model, &eta0, &x0, &inputs) - expected).abs() < 1e-12);
}
