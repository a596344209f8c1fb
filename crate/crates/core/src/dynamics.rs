//! Stochastic hidden-inclination recursion with random imitation, bias
//! noise, control injection and Bernoulli acceptance.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::equilibrium::{build_prediction_model, mean_step};
use crate::error::{invalid, Error, Result};
use crate::graph::SocialNetwork;
use crate::rng::{stream_rng, Checksum, Stream};

/// Slack allowed when checking policy inputs against budget and box.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub x: DVector<f64>,
    pub t: usize,
}

impl HiddenState {
    pub fn new(x: DVector<f64>) -> Result<Self> {
        check_unit_interval(&x, "initial state")?;
        Ok(Self { x, t: 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: HiddenState,
    /// Number of entries of eta that had to be clamped to [0, 1].
    pub clipped: usize,
}

/// Gaussian bias noise with per-node standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub sigma: DVector<f64>,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: DVector<f64>, seed: u64) -> Self {
        Self { sigma, seed }
    }

    pub fn sample(&self, t: usize) -> DVector<f64> {
        let mut rng = stream_rng(self.seed, Stream::Noise, t as u64);
        DVector::from_fn(self.sigma.len(), |v, _| {
            let z: f64 = rng.sample(StandardNormal);
            self.sigma[v] * z
        })
    }
}

pub fn sample_noise(noise: &NoiseModel, t: usize) -> DVector<f64> {
    noise.sample(t)
}

pub fn sample_imitation<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < alpha
}

/// Independent Bernoulli draws with success probabilities `x`.
pub fn sample_acceptance<R: Rng + ?Sized>(x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    check_unit_interval(x, "acceptance probabilities")?;
    Ok(x.map(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }))
}

fn check_unit_interval(x: &DVector<f64>, what: &str) -> Result<()> {
    match x.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
        Some(i) => Err(invalid(format!("{what}: entry {i} = {} outside [0, 1]", x[i]))),
        None => Ok(()),
    }
}

/// One update `x+ = Lambda M x + (I - Lambda) eta` with `M = P` when
/// `imitate`, else `M = I`, and `eta = clamp(eta0 + eta_nc + u, 0, 1)`.
pub fn step(
    state: &HiddenState,
    net: &SocialNetwork,
    u: &DVector<f64>,
    eta_nc: &DVector<f64>,
    imitate: bool,
) -> Result<StepOutcome> {
    if let Some(i) = u.iter().position(|&v| !(v >= 0.0)) {
        return Err(invalid(format!("input entry {i} = {} is negative", u[i])));
    }
    let mut clipped = 0;
    let eta = DVector::from_fn(net.n(), |v, _| {
        let raw = net.eta0()[v] + eta_nc[v] + u[v];
        let c = raw.clamp(0.0, 1.0);
        if c != raw {
            clipped += 1;
        }
        c
    });
    let mixed = if imitate { net.influence() * &state.x } else { state.x.clone() };
    let lambda = net.lambda();
    let x = DVector::from_fn(net.n(), |v, _| {
        let next = lambda[v] * mixed[v] + (1.0 - lambda[v]) * eta[v];
        next.clamp(0.0, 1.0)
    });
    Ok(StepOutcome { state: HiddenState { x, t: state.t + 1 }, clipped })
}

/// What a policy may look at when choosing `u(t)`.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub t: usize,
    /// Acceptance realized at `t - 1`; `None` at `t = 0`.
    pub last_acceptance: Option<&'a DVector<f64>>,
    /// Exact expected inclination, only supplied to policies that request it.
    pub mean: Option<&'a DVector<f64>>,
}

pub trait Policy {
    fn name(&self) -> &str;

    /// Whether the simulator must propagate the exact mean alongside the run.
    fn requires_mean(&self) -> bool {
        false
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<DVector<f64>>;

    /// Steps at which the policy had to relax its own constraints.
    fn infeasible_steps(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSetup {
    pub x0: DVector<f64>,
    pub horizon: usize,
    pub seed: u64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<DVector<f64>>,
    pub ys: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub imitation_flags: Vec<bool>,
    pub clip_events: usize,
    pub seed: u64,
    pub infeasible_steps: usize,
    pub noise_checksum: u64,
    pub imitation_checksum: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.us.len()
    }

    pub fn n(&self) -> usize {
        self.xs[0].len()
    }

    /// Fraction of (t, node) pairs whose eta was clamped.
    pub fn clip_rate(&self) -> f64 {
        self.clip_events as f64 / (self.horizon() * self.n()) as f64
    }
}

fn check_input(u: &DVector<f64>, ub: &DVector<f64>, beta: f64, t: usize) -> Result<DVector<f64>> {
    if u.len() != ub.len() {
        return Err(invalid(format!("policy returned {} inputs for {} nodes", u.len(), ub.len())));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("policy returned a non-finite input at t={t}")));
    }
    let total: f64 = u.sum();
    if total > beta + FEASIBILITY_TOL {
        return Err(Error::Infeasible(format!("t={t}: budget {total} exceeds {beta}")));
    }
    for v in 0..u.len() {
        if u[v] < -FEASIBILITY_TOL || u[v] > ub[v] + FEASIBILITY_TOL {
            return Err(Error::Infeasible(format!("t={t}: input {v} = {} outside [0, {}]", u[v], ub[v])));
        }
    }
    Ok(u.map(|v| v.max(0.0)))
}

/// Runs `setup.horizon` steps under `policy`. Noise, imitation and acceptance
/// draws depend only on `setup.seed` and `t`, never on the policy.
pub fn simulate(net: &SocialNetwork, policy: &mut dyn Policy, setup: &SimulationSetup) -> Result<Trajectory> {
    if setup.horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    if setup.x0.len() != net.n() {
        return Err(invalid(format!("x0 has {} entries for {} nodes", setup.x0.len(), net.n())));
    }
    let horizon = setup.horizon;
    let ub = net.input_upper_bound();
    let noise = NoiseModel::new(net.sigma().clone(), setup.seed);
    let model = if policy.requires_mean() { Some(build_prediction_model(net)?) } else { None };

    let mut state = HiddenState::new(setup.x0.clone())?;
    let mut mean = setup.x0.clone();
    let mut traj = Trajectory {
        xs: Vec::with_capacity(horizon + 1),
        ys: Vec::with_capacity(horizon),
        us: Vec::with_capacity(horizon),
        imitation_flags: Vec::with_capacity(horizon),
        clip_events: 0,
        seed: setup.seed,
        infeasible_steps: 0,
        noise_checksum: 0,
        imitation_checksum: 0,
    };
    let mut noise_sum = Checksum::default();
    let mut imitation_sum = Checksum::default();
    traj.xs.push(state.x.clone());

    for t in 0..horizon {
        let obs = Observation { t, last_acceptance: traj.ys.last(), mean: model.as_ref().map(|_| &mean) };
        let u = check_input(&policy.decide(&obs)?, &ub, setup.beta, t)?;

        let mut acc_rng = stream_rng(setup.seed, Stream::Acceptance, t as u64);
        let y = sample_acceptance(&state.x, &mut acc_rng)?;
        let eta_nc = noise.sample(t);
        let mut imit_rng = stream_rng(setup.seed, Stream::Imitation, t as u64);
        let imitate = sample_imitation(net.alpha(), &mut imit_rng);
        for z in eta_nc.iter() {
            noise_sum.push(z.to_bits());
        }
        imitation_sum.push(u64::from(imitate));

        let outcome = step(&state, net, &u, &eta_nc, imitate)?;
        if let Some(m) = &model {
            mean = mean_step(&mean, m, net.eta0(), &u);
        }
        state = outcome.state;
        traj.clip_events += outcome.clipped;
        traj.xs.push(state.x.clone());
        traj.ys.push(y);
        traj.us.push(u);
        traj.imitation_flags.push(imitate);
    }
    traj.infeasible_steps = policy.infeasible_steps();
    traj.noise_checksum = noise_sum.value();
    traj.imitation_checksum = imitation_sum.value();
    Ok(traj)
}

/// Applies no control.
#[derive(Debug, Clone, Default)]
pub struct ZeroPolicy {
    n: usize,
}

impl ZeroPolicy {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl Policy for ZeroPolicy {
    fn name(&self) -> &str {
        "no-control"
    }

    fn decide(&mut self, _obs: &Observation<'_>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.n))
    }
}

/// Applies the same input at every step.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    name: String,
    u: DVector<f64>,
}

impl ConstantPolicy {
    pub fn new(name: impl Into<String>, u: DVector<f64>) -> Self {
        Self { name: name.into(), u }
    }
}

impl Policy for ConstantPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, _obs: &Observation<'_>) -> Result<DVector<f64>> {
        Ok(self.u.clone())
    }
}

/// Long-format CSV: one row per (t, node) for `t < T`. The first line is a
/// `#` comment carrying the seed.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut out: W) -> Result<()> {
    writeln!(out, "# seed={}", traj.seed)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "node", "x", "y", "u", "imitation_flag"])?;
    for t in 0..traj.horizon() {
        for v in 0..traj.n() {
            w.write_record([
                t.to_string(),
                v.to_string(),
                format!("{:.16e}", traj.xs[t][v]),
                format!("{}", traj.ys[t][v] as u8),
                format!("{:.16e}", traj.us[t][v]),
                format!("{}", u8::from(traj.imitation_flags[t])),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
