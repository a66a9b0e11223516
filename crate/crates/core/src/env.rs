//! Built-in environments behind a common reset/step interface.
//!
//! Environment noise is drawn from an RNG passed to each call, so a caller can
//! replay the same noise stream (common random numbers) across rollouts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::mdp::{TabularMdp, TabularPolicy};
use crate::policy::{sample_index, Action, Observation};

#[derive(Debug, Clone, PartialEq)]
pub enum ObservationSpace {
    Discrete(usize),
    Vector(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    /// Factored discrete action, one entry per factor.
    Discrete { factors: Vec<usize> },
    /// Continuous box; actions are clipped into `[low, high]` per coordinate.
    Box { dim: usize, low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub state_save_restore: bool,
    pub noise_reseed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvDescriptor {
    pub name: String,
    pub observation: ObservationSpace,
    pub action: ActionSpace,
    pub capabilities: Capabilities,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Full simulator state, sufficient to resume stepping bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSnapshot {
    Tabular { state: usize },
    Continuous { state: Vec<f64>, steps: usize },
}

pub trait Environment: Send + Sync {
    fn descriptor(&self) -> EnvDescriptor;

    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation;

    fn observe(&self) -> Observation;

    /// Advances one step, drawing any process noise from `noise`.
    fn step(&mut self, action: &Action, noise: &mut dyn RngCore) -> Result<StepOutcome>;

    fn snapshot(&self) -> Option<EnvSnapshot> {
        None
    }

    fn restore(&mut self, _snapshot: &EnvSnapshot) -> Result<()> {
        Err(Error::Unsupported("state restore"))
    }

    fn boxed_clone(&self) -> Box<dyn Environment>;

    /// The exact model, for environments that are tabular MDPs.
    fn tabular_model(&self) -> Option<&TabularMdp> {
        None
    }
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Samples a finite MDP: state `s`, reward `r(s)`, next state from `P[s][a]`.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    state: usize,
    name: String,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp) -> Self {
        Self::named(mdp, "tabular")
    }

    pub fn named(mdp: TabularMdp, name: impl Into<String>) -> Self {
        Self {
            mdp,
            state: 0,
            name: name.into(),
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Environment for TabularEnv {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: self.name.clone(),
            observation: ObservationSpace::Discrete(self.mdp.num_states()),
            action: ActionSpace::Discrete {
                factors: vec![self.mdp.num_actions()],
            },
            capabilities: Capabilities {
                state_save_restore: true,
                noise_reseed: true,
            },
        }
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation {
        self.state = sample_index(self.mdp.initial_dist(), rng.random::<f64>());
        Observation::Discrete(self.state)
    }

    fn observe(&self) -> Observation {
        Observation::Discrete(self.state)
    }

    fn step(&mut self, action: &Action, noise: &mut dyn RngCore) -> Result<StepOutcome> {
        let a = action
            .as_index()
            .filter(|&a| a < self.mdp.num_actions())
            .ok_or_else(|| Error::invalid(format!("invalid tabular action {action:?}")))?;
        let reward = self.mdp.rewards()[self.state];
        self.state = sample_index(self.mdp.transition_row(self.state, a), noise.random::<f64>());
        Ok(StepOutcome {
            observation: Observation::Discrete(self.state),
            reward,
            done: false,
        })
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(EnvSnapshot::Tabular { state: self.state })
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        match snapshot {
            EnvSnapshot::Tabular { state } if *state < self.mdp.num_states() => {
                self.state = *state;
                Ok(())
            }
            _ => Err(Error::invalid("snapshot does not belong to this tabular environment")),
        }
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn tabular_model(&self) -> Option<&TabularMdp> {
        Some(&self.mdp)
    }
}

/// Cart-pole constants (Barto, Sutton and Anderson formulation).
pub mod cartpole {
    pub const GRAVITY: f64 = 9.8;
    pub const CART_MASS: f64 = 1.0;
    pub const POLE_MASS: f64 = 0.1;
    /// Half the pole length.
    pub const HALF_LENGTH: f64 = 0.5;
    pub const FORCE_MAG: f64 = 10.0;
    pub const DT: f64 = 0.02;
    pub const X_LIMIT: f64 = 2.4;
    pub const ANGLE_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
    pub const MAX_STEPS: usize = 1000;
}

/// `(x, x_dot, phi, phi_dot)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub phi: f64,
    pub phi_dot: f64,
}

impl CartPoleState {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.phi, self.phi_dot]
    }

    pub fn is_terminal(&self) -> bool {
        self.x.abs() > cartpole::X_LIMIT || self.phi.abs() > cartpole::ANGLE_LIMIT
    }

    /// `(x_ddot, phi_ddot)` under horizontal force `force`.
    pub fn accelerations(&self, force: f64) -> (f64, f64) {
        use cartpole::*;
        let total = CART_MASS + POLE_MASS;
        let (sin, cos) = self.phi.sin_cos();
        let temp = (force + POLE_MASS * HALF_LENGTH * self.phi_dot * self.phi_dot * sin) / total;
        let phi_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
        let x_acc = temp - POLE_MASS * HALF_LENGTH * phi_acc * cos / total;
        (x_acc, phi_acc)
    }

    /// Total mechanical energy (cart + pole, pole as a uniform rod).
    pub fn energy(&self) -> f64 {
        use cartpole::*;
        let l = HALF_LENGTH;
        let (sin, cos) = self.phi.sin_cos();
        let vx = self.x_dot + l * self.phi_dot * cos;
        let vy = -l * self.phi_dot * sin;
        let inertia = POLE_MASS * (2.0 * l) * (2.0 * l) / 12.0;
        0.5 * CART_MASS * self.x_dot * self.x_dot
            + 0.5 * POLE_MASS * (vx * vx + vy * vy)
            + 0.5 * inertia * self.phi_dot * self.phi_dot
            + POLE_MASS * GRAVITY * l * cos
    }
}

/// One Euler step at `dt = 0.02 s`.
pub fn cartpole_step(state: CartPoleState, force: f64) -> CartPoleState {
    let (x_acc, phi_acc) = state.accelerations(force);
    let dt = cartpole::DT;
    CartPoleState {
        x: state.x + dt * state.x_dot,
        x_dot: state.x_dot + dt * x_acc,
        phi: state.phi + dt * state.phi_dot,
        phi_dot: state.phi_dot + dt * phi_acc,
    }
}

/// Pole balancing. Discrete variant: actions `{0: -10 N, 1: +10 N}`. Continuous
/// variant: one action coordinate `u`, force `10 * clamp(u, -1, 1)` N.
/// Reward is `+1` per step taken; the episode ends when `|x| > 2.4` m,
/// `|phi| > 12` degrees, or after 1000 steps.
#[derive(Debug, Clone)]
pub struct CartPole {
    state: CartPoleState,
    steps: usize,
    continuous: bool,
}

impl CartPole {
    pub fn new(continuous: bool) -> Self {
        Self {
            state: CartPoleState {
                x: 0.0,
                x_dot: 0.0,
                phi: 0.0,
                phi_dot: 0.0,
            },
            steps: 0,
            continuous,
        }
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }

    pub fn set_state(&mut self, state: CartPoleState) {
        self.state = state;
        self.steps = 0;
    }

    fn force(&self, action: &Action) -> Result<f64> {
        match (self.continuous, action) {
            (false, a) => match a.as_index() {
                Some(0) => Ok(-cartpole::FORCE_MAG),
                Some(1) => Ok(cartpole::FORCE_MAG),
                _ => Err(Error::invalid(format!("cart-pole action must be 0 or 1, got {a:?}"))),
            },
            (true, Action::Continuous(u)) if u.len() == 1 && !u[0].is_nan() => {
                Ok(cartpole::FORCE_MAG * u[0].clamp(-1.0, 1.0))
            }
            (true, a) => Err(Error::invalid(format!("continuous cart-pole needs a 1-d action, got {a:?}"))),
        }
    }
}

impl Environment for CartPole {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: if self.continuous { "cartpole-continuous" } else { "cartpole" }.into(),
            observation: ObservationSpace::Vector(4),
            action: if self.continuous {
                ActionSpace::Box {
                    dim: 1,
                    low: -1.0,
                    high: 1.0,
                }
            } else {
                ActionSpace::Discrete { factors: vec![2] }
            },
            capabilities: Capabilities {
                state_save_restore: true,
                noise_reseed: true,
            },
        }
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation {
        let mut u = || rng.random_range(-0.05..0.05);
        self.state = CartPoleState {
            x: u(),
            x_dot: u(),
            phi: u(),
            phi_dot: u(),
        };
        self.steps = 0;
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation::Vector(self.state.to_vec())
    }

    fn step(&mut self, action: &Action, _noise: &mut dyn RngCore) -> Result<StepOutcome> {
        let force = self.force(action)?;
        self.state = cartpole_step(self.state, force);
        self.steps += 1;
        Ok(StepOutcome {
            observation: self.observe(),
            reward: 1.0,
            done: self.state.is_terminal() || self.steps >= cartpole::MAX_STEPS,
        })
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(EnvSnapshot::Continuous {
            state: self.state.to_vec(),
            steps: self.steps,
        })
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        match snapshot {
            EnvSnapshot::Continuous { state, steps } if state.len() == 4 => {
                self.state = CartPoleState {
                    x: state[0],
                    x_dot: state[1],
                    phi: state[2],
                    phi_dot: state[3],
                };
                self.steps = *steps;
                Ok(())
            }
            _ => Err(Error::invalid("snapshot does not belong to cart-pole")),
        }
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Planar double integrator. State `(x, y, vx, vy)`, force clipped to `[-1, 1]^2`,
/// optional Gaussian velocity noise. Reward `vx - 1e-5 |u|^2` (post-step velocity).
#[derive(Debug, Clone)]
pub struct PointMass {
    state: [f64; 4],
    steps: usize,
    pub dt: f64,
    pub noise_std: f64,
    pub max_steps: usize,
}

impl PointMass {
    pub fn new(dt: f64, noise_std: f64, max_steps: usize) -> Self {
        Self {
            state: [0.0; 4],
            steps: 0,
            dt,
            noise_std,
            max_steps,
        }
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new(0.05, 0.0, 200)
    }
}

impl Environment for PointMass {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: "pointmass".into(),
            observation: ObservationSpace::Vector(4),
            action: ActionSpace::Box {
                dim: 2,
                low: -1.0,
                high: 1.0,
            },
            capabilities: Capabilities {
                state_save_restore: true,
                noise_reseed: true,
            },
        }
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Observation {
        self.state = [0.0; 4];
        self.steps = 0;
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation::Vector(self.state.to_vec())
    }

    fn step(&mut self, action: &Action, noise: &mut dyn RngCore) -> Result<StepOutcome> {
        let u = match action {
            Action::Continuous(u) if u.len() == 2 && u.iter().all(|x| !x.is_nan()) => {
                [u[0].clamp(-1.0, 1.0), u[1].clamp(-1.0, 1.0)]
            }
            other => return Err(Error::invalid(format!("point mass needs a 2-d action, got {other:?}"))),
        };
        let [x, y, vx, vy] = self.state;
        let mut n = [0.0; 2];
        if self.noise_std > 0.0 {
            for v in &mut n {
                let z: f64 = StandardNormal.sample(noise);
                *v = self.noise_std * self.dt.sqrt() * z;
            }
        }
        let vx = vx + self.dt * u[0] + n[0];
        let vy = vy + self.dt * u[1] + n[1];
        self.state = [x + self.dt * vx, y + self.dt * vy, vx, vy];
        self.steps += 1;
        Ok(StepOutcome {
            observation: self.observe(),
            reward: vx - 1e-5 * (u[0] * u[0] + u[1] * u[1]),
            done: self.steps >= self.max_steps,
        })
    }

    fn snapshot(&self) -> Option<EnvSnapshot> {
        Some(EnvSnapshot::Continuous {
            state: self.state.to_vec(),
            steps: self.steps,
        })
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()> {
        match snapshot {
            EnvSnapshot::Continuous { state, steps } if state.len() == 4 => {
                self.state.copy_from_slice(state);
                self.steps = *steps;
                Ok(())
            }
            _ => Err(Error::invalid("snapshot does not belong to the point mass")),
        }
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// `n`-state chain with actions `{0: left, 1: right}`. The intended move happens
/// with probability `1 - slip_prob`, the opposite one otherwise. Reward 1 at the
/// right end, 0.2 at the left end; uniform start.
pub fn chain_mdp(n_states: usize, slip_prob: f64, gamma: f64) -> Result<TabularMdp> {
    if n_states == 0 {
        return Err(Error::invalid("chain needs at least one state"));
    }
    if !(0.0..=1.0).contains(&slip_prob) {
        return Err(Error::invalid(format!("slip probability {slip_prob} not in [0, 1]")));
    }
    let n = n_states;
    let mut p = vec![0.0; n * 2 * n];
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(n - 1);
        for (a, (intended, other)) in [(left, right), (right, left)].into_iter().enumerate() {
            let row = &mut p[(s * 2 + a) * n..(s * 2 + a + 1) * n];
            row[intended] += 1.0 - slip_prob;
            row[other] += slip_prob;
        }
    }
    let mut r = vec![0.0; n];
    r[0] = 0.2;
    r[n - 1] = 1.0;
    TabularMdp::new(n, 2, p, r, vec![1.0 / n as f64; n], gamma)
}

/// `w x h` grid, actions up/down/left/right; moves off the grid stay put. With
/// probability `slip_prob` a uniformly random direction replaces the chosen one.
/// Reward 1 in the far corner; episodes start in the origin corner.
pub fn gridworld(width: usize, height: usize, slip_prob: f64, gamma: f64) -> Result<TabularMdp> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("gridworld dimensions must be positive"));
    }
    if !(0.0..=1.0).contains(&slip_prob) {
        return Err(Error::invalid(format!("slip probability {slip_prob} not in [0, 1]")));
    }
    let n = width * height;
    let moves: [(i64, i64); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];
    let target = |s: usize, m: (i64, i64)| -> usize {
        let (x, y) = ((s % width) as i64, (s / width) as i64);
        let (nx, ny) = (x + m.0, y + m.1);
        if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
            s
        } else {
            ny as usize * width + nx as usize
        }
    };
    let mut p = vec![0.0; n * 4 * n];
    for s in 0..n {
        for a in 0..4 {
            let row = &mut p[(s * 4 + a) * n..(s * 4 + a + 1) * n];
            row[target(s, moves[a])] += 1.0 - slip_prob;
            for m in moves {
                row[target(s, m)] += slip_prob / 4.0;
            }
        }
    }
    let mut r = vec![0.0; n];
    r[n - 1] = 1.0;
    let mut rho0 = vec![0.0; n];
    rho0[0] = 1.0;
    TabularMdp::new(n, 4, p, r, rho0, gamma)
}

fn dirichlet_ones(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let mut out: Vec<f64> = draws.into_iter().map(|d| d / total).collect();
    // Push the rounding residue into the largest entry so rows sum to one.
    let residue = 1.0 - out.iter().sum::<f64>();
    let imax = (0..n).max_by(|&a, &b| out[a].total_cmp(&out[b])).unwrap_or(0);
    out[imax] += residue;
    out
}

/// Random MDP: Dirichlet(1) transition rows and initial distribution, rewards
/// uniform in `[0, 1)`. Deterministic in `seed`.
pub fn random_mdp(num_states: usize, num_actions: usize, gamma: f64, seed: u64) -> Result<TabularMdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_mdp_with(num_states, num_actions, gamma, &mut rng)
}

pub fn random_mdp_with(num_states: usize, num_actions: usize, gamma: f64, rng: &mut impl Rng) -> Result<TabularMdp> {
    if num_states == 0 || num_actions == 0 {
        return Err(Error::invalid("random MDP needs positive sizes"));
    }
    let mut p = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        p.extend(dirichlet_ones(num_states, rng));
    }
    let r: Vec<f64> = (0..num_states).map(|_| rng.random::<f64>()).collect();
    let rho0 = dirichlet_ones(num_states, rng);
    TabularMdp::new(num_states, num_actions, p, r, rho0, gamma)
}

/// Policy with Dirichlet(1) rows.
pub fn random_policy(num_states: usize, num_actions: usize, rng: &mut impl Rng) -> TabularPolicy {
    let probs: Vec<f64> = (0..num_states).flat_map(|_| dirichlet_ones(num_actions, rng)).collect();
    TabularPolicy::new(num_states, num_actions, probs).expect("Dirichlet rows are on the simplex")
}

/// Textual environment selector.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSelector {
    CartPole,
    CartPoleContinuous,
    Chain { n: usize, slip: f64 },
    Gridworld { width: usize, height: usize, slip: f64 },
    Random { states: usize, actions: usize, seed: u64 },
    PointMass { noise_std: f64 },
    File(String),
}

impl EnvSelector {
    /// Instantiates the environment; `gamma` is used by tabular environments.
    pub fn build(&self, gamma: f64) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSelector::CartPole => Box::new(CartPole::new(false)),
            EnvSelector::CartPoleContinuous => Box::new(CartPole::new(true)),
            EnvSelector::Chain { n, slip } => Box::new(TabularEnv::named(chain_mdp(*n, *slip, gamma)?, self.to_string())),
            EnvSelector::Gridworld { width, height, slip } => {
                Box::new(TabularEnv::named(gridworld(*width, *height, *slip, gamma)?, self.to_string()))
            }
            EnvSelector::Random { states, actions, seed } => {
                Box::new(TabularEnv::named(random_mdp(*states, *actions, gamma, *seed)?, self.to_string()))
            }
            EnvSelector::PointMass { noise_std } => Box::new(PointMass::new(0.05, *noise_std, 200)),
            EnvSelector::File(path) => {
                let text = std::fs::read_to_string(path)?;
                Box::new(TabularEnv::named(TabularMdp::parse(&text)?, self.to_string()))
            }
        })
    }
}

impl FromStr for EnvSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown environment {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
        let int = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let dims = |t: &str| -> Result<(usize, usize)> {
            let (a, b) = t.split_once('x').ok_or_else(bad)?;
            Ok((int(a)?, int(b)?))
        };
        match parts.as_slice() {
            ["cartpole"] => Ok(EnvSelector::CartPole),
            ["cartpole-continuous"] => Ok(EnvSelector::CartPoleContinuous),
            ["pointmass"] => Ok(EnvSelector::PointMass { noise_std: 0.0 }),
            ["pointmass", sd] => Ok(EnvSelector::PointMass { noise_std: num(sd)? }),
            ["chain", n] => Ok(EnvSelector::Chain { n: int(n)?, slip: 0.1 }),
            ["chain", n, slip] => Ok(EnvSelector::Chain {
                n: int(n)?,
                slip: num(slip)?,
            }),
            ["gridworld", wh] => {
                let (width, height) = dims(wh)?;
                Ok(EnvSelector::Gridworld { width, height, slip: 0.1 })
            }
            ["gridworld", wh, slip] => {
                let (width, height) = dims(wh)?;
                Ok(EnvSelector::Gridworld {
                    width,
                    height,
                    slip: num(slip)?,
                })
            }
            ["random", sa, seed] => {
                let (states, actions) = dims(sa)?;
                Ok(EnvSelector::Random {
                    states,
                    actions,
                    seed: seed.parse().map_err(|_| bad())?,
                })
            }
            ["file", _, ..] => Ok(EnvSelector::File(s["file:".len()..].to_string())),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for EnvSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvSelector::CartPole => write!(f, "cartpole"),
            EnvSelector::CartPoleContinuous => write!(f, "cartpole-continuous"),
            EnvSelector::Chain { n, slip } => write!(f, "chain:{n}:{slip}"),
            EnvSelector::Gridworld { width, height, slip } => write!(f, "gridworld:{width}x{height}:{slip}"),
            EnvSelector::Random { states, actions, seed } => write!(f, "random:{states}x{actions}:{seed}"),
            EnvSelector::PointMass { noise_std } => write!(f, "pointmass:{noise_std}"),
            EnvSelector::File(path) => write!(f, "file:{path}"),
        }
    }
}
