//! Monte-Carlo estimation of the surrogate objective and the mean-KL constraint.
//!
//! Two sampling schemes produce a [`SurrogateEstimate`]:
//!
//! * single path: whole trajectories under `pi_old`, `Q` estimated by the
//!   discounted reward-to-go, objective `mean(pi_theta / pi_old * Q)`;
//! * vine: branch rollouts from a subset of trunk states, `K` actions per
//!   state, all branches of one state sharing their random numbers.
//!
//! Rollouts are independent given their seeds and run on the rayon pool; the
//! results are always assembled in index order so estimates are bit-exact
//! regardless of scheduling.

use log::warn;
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{ActionSpace, EnvSnapshot, Environment};
use crate::error::{Error, Result};
use crate::policy::{Action, DistParams, Observation, ParamVector, Policy};

/// Behavior log-probabilities below this are treated as underflowed.
pub const LOG_PROB_FLOOR: f64 = -700.0;

/// A ChaCha8 generator for `(seed, stream)`; distinct streams are independent.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const POLICY_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// States `s_0 .. s_{T-1}` at which actions were taken.
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub behavior_log_probs: Vec<f64>,
    /// Discounted reward-to-go from each step.
    pub q_hats: Vec<f64>,
    /// Environment snapshot before each step, kept for vine trunks.
    pub snapshots: Vec<EnvSnapshot>,
    /// True if the episode ended inside the horizon.
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorKind {
    SinglePath,
    Vine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    pub horizon: usize,
    pub gamma: f64,
    pub behavior_kind: BehaviorKind,
}

impl TrajectoryBatch {
    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn mean_episode_return(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / n
    }

    pub fn mean_episode_length(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories.iter().map(|t| t.len() as f64).sum::<f64>() / n
    }

    /// Mean discounted return from the start state, an estimate of `eta`.
    pub fn mean_discounted_return(&self) -> f64 {
        let n = self.trajectories.len().max(1) as f64;
        self.trajectories
            .iter()
            .map(|t| t.q_hats.first().copied().unwrap_or(0.0))
            .sum::<f64>()
            / n
    }
}

fn reward_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Runs one trajectory from `reset`, sampling actions from `pi_theta`.
fn rollout_path(
    mut env: Box<dyn Environment>,
    policy: &Policy,
    theta: &[f64],
    horizon: usize,
    gamma: f64,
    seed: u64,
    keep_snapshots: bool,
) -> Result<Trajectory> {
    let mut act_rng = stream_rng(seed, POLICY_STREAM);
    let mut noise_rng = stream_rng(seed, NOISE_STREAM);
    let mut obs = env.reset(&mut act_rng);
    let mut traj = Trajectory {
        observations: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        behavior_log_probs: Vec::with_capacity(horizon),
        q_hats: Vec::new(),
        snapshots: Vec::new(),
        terminated: false,
    };
    for _ in 0..horizon {
        let dist = policy.forward(theta, &obs)?;
        let action = dist.sample(&mut act_rng);
        let logp = dist.log_prob(&action)?;
        if keep_snapshots {
            traj.snapshots.push(env.snapshot().ok_or(Error::Unsupported("state snapshot"))?);
        }
        let out = env.step(&action, &mut noise_rng)?;
        traj.observations.push(obs);
        traj.actions.push(action);
        traj.rewards.push(out.reward);
        traj.behavior_log_probs.push(logp);
        obs = out.observation;
        if out.done {
            traj.terminated = true;
            break;
        }
    }
    traj.q_hats = reward_to_go(&traj.rewards, gamma);
    Ok(traj)
}

fn run_paths(
    env: &dyn Environment,
    policy: &Policy,
    theta: &[f64],
    num_paths: usize,
    horizon: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
    keep_snapshots: bool,
) -> Result<Vec<Trajectory>> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let jobs: Vec<(u64, Box<dyn Environment>)> = (0..num_paths).map(|_| (rng.next_u64(), env.boxed_clone())).collect();
    jobs.into_par_iter()
        .enumerate()
        .map(|(i, (seed, local))| {
            rollout_path(local, policy, theta, horizon, gamma, seed, keep_snapshots)
                .map_err(|e| Error::invalid(format!("trajectory {i}: {e}")))
        })
        .collect()
}

/// Samples `num_paths` trajectories of at most `horizon` steps under `pi_theta_old`.
pub fn rollout_single_path(
    env: &dyn Environment,
    policy: &Policy,
    theta_old: &[f64],
    num_paths: usize,
    horizon: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<TrajectoryBatch> {
    let trajectories = run_paths(env, policy, theta_old, num_paths, horizon, gamma, rng, false)?;
    Ok(TrajectoryBatch {
        trajectories,
        horizon,
        gamma,
        behavior_kind: BehaviorKind::SinglePath,
    })
}

/// How the `K` branch actions at each anchor are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchActions {
    /// Sample from `pi_theta_old`.
    Policy,
    /// Uniform over a discrete action space.
    Uniform,
    /// Every discrete action exactly once (`K = |A|`).
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VineConfig {
    pub trunk_paths: usize,
    pub trunk_len: usize,
    pub num_anchors: usize,
    pub actions_per_state: usize,
    pub rollout_len: usize,
    pub branch_actions: BranchActions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub observation: Observation,
    pub snapshot: EnvSnapshot,
    pub crn_seed: u64,
    pub actions: Vec<Action>,
    pub q_hats: Vec<f64>,
    /// `log pi_old(a_k | s_n)`.
    pub behavior_log_probs: Vec<f64>,
    /// `log q(a_k | s_n)` of the branch-action distribution.
    pub sampling_log_probs: Vec<f64>,
}

/// The rollout set: anchor states with `K` branch estimates each.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSet {
    pub anchors: Vec<Anchor>,
    pub actions_per_state: usize,
    pub branch_actions: BranchActions,
    pub trunk: TrajectoryBatch,
    pub branch_steps: usize,
}

impl RolloutSet {
    pub fn num_q_samples(&self) -> usize {
        self.anchors.iter().map(|a| a.q_hats.len()).sum()
    }
}

/// Rollout of at most `len` steps from `snapshot`, starting with `first`, then
/// following `pi_theta`. The env-noise and action streams come from `crn_seed`
/// and are identical for every branch of one anchor.
fn branch_rollout(
    env: &mut dyn Environment,
    policy: &Policy,
    theta: &[f64],
    snapshot: &EnvSnapshot,
    first: &Action,
    len: usize,
    gamma: f64,
    crn_seed: u64,
) -> Result<(f64, usize)> {
    env.restore(snapshot)?;
    let mut noise_rng = stream_rng(crn_seed, NOISE_STREAM);
    let mut act_rng = stream_rng(crn_seed, POLICY_STREAM);
    let mut q = 0.0;
    let mut discount = 1.0;
    let mut action = first.clone();
    let mut steps = 0;
    for t in 0..len {
        let out = env.step(&action, &mut noise_rng)?;
        steps += 1;
        q += discount * out.reward;
        discount *= gamma;
        if out.done || t + 1 == len {
            break;
        }
        action = policy.forward(theta, &out.observation)?.sample(&mut act_rng);
    }
    Ok((q, steps))
}

/// Builds a rollout set: trunk trajectories under `pi_theta_old`, `N` anchors
/// drawn uniformly without replacement from the trunk states, and `K` branch
/// rollouts per anchor with common random numbers.
pub fn build_vine(
    env: &dyn Environment,
    policy: &Policy,
    theta_old: &[f64],
    cfg: &VineConfig,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<RolloutSet> {
    let desc = env.descriptor();
    if !desc.capabilities.state_save_restore {
        return Err(Error::Unsupported("state save/restore"));
    }
    if cfg.rollout_len == 0 {
        return Err(Error::invalid("vine rollout length must be at least 1"));
    }
    let n_discrete = match &desc.action {
        ActionSpace::Discrete { factors } if factors.len() == 1 => Some(factors[0]),
        _ => None,
    };
    let k = match cfg.branch_actions {
        BranchActions::Exhaustive => n_discrete.ok_or_else(|| Error::invalid("exhaustive branches need a single discrete factor"))?,
        BranchActions::Uniform => {
            n_discrete.ok_or_else(|| Error::invalid("uniform branches need a single discrete factor"))?;
            cfg.actions_per_state
        }
        BranchActions::Policy => cfg.actions_per_state,
    };
    if k == 0 {
        return Err(Error::invalid("need at least one action per state"));
    }

    let trunks = run_paths(env, policy, theta_old, cfg.trunk_paths, cfg.trunk_len, gamma, rng, true)?;
    let positions: Vec<(usize, usize)> = trunks
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let n = cfg.num_anchors.min(positions.len());
    let chosen = index::sample(rng, positions.len(), n).into_vec();

    struct Plan {
        observation: Observation,
        snapshot: EnvSnapshot,
        crn_seed: u64,
        actions: Vec<Action>,
        sampling_log_probs: Vec<f64>,
        behavior_log_probs: Vec<f64>,
    }
    let mut plans = Vec::with_capacity(n);
    for &idx in &chosen {
        let (i, j) = positions[idx];
        let observation = trunks[i].observations[j].clone();
        let dist = policy.forward(theta_old, &observation)?;
        let crn_seed = rng.next_u64();
        let (actions, sampling_log_probs): (Vec<Action>, Vec<f64>) = match cfg.branch_actions {
            BranchActions::Exhaustive => {
                let na = n_discrete.expect("checked above");
                (0..na).map(|a| (Action::discrete(a), -(na as f64).ln())).unzip()
            }
            BranchActions::Uniform => {
                let na = n_discrete.expect("checked above");
                (0..k)
                    .map(|_| (Action::discrete(rng.random_range(0..na)), -(na as f64).ln()))
                    .unzip()
            }
            BranchActions::Policy => {
                let mut out = (Vec::with_capacity(k), Vec::with_capacity(k));
                for _ in 0..k {
                    let a = dist.sample(rng);
                    out.1.push(dist.log_prob(&a)?);
                    out.0.push(a);
                }
                out
            }
        };
        let behavior_log_probs = actions.iter().map(|a| dist.log_prob(a)).collect::<Result<Vec<_>>>()?;
        plans.push(Plan {
            observation,
            snapshot: trunks[i].snapshots[j].clone(),
            crn_seed,
            actions,
            sampling_log_probs,
            behavior_log_probs,
        });
    }

    let envs: Vec<Box<dyn Environment>> = plans.iter().map(|_| env.boxed_clone()).collect();
    let results: Vec<Result<(Vec<f64>, usize)>> = plans
        .par_iter()
        .zip(envs)
        .map(|(plan, mut local)| {
            let mut q_hats = Vec::with_capacity(plan.actions.len());
            let mut steps = 0;
            for a in &plan.actions {
                let (q, s) = branch_rollout(
                    local.as_mut(),
                    policy,
                    theta_old,
                    &plan.snapshot,
                    a,
                    cfg.rollout_len,
                    gamma,
                    plan.crn_seed,
                )?;
                q_hats.push(q);
                steps += s;
            }
            Ok((q_hats, steps))
        })
        .collect();

    let mut anchors = Vec::with_capacity(n);
    let mut branch_steps = 0;
    for (plan, res) in plans.into_iter().zip(results) {
        let (q_hats, steps) = res?;
        branch_steps += steps;
        anchors.push(Anchor {
            observation: plan.observation,
            snapshot: plan.snapshot,
            crn_seed: plan.crn_seed,
            actions: plan.actions,
            q_hats,
            behavior_log_probs: plan.behavior_log_probs,
            sampling_log_probs: plan.sampling_log_probs,
        });
    }
    Ok(RolloutSet {
        anchors,
        actions_per_state: k,
        branch_actions: cfg.branch_actions,
        trunk: TrajectoryBatch {
            trajectories: trunks,
            horizon: cfg.trunk_len,
            gamma,
            behavior_kind: BehaviorKind::Vine,
        },
        branch_steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct IsSample {
    obs: Observation,
    action: Action,
    log_q: f64,
    q_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VineMode {
    /// Sum over every action, weighted by `pi_theta`.
    Exhaustive,
    /// Self-normalized importance weights per anchor.
    SelfNormalized,
}

#[derive(Debug, Clone, PartialEq)]
enum Objective {
    ImportanceSampled(Vec<IsSample>),
    Vine { anchors: Vec<Anchor>, mode: VineMode },
}

/// Sampled objective and constraint for one update, frozen on one batch.
#[derive(Debug, Clone)]
pub struct SurrogateEstimate {
    policy: Policy,
    theta_old: ParamVector,
    objective: Objective,
    /// States over which the mean KL is averaged, with `pi_old` at each.
    kl_states: Vec<Observation>,
    old_dists: Vec<DistParams>,
    /// Objective at `theta_old`.
    pub value: f64,
    /// Gradient at `theta_old`.
    pub grad: ParamVector,
    pub sample_count: usize,
    pub excluded: usize,
    pub dropped_anchors: usize,
}

impl SurrogateEstimate {
    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn theta_old(&self) -> &ParamVector {
        &self.theta_old
    }

    pub fn kl_states(&self) -> &[Observation] {
        &self.kl_states
    }

    /// Sampled state-action pairs (for the empirical Fisher).
    pub fn state_actions(&self) -> Vec<(Observation, Action)> {
        match &self.objective {
            Objective::ImportanceSampled(samples) => samples.iter().map(|s| (s.obs.clone(), s.action.clone())).collect(),
            Objective::Vine { anchors, .. } => anchors
                .iter()
                .flat_map(|a| a.actions.iter().map(move |act| (a.observation.clone(), act.clone())))
                .collect(),
        }
    }

    /// Objective at `theta`.
    pub fn value_at(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(theta, false)?.0)
    }

    pub fn grad_at(&self, theta: &[f64]) -> Result<ParamVector> {
        Ok(self.value_and_grad(theta, true)?.1)
    }

    /// `mean_n KL(pi_old(.|s_n) || pi_theta(.|s_n))`.
    pub fn mean_kl(&self, theta: &[f64]) -> Result<f64> {
        if self.kl_states.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (obs, old) in self.kl_states.iter().zip(&self.old_dists) {
            total += old.kl(&self.policy.forward(theta, obs)?)?;
        }
        Ok(total / self.kl_states.len() as f64)
    }

    fn value_and_grad(&self, theta: &[f64], want_grad: bool) -> Result<(f64, ParamVector)> {
        let mut grad = ParamVector::zeros(if want_grad { theta.len() } else { 0 });
        let mut value = 0.0;
        match &self.objective {
            Objective::ImportanceSampled(samples) => {
                if samples.is_empty() {
                    return Ok((0.0, grad));
                }
                for s in samples {
                    let cache = self.policy.forward_cached(theta, &s.obs)?;
                    let logp = cache.dist.log_prob(&s.action)?;
                    let ratio = (logp - s.log_q).exp();
                    value += ratio * s.q_hat;
                    if want_grad {
                        let head = cache.dist.grad_log_prob_head(&s.action)?;
                        let g = self.policy.vjp(theta, &cache, &head);
                        let c = ratio * s.q_hat;
                        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b);
                    }
                }
                let n = samples.len() as f64;
                value /= n;
                grad.iter_mut().for_each(|a| *a /= n);
            }
            Objective::Vine { anchors, mode } => {
                let mut used = 0usize;
                for anchor in anchors {
                    let cache = self.policy.forward_cached(theta, &anchor.observation)?;
                    let logps = anchor
                        .actions
                        .iter()
                        .map(|a| cache.dist.log_prob(a))
                        .collect::<Result<Vec<_>>>()?;
                    // Per-anchor value and head-space gradient.
                    let mut head = vec![0.0; cache.dist.head_dim()];
                    let contribution = match mode {
                        VineMode::Exhaustive => {
                            let mut v = 0.0;
                            for ((a, &lp), &q) in anchor.actions.iter().zip(&logps).zip(&anchor.q_hats) {
                                let p = lp.exp();
                                v += p * q;
                                if want_grad {
                                    let g = cache.dist.grad_log_prob_head(a)?;
                                    head.iter_mut().zip(&g).for_each(|(h, gi)| *h += p * q * gi);
                                }
                            }
                            Some(v)
                        }
                        VineMode::SelfNormalized => {
                            let weights: Vec<f64> = logps
                                .iter()
                                .zip(&anchor.sampling_log_probs)
                                .map(|(lp, lq)| (lp - lq).exp())
                                .collect();
                            let total: f64 = weights.iter().sum();
                            if !(total > 0.0) || !total.is_finite() {
                                None
                            } else {
                                let v = weights.iter().zip(&anchor.q_hats).map(|(w, q)| w * q).sum::<f64>() / total;
                                if want_grad {
                                    for ((a, w), q) in anchor.actions.iter().zip(&weights).zip(&anchor.q_hats) {
                                        let g = cache.dist.grad_log_prob_head(a)?;
                                        let c = w / total * (q - v);
                                        head.iter_mut().zip(&g).for_each(|(h, gi)| *h += c * gi);
                                    }
                                }
                                Some(v)
                            }
                        }
                    };
                    if let Some(v) = contribution {
                        used += 1;
                        value += v;
                        if want_grad {
                            let g = self.policy.vjp(theta, &cache, &head);
                            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                if used > 0 {
                    let n = used as f64;
                    value /= n;
                    grad.iter_mut().for_each(|a| *a /= n);
                }
            }
        }
        Ok((value, grad))
    }

    fn assemble(
        policy: &Policy,
        theta_old: &[f64],
        objective: Objective,
        kl_states: Vec<Observation>,
        sample_count: usize,
        excluded: usize,
    ) -> Result<Self> {
        let old_dists = kl_states
            .iter()
            .map(|o| policy.forward(theta_old, o))
            .collect::<Result<Vec<_>>>()?;
        let mut est = SurrogateEstimate {
            policy: policy.clone(),
            theta_old: ParamVector(theta_old.to_vec()),
            objective,
            kl_states,
            old_dists,
            value: 0.0,
            grad: ParamVector::default(),
            sample_count,
            excluded,
            dropped_anchors: 0,
        };
        let (value, grad) = est.value_and_grad(theta_old, true)?;
        est.value = value;
        est.grad = grad;
        if let Objective::Vine {
            anchors,
            mode: VineMode::SelfNormalized,
        } = &est.objective
        {
            est.dropped_anchors = anchors
                .iter()
                .filter(|a| {
                    let total: f64 = a
                        .behavior_log_probs
                        .iter()
                        .zip(&a.sampling_log_probs)
                        .map(|(lp, lq)| (lp - lq).exp())
                        .sum();
                    !(total > 0.0)
                })
                .count();
        }
        Ok(est)
    }
}

/// Importance-sampled surrogate from single-path trajectories.
///
/// Each state-action pair contributes `pi_theta(a|s) / pi_old(a|s) * Q_hat(s, a)`;
/// samples whose behavior log-probability underflows are excluded and counted.
pub fn surrogate_from_single_path(batch: &TrajectoryBatch, policy: &Policy, theta_old: &[f64]) -> Result<SurrogateEstimate> {
    let mut samples = Vec::with_capacity(batch.num_steps());
    let mut excluded = 0;
    for traj in &batch.trajectories {
        for t in 0..traj.len() {
            let log_q = traj.behavior_log_probs[t];
            if !(log_q >= LOG_PROB_FLOOR) || !log_q.is_finite() {
                excluded += 1;
                continue;
            }
            samples.push(IsSample {
                obs: traj.observations[t].clone(),
                action: traj.actions[t].clone(),
                log_q,
                q_hat: traj.q_hats[t],
            });
        }
    }
    let total = samples.len() + excluded;
    if excluded > 0 && excluded as f64 > 1e-3 * total as f64 {
        warn!("excluded {excluded} of {total} samples with underflowed behavior probability");
    }
    let kl_states = samples.iter().map(|s| s.obs.clone()).collect();
    let count = samples.len();
    SurrogateEstimate::assemble(policy, theta_old, Objective::ImportanceSampled(samples), kl_states, count, excluded)
}

/// Per-anchor vine surrogate, averaged over anchors.
pub fn surrogate_from_vine(rs: &RolloutSet, policy: &Policy, theta_old: &[f64], mode: VineMode) -> Result<SurrogateEstimate> {
    match mode {
        VineMode::Exhaustive if rs.branch_actions != BranchActions::Exhaustive => {
            return Err(Error::invalid("exhaustive vine estimator needs every action once per anchor"))
        }
        VineMode::SelfNormalized if rs.actions_per_state < 2 => {
            return Err(Error::invalid("self-normalized estimator needs K >= 2"))
        }
        _ => {}
    }
    let kl_states = rs.anchors.iter().map(|a| a.observation.clone()).collect();
    let count = rs.num_q_samples();
    let mut est = SurrogateEstimate::assemble(
        policy,
        theta_old,
        Objective::Vine {
            anchors: rs.anchors.clone(),
            mode,
        },
        kl_states,
        count,
        0,
    )?;
    if est.dropped_anchors > 0 {
        warn!("dropped {} anchors with all-zero importance weights", est.dropped_anchors);
    }
    est.sample_count = count;
    Ok(est)
}

/// Vine surrogate built directly from anchor data (used by tests and tools that
/// assemble rollout sets by hand).
pub fn surrogate_from_anchors(anchors: Vec<Anchor>, policy: &Policy, theta_old: &[f64], mode: VineMode) -> Result<SurrogateEstimate> {
    let kl_states = anchors.iter().map(|a| a.observation.clone()).collect();
    let count = anchors.iter().map(|a| a.q_hats.len()).sum();
    SurrogateEstimate::assemble(policy, theta_old, Objective::Vine { anchors, mode }, kl_states, count, 0)
}

/// How samples are gathered for one update.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingScheme {
    SinglePath { num_paths: usize, horizon: usize },
    Vine { vine: VineConfig, mode: VineMode },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub gamma: f64,
    pub scheme: SamplingScheme,
    /// Subtract the batch-mean `Q_hat` from single-path samples. Shifting every
    /// `Q_hat` by one constant leaves the expected gradient unchanged.
    pub center_q: bool,
}

/// Summary of one collection round.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectStats {
    /// Environment steps taken, including vine branches.
    pub env_steps: usize,
    pub num_trajectories: usize,
    pub mean_return: f64,
    pub mean_length: f64,
    /// Mean discounted return of the full trajectories.
    pub eta_estimate: f64,
    pub sample_count: usize,
    pub excluded: usize,
}

/// Gathers samples under `theta_old` and builds the surrogate estimate.
pub fn collect(
    env: &dyn Environment,
    policy: &Policy,
    theta_old: &[f64],
    cfg: &SamplingConfig,
    rng: &mut dyn RngCore,
) -> Result<(SurrogateEstimate, CollectStats)> {
    let (estimate, batch, extra_steps) = match &cfg.scheme {
        SamplingScheme::SinglePath { num_paths, horizon } => {
            let batch = rollout_single_path(env, policy, theta_old, *num_paths, *horizon, cfg.gamma, rng)?;
            let est = if cfg.center_q {
                let mut centered = batch.clone();
                let n = batch.num_steps().max(1) as f64;
                let mean = batch.trajectories.iter().flat_map(|t| t.q_hats.iter()).sum::<f64>() / n;
                for t in &mut centered.trajectories {
                    t.q_hats.iter_mut().for_each(|q| *q -= mean);
                }
                surrogate_from_single_path(&centered, policy, theta_old)?
            } else {
                surrogate_from_single_path(&batch, policy, theta_old)?
            };
            (est, batch, 0)
        }
        SamplingScheme::Vine { vine, mode } => {
            let rs = build_vine(env, policy, theta_old, vine, cfg.gamma, rng)?;
            let est = surrogate_from_vine(&rs, policy, theta_old, *mode)?;
            (est, rs.trunk, rs.branch_steps)
        }
    };
    let stats = CollectStats {
        env_steps: batch.num_steps() + extra_steps,
        num_trajectories: batch.trajectories.len(),
        mean_return: batch.mean_episode_return(),
        mean_length: batch.mean_episode_length(),
        eta_estimate: batch.mean_discounted_return(),
        sample_count: estimate.sample_count,
        excluded: estimate.excluded,
    };
    Ok((estimate, stats))
}

fn format_values(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

fn format_observation(obs: &Observation) -> String {
    match obs {
        Observation::Discrete(s) => s.to_string(),
        Observation::Vector(v) => format_values(v),
    }
}

fn format_action(action: &Action) -> String {
    match action {
        Action::Discrete(a) => a.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
        Action::Continuous(u) => format_values(u),
    }
}

/// Writes one tab-separated row per sample:
/// `trajectory  t  state  action  reward  behavior_log_prob  q_hat`,
/// with vector fields space-separated inside their column.
pub fn write_batch_dump(batch: &TrajectoryBatch, out: &mut dyn std::io::Write) -> Result<()> {
    writeln!(out, "trajectory\tt\tstate\taction\treward\tbehavior_log_prob\tq_hat")?;
    for (i, traj) in batch.trajectories.iter().enumerate() {
        for t in 0..traj.len() {
            writeln!(
                out,
                "{i}\t{t}\t{}\t{}\t{:?}\t{:?}\t{:?}",
                format_observation(&traj.observations[t]),
                format_action(&traj.actions[t]),
                traj.rewards[t],
                traj.behavior_log_probs[t],
                traj.q_hats[t]
            )?;
        }
    }
    Ok(())
}
