//! Comparison methods: fixed-stepsize natural gradient, vanilla policy gradient
//! under an l2 trust region, and the cross-entropy method.

use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::policy::{ParamVector, Policy};
use crate::sampling::{rollout_single_path, stream_rng};
use crate::solver::{natural_direction, FisherOperator, SurrogateModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    NaturalGradient,
    VanillaPg,
    Cem,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::NaturalGradient => "natural-gradient",
            BaselineKind::VanillaPg => "vanilla-pg",
            BaselineKind::Cem => "cem",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural-gradient" => Ok(BaselineKind::NaturalGradient),
            "vanilla-pg" => Ok(BaselineKind::VanillaPg),
            "cem" => Ok(BaselineKind::Cem),
            _ => Err(Error::invalid(format!("unknown baseline '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Natural gradient stepsize `1/lambda`.
    pub stepsize_inverse_lambda: f64,
    pub cg_iters: usize,
    /// Vanilla PG bound on `0.5 ||dtheta||^2`.
    pub l2_delta: f64,
    pub cem_population: usize,
    pub cem_elite_frac: f64,
    pub cem_init_stddev: f64,
    pub cem_episodes: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kind: BaselineKind::NaturalGradient,
            stepsize_inverse_lambda: 0.1,
            cg_iters: 10,
            l2_delta: 0.01,
            cem_population: 50,
            cem_elite_frac: 0.2,
            cem_init_stddev: 1.0,
            cem_episodes: 4,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BaselineKind::NaturalGradient => {
                if !(self.stepsize_inverse_lambda >= 0.0) || !self.stepsize_inverse_lambda.is_finite() {
                    return Err(Error::invalid("natural gradient stepsize must be finite and >= 0"));
                }
                if self.cg_iters == 0 {
                    return Err(Error::invalid("cg_iters must be at least 1"));
                }
            }
            BaselineKind::VanillaPg => {
                if !(self.l2_delta > 0.0) {
                    return Err(Error::invalid("l2_delta must be positive"));
                }
            }
            BaselineKind::Cem => {
                if self.cem_population < 2 {
                    return Err(Error::invalid("cem population must be at least 2"));
                }
                if !(self.cem_elite_frac > 0.0 && self.cem_elite_frac <= 1.0) {
                    return Err(Error::invalid("cem elite fraction must be in (0, 1]"));
                }
                if !(self.cem_init_stddev > 0.0) {
                    return Err(Error::invalid("cem initial stddev must be positive"));
                }
                if self.cem_episodes == 0 {
                    return Err(Error::invalid("cem needs at least one episode per candidate"));
                }
            }
        }
        Ok(())
    }
}

/// `theta_old + (1/lambda) A^{-1} g` with no line search and no constraint check.
pub fn natural_gradient_step<M, F>(estimate: &M, fvp: &F, cfg: &BaselineConfig) -> Result<ParamVector>
where
    M: SurrogateModel + ?Sized,
    F: FisherOperator + ?Sized,
{
    let cg = natural_direction(estimate, fvp, cfg.cg_iters)?;
    Ok(estimate.theta_old().offset(cfg.stepsize_inverse_lambda, &cg.solution))
}

/// Maximizer of `g . dtheta` subject to `0.5 ||dtheta||^2 <= l2_delta`.
pub fn vanilla_pg_step<M: SurrogateModel + ?Sized>(estimate: &M, cfg: &BaselineConfig) -> Result<ParamVector> {
    let g = estimate.grad();
    if !g.is_finite() {
        return Err(Error::invalid("non-finite gradient"));
    }
    let norm = g.norm();
    if norm == 0.0 {
        return Ok(estimate.theta_old().clone());
    }
    Ok(estimate.theta_old().offset((2.0 * cfg.l2_delta).sqrt() / norm, g))
}

/// Stepsizes `base * factor^i` for `i < count`.
pub fn stepsize_sweep(base: f64, factor: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| base * factor.powi(i as i32)).collect()
}

/// Parses `base,factor,count`.
pub fn parse_sweep(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!("sweep must be base,factor,count, got '{text}'")));
    }
    let base: f64 = parts[0].parse().map_err(|_| Error::invalid(format!("bad sweep base '{}'", parts[0])))?;
    let factor: f64 = parts[1].parse().map_err(|_| Error::invalid(format!("bad sweep factor '{}'", parts[1])))?;
    let count: usize = parts[2].parse().map_err(|_| Error::invalid(format!("bad sweep count '{}'", parts[2])))?;
    if !(base > 0.0) || !(factor > 0.0) || count == 0 {
        return Err(Error::invalid("sweep needs base > 0, factor > 0, count >= 1"));
    }
    Ok(stepsize_sweep(base, factor, count))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemIteration {
    pub best: f64,
    pub mean: f64,
    pub best_so_far: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemResult {
    pub best_theta: ParamVector,
    pub best_score: f64,
    pub trace: Vec<CemIteration>,
    pub mean: ParamVector,
    pub stddev: Vec<f64>,
}

pub const CEM_STD_FLOOR: f64 = 1e-8;

/// Search distribution and best-so-far record between CEM generations.
#[derive(Debug, Clone, PartialEq)]
pub struct CemState {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    pub best_theta: ParamVector,
    pub best_score: f64,
}

impl CemState {
    pub fn new(init_mean: &[f64], init_stddev: f64) -> Self {
        CemState {
            mean: init_mean.to_vec(),
            stddev: vec![init_stddev; init_mean.len()],
            best_theta: ParamVector(init_mean.to_vec()),
            best_score: f64::NEG_INFINITY,
        }
    }
}

/// One CEM generation: sample, score in parallel, refit to the elites.
///
/// Each candidate gets its own seed drawn from `rng`; elites are the top
/// `ceil(elite_frac * population)` scores.
pub fn cem_generation<F>(state: &mut CemState, score: &F, cfg: &BaselineConfig, rng: &mut dyn RngCore) -> Result<CemIteration>
where
    F: Fn(&[f64], u64) -> Result<f64> + Sync,
{
    let mut check = cfg.clone();
    check.kind = BaselineKind::Cem;
    check.validate()?;
    let dim = state.mean.len();
    let n_elite = ((cfg.cem_population as f64 * cfg.cem_elite_frac).ceil() as usize).clamp(1, cfg.cem_population);
    let candidates: Vec<(Vec<f64>, u64)> = (0..cfg.cem_population)
        .map(|_| {
            let theta = (0..dim)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    state.mean[j] + state.stddev[j] * z
                })
                .collect();
            (theta, rng.random::<u64>())
        })
        .collect();
    let scores = candidates
        .par_iter()
        .map(|(theta, seed)| score(theta, *seed))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps ties in candidate order, so ranking is deterministic.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let top = order[0];
    if scores[top] > state.best_score {
        state.best_score = scores[top];
        state.best_theta = ParamVector(candidates[top].0.clone());
    }
    let elites = &order[..n_elite];
    for j in 0..dim {
        let m = elites.iter().map(|&i| candidates[i].0[j]).sum::<f64>() / n_elite as f64;
        let var = elites.iter().map(|&i| (candidates[i].0[j] - m).powi(2)).sum::<f64>() / n_elite as f64;
        state.mean[j] = m;
        state.stddev[j] = var.sqrt().max(CEM_STD_FLOOR);
    }
    let pop_mean = scores.iter().sum::<f64>() / scores.len() as f64;
    debug!("cem generation: best {:.3} mean {pop_mean:.3}", scores[top]);
    Ok(CemIteration {
        best: scores[top],
        mean: pop_mean,
        best_so_far: state.best_score,
        evaluations: scores.len(),
    })
}

/// Diagonal-Gaussian cross-entropy maximization of `score(theta, seed)`.
pub fn cem_maximize<F>(
    score: F,
    init_mean: &[f64],
    cfg: &BaselineConfig,
    iters: usize,
    rng: &mut dyn RngCore,
) -> Result<CemResult>
where
    F: Fn(&[f64], u64) -> Result<f64> + Sync,
{
    let mut state = CemState::new(init_mean, cfg.cem_init_stddev);
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        trace.push(cem_generation(&mut state, &score, cfg, rng)?);
    }
    if iters == 0 {
        let mut check = cfg.clone();
        check.kind = BaselineKind::Cem;
        check.validate()?;
    }
    Ok(CemResult {
        best_theta: state.best_theta,
        best_score: state.best_score,
        trace,
        mean: ParamVector(state.mean),
        stddev: state.stddev,
    })
}

/// Mean undiscounted episode return of `pi_theta` over `episodes` rollouts,
/// with the number of environment steps taken.
pub fn evaluate_policy(
    env: &dyn Environment,
    policy: &Policy,
    theta: &[f64],
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut rng = stream_rng(seed, 0);
    let batch = rollout_single_path(env, policy, theta, episodes, horizon, 1.0, &mut rng)?;
    Ok((batch.mean_episode_return(), batch.num_steps()))
}

/// CEM over policy parameters, scoring each candidate by its mean episode
/// return over `cfg.cem_episodes` episodes. The search starts at zero.
pub fn cem_optimize(
    env: &dyn Environment,
    policy: &Policy,
    cfg: &BaselineConfig,
    iters: usize,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<CemResult> {
    let init = vec![0.0; policy.num_params()];
    cem_maximize(
        |theta, seed| evaluate_policy(env, policy, theta, cfg.cem_episodes, horizon, seed).map(|(score, _)| score),
        &init,
        cfg,
        iters,
        rng,
    )
}
