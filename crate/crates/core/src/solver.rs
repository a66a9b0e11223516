//! KL-constrained update: Fisher-vector products, conjugate gradient and the
//! backtracking line search.

use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::seq::index;
use rand::RngCore;
use rayon::prelude::*;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::policy::{Action, ForwardCache, Observation, ParamVector, Policy};
use crate::sampling::{collect, CollectStats, SamplingConfig, SurrogateEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FimMode {
    /// `J^T M J` with the closed-form head Fisher.
    Analytic,
    /// Mean outer product of sampled score vectors.
    Empirical,
}

impl fmt::Display for FimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FimMode::Analytic => "analytic",
            FimMode::Empirical => "empirical",
        })
    }
}

impl FromStr for FimMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(FimMode::Analytic),
            "empirical" => Ok(FimMode::Empirical),
            _ => Err(Error::invalid(format!("unknown fim mode '{s}' (analytic|empirical)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionConfig {
    pub delta: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub fvp_subsample: f64,
    pub fim_mode: FimMode,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        TrustRegionConfig {
            delta: 0.01,
            cg_iters: 10,
            cg_damping: 1e-3,
            backtrack_ratio: 0.5,
            max_backtracks: 10,
            fvp_subsample: 0.1,
            fim_mode: FimMode::Analytic,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::invalid(format!("delta must be positive, got {}", self.delta)));
        }
        if self.cg_iters == 0 {
            return Err(Error::invalid("cg_iters must be at least 1"));
        }
        if !(self.cg_damping >= 0.0) || !self.cg_damping.is_finite() {
            return Err(Error::invalid(format!("cg_damping must be >= 0, got {}", self.cg_damping)));
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return Err(Error::invalid(format!("backtrack_ratio must be in (0,1), got {}", self.backtrack_ratio)));
        }
        if !(self.fvp_subsample > 0.0 && self.fvp_subsample <= 1.0) {
            return Err(Error::invalid(format!("fvp_subsample must be in (0,1], got {}", self.fvp_subsample)));
        }
        Ok(())
    }
}

/// The local model a trust-region step is computed from.
pub trait SurrogateModel {
    fn theta_old(&self) -> &ParamVector;
    /// Objective at `theta_old`.
    fn value(&self) -> f64;
    /// Gradient at `theta_old`.
    fn grad(&self) -> &ParamVector;
    fn value_at(&self, theta: &[f64]) -> Result<f64>;
    /// Constraint function, zero at `theta_old`.
    fn mean_kl(&self, theta: &[f64]) -> Result<f64>;
}

impl SurrogateModel for SurrogateEstimate {
    fn theta_old(&self) -> &ParamVector {
        SurrogateEstimate::theta_old(self)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn grad(&self) -> &ParamVector {
        &self.grad
    }
    fn value_at(&self, theta: &[f64]) -> Result<f64> {
        SurrogateEstimate::value_at(self, theta)
    }
    fn mean_kl(&self, theta: &[f64]) -> Result<f64> {
        SurrogateEstimate::mean_kl(self, theta)
    }
}

/// A symmetric positive semidefinite operator `v -> A v`.
pub trait FisherOperator {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl FisherOperator for FvpContext {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        FvpContext::apply(self, v)
    }
}

/// Matrix-free Fisher operator on a fixed set of states.
pub struct FvpContext {
    policy: Policy,
    theta: ParamVector,
    damping: f64,
    terms: FisherTerms,
}

enum FisherTerms {
    Analytic(Vec<ForwardCache>),
    Empirical(Vec<Vec<f64>>),
}

const FVP_CHUNK: usize = 64;

/// Relative slack on the KL test so a full step that lands exactly on the
/// boundary is not rejected over rounding.
const KL_ROUNDING: f64 = 1e-9;

impl FvpContext {
    /// Analytic Fisher averaged over `states`.
    pub fn analytic(policy: &Policy, theta: &[f64], states: &[Observation], damping: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("Fisher-vector product needs at least one state"));
        }
        let caches = states
            .iter()
            .map(|s| policy.forward_cached(theta, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(FvpContext {
            policy: policy.clone(),
            theta: ParamVector(theta.to_vec()),
            damping,
            terms: FisherTerms::Analytic(caches),
        })
    }

    /// Empirical Fisher: mean of `g g^T` over score vectors at the given pairs.
    pub fn empirical(policy: &Policy, theta: &[f64], pairs: &[(Observation, Action)], damping: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("Fisher-vector product needs at least one sample"));
        }
        let scores = pairs
            .iter()
            .map(|(s, a)| policy.grad_log_prob(theta, s, a).map(|g| g.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(FvpContext {
            policy: policy.clone(),
            theta: ParamVector(theta.to_vec()),
            damping,
            terms: FisherTerms::Empirical(scores),
        })
    }

    /// Builds the operator for `estimate`, subsampling its states at `cfg.fvp_subsample`.
    pub fn for_estimate(estimate: &SurrogateEstimate, cfg: &TrustRegionConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let policy = estimate.policy();
        let theta = estimate.theta_old();
        match cfg.fim_mode {
            FimMode::Analytic => {
                let states = subsample(estimate.kl_states(), cfg.fvp_subsample, rng);
                Self::analytic(policy, theta, &states, cfg.cg_damping)
            }
            FimMode::Empirical => {
                let pairs = subsample(&estimate.state_actions(), cfg.fvp_subsample, rng);
                Self::empirical(policy, theta, &pairs, cfg.cg_damping)
            }
        }
    }

    pub fn num_terms(&self) -> usize {
        match &self.terms {
            FisherTerms::Analytic(c) => c.len(),
            FisherTerms::Empirical(g) => g.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `(F + damping I) v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.theta.len() {
            return Err(Error::Dimension {
                expected: self.theta.len(),
                got: v.len(),
                context: "fisher-vector product",
            });
        }
        let n = self.num_terms();
        let partials: Vec<Result<Vec<f64>>> = match &self.terms {
            FisherTerms::Analytic(caches) => caches
                .par_chunks(FVP_CHUNK)
                .map(|chunk| {
                    let mut acc = vec![0.0; v.len()];
                    for cache in chunk {
                        let jv = self.policy.jvp(&self.theta, cache, v);
                        let mjv = cache.dist.fisher_product(&jv)?;
                        let g = self.policy.vjp(&self.theta, cache, &mjv);
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    Ok(acc)
                })
                .collect(),
            FisherTerms::Empirical(scores) => scores
                .par_chunks(FVP_CHUNK)
                .map(|chunk| {
                    let mut acc = vec![0.0; v.len()];
                    for g in chunk {
                        let c: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
                        acc.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                    }
                    Ok(acc)
                })
                .collect(),
        };
        let mut out = vec![0.0; v.len()];
        for p in partials {
            out.iter_mut().zip(&p?).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().zip(v).for_each(|(o, vi)| *o = *o * inv + self.damping * vi);
        Ok(out)
    }
}

fn subsample<T: Clone>(items: &[T], fraction: f64, rng: &mut dyn RngCore) -> Vec<T> {
    if fraction >= 1.0 || items.len() <= 1 {
        return items.to_vec();
    }
    let k = ((items.len() as f64 * fraction).ceil() as usize).clamp(1, items.len());
    let mut idx = index::sample(rng, items.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// One-shot analytic Fisher-vector product over `states`.
pub fn fisher_vector_product(policy: &Policy, theta: &[f64], states: &[Observation], v: &[f64], damping: f64) -> Result<Vec<f64>> {
    FvpContext::analytic(policy, theta, states, damping)?.apply(v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub solution: ParamVector,
    pub residual: f64,
    /// `s^T A s`, recovered from the final residual as `s^T (g - r)`.
    pub s_as: f64,
    pub iterations: usize,
}

/// Conjugate gradient for `A s = g` from `s = 0`.
///
/// Stops after `iters` iterations or once `||r|| < 1e-10 ||g||`.
pub fn conjugate_gradient<F>(mut apply: F, g: &[f64], iters: usize) -> Result<CgResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if iters == 0 {
        return Err(Error::invalid("cg iterations must be at least 1"));
    }
    let n = g.len();
    let mut x = vec![0.0; n];
    let mut r = g.to_vec();
    let mut p = g.to_vec();
    let mut rr = dot(&r, &r);
    let g_norm = rr.sqrt();
    let tol = 1e-10 * g_norm;
    let mut done = 0;
    if g_norm > 0.0 {
        for it in 0..iters {
            let ap = apply(&p)?;
            let pap = dot(&p, &ap);
            let alpha = rr / pap;
            if !alpha.is_finite() {
                return Err(Error::CgBreakdown { iteration: it });
            }
            x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
            r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
            done = it + 1;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::CgBreakdown { iteration: it });
            }
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() < tol {
                rr = rr_new;
                break;
            }
            let beta = rr_new / rr;
            p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
            rr = rr_new;
        }
    }
    let g_minus_r: Vec<f64> = g.iter().zip(&r).map(|(a, b)| a - b).collect();
    let s_as = dot(&x, &g_minus_r);
    Ok(CgResult {
        solution: ParamVector(x),
        residual: rr.sqrt(),
        s_as,
        iterations: done,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub search_dir: ParamVector,
    pub initial_beta: f64,
    /// Zero when the step was rejected.
    pub accepted_beta: f64,
    pub backtracks_used: usize,
    pub surrogate_improvement: f64,
    pub kl_after: f64,
    pub cg_residual: f64,
    pub accepted: bool,
    pub reject_reason: Option<String>,
    pub theta_new: ParamVector,
}

impl StepReport {
    fn rejected(theta_old: &ParamVector, reason: &str) -> Self {
        StepReport {
            search_dir: ParamVector::zeros(theta_old.len()),
            initial_beta: 0.0,
            accepted_beta: 0.0,
            backtracks_used: 0,
            surrogate_improvement: 0.0,
            kl_after: 0.0,
            cg_residual: 0.0,
            accepted: false,
            reject_reason: Some(reason.to_string()),
            theta_new: theta_old.clone(),
        }
    }
}

/// Natural-gradient direction `s ~ A^{-1} g` shared by the constrained step
/// and the fixed-penalty baseline.
pub fn natural_direction<M, F>(model: &M, fvp: &F, cg_iters: usize) -> Result<CgResult>
where
    M: SurrogateModel + ?Sized,
    F: FisherOperator + ?Sized,
{
    conjugate_gradient(|v| fvp.apply(v), model.grad(), cg_iters)
}

/// Computes `s`, the maximal step `beta = sqrt(2 delta / s^T A s)`, then shrinks
/// `beta` until the sampled surrogate improves and the sampled mean KL is
/// within `delta`. Exhausting the backtracks rejects the step.
pub fn compute_step<M, F>(estimate: &M, fvp: &F, cfg: &TrustRegionConfig) -> Result<StepReport>
where
    M: SurrogateModel + ?Sized,
    F: FisherOperator + ?Sized,
{
    cfg.validate()?;
    let theta_old = estimate.theta_old();
    if !estimate.grad().is_finite() {
        return Err(Error::invalid("non-finite surrogate gradient"));
    }
    if estimate.grad().norm() == 0.0 {
        return Ok(StepReport::rejected(theta_old, "zero gradient"));
    }
    let cg = natural_direction(estimate, fvp, cfg.cg_iters)?;
    if !(cg.s_as > 1e-12) {
        return Err(Error::ZeroCurvature(cg.s_as));
    }
    let initial_beta = (2.0 * cfg.delta / cg.s_as).sqrt();
    let mut beta = initial_beta;
    let mut last = (f64::NAN, f64::NAN);
    for backtracks in 0..=cfg.max_backtracks {
        let candidate = theta_old.offset(beta, &cg.solution);
        let improvement = estimate.value_at(&candidate)? - estimate.value();
        let kl = estimate.mean_kl(&candidate)?;
        debug!("line search: beta={beta:.4e} improvement={improvement:.4e} kl={kl:.4e}");
        if improvement.is_finite() && kl.is_finite() && improvement > 0.0 && kl <= cfg.delta * (1.0 + KL_ROUNDING) {
            return Ok(StepReport {
                search_dir: cg.solution,
                initial_beta,
                accepted_beta: beta,
                backtracks_used: backtracks,
                surrogate_improvement: improvement,
                kl_after: kl,
                cg_residual: cg.residual,
                accepted: true,
                reject_reason: None,
                theta_new: candidate,
            });
        }
        last = (improvement, kl);
        beta *= cfg.backtrack_ratio;
    }
    let mut report = StepReport::rejected(theta_old, "line search exhausted");
    report.search_dir = cg.solution;
    report.initial_beta = initial_beta;
    report.backtracks_used = cfg.max_backtracks;
    report.cg_residual = cg.residual;
    report.surrogate_improvement = last.0;
    report.kl_after = last.1;
    Ok(report)
}

/// One iteration's worth of sampling statistics plus the step report.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub stats: CollectStats,
    pub surrogate: f64,
    pub report: StepReport,
}

/// Collect, estimate, and take one constrained step.
pub fn trpo_iteration(
    env: &dyn Environment,
    policy: &Policy,
    theta_old: &[f64],
    sampling: &SamplingConfig,
    trust: &TrustRegionConfig,
    rng: &mut dyn RngCore,
) -> Result<(ParamVector, IterationOutcome)> {
    trust.validate().map_err(|e| e.at_stage("config", 0))?;
    let (estimate, stats) = collect(env, policy, theta_old, sampling, rng).map_err(|e| e.at_stage("sampling", 0))?;
    let fvp = FvpContext::for_estimate(&estimate, trust, rng).map_err(|e| e.at_stage("fisher", 0))?;
    // A vanishing direction near a deterministic optimum is not a failure of the run.
    let report = match compute_step(&estimate, &fvp, trust) {
        Err(Error::ZeroCurvature(s_as)) => {
            debug!("zero curvature (sAs = {s_as:e}); keeping theta");
            StepReport::rejected(SurrogateEstimate::theta_old(&estimate), "zero curvature")
        }
        other => other.map_err(|e| e.at_stage("step", 0))?,
    };
    Ok((
        report.theta_new.clone(),
        IterationOutcome {
            stats,
            surrogate: estimate.value,
            report,
        },
    ))
}
