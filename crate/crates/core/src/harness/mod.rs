//! Experiment orchestration: seeded runs with logs and checkpoints, multi-seed
//! comparisons, stepsize sweeps and bound-certification sweeps.

pub mod checkpoint;
pub mod config;
pub mod log;
pub mod plot;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use ::log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{cem_generation, evaluate_policy, natural_gradient_step, vanilla_pg_step, CemState};
use crate::env::{random_mdp_with, random_policy, Environment};
use crate::error::{Error, Result};
use crate::mdp::{evaluate_exact, TabularMdp, TabularPolicy};
use crate::policy::{DistParams, Observation, ParamVector, Policy};
use crate::sampling::collect;
use crate::solver::{trpo_iteration, FvpContext};
use crate::theory::{certify_theorem1, certify_theorem1a, cpi_mixture};

pub use checkpoint::Checkpoint;
pub use config::{Algo, HeadChoice, RunConfig};
pub use log::{LogRow, RunLog};
pub use plot::{render_svg, Curve};

pub const PROGRESS_FILE: &str = "progress.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const LATEST_CHECKPOINT: &str = "checkpoint.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Action probabilities of `pi_theta` at every state of a tabular model.
pub fn tabular_policy_of(policy: &Policy, theta: &[f64], mdp: &TabularMdp) -> Result<TabularPolicy> {
    let mut rows = Vec::with_capacity(mdp.num_states());
    for s in 0..mdp.num_states() {
        match policy.forward(theta, &Observation::Discrete(s))? {
            DistParams::Categorical { probs, .. } if probs.len() == 1 => rows.push(probs[0].clone()),
            _ => return Err(Error::invalid("tabular evaluation needs a single categorical action factor")),
        }
    }
    TabularPolicy::from_rows(&rows)
}

struct RunState {
    completed: usize,
    cumulative_steps: usize,
    rng: ChaCha8Rng,
    theta: ParamVector,
    cem: Option<CemState>,
}

impl RunState {
    fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            iteration: self.completed,
            cumulative_steps: self.cumulative_steps,
            rng: self.rng.clone(),
            theta: self.theta.clone(),
            cem: self.cem.clone(),
            config: cfg.clone(),
        }
    }
}

/// Everything produced by one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub log: RunLog,
    pub theta: ParamVector,
    /// Wall-clock seconds per iteration (kept out of the log so logs stay reproducible).
    pub wall_times: Vec<f64>,
}

struct Outputs {
    dir: PathBuf,
    progress: File,
    timing: File,
}

impl Outputs {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
        let mut progress = File::create(dir.join(PROGRESS_FILE))?;
        progress.write_all(RunLog::header().as_bytes())?;
        let mut timing = File::create(dir.join(TIMING_FILE))?;
        writeln!(timing, "iteration,wall_time_s")?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            progress,
            timing,
        })
    }

    /// Reopens a run directory, keeping only rows before `iteration`.
    fn reopen(dir: &Path, cfg: &RunConfig, iteration: usize) -> Result<(Self, RunLog)> {
        let mut log = match fs::read_to_string(dir.join(PROGRESS_FILE)) {
            Ok(text) => RunLog::parse(&text)?,
            Err(_) => RunLog::default(),
        };
        log.rows.retain(|r| r.iteration < iteration);
        let timing_rows: Vec<String> = fs::read_to_string(dir.join(TIMING_FILE))
            .unwrap_or_default()
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|t| t.parse::<usize>().ok()).is_some_and(|i| i < iteration))
            .map(str::to_string)
            .collect();
        let mut out = Outputs::create(dir, cfg)?;
        for row in &log.rows {
            writeln!(out.progress, "{}", row.to_csv())?;
        }
        for row in timing_rows {
            writeln!(out.timing, "{row}")?;
        }
        Ok((out, log))
    }

    fn append(&mut self, row: &LogRow, wall: f64) -> Result<()> {
        writeln!(self.progress, "{}", row.to_csv())?;
        self.progress.flush()?;
        writeln!(self.timing, "{},{wall:.6}", row.iteration)?;
        Ok(())
    }

    fn write_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        let text = ckpt.to_text();
        fs::write(self.dir.join(CHECKPOINT_DIR).join(format!("ckpt_{:06}.txt", ckpt.iteration)), &text)?;
        fs::write(self.dir.join(LATEST_CHECKPOINT), &text)?;
        Ok(())
    }
}

/// Validated environment and policy for a config.
pub fn build_env_and_policy(cfg: &RunConfig) -> Result<(Box<dyn Environment>, Policy)> {
    cfg.validate()?;
    let env = cfg.env.build(cfg.gamma).map_err(|e| match e {
        Error::Io(m) => Error::Config(m),
        Error::Invalid(m) => Error::Config(m),
        other => other,
    })?;
    let spec = cfg.network(&env.descriptor())?;
    let policy = Policy::new(spec).map_err(|e| Error::Config(e.to_string()))?;
    Ok((env, policy))
}

fn initial_state(cfg: &RunConfig, policy: &Policy) -> Result<RunState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let (theta, cem) = if cfg.algo == Algo::Cem {
        let zero = vec![0.0; policy.num_params()];
        (ParamVector(zero.clone()), Some(CemState::new(&zero, cfg.cem_init_stddev)))
    } else {
        (policy.spec.init_params(&mut rng), None)
    };
    Ok(RunState {
        completed: 0,
        cumulative_steps: 0,
        rng,
        theta,
        cem,
    })
}

fn exact_eta(env: &dyn Environment, policy: &Policy, theta: &[f64]) -> Result<Option<f64>> {
    match env.tabular_model() {
        Some(mdp) if matches!(policy.spec.head, crate::policy::HeadKind::TabularSoftmax { .. }) || policy.spec.input_dim == mdp.num_states() => {
            let pi = tabular_policy_of(policy, theta, mdp)?;
            Ok(Some(evaluate_exact(mdp, &pi)?.eta))
        }
        _ => Ok(None),
    }
}

fn run_iteration(state: &mut RunState, env: &dyn Environment, policy: &Policy, cfg: &RunConfig) -> Result<LogRow> {
    let iteration = state.completed;
    let row = match cfg.algo {
        Algo::TrpoSinglePath | Algo::TrpoVine => {
            let eta_exact = exact_eta(env, policy, &state.theta)?;
            let (theta, out) = trpo_iteration(env, policy, &state.theta, &cfg.sampling(), &cfg.trust, &mut state.rng)?;
            state.theta = theta;
            let r = &out.report;
            LogRow {
                iteration,
                env_steps: out.stats.env_steps,
                cumulative_steps: state.cumulative_steps + out.stats.env_steps,
                mean_return: out.stats.mean_return,
                mean_length: out.stats.mean_length,
                eta_estimate: Some(out.stats.eta_estimate),
                eta_exact,
                surrogate: Some(out.surrogate),
                kl: r.accepted.then_some(r.kl_after),
                beta: Some(r.accepted_beta),
                backtracks: Some(r.backtracks_used),
                cg_residual: Some(r.cg_residual),
                accepted: r.accepted,
            }
        }
        Algo::NaturalGradient | Algo::VanillaPg => {
            let eta_exact = exact_eta(env, policy, &state.theta)?;
            let (estimate, stats) = collect(env, policy, &state.theta, &cfg.sampling(), &mut state.rng)
                .map_err(|e| e.at_stage("sampling", iteration))?;
            let bcfg = cfg.baseline();
            let (theta, cg_residual) = if cfg.algo == Algo::NaturalGradient {
                let fvp = FvpContext::for_estimate(&estimate, &cfg.trust, &mut state.rng).map_err(|e| e.at_stage("fisher", iteration))?;
                let cg = crate::solver::natural_direction(&estimate, &fvp, bcfg.cg_iters).map_err(|e| e.at_stage("step", iteration))?;
                let theta = natural_gradient_step(&estimate, &fvp, &bcfg).map_err(|e| e.at_stage("step", iteration))?;
                (theta, Some(cg.residual))
            } else {
                (vanilla_pg_step(&estimate, &bcfg).map_err(|e| e.at_stage("step", iteration))?, None)
            };
            let kl = estimate.mean_kl(&theta)?;
            state.theta = theta;
            LogRow {
                iteration,
                env_steps: stats.env_steps,
                cumulative_steps: state.cumulative_steps + stats.env_steps,
                mean_return: stats.mean_return,
                mean_length: stats.mean_length,
                eta_estimate: Some(stats.eta_estimate),
                eta_exact,
                surrogate: Some(estimate.value),
                kl: Some(kl),
                beta: (cfg.algo == Algo::NaturalGradient).then_some(cfg.stepsize),
                backtracks: None,
                cg_residual,
                accepted: true,
            }
        }
        Algo::Cem => {
            let bcfg = cfg.baseline();
            let steps = AtomicUsize::new(0);
            let score = |theta: &[f64], seed: u64| {
                let (ret, n) = evaluate_policy(env, policy, theta, bcfg.cem_episodes, cfg.horizon, seed)?;
                steps.fetch_add(n, Ordering::Relaxed);
                Ok(ret)
            };
            let cem = state.cem.as_mut().ok_or_else(|| Error::invalid("CEM run without CEM state"))?;
            let gen = cem_generation(cem, &score, &bcfg, &mut state.rng).map_err(|e| e.at_stage("cem", iteration))?;
            state.theta = cem.best_theta.clone();
            let env_steps = steps.into_inner();
            let episodes = (gen.evaluations * bcfg.cem_episodes) as f64;
            LogRow {
                iteration,
                env_steps,
                cumulative_steps: state.cumulative_steps + env_steps,
                mean_return: gen.mean,
                mean_length: env_steps as f64 / episodes,
                eta_estimate: None,
                eta_exact: None,
                surrogate: None,
                kl: None,
                beta: None,
                backtracks: None,
                cg_residual: None,
                accepted: true,
            }
        }
    };
    state.cumulative_steps = row.cumulative_steps;
    state.completed += 1;
    Ok(row)
}

fn drive(
    cfg: &RunConfig,
    env: &dyn Environment,
    policy: &Policy,
    mut state: RunState,
    mut log: RunLog,
    mut outputs: Option<Outputs>,
) -> Result<RunOutcome> {
    let mut wall_times = Vec::new();
    if let Some(out) = &outputs {
        if state.completed == 0 {
            out.write_checkpoint(&state.checkpoint(cfg))?;
        }
    }
    while state.completed < cfg.iterations {
        let start = Instant::now();
        let row = run_iteration(&mut state, env, policy, cfg).map_err(|e| e.with_iteration(state.completed))?;
        let wall = start.elapsed().as_secs_f64();
        info!(
            "iteration {} return {:.3} length {:.1} kl {} accepted {}",
            row.iteration,
            row.mean_return,
            row.mean_length,
            row.kl.map(|k| format!("{k:.5}")).unwrap_or_else(|| "NA".into()),
            row.accepted
        );
        if let Some(out) = outputs.as_mut() {
            out.append(&row, wall)?;
            let every = cfg.checkpoint_every.max(1);
            if state.completed.is_multiple_of(every) || state.completed == cfg.iterations {
                out.write_checkpoint(&state.checkpoint(cfg))?;
            }
        }
        wall_times.push(wall);
        log.rows.push(row);
    }
    Ok(RunOutcome {
        log,
        theta: state.theta,
        wall_times,
    })
}

/// Runs `cfg` from scratch. With an output directory, writes the log,
/// timing sidecar, config and checkpoints as it goes, so a failed run leaves
/// its partial log behind.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    let (env, policy) = build_env_and_policy(cfg)?;
    let state = initial_state(cfg, &policy)?;
    let outputs = cfg.output.as_deref().map(|d| Outputs::create(d, cfg)).transpose()?;
    drive(cfg, env.as_ref(), &policy, state, RunLog::default(), outputs)
}

/// Continues a run from a checkpoint, optionally with a new iteration total.
/// Log rows at or after the checkpoint are discarded and regenerated.
pub fn resume_experiment(checkpoint: &Checkpoint, iterations: Option<usize>, output: Option<&Path>) -> Result<RunOutcome> {
    let mut cfg = checkpoint.config.clone();
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    if let Some(dir) = output {
        cfg.output = Some(dir.to_path_buf());
    }
    let (env, policy) = build_env_and_policy(&cfg)?;
    if checkpoint.theta.len() != policy.num_params() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters but the configured policy has {}",
            checkpoint.theta.len(),
            policy.num_params()
        )));
    }
    let state = RunState {
        completed: checkpoint.iteration,
        cumulative_steps: checkpoint.cumulative_steps,
        rng: checkpoint.rng.clone(),
        theta: checkpoint.theta.clone(),
        cem: checkpoint.cem.clone(),
    };
    let (outputs, log) = match cfg.output.as_deref() {
        Some(dir) => {
            let (out, log) = Outputs::reopen(dir, &cfg, checkpoint.iteration)?;
            (Some(out), log)
        }
        None => (None, RunLog::default()),
    };
    drive(&cfg, env.as_ref(), &policy, state, log, outputs)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Checkpoint::parse(&text)
}

/// Mean and standard error across runs at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatePoint {
    pub iteration: usize,
    pub cumulative_steps: f64,
    pub mean_return: f64,
    pub stderr: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoSummary {
    pub label: String,
    pub points: Vec<AggregatePoint>,
    pub logs: Vec<RunLog>,
    pub failures: Vec<String>,
}

/// Per-iteration mean and standard error over the given logs, truncated to
/// the shortest log.
pub fn aggregate(logs: &[RunLog]) -> Vec<AggregatePoint> {
    let n = logs.len();
    if n == 0 {
        return Vec::new();
    }
    let len = logs.iter().map(|l| l.rows.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let rets: Vec<f64> = logs.iter().map(|l| l.rows[i].mean_return).collect();
            let mean = rets.iter().sum::<f64>() / n as f64;
            let stderr = if n > 1 {
                (rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            AggregatePoint {
                iteration: logs[0].rows[i].iteration,
                cumulative_steps: logs.iter().map(|l| l.rows[i].cumulative_steps as f64).sum::<f64>() / n as f64,
                mean_return: mean,
                stderr,
                runs: n,
            }
        })
        .collect()
}

pub fn aggregate_csv(summaries: &[AlgoSummary]) -> String {
    let mut out = String::from("algo,iteration,cumulative_steps,mean_return,stderr,runs\n");
    for s in summaries {
        for p in &s.points {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?},{}\n",
                s.label, p.iteration, p.cumulative_steps, p.mean_return, p.stderr, p.runs
            ));
        }
    }
    out
}

pub fn summary_curves(summaries: &[AlgoSummary]) -> Vec<Curve> {
    summaries
        .iter()
        .map(|s| Curve {
            label: s.label.clone(),
            xs: s.points.iter().map(|p| p.cumulative_steps).collect(),
            ys: s.points.iter().map(|p| p.mean_return).collect(),
            err: Some(s.points.iter().map(|p| p.stderr).collect()),
        })
        .collect()
}

/// Runs every config with seeds `seed, seed + 1, ...` (`runs` each) and
/// aggregates their learning curves. Failed runs are reported and left out.
pub fn compare_algorithms(cfgs: &[RunConfig], runs: usize, out_dir: Option<&Path>) -> Result<Vec<AlgoSummary>> {
    if cfgs.is_empty() || runs == 0 {
        return Err(Error::Config("compare needs at least one config and one run".into()));
    }
    if cfgs.iter().any(|c| c.env != cfgs[0].env) {
        return Err(Error::Config("compared configs must share the environment".into()));
    }
    let labels: Vec<String> = cfgs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let dup = cfgs.iter().filter(|d| d.algo == c.algo).count() > 1;
            if dup {
                format!("{}-{i}", c.algo)
            } else {
                c.algo.to_string()
            }
        })
        .collect();
    let mut jobs = Vec::new();
    for (i, cfg) in cfgs.iter().enumerate() {
        cfg.validate()?;
        let base = cfg.seed()?;
        for k in 0..runs {
            let mut c = cfg.clone();
            c.seed = Some(base + k as u64);
            c.output = out_dir.map(|d| d.join(&labels[i]).join(format!("seed_{k}")));
            jobs.push((i, c));
        }
    }
    let results: Vec<(usize, u64, Result<RunOutcome>)> = jobs
        .into_par_iter()
        .map(|(i, c)| {
            let seed = c.seed.unwrap_or_default();
            (i, seed, run_experiment(&c))
        })
        .collect();
    let mut summaries: Vec<AlgoSummary> = labels
        .iter()
        .map(|l| AlgoSummary {
            label: l.clone(),
            points: Vec::new(),
            logs: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for (i, seed, res) in results {
        match res {
            Ok(out) => summaries[i].logs.push(out.log),
            Err(e) => {
                warn!("{} seed {seed} failed: {e}", summaries[i].label);
                summaries[i].failures.push(format!("seed {seed}: {e}"));
            }
        }
    }
    for s in &mut summaries {
        s.points = aggregate(&s.logs);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("aggregate.csv"), aggregate_csv(&summaries))?;
        let failures: String = summaries
            .iter()
            .flat_map(|s| s.failures.iter().map(move |f| format!("{}: {f}\n", s.label)))
            .collect();
        fs::write(dir.join("failures.txt"), failures)?;
        let svg = render_svg(&summary_curves(&summaries), &format!("{} ({runs} runs)", cfgs[0].env), "environment steps", "mean episode return");
        fs::write(dir.join("plot.svg"), svg)?;
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub stepsize: f64,
    /// Mean return over the last five iterations, or NaN if the run failed.
    pub final_return: f64,
}

/// Runs the natural-gradient baseline at each stepsize `1/lambda`.
pub fn sweep_stepsize(cfg: &RunConfig, stepsizes: &[f64], out_dir: Option<&Path>) -> Result<Vec<SweepResult>> {
    cfg.validate()?;
    let results: Vec<SweepResult> = stepsizes
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut c = cfg.clone();
            c.algo = Algo::NaturalGradient;
            c.stepsize = s;
            c.output = out_dir.map(|d| d.join(format!("stepsize_{i}")));
            let final_return = match run_experiment(&c) {
                Ok(out) => out.log.final_return(5),
                Err(e) => {
                    warn!("stepsize {s}: {e}");
                    f64::NAN
                }
            };
            SweepResult { stepsize: s, final_return }
        })
        .collect();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut text = String::from("stepsize,final_return\n");
        for r in &results {
            text.push_str(&format!("{:?},{:?}\n", r.stepsize, r.final_return));
        }
        fs::write(dir.join("sweep.csv"), text)?;
    }
    Ok(results)
}

pub fn best_stepsize(results: &[SweepResult]) -> Option<f64> {
    results
        .iter()
        .filter(|r| r.final_return.is_finite())
        .max_by(|a, b| a.final_return.total_cmp(&b.final_return))
        .map(|r| r.stepsize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyParams {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for CertifyParams {
    fn default() -> Self {
        CertifyParams {
            instances: 1000,
            max_states: 10,
            max_actions: 5,
            gamma: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyRow {
    pub instance_id: usize,
    pub states: usize,
    pub actions: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub lower_bound: f64,
    pub eta_new: f64,
    pub slack: f64,
    pub epsilon_1a: f64,
    pub lower_bound_1a: f64,
    pub slack_1a: f64,
}

impl CertifyRow {
    pub fn tighter_1a(&self) -> bool {
        self.lower_bound_1a > self.lower_bound
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyReport {
    pub rows: Vec<CertifyRow>,
}

impl CertifyReport {
    pub fn min_slack(&self) -> f64 {
        self.rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn min_slack_1a(&self) -> f64 {
        self.rows.iter().map(|r| r.slack_1a).fold(f64::INFINITY, f64::min)
    }

    pub fn fraction_1a_tighter(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.tighter_1a()).count() as f64 / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "instance_id,states,actions,alpha,epsilon,lower_bound,eta_new,slack,epsilon_1a,lower_bound_1a,slack_1a,tighter_1a\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}\n",
                r.instance_id,
                r.states,
                r.actions,
                r.alpha,
                r.epsilon,
                r.lower_bound,
                r.eta_new,
                r.slack,
                r.epsilon_1a,
                r.lower_bound_1a,
                r.slack_1a,
                r.tighter_1a() as u8
            ));
        }
        out
    }
}

/// Certifies both improvement bounds on random `(MDP, pi, pi~)` triples, with
/// `pi~` a random mixture between `pi` and another random policy so that the
/// policy distance varies across instances.
pub fn certify_suite(params: &CertifyParams) -> Result<CertifyReport> {
    if params.max_states == 0 || params.max_actions == 0 {
        return Err(Error::Config("instance sizes must be at least 1".into()));
    }
    if !(params.gamma > 0.0 && params.gamma < 1.0) {
        return Err(Error::Config("gamma must be in (0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut instances = Vec::with_capacity(params.instances);
    for _ in 0..params.instances {
        let s = rng.random_range(1..=params.max_states);
        let a = rng.random_range(1..=params.max_actions);
        let mdp = random_mdp_with(s, a, params.gamma, &mut rng)?;
        let pi = random_policy(s, a, &mut rng);
        let other = random_policy(s, a, &mut rng);
        let mix: f64 = rng.random();
        instances.push((mdp, pi, other, mix));
    }
    let rows = instances
        .into_par_iter()
        .enumerate()
        .map(|(id, (mdp, pi, other, mix))| {
            let pi_tilde = cpi_mixture(&pi, &other, mix)?;
            let t1 = certify_theorem1(&mdp, &pi, &pi_tilde)?;
            let t1a = certify_theorem1a(&mdp, &pi, &pi_tilde)?;
            Ok(CertifyRow {
                instance_id: id,
                states: mdp.num_states(),
                actions: mdp.num_actions(),
                alpha: t1.alpha,
                epsilon: t1.epsilon,
                lower_bound: t1.lower_bound,
                eta_new: t1.eta_new,
                slack: t1.slack,
                epsilon_1a: t1a.epsilon,
                lower_bound_1a: t1a.lower_bound,
                slack_1a: t1a.slack,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CertifyReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_is_arithmetic_mean() {
        let mk = |ret: f64| RunLog {
            rows: vec![LogRow {
                iteration: 0,
                env_steps: 10,
                cumulative_steps: 10,
                mean_return: ret,
                mean_length: 1.0,
                eta_estimate: None,
                eta_exact: None,
                surrogate: None,
                kl: None,
                beta: None,
                backtracks: None,
                cg_residual: None,
                accepted: true,
            }],
        };
        let logs: Vec<RunLog> = [1.0, 2.0, 3.0, 4.0, 5.0].into_iter().map(mk).collect();
        let pts = aggregate(&logs);
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].mean_return, 3.0);
        assert!((pts[0].stderr - (2.5f64).sqrt() / 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_certification_has_header_only() {
        let report = certify_suite(&CertifyParams {
            instances: 0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(report.to_csv().lines().count(), 1);
    }
}
