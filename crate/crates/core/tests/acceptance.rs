//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! `cargo test -p trpo-core --test acceptance -- 3 7` runs a subset.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use trpo_core::baselines::{cem_optimize, evaluate_policy, BaselineConfig, BaselineKind};
use trpo_core::env::{random_mdp_with, random_policy, CartPole, EnvSelector, TabularEnv};
use trpo_core::harness::config::{Algo, RunConfig};
use trpo_core::harness::{
    certify_suite, load_checkpoint, resume_experiment, run_experiment, CertifyParams, CHECKPOINT_DIR, PROGRESS_FILE,
};
use trpo_core::mdp::{eta_difference_identity, evaluate_exact, policy_iteration, TabularMdp, TabularPolicy};
use trpo_core::policy::{NetworkSpec, Observation, Policy};
use trpo_core::sampling::{
    build_vine, rollout_single_path, surrogate_from_anchors, surrogate_from_vine, BranchActions, SamplingConfig,
    SamplingScheme, VineConfig, VineMode,
};
use trpo_core::solver::{conjugate_gradient, trpo_iteration, FvpContext, StepReport, TrustRegionConfig};
use trpo_core::theory::{
    certify_theorem1, certify_theorem1a, cpi_mixture, mm_policy_iteration, surrogate_softmax_gradient,
};

use common::{iterative_eta, iterative_q, optimal_eta, rel_err, series_visitation};

type Outcome = Result<(bool, String), String>;

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "advantage identity", c1_identity),
        (2, "first-order surrogate match", c2_first_order),
        (3, "improvement bound certification", c3_certification),
        (4, "MM policy iteration monotonicity", c4_mm),
        (5, "solver numerics", c5_solver_numerics),
        (6, "trust-region constraint enforcement", c6_constraint),
        (7, "cart-pole learning", c7_cartpole),
        (8, "vine variance", c8_vine_variance),
        (9, "self-normalized baseline invariance", c9_shift_invariance),
        (10, "determinism and resume", c10_determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {id}: {} {name}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn random_triple(rng: &mut ChaCha8Rng, max_s: usize, max_a: usize, gamma: f64) -> (TabularMdp, TabularPolicy, TabularPolicy) {
    let s = rng.random_range(1..=max_s);
    let a = rng.random_range(1..=max_a);
    let mdp = random_mdp_with(s, a, gamma, rng).unwrap();
    let pi = random_policy(s, a, rng);
    let pi_tilde = random_policy(s, a, rng);
    (mdp, pi, pi_tilde)
}

fn c1_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..1000 {
        let gamma = rng.random_range(0.5..0.95);
        let (mdp, pi, pi_tilde) = random_triple(&mut rng, 10, 5, gamma);
        let (lhs, rhs) = eta_difference_identity(&mdp, &pi, &pi_tilde).map_err(e)?;
        worst = worst.max((lhs - rhs).abs());
        // Right-hand side rebuilt from series visitation and iterated Q values.
        let rho = series_visitation(&mdp, &pi_tilde);
        let q = iterative_q(&mdp, &pi);
        let na = mdp.num_actions();
        let mut oracle_rhs = 0.0;
        for s in 0..mdp.num_states() {
            let v: f64 = (0..na).map(|a| pi.prob(s, a) * q[s * na + a]).sum();
            let inner: f64 = (0..na).map(|a| pi_tilde.prob(s, a) * (q[s * na + a] - v)).sum();
            oracle_rhs += rho[s] * inner;
        }
        let oracle_lhs = iterative_eta(&mdp, &pi_tilde) - iterative_eta(&mdp, &pi);
        worst_oracle = worst_oracle.max((oracle_lhs - oracle_rhs).abs()).max((lhs - oracle_lhs).abs());
    }
    Ok((
        worst <= 1e-8 && worst_oracle <= 1e-8,
        format!("max |lhs - rhs| = {worst:.2e}, max oracle discrepancy = {worst_oracle:.2e} (tol 1e-8)"),
    ))
}

fn c2_first_order() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..100 {
        // One state makes eta independent of the policy.
        let s = rng.random_range(2..=8);
        let a = rng.random_range(2..=4);
        let gamma = rng.random_range(0.5..0.95);
        let mdp = random_mdp_with(s, a, gamma, &mut rng).map_err(e)?;
        let logits: Vec<f64> = (0..s * a).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eval = evaluate_exact(&mdp, &TabularPolicy::softmax(s, a, &logits)).map_err(e)?;
        let analytic = surrogate_softmax_gradient(&eval, &logits);
        let mut fd = vec![0.0; logits.len()];
        for i in 0..logits.len() {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += h;
            down[i] -= h;
            let eta_up = evaluate_exact(&mdp, &TabularPolicy::softmax(s, a, &up)).map_err(e)?.eta;
            let eta_down = evaluate_exact(&mdp, &TabularPolicy::softmax(s, a, &down)).map_err(e)?.eta;
            fd[i] = (eta_up - eta_down) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    Ok((worst <= 1e-4, format!("max relative error = {worst:.2e} (tol 1e-4)")))
}

fn c3_certification() -> Outcome {
    let report = certify_suite(&CertifyParams::default()).map_err(e)?;
    let min_slack = report.min_slack();
    let not_tighter = report.rows.iter().filter(|r| r.lower_bound_1a < r.lower_bound).count();

    // Independent recomputation of every certificate ingredient on a separate set of triples.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut oracle_min_slack = f64::INFINITY;
    let mut oracle_mismatch: f64 = 0.0;
    let mut oracle_not_tighter = 0;
    let n_oracle = 200;
    for _ in 0..n_oracle {
        let (mdp, pi, other) = random_triple(&mut rng, 10, 5, 0.9);
        let pi_tilde = cpi_mixture(&pi, &other, rng.random()).map_err(e)?;
        let t1 = certify_theorem1(&mdp, &pi, &pi_tilde).map_err(e)?;
        let t1a = certify_theorem1a(&mdp, &pi, &pi_tilde).map_err(e)?;
        let (n, na, g) = (mdp.num_states(), mdp.num_actions(), mdp.discount());
        let q = iterative_q(&mdp, &pi);
        let rho = series_visitation(&mdp, &pi);
        let eta_pi = iterative_eta(&mdp, &pi);
        let eta_new = iterative_eta(&mdp, &pi_tilde);
        let mut eps: f64 = 0.0;
        let mut eps_1a: f64 = 0.0;
        let mut alpha: f64 = 0.0;
        let mut surrogate = eta_pi;
        for s in 0..n {
            let v: f64 = (0..na).map(|a| pi.prob(s, a) * q[s * na + a]).sum();
            let mut tv = 0.0;
            let mut num = 0.0;
            let mut den = 0.0;
            for a in 0..na {
                let adv = q[s * na + a] - v;
                eps = eps.max(adv.abs());
                let d = pi_tilde.prob(s, a) - pi.prob(s, a);
                tv += 0.5 * d.abs();
                num += d * q[s * na + a];
                den += d.abs();
                surrogate += rho[s] * pi_tilde.prob(s, a) * adv;
            }
            if den > 0.0 {
                eps_1a = eps_1a.max(num.abs() / den);
            }
            alpha = alpha.max(tv);
        }
        let c = |eps: f64| 2.0 * eps * g / ((1.0 - g) * (1.0 - g));
        let lb = surrogate - c(eps) * alpha * alpha;
        let lb_1a = surrogate - c(eps_1a) * alpha * alpha;
        oracle_min_slack = oracle_min_slack.min(eta_new - lb).min(eta_new - lb_1a);
        oracle_mismatch = oracle_mismatch
            .max((lb - t1.lower_bound).abs())
            .max((lb_1a - t1a.lower_bound).abs())
            .max((eta_new - t1.eta_new).abs());
        if lb_1a < lb - 1e-12 {
            oracle_not_tighter += 1;
        }
    }
    let ok = min_slack >= -1e-9
        && report.min_slack_1a() >= -1e-9
        && not_tighter == 0
        && oracle_min_slack >= -1e-9
        && oracle_mismatch <= 1e-8
        && oracle_not_tighter == 0;
    Ok((
        ok,
        format!(
            "{} instances: min slack {:.2e}, min slack (per-state) {:.2e}, per-state bound below the uniform bound on {} instances, strictly tighter on {:.0}%; oracle check on {n_oracle}: min slack {:.2e}, max mismatch {:.2e}",
            report.rows.len(),
            min_slack,
            report.min_slack_1a(),
            not_tighter,
            100.0 * report.fraction_1a_tighter(),
            oracle_min_slack,
            oracle_mismatch
        ),
    ))
}

/// MM iteration on 50 random MDPs. Criterion run at gamma = 0.7 with 400 iterations.
fn c4_mm() -> Outcome {
    let gamma = 0.7;
    let iters = 400;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_decrease: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut worst_pi_oracle: f64 = 0.0;
    let mut max_iters_needed = 0;
    for _ in 0..50 {
        let s = rng.random_range(2..=6);
        let a = rng.random_range(2..=3);
        let mdp = random_mdp_with(s, a, gamma, &mut rng).map_err(e)?;
        let (_, opt) = policy_iteration(&mdp).map_err(e)?;
        worst_pi_oracle = worst_pi_oracle.max((opt.eta - optimal_eta(&mdp)).abs());
        let trace = mm_policy_iteration(&mdp, &TabularPolicy::uniform(s, a), iters).map_err(e)?;
        for w in trace.windows(2) {
            worst_decrease = worst_decrease.min(w[1].eta - w[0].eta);
        }
        worst_gap = worst_gap.max(opt.eta - trace.last().unwrap().eta);
        let needed = trace.iter().position(|it| opt.eta - it.eta < 1e-3).unwrap_or(usize::MAX);
        max_iters_needed = max_iters_needed.max(needed);
    }
    let ok = worst_decrease >= -1e-9 && worst_gap <= 1e-3 && worst_pi_oracle <= 1e-8;
    Ok((
        ok,
        format!(
            "gamma {gamma}, {iters} iterations: largest decrease {:.2e}, largest final gap {worst_gap:.2e}, iterations to 1e-3 at most {}",
            (-worst_decrease).max(0.0),
            if max_iters_needed == usize::MAX { "never".to_string() } else { max_iters_needed.to_string() }
        ),
    ))
}

fn random_observation(rng: &mut ChaCha8Rng, dim: usize) -> Observation {
    Observation::Vector((0..dim).map(|_| StandardNormal.sample(rng)).collect())
}

fn c5_solver_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let specs = [
        NetworkSpec::categorical(3, vec![5], vec![3]),
        NetworkSpec::categorical(2, vec![3, 3], vec![2, 2]),
        NetworkSpec::gaussian(2, vec![4], 2),
        NetworkSpec::gaussian(4, vec![], 1),
    ];
    let mut worst_fvp: f64 = 0.0;
    let mut worst_glp: f64 = 0.0;
    for spec in specs {
        let policy = Policy::new(spec).map_err(e)?;
        let n = policy.num_params();
        if n > 50 {
            return Err(format!("test network has {n} parameters"));
        }
        let theta: Vec<f64> = policy.spec.init_params(&mut rng).0.iter().map(|t| t + 0.3 * rng.random::<f64>()).collect();
        let states: Vec<Observation> = (0..4).map(|_| random_observation(&mut rng, policy.spec.input_dim)).collect();
        let old: Vec<_> = states.iter().map(|s| policy.forward(&theta, s).unwrap()).collect();
        let mean_kl = |t: &[f64]| -> f64 {
            states
                .iter()
                .zip(&old)
                .map(|(s, d)| d.kl(&policy.forward(t, s).unwrap()).unwrap())
                .sum::<f64>()
                / states.len() as f64
        };
        let fvp = FvpContext::analytic(&policy, &theta, &states, 0.0).map_err(e)?;
        let h = 1e-4;
        let mut dense_fvp = Vec::with_capacity(n * n);
        let mut dense_fd = Vec::with_capacity(n * n);
        for i in 0..n {
            let mut unit = vec![0.0; n];
            unit[i] = 1.0;
            dense_fvp.extend(fvp.apply(&unit).map_err(e)?);
            for j in 0..n {
                let at = |si: f64, sj: f64| {
                    let mut t = theta.clone();
                    t[i] += si * h;
                    t[j] += sj * h;
                    mean_kl(&t)
                };
                dense_fd.push((at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h));
            }
        }
        worst_fvp = worst_fvp.max(rel_err(&dense_fvp, &dense_fd));

        for s in &states {
            let action = policy.forward(&theta, s).map_err(e)?.sample(&mut rng);
            let g = policy.grad_log_prob(&theta, s, &action).map_err(e)?;
            let fd: Vec<f64> = (0..n)
                .map(|i| {
                    let mut up = theta.clone();
                    let mut down = theta.clone();
                    up[i] += 1e-6;
                    down[i] -= 1e-6;
                    (policy.log_prob(&up, s, &action).unwrap() - policy.log_prob(&down, s, &action).unwrap()) / 2e-6
                })
                .collect();
            worst_glp = worst_glp.max(rel_err(&g, &fd));
        }
    }

    let mut worst_cg: f64 = 0.0;
    for _ in 0..20 {
        let n = 20;
        let m = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let a = m.transpose() * &m + nalgebra::DMatrix::<f64>::identity(n, n);
        let b: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let direct = a.clone().cholesky().ok_or("test matrix is not SPD")?.solve(&nalgebra::DVector::from_column_slice(&b));
        let cg = conjugate_gradient(|v| Ok((&a * nalgebra::DVector::from_column_slice(v)).iter().copied().collect()), &b, 60)
            .map_err(e)?;
        worst_cg = worst_cg.max(rel_err(&cg.solution, direct.as_slice()));
    }
    let ok = worst_fvp <= 1e-3 && worst_cg <= 1e-8 && worst_glp <= 1e-4;
    Ok((
        ok,
        format!("FVP vs FD Hessian {worst_fvp:.2e} (tol 1e-3), CG vs direct {worst_cg:.2e} (tol 1e-8), grad log-prob vs FD {worst_glp:.2e} (tol 1e-4)"),
    ))
}

struct CartPoleRun {
    first_solved: Option<usize>,
    reports: Vec<StepReport>,
}

/// TRPO single-path on discrete cart-pole. Stops after the first iteration with
/// mean episode length >= 950 unless `full` is set.
fn train_cartpole(seed: u64, full: bool) -> Result<CartPoleRun, String> {
    let env = CartPole::new(false);
    let policy = Policy::new(NetworkSpec::categorical(4, vec![30], vec![2])).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = policy.spec.init_params(&mut rng);
    let sampling = SamplingConfig {
        gamma: 0.99,
        scheme: SamplingScheme::SinglePath {
            num_paths: 50,
            horizon: 1000,
        },
        center_q: true,
    };
    let trust = TrustRegionConfig {
        delta: 0.01,
        ..Default::default()
    };
    let mut run = CartPoleRun {
        first_solved: None,
        reports: Vec::new(),
    };
    for it in 0..100 {
        let (next, outcome) = trpo_iteration(&env, &policy, &theta, &sampling, &trust, &mut rng).map_err(e)?;
        theta = next;
        run.reports.push(outcome.report);
        if outcome.stats.mean_length >= 950.0 && run.first_solved.is_none() {
            run.first_solved = Some(it);
            if !full {
                break;
            }
        }
    }
    Ok(run)
}

fn c6_constraint() -> Outcome {
    let run = train_cartpole(0, true)?;
    let accepted: Vec<&StepReport> = run.reports.iter().filter(|r| r.accepted).collect();
    let bad = accepted
        .iter()
        .filter(|r| !(r.kl_after <= 0.01 + 1e-8 && r.surrogate_improvement > 0.0))
        .count();
    let max_kl = accepted.iter().map(|r| r.kl_after).fold(0.0, f64::max);
    Ok((
        bad == 0 && !accepted.is_empty(),
        format!(
            "{} iterations, {} accepted steps, {bad} violations, max accepted KL {max_kl:.6}",
            run.reports.len(),
            accepted.len()
        ),
    ))
}

fn c7_cartpole() -> Outcome {
    let mut solved = 0;
    let mut firsts = Vec::new();
    for seed in 0..5 {
        let run = train_cartpole(seed, false)?;
        if run.first_solved.is_some() {
            solved += 1;
        }
        firsts.push(run.first_solved.map_or("-".to_string(), |i| i.to_string()));
    }

    let env = CartPole::new(true);
    let linear = Policy::new(NetworkSpec::gaussian(4, vec![], 1)).map_err(e)?;
    let cfg = BaselineConfig {
        kind: BaselineKind::Cem,
        cem_population: 50,
        cem_elite_frac: 0.2,
        cem_init_stddev: 1.0,
        cem_episodes: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cem = cem_optimize(&env, &linear, &cfg, 50, 1000, &mut rng).map_err(e)?;
    let (fresh, _) = evaluate_policy(&env, &linear, &cem.best_theta, 20, 1000, 777).map_err(e)?;
    let ok = solved >= 4 && linear.num_params() == 6 && fresh >= 950.0;
    Ok((
        ok,
        format!(
            "TRPO single-path reached length >= 950 on {solved}/5 seeds (first iteration per seed: {}); CEM linear policy ({} params) fresh 20-episode return {fresh:.1}",
            firsts.join(","),
            linear.num_params()
        ),
    ))
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Fixed 5-state, 3-action MDP whose episodes start in state 0.
fn variance_mdp() -> TabularMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let base = random_mdp_with(5, 3, 0.9, &mut rng).unwrap();
    let (n, na) = (5, 3);
    let mut p = Vec::with_capacity(n * na * n);
    for s in 0..n {
        for a in 0..na {
            p.extend_from_slice(base.transition_row(s, a));
        }
    }
    let mut rho0 = vec![0.0; n];
    rho0[0] = 1.0;
    TabularMdp::new(n, na, p, base.rewards().to_vec(), rho0, 0.9).unwrap()
}

/// Estimates of `Q(s0, a) - Q(s0, 0)` for a = 1, 2 with `budget` Q samples at `s0`.
fn vine_differences(env: &TabularEnv, policy: &Policy, theta: &[f64], budget: usize, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let anchors = budget / 3;
    let cfg = VineConfig {
        trunk_paths: anchors,
        trunk_len: 1,
        num_anchors: anchors,
        actions_per_state: 3,
        rollout_len: horizon,
        branch_actions: BranchActions::Exhaustive,
    };
    let rs = build_vine(env, policy, theta, &cfg, 0.9, rng).unwrap();
    let mut sums = [0.0; 3];
    for anchor in &rs.anchors {
        assert_eq!(anchor.observation, Observation::Discrete(0));
        for (action, q) in anchor.actions.iter().zip(&anchor.q_hats) {
            sums[action.as_index().unwrap()] += q;
        }
    }
    let k = rs.anchors.len() as f64;
    vec![(sums[1] - sums[0]) / k, (sums[2] - sums[0]) / k]
}

fn single_path_differences(env: &TabularEnv, policy: &Policy, theta: &[f64], budget: usize, horizon: usize, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    let batch = rollout_single_path(env, policy, theta, budget, horizon, 0.9, rng).unwrap();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for traj in &batch.trajectories {
        let a = traj.actions[0].as_index().unwrap();
        sums[a] += traj.q_hats[0];
        counts[a] += 1;
    }
    if counts.contains(&0) {
        return None;
    }
    let mean = |a: usize| sums[a] / counts[a] as f64;
    Some(vec![mean(1) - mean(0), mean(2) - mean(0)])
}

fn c8_vine_variance() -> Outcome {
    let mdp = variance_mdp();
    let env = TabularEnv::new(mdp);
    let policy = Policy::new(NetworkSpec::tabular(5, 3)).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(888);
    let theta: Vec<f64> = (0..15).map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let (budget, horizon, trials) = (300, 60, 20);
    let mut wins = 0;
    let mut ratios = Vec::new();
    for _ in 0..100 {
        let mut vine = vec![Vec::new(), Vec::new()];
        let mut single = vec![Vec::new(), Vec::new()];
        while single[0].len() < trials {
            if let Some(d) = single_path_differences(&env, &policy, &theta, budget, horizon, &mut rng) {
                single[0].push(d[0]);
                single[1].push(d[1]);
            }
        }
        for _ in 0..trials {
            let d = vine_differences(&env, &policy, &theta, budget, horizon, &mut rng);
            vine[0].push(d[0]);
            vine[1].push(d[1]);
        }
        let var_vine = sample_variance(&vine[0]) + sample_variance(&vine[1]);
        let var_single = sample_variance(&single[0]) + sample_variance(&single[1]);
        if var_vine <= var_single {
            wins += 1;
        }
        ratios.push(var_vine / var_single);
    }
    ratios.sort_by(f64::total_cmp);
    Ok((
        wins >= 90,
        format!(
            "vine variance <= single-path variance in {wins}/100 repetitions ({budget} Q samples, {trials} trials each); median variance ratio {:.3}",
            ratios[50]
        ),
    ))
}

fn c9_shift_invariance() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let cases: Vec<(Box<dyn trpo_core::env::Environment>, Policy, BranchActions)> = vec![
        (
            EnvSelector::Random { states: 6, actions: 3, seed: 9 }.build(0.9).map_err(e)?,
            Policy::new(NetworkSpec::tabular(6, 3)).map_err(e)?,
            BranchActions::Policy,
        ),
        (
            EnvSelector::Random { states: 6, actions: 3, seed: 10 }.build(0.9).map_err(e)?,
            Policy::new(NetworkSpec::tabular(6, 3)).map_err(e)?,
            BranchActions::Uniform,
        ),
        (
            Box::new(CartPole::new(false)),
            Policy::new(NetworkSpec::categorical(4, vec![8], vec![2])).map_err(e)?,
            BranchActions::Policy,
        ),
    ];
    for (env, policy, branch) in cases {
        let theta = policy.spec.init_params(&mut rng);
        let cfg = VineConfig {
            trunk_paths: 5,
            trunk_len: 40,
            num_anchors: 30,
            actions_per_state: 4,
            rollout_len: 30,
            branch_actions: branch,
        };
        let rs = build_vine(env.as_ref(), &policy, &theta, &cfg, 0.9, &mut rng).map_err(e)?;
        let base = surrogate_from_vine(&rs, &policy, &theta, VineMode::SelfNormalized).map_err(e)?;
        for shift in [-37.5, 1.0, 250.0] {
            let mut anchors = rs.anchors.clone();
            for a in &mut anchors {
                a.q_hats.iter_mut().for_each(|q| *q += shift);
            }
            let shifted = surrogate_from_anchors(anchors, &policy, &theta, VineMode::SelfNormalized).map_err(e)?;
            let diff = base.grad.iter().zip(shifted.grad.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
        }
    }
    Ok((worst < 1e-10, format!("max gradient change {worst:.2e} (tol 1e-10)")))
}

fn determinism_case(label: &str, mut cfg: RunConfig) -> Result<(bool, String), String> {
    let total = cfg.iterations;
    let split = total / 2;
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir()).collect::<Result<_, _>>().map_err(e)?;
    cfg.checkpoint_every = split;
    cfg.output = Some(dirs[0].path().to_path_buf());
    let a = run_experiment(&cfg).map_err(e)?;
    cfg.output = Some(dirs[1].path().to_path_buf());
    let b = run_experiment(&cfg).map_err(e)?;
    let log_a = fs::read(dirs[0].path().join(PROGRESS_FILE)).map_err(e)?;
    let log_b = fs::read(dirs[1].path().join(PROGRESS_FILE)).map_err(e)?;
    let identical = log_a == log_b && a.theta.iter().zip(b.theta.iter()).all(|(x, y)| x.to_bits() == y.to_bits());

    // Interrupted run: stop at the split point, then resume to the full length.
    cfg.output = Some(dirs[2].path().to_path_buf());
    cfg.iterations = split;
    run_experiment(&cfg).map_err(e)?;
    let ckpt = load_checkpoint(&dirs[2].path().join(CHECKPOINT_DIR).join(format!("ckpt_{split:06}.txt"))).map_err(e)?;
    let resumed = resume_experiment(&ckpt, Some(total), None).map_err(e)?;
    let log_c = fs::read(dirs[2].path().join(PROGRESS_FILE)).map_err(e)?;
    let resumes = log_c == log_a && resumed.theta.iter().zip(a.theta.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok((
        identical && resumes,
        format!("{label}: repeat {}, resume {}", if identical { "identical" } else { "DIFFERS" }, if resumes { "exact" } else { "DIFFERS" }),
    ))
}

fn c10_determinism() -> Outcome {
    let base = RunConfig {
        seed: Some(17),
        iterations: 6,
        ..Default::default()
    };
    let cases = vec![
        (
            "trpo-sp cartpole",
            RunConfig {
                paths: 5,
                horizon: 200,
                center_q: true,
                ..base.clone()
            },
        ),
        (
            "trpo-vine chain",
            RunConfig {
                env: "chain:6".parse().map_err(e)?,
                algo: Algo::TrpoVine,
                vine_trunk_paths: 4,
                vine_trunk_len: 30,
                vine_anchors: 20,
                vine_rollout_len: 30,
                ..base.clone()
            },
        ),
        (
            "natural-gradient cartpole",
            RunConfig {
                algo: Algo::NaturalGradient,
                paths: 5,
                horizon: 200,
                ..base.clone()
            },
        ),
        (
            "cem cartpole-continuous",
            RunConfig {
                env: EnvSelector::CartPoleContinuous,
                algo: Algo::Cem,
                hidden: Vec::new(),
                cem_population: 10,
                cem_episodes: 1,
                horizon: 200,
                ..base.clone()
            },
        ),
    ];
    let mut ok = true;
    let mut details = Vec::new();
    for (label, cfg) in cases {
        let (pass, d) = determinism_case(label, cfg)?;
        ok &= pass;
        details.push(d);
    }
    Ok((ok, details.join("; ")))
}
