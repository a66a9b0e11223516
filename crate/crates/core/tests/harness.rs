use std::fs;

use proptest::prelude::*;

use trpo_core::error::Error;
use trpo_core::harness::config::{Algo, RunConfig};
use trpo_core::harness::log::RunLog;
use trpo_core::harness::{
    best_stepsize, certify_suite, compare_algorithms, run_experiment, sweep_stepsize, CertifyParams, SweepResult,
    CHECKPOINT_DIR, CONFIG_FILE, LATEST_CHECKPOINT, PROGRESS_FILE, TIMING_FILE,
};

fn chain_config(algo: Algo, iterations: usize) -> RunConfig {
    RunConfig {
        env: "chain:5".parse().unwrap(),
        algo,
        iterations,
        seed: Some(3),
        gamma: 0.9,
        paths: 10,
        horizon: 40,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn config_text_round_trips(
        iterations in 1usize..500,
        seed in any::<u64>(),
        gamma in 0.01f64..0.999,
        delta in 1e-4f64..1.0,
        hidden in proptest::collection::vec(1usize..64, 0..3),
        algo in 0usize..5,
        center in any::<bool>(),
    ) {
        let cfg = RunConfig {
            iterations,
            seed: Some(seed),
            gamma,
            hidden,
            algo: Algo::ALL[algo],
            center_q: center,
            trust: trpo_core::solver::TrustRegionConfig { delta, ..Default::default() },
            ..Default::default()
        };
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn config_errors_carry_line_numbers() {
    let text = "[run]\nseed = 1\n\n[trust_region]\ndelta = banana\n";
    match RunConfig::from_text(text) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(RunConfig::from_text("[run]\nno_such_key = 1\n").is_err());
    assert!(RunConfig::from_text("just words\n").is_err());
    let mut cfg = RunConfig::default();
    cfg.set("delta", "0.05").unwrap();
    assert_eq!(cfg.trust.delta, 0.05);
    assert!(cfg.set("delta", "-1").is_ok_and(|_| cfg.validate().is_err()));
}

#[test]
fn runs_need_a_seed() {
    let cfg = RunConfig {
        seed: None,
        ..chain_config(Algo::TrpoSinglePath, 1)
    };
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn run_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        output: Some(dir.path().to_path_buf()),
        checkpoint_every: 2,
        ..chain_config(Algo::TrpoSinglePath, 5)
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.log.rows.len(), 5);
    let parsed = RunLog::parse(&fs::read_to_string(dir.path().join(PROGRESS_FILE)).unwrap()).unwrap();
    assert_eq!(parsed, out.log);
    // Tabular runs report the exact return of the current policy.
    assert!(parsed.rows.iter().all(|r| r.eta_exact.is_some()));
    assert_eq!(RunConfig::from_file(&dir.path().join(CONFIG_FILE)).unwrap(), cfg);
    assert!(dir.path().join(TIMING_FILE).exists());
    assert!(dir.path().join(LATEST_CHECKPOINT).exists());
    let ckpts: Vec<String> = fs::read_dir(dir.path().join(CHECKPOINT_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    for k in [0, 2, 4, 5] {
        assert!(ckpts.contains(&format!("ckpt_{k:06}.txt")), "{ckpts:?}");
    }
    let steps: usize = parsed.rows.iter().map(|r| r.env_steps).sum();
    assert_eq!(parsed.rows.last().unwrap().cumulative_steps, steps);
}

#[test]
fn compare_aggregates_every_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = vec![
        chain_config(Algo::TrpoSinglePath, 4),
        chain_config(Algo::VanillaPg, 4),
        chain_config(Algo::NaturalGradient, 4),
    ];
    let summaries = compare_algorithms(&cfgs, 2, Some(dir.path())).unwrap();
    assert_eq!(summaries.len(), 3);
    for s in &summaries {
        assert!(s.failures.is_empty(), "{:?}", s.failures);
        assert_eq!(s.points.len(), 4);
        assert!(s.points.iter().all(|p| p.runs == 2));
    }
    for f in ["aggregate.csv", "plot.svg", "failures.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 4);

    let mixed = vec![chain_config(Algo::TrpoSinglePath, 1), RunConfig::default()];
    assert!(compare_algorithms(&mixed, 1, None).is_err());
    assert!(compare_algorithms(&cfgs, 0, None).is_err());
}

#[test]
fn stepsize_sweep_reports_each_value() {
    let dir = tempfile::tempdir().unwrap();
    let results = sweep_stepsize(&chain_config(Algo::NaturalGradient, 6), &[0.01, 0.1, 1.0], Some(dir.path())).unwrap();
    assert_eq!(results.len(), 3);
    assert!(results.iter().all(|r| r.final_return.is_finite()));
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    let picks = [
        SweepResult { stepsize: 1.0, final_return: 2.0 },
        SweepResult { stepsize: 2.0, final_return: f64::NAN },
        SweepResult { stepsize: 3.0, final_return: 5.0 },
    ];
    assert_eq!(best_stepsize(&picks), Some(3.0));
    assert_eq!(best_stepsize(&[]), None);
}

#[test]
fn certify_handles_edge_sizes() {
    let empty = certify_suite(&CertifyParams { instances: 0, ..Default::default() }).unwrap();
    assert!(empty.rows.is_empty());
    assert_eq!(empty.fraction_1a_tighter(), 0.0);
    assert_eq!(empty.to_csv().lines().count(), 1);
    assert!(certify_suite(&CertifyParams { max_states: 0, ..Default::default() }).is_err());
    assert!(certify_suite(&CertifyParams { gamma: 1.0, ..Default::default() }).is_err());

    let small = certify_suite(&CertifyParams { instances: 50, seed: 9, ..Default::default() }).unwrap();
    assert_eq!(small.rows.len(), 50);
    assert!(small.min_slack() >= -1e-9);
    assert!(small.rows.iter().all(|r| r.lower_bound_1a >= r.lower_bound));
    let again = certify_suite(&CertifyParams { instances: 50, seed: 9, ..Default::default() }).unwrap();
    assert_eq!(small.to_csv(), again.to_csv());
}

#[test]
fn every_algorithm_runs_on_a_tabular_chain() {
    for algo in Algo::ALL {
        let cfg = RunConfig {
            vine_trunk_paths: 3,
            vine_trunk_len: 20,
            vine_anchors: 10,
            vine_rollout_len: 20,
            cem_population: 6,
            cem_episodes: 1,
            ..chain_config(algo, 3)
        };
        let out = run_experiment(&cfg).unwrap_or_else(|e| panic!("{algo}: {e}"));
        assert_eq!(out.log.rows.len(), 3, "{algo}");
    }
}
