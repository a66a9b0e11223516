use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use trpo_core::baselines::parse_sweep;
use trpo_core::harness::{
    self, best_stepsize, certify_suite, compare_algorithms, load_checkpoint, render_svg, resume_experiment,
    run_experiment, sweep_stepsize, Algo, CertifyParams, Curve, RunConfig, RunLog,
};
use trpo_core::Error;

#[derive(Parser)]
#[command(name = "trpo", version, about = "Trust-region policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run several algorithms over multiple seeds and plot mean learning curves.
    Compare(CompareArgs),
    /// Check the policy-improvement bounds on random tabular instances.
    Certify(CertifyArgs),
    /// Continue a run from a checkpoint.
    Resume(ResumeArgs),
    /// Plot a progress.csv or aggregate.csv as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Config file (key = value with [section] headers).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    cg_iters: Option<usize>,
    #[arg(long)]
    cg_damping: Option<f64>,
    #[arg(long)]
    backtrack_ratio: Option<f64>,
    #[arg(long)]
    max_backtracks: Option<usize>,
    #[arg(long)]
    fvp_subsample: Option<f64>,
    #[arg(long)]
    fim_mode: Option<String>,
    /// Any config key, as section.key=value; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("run.env", self.env.clone());
        push("run.algo", self.algo.clone());
        push("run.seed", self.seed.map(|v| v.to_string()));
        push("run.iterations", self.iterations.map(|v| v.to_string()));
        push("run.gamma", self.gamma.map(|v| v.to_string()));
        push("trust_region.delta", self.delta.map(|v| v.to_string()));
        push("trust_region.cg_iters", self.cg_iters.map(|v| v.to_string()));
        push("trust_region.cg_damping", self.cg_damping.map(|v| v.to_string()));
        push("trust_region.backtrack_ratio", self.backtrack_ratio.map(|v| v.to_string()));
        push("trust_region.max_backtracks", self.max_backtracks.map(|v| v.to_string()));
        push("trust_region.fvp_subsample", self.fvp_subsample.map(|v| v.to_string()));
        push("trust_region.fim_mode", self.fim_mode.clone());
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        Ok(())
    }

    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Sweep the natural-gradient stepsize 1/lambda as base,factor,count.
    #[arg(long)]
    sweep_stepsize: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated algorithms; defaults to the configured one.
    #[arg(long)]
    algos: Option<String>,
    /// Runs (seeds) per algorithm.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long)]
    output: PathBuf,
    /// Pick the natural-gradient stepsize from base,factor,count by final return.
    #[arg(long)]
    sweep_stepsize: Option<String>,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 10)]
    max_states: usize,
    #[arg(long, default_value_t = 5)]
    max_actions: usize,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; printed to stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ResumeArgs {
    /// Checkpoint file, or a run directory containing checkpoint.txt.
    #[arg(long)]
    checkpoint: PathBuf,
    /// New total iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Write to this directory instead of the run's own.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "learning curve")]
    title: String,
}

fn run(args: RunArgs) -> Result<(), Error> {
    let mut cfg = args.overrides.load()?;
    if let Some(dir) = args.output {
        cfg.output = Some(dir);
    }
    cfg.validate()?;
    if let Some(sweep) = &args.sweep_stepsize {
        let stepsizes = parse_sweep(sweep).map_err(|e| Error::Config(e.to_string()))?;
        let results = sweep_stepsize(&cfg, &stepsizes, cfg.output.as_deref())?;
        for r in &results {
            println!("stepsize {:e}: final return {:.4}", r.stepsize, r.final_return);
        }
        match best_stepsize(&results) {
            Some(best) => println!("best stepsize {best:e}"),
            None => return Err(Error::Invalid("every stepsize in the sweep failed".into())),
        }
        return Ok(());
    }
    let out = run_experiment(&cfg)?;
    if let Some(last) = out.log.rows.last() {
        println!(
            "finished {} iterations: mean return {:.4}, mean length {:.1}",
            out.log.rows.len(),
            last.mean_return,
            last.mean_length
        );
    } else {
        println!("finished 0 iterations");
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<(), Error> {
    let base = args.overrides.load()?;
    let algos: Vec<Algo> = match &args.algos {
        Some(list) => list.split(',').map(|a| a.trim().parse()).collect::<Result<_, _>>()?,
        None => vec![base.algo],
    };
    let mut cfgs = Vec::new();
    for algo in algos {
        let mut c = base.clone();
        c.algo = algo;
        if algo == Algo::NaturalGradient {
            if let Some(sweep) = &args.sweep_stepsize {
                let stepsizes = parse_sweep(sweep).map_err(|e| Error::Config(e.to_string()))?;
                let results = sweep_stepsize(&c, &stepsizes, Some(&args.output.join("sweep")))?;
                c.stepsize = best_stepsize(&results).ok_or_else(|| Error::Invalid("every stepsize in the sweep failed".into()))?;
                info!("natural gradient stepsize {:e} selected", c.stepsize);
            }
        }
        cfgs.push(c);
    }
    let summaries = compare_algorithms(&cfgs, args.runs, Some(&args.output))?;
    for s in &summaries {
        let last = s.points.last();
        println!(
            "{}: {} runs ok, {} failed, final mean return {}",
            s.label,
            s.logs.len(),
            s.failures.len(),
            last.map(|p| format!("{:.4} +- {:.4}", p.mean_return, p.stderr)).unwrap_or_else(|| "NA".into())
        );
    }
    if summaries.iter().all(|s| s.logs.is_empty()) {
        return Err(Error::Invalid("every run failed".into()));
    }
    Ok(())
}

fn certify(args: CertifyArgs) -> Result<(), Error> {
    let params = CertifyParams {
        instances: args.instances,
        max_states: args.max_states,
        max_actions: args.max_actions,
        gamma: args.gamma,
        seed: args.seed,
    };
    let report = certify_suite(&params)?;
    let csv = report.to_csv();
    match &args.output {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "instances {}: min slack {:e}, min slack (policy-dependent constant) {:e}, tighter fraction {:.3}",
        report.rows.len(),
        report.min_slack(),
        report.min_slack_1a(),
        report.fraction_1a_tighter()
    );
    Ok(())
}

fn resume(args: ResumeArgs) -> Result<(), Error> {
    let path = if args.checkpoint.is_dir() {
        args.checkpoint.join(harness::LATEST_CHECKPOINT)
    } else {
        args.checkpoint.clone()
    };
    let ckpt = load_checkpoint(&path)?;
    let out = resume_experiment(&ckpt, args.iterations, args.output.as_deref())?;
    println!("resumed from iteration {}; log now has {} rows", ckpt.iteration, out.log.rows.len());
    Ok(())
}

fn curves_from_file(path: &Path) -> Result<Vec<Curve>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if text.starts_with("algo,") {
        let mut curves: Vec<Curve> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| -> Result<f64, Error> {
                s.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("bad number '{s}'"),
                })
            };
            if f.len() != 6 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected 6 fields".into(),
                });
            }
            let (x, y, e) = (num(f[2])?, num(f[3])?, num(f[4])?);
            match curves.iter_mut().find(|c| c.label == f[0]) {
                Some(c) => {
                    c.xs.push(x);
                    c.ys.push(y);
                    c.err.get_or_insert_with(Vec::new).push(e);
                }
                None => curves.push(Curve {
                    label: f[0].to_string(),
                    xs: vec![x],
                    ys: vec![y],
                    err: Some(vec![e]),
                }),
            }
        }
        Ok(curves)
    } else {
        let log = RunLog::parse(&text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(vec![Curve {
            label: "mean return".into(),
            xs: log.rows.iter().map(|r| r.cumulative_steps as f64).collect(),
            ys: log.rows.iter().map(|r| r.mean_return).collect(),
            err: None,
        }])
    }
}

fn plot(args: PlotArgs) -> Result<(), Error> {
    let curves = curves_from_file(&args.input)?;
    let svg = render_svg(&curves, &args.title, "environment steps", "mean episode return");
    std::fs::write(&args.output, svg)?;
    println!("wrote {}", args.output.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::Certify(a) => certify(a),
        Command::Resume(a) => resume(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
