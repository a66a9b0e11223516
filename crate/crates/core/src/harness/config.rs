//! Run configuration: flat `key = value` text with `[section]` headers.
//!
//! Keys are addressed as `section.key`; keys before the first header belong to
//! `run`. Any key can be overridden with [`RunConfig::set`], which is what the
//! command-line flags use.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::env::{ActionSpace, EnvDescriptor, EnvSelector, ObservationSpace};
use crate::error::{Error, Result};
use crate::policy::NetworkSpec;
use crate::sampling::{BranchActions, SamplingConfig, SamplingScheme, VineConfig, VineMode};
use crate::solver::{FimMode, TrustRegionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    TrpoSinglePath,
    TrpoVine,
    NaturalGradient,
    VanillaPg,
    Cem,
}

impl Algo {
    pub const ALL: [Algo; 5] = [
        Algo::TrpoSinglePath,
        Algo::TrpoVine,
        Algo::NaturalGradient,
        Algo::VanillaPg,
        Algo::Cem,
    ];
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::TrpoSinglePath => "trpo-sp",
            Algo::TrpoVine => "trpo-vine",
            Algo::NaturalGradient => "natural-gradient",
            Algo::VanillaPg => "vanilla-pg",
            Algo::Cem => "cem",
        })
    }
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}' (trpo-sp|trpo-vine|natural-gradient|vanilla-pg|cem)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadChoice {
    /// Tabular softmax for discrete observations, otherwise an MLP head
    /// matching the action space.
    Auto,
    Tabular,
    Mlp,
}

impl fmt::Display for HeadChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadChoice::Auto => "auto",
            HeadChoice::Tabular => "tabular",
            HeadChoice::Mlp => "mlp",
        })
    }
}

impl FromStr for HeadChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(HeadChoice::Auto),
            "tabular" => Ok(HeadChoice::Tabular),
            "mlp" => Ok(HeadChoice::Mlp),
            _ => Err(Error::Config(format!("unknown head '{s}' (auto|tabular|mlp)"))),
        }
    }
}

fn branch_name(b: BranchActions) -> &'static str {
    match b {
        BranchActions::Policy => "policy",
        BranchActions::Uniform => "uniform",
        BranchActions::Exhaustive => "exhaustive",
    }
}

fn mode_name(m: VineMode) -> &'static str {
    match m {
        VineMode::Exhaustive => "exhaustive",
        VineMode::SelfNormalized => "self-normalized",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvSelector,
    pub algo: Algo,
    pub iterations: usize,
    /// Required; there is no implicit entropy source.
    pub seed: Option<u64>,
    pub gamma: f64,
    pub output: Option<PathBuf>,
    pub checkpoint_every: usize,

    pub hidden: Vec<usize>,
    pub head: HeadChoice,

    pub paths: usize,
    pub horizon: usize,
    pub center_q: bool,
    pub vine_trunk_paths: usize,
    pub vine_trunk_len: usize,
    pub vine_anchors: usize,
    pub vine_actions: usize,
    pub vine_rollout_len: usize,
    pub vine_branch: BranchActions,
    pub vine_mode: VineMode,

    pub trust: TrustRegionConfig,

    pub stepsize: f64,
    pub l2_delta: f64,
    pub cem_population: usize,
    pub cem_elite_frac: f64,
    pub cem_init_stddev: f64,
    pub cem_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BaselineConfig::default();
        RunConfig {
            env: EnvSelector::CartPole,
            algo: Algo::TrpoSinglePath,
            iterations: 100,
            seed: None,
            gamma: 0.99,
            output: None,
            checkpoint_every: 10,
            hidden: vec![30],
            head: HeadChoice::Auto,
            paths: 50,
            horizon: 1000,
            center_q: false,
            vine_trunk_paths: 10,
            vine_trunk_len: 200,
            vine_anchors: 100,
            vine_actions: 4,
            vine_rollout_len: 100,
            vine_branch: BranchActions::Policy,
            vine_mode: VineMode::SelfNormalized,
            trust: TrustRegionConfig::default(),
            stepsize: b.stepsize_inverse_lambda,
            l2_delta: b.l2_delta,
            cem_population: b.cem_population,
            cem_elite_frac: b.cem_elite_frac,
            cem_init_stddev: b.cem_init_stddev,
            cem_episodes: b.cem_episodes,
        }
    }
}

/// Every accepted key, in the order written by [`RunConfig::to_text`].
pub const KEYS: &[&str] = &[
    "run.env",
    "run.algo",
    "run.iterations",
    "run.seed",
    "run.gamma",
    "run.output",
    "run.checkpoint_every",
    "policy.hidden",
    "policy.head",
    "sampling.paths",
    "sampling.horizon",
    "sampling.center_q",
    "sampling.vine_trunk_paths",
    "sampling.vine_trunk_len",
    "sampling.vine_anchors",
    "sampling.vine_actions",
    "sampling.vine_rollout_len",
    "sampling.vine_branch",
    "sampling.vine_mode",
    "trust_region.delta",
    "trust_region.cg_iters",
    "trust_region.cg_damping",
    "trust_region.backtrack_ratio",
    "trust_region.max_backtracks",
    "trust_region.fvp_subsample",
    "trust_region.fim_mode",
    "baseline.stepsize",
    "baseline.l2_delta",
    "baseline.cem_population",
    "baseline.cem_elite_frac",
    "baseline.cem_init_stddev",
    "baseline.cem_episodes",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{value}' for {key}"))),
    }
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = "run".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            let full = format!("{section}.{}", key.trim());
            cfg.set(&full, value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Sets one key; bare keys are looked up in `run` first, then in the
    /// unique section that has them.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let full = if key.contains('.') {
            key.to_string()
        } else {
            let matches: Vec<&&str> = KEYS.iter().filter(|k| k.split('.').nth(1) == Some(key)).collect();
            match matches.as_slice() {
                [one] => one.to_string(),
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        };
        match full.as_str() {
            "run.env" => self.env = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "run.algo" => self.algo = value.parse()?,
            "run.iterations" => self.iterations = parse_value(&full, value)?,
            "run.seed" => self.seed = Some(parse_value(&full, value)?),
            "run.gamma" => self.gamma = parse_value(&full, value)?,
            "run.output" => self.output = (!value.is_empty()).then(|| PathBuf::from(value)),
            "run.checkpoint_every" => self.checkpoint_every = parse_value(&full, value)?,
            "policy.hidden" => {
                self.hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| parse_value(&full, t))
                    .collect::<Result<_>>()?
            }
            "policy.head" => self.head = value.parse()?,
            "sampling.paths" => self.paths = parse_value(&full, value)?,
            "sampling.horizon" => self.horizon = parse_value(&full, value)?,
            "sampling.center_q" => self.center_q = parse_bool(&full, value)?,
            "sampling.vine_trunk_paths" => self.vine_trunk_paths = parse_value(&full, value)?,
            "sampling.vine_trunk_len" => self.vine_trunk_len = parse_value(&full, value)?,
            "sampling.vine_anchors" => self.vine_anchors = parse_value(&full, value)?,
            "sampling.vine_actions" => self.vine_actions = parse_value(&full, value)?,
            "sampling.vine_rollout_len" => self.vine_rollout_len = parse_value(&full, value)?,
            "sampling.vine_branch" => {
                self.vine_branch = match value {
                    "policy" => BranchActions::Policy,
                    "uniform" => BranchActions::Uniform,
                    "exhaustive" => BranchActions::Exhaustive,
                    _ => return Err(Error::Config(format!("bad vine_branch '{value}' (policy|uniform|exhaustive)"))),
                }
            }
            "sampling.vine_mode" => {
                self.vine_mode = match value {
                    "exhaustive" => VineMode::Exhaustive,
                    "self-normalized" => VineMode::SelfNormalized,
                    _ => return Err(Error::Config(format!("bad vine_mode '{value}' (exhaustive|self-normalized)"))),
                }
            }
            "trust_region.delta" => self.trust.delta = parse_value(&full, value)?,
            "trust_region.cg_iters" => self.trust.cg_iters = parse_value(&full, value)?,
            "trust_region.cg_damping" => self.trust.cg_damping = parse_value(&full, value)?,
            "trust_region.backtrack_ratio" => self.trust.backtrack_ratio = parse_value(&full, value)?,
            "trust_region.max_backtracks" => self.trust.max_backtracks = parse_value(&full, value)?,
            "trust_region.fvp_subsample" => self.trust.fvp_subsample = parse_value(&full, value)?,
            "trust_region.fim_mode" => {
                self.trust.fim_mode = value.parse::<FimMode>().map_err(|e| Error::Config(e.to_string()))?
            }
            "baseline.stepsize" => self.stepsize = parse_value(&full, value)?,
            "baseline.l2_delta" => self.l2_delta = parse_value(&full, value)?,
            "baseline.cem_population" => self.cem_population = parse_value(&full, value)?,
            "baseline.cem_elite_frac" => self.cem_elite_frac = parse_value(&full, value)?,
            "baseline.cem_init_stddev" => self.cem_init_stddev = parse_value(&full, value)?,
            "baseline.cem_episodes" => self.cem_episodes = parse_value(&full, value)?,
            _ => return Err(Error::Config(format!("unknown key '{full}'"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "run.env" => self.env.to_string(),
            "run.algo" => self.algo.to_string(),
            "run.iterations" => self.iterations.to_string(),
            "run.seed" => self.seed.map(|s| s.to_string()).unwrap_or_default(),
            "run.gamma" => format!("{:?}", self.gamma),
            "run.output" => self.output.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "run.checkpoint_every" => self.checkpoint_every.to_string(),
            "policy.hidden" => self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "policy.head" => self.head.to_string(),
            "sampling.paths" => self.paths.to_string(),
            "sampling.horizon" => self.horizon.to_string(),
            "sampling.center_q" => self.center_q.to_string(),
            "sampling.vine_trunk_paths" => self.vine_trunk_paths.to_string(),
            "sampling.vine_trunk_len" => self.vine_trunk_len.to_string(),
            "sampling.vine_anchors" => self.vine_anchors.to_string(),
            "sampling.vine_actions" => self.vine_actions.to_string(),
            "sampling.vine_rollout_len" => self.vine_rollout_len.to_string(),
            "sampling.vine_branch" => branch_name(self.vine_branch).to_string(),
            "sampling.vine_mode" => mode_name(self.vine_mode).to_string(),
            "trust_region.delta" => format!("{:?}", self.trust.delta),
            "trust_region.cg_iters" => self.trust.cg_iters.to_string(),
            "trust_region.cg_damping" => format!("{:?}", self.trust.cg_damping),
            "trust_region.backtrack_ratio" => format!("{:?}", self.trust.backtrack_ratio),
            "trust_region.max_backtracks" => self.trust.max_backtracks.to_string(),
            "trust_region.fvp_subsample" => format!("{:?}", self.trust.fvp_subsample),
            "trust_region.fim_mode" => self.trust.fim_mode.to_string(),
            "baseline.stepsize" => format!("{:?}", self.stepsize),
            "baseline.l2_delta" => format!("{:?}", self.l2_delta),
            "baseline.cem_population" => self.cem_population.to_string(),
            "baseline.cem_elite_frac" => format!("{:?}", self.cem_elite_frac),
            "baseline.cem_init_stddev" => format!("{:?}", self.cem_init_stddev),
            "baseline.cem_episodes" => self.cem_episodes.to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        }
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for key in KEYS {
            let (section, name) = key.split_once('.').expect("keys are qualified");
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{name} = {}\n", self.get(key)));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        let seed = self.seed.ok_or_else(|| Error::Config("seed is required".into()))?;
        let _ = seed;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0,1), got {}", self.gamma)));
        }
        if self.algo != Algo::Cem {
            self.trust.validate().map_err(cfg_err)?;
        }
        self.baseline().validate().map_err(cfg_err)?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.algo != Algo::Cem && self.algo != Algo::TrpoVine && self.paths == 0 {
            return Err(Error::Config("paths must be at least 1".into()));
        }
        if self.algo == Algo::TrpoVine {
            if self.vine_trunk_paths == 0 || self.vine_trunk_len == 0 || self.vine_anchors == 0 || self.vine_rollout_len == 0 {
                return Err(Error::Config("vine sizes must be at least 1".into()));
            }
            if self.vine_mode == VineMode::Exhaustive && self.vine_branch != BranchActions::Exhaustive {
                return Err(Error::Config("vine_mode = exhaustive needs vine_branch = exhaustive".into()));
            }
            if self.vine_mode == VineMode::SelfNormalized && self.vine_branch != BranchActions::Exhaustive && self.vine_actions < 2 {
                return Err(Error::Config("self-normalized vine needs vine_actions >= 2".into()));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("seed is required".into()))
    }

    pub fn baseline(&self) -> BaselineConfig {
        BaselineConfig {
            kind: match self.algo {
                Algo::VanillaPg => BaselineKind::VanillaPg,
                Algo::Cem => BaselineKind::Cem,
                _ => BaselineKind::NaturalGradient,
            },
            stepsize_inverse_lambda: self.stepsize,
            cg_iters: self.trust.cg_iters,
            l2_delta: self.l2_delta,
            cem_population: self.cem_population,
            cem_elite_frac: self.cem_elite_frac,
            cem_init_stddev: self.cem_init_stddev,
            cem_episodes: self.cem_episodes,
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        let scheme = match self.algo {
            Algo::TrpoVine => SamplingScheme::Vine {
                vine: VineConfig {
                    trunk_paths: self.vine_trunk_paths,
                    trunk_len: self.vine_trunk_len,
                    num_anchors: self.vine_anchors,
                    actions_per_state: self.vine_actions,
                    rollout_len: self.vine_rollout_len,
                    branch_actions: self.vine_branch,
                },
                mode: self.vine_mode,
            },
            _ => SamplingScheme::SinglePath {
                num_paths: self.paths,
                horizon: self.horizon,
            },
        };
        SamplingConfig {
            gamma: self.gamma,
            scheme,
            center_q: self.center_q,
        }
    }

    /// Network for the given environment.
    pub fn network(&self, desc: &EnvDescriptor) -> Result<NetworkSpec> {
        let tabular = match self.head {
            HeadChoice::Tabular => true,
            HeadChoice::Mlp => false,
            HeadChoice::Auto => matches!(desc.observation, ObservationSpace::Discrete(_)),
        };
        let input_dim = match desc.observation {
            ObservationSpace::Discrete(n) | ObservationSpace::Vector(n) => n,
        };
        let spec = match (&desc.action, tabular) {
            (ActionSpace::Discrete { factors }, true) => match (&desc.observation, factors.as_slice()) {
                (ObservationSpace::Discrete(s), [a]) => NetworkSpec::tabular(*s, *a),
                _ => return Err(Error::Config("tabular head needs discrete states and one action factor".into())),
            },
            (ActionSpace::Discrete { factors }, false) => NetworkSpec::categorical(input_dim, self.hidden.clone(), factors.clone()),
            (ActionSpace::Box { dim, .. }, false) => NetworkSpec::gaussian(input_dim, self.hidden.clone(), *dim),
            (ActionSpace::Box { .. }, true) => {
                return Err(Error::Config("tabular head needs a discrete action space".into()))
            }
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(7);
        cfg.env = "chain:5:0.2".parse().unwrap();
        cfg.hidden = vec![];
        cfg.trust.delta = 0.02;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_and_bare_keys() {
        let text = "seed = 3\n# comment\n[trust_region]\ndelta = 0.05  # trailing\n[sampling]\npaths=7\n";
        let mut cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.trust.delta, 0.05);
        assert_eq!(cfg.paths, 7);
        cfg.set("cg_iters", "4").unwrap();
        assert_eq!(cfg.trust.cg_iters, 4);
        assert!(cfg.set("nonsense", "1").is_err());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::from_text("seed = 1\n[sampling]\npaths = many\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(err.is_config());
        let err = RunConfig::from_text("seed 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn seed_is_mandatory() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
