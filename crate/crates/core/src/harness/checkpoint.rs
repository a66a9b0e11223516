//! Text checkpoints that restore a run bit-exactly.
//!
//! ```text
//! trpo-checkpoint v1
//! iteration <completed iterations>
//! cumulative_steps <n>
//! rng <seed hex> <stream> <word position>
//! theta <len> <f64 bits as hex>...
//! cem_mean <len> ...            (CEM runs only)
//! cem_stddev <len> ...
//! cem_best_theta <len> ...
//! cem_best_score <bits>
//! config
//! <run config text>
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::baselines::CemState;
use crate::error::{Error, Result};
use crate::policy::ParamVector;

pub const MAGIC: &str = "trpo-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub cumulative_steps: usize,
    pub rng: ChaCha8Rng,
    pub theta: ParamVector,
    pub cem: Option<CemState>,
    pub config: RunConfig,
}

fn hex_floats(values: &[f64]) -> String {
    let mut out = values.len().to_string();
    for v in values {
        out.push(' ');
        out.push_str(&format!("{:016x}", v.to_bits()));
    }
    out
}

fn parse_floats(line: usize, rest: &str) -> Result<Vec<f64>> {
    let err = |m: &str| Error::Parse {
        line,
        message: m.to_string(),
    };
    let mut it = rest.split_whitespace();
    let n: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| err("missing length"))?;
    let values = it
        .map(|t| u64::from_str_radix(t, 16).map(f64::from_bits).map_err(|_| err("bad float bits")))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != n {
        return Err(err("length does not match the number of values"));
    }
    Ok(values)
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let mut out = format!(
            "{MAGIC}\niteration {}\ncumulative_steps {}\nrng {seed} {} {}\ntheta {}\n",
            self.iteration,
            self.cumulative_steps,
            self.rng.get_stream(),
            self.rng.get_word_pos(),
            hex_floats(&self.theta)
        );
        if let Some(cem) = &self.cem {
            out.push_str(&format!("cem_mean {}\n", hex_floats(&cem.mean)));
            out.push_str(&format!("cem_stddev {}\n", hex_floats(&cem.stddev)));
            out.push_str(&format!("cem_best_theta {}\n", hex_floats(&cem.best_theta)));
            out.push_str(&format!("cem_best_score {:016x}\n", cem.best_score.to_bits()));
        }
        out.push_str("config\n");
        out.push_str(&self.config.to_text());
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected '{MAGIC}'"),
                })
            }
        }
        let mut iteration = None;
        let mut cumulative_steps = None;
        let mut rng = None;
        let mut theta = None;
        let (mut mean, mut stddev, mut best_theta, mut best_score) = (None, None, None, None);
        let mut config_text = String::new();
        let mut in_config = false;
        for (i, line) in lines {
            let n = i + 1;
            if in_config {
                config_text.push_str(line);
                config_text.push('\n');
                continue;
            }
            let err = |m: &str| Error::Parse {
                line: n,
                message: m.to_string(),
            };
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "iteration" => iteration = Some(rest.trim().parse::<usize>().map_err(|_| err("bad iteration"))?),
                "cumulative_steps" => {
                    cumulative_steps = Some(rest.trim().parse::<usize>().map_err(|_| err("bad step count"))?)
                }
                "rng" => {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    if parts.len() != 3 || parts[0].len() != 64 {
                        return Err(err("rng needs a 32-byte seed, stream and word position"));
                    }
                    let mut seed = [0u8; 32];
                    for (k, b) in seed.iter_mut().enumerate() {
                        *b = u8::from_str_radix(&parts[0][2 * k..2 * k + 2], 16).map_err(|_| err("bad seed"))?;
                    }
                    let mut r = ChaCha8Rng::from_seed(seed);
                    r.set_stream(parts[1].parse().map_err(|_| err("bad stream"))?);
                    r.set_word_pos(parts[2].parse().map_err(|_| err("bad word position"))?);
                    rng = Some(r);
                }
                "theta" => theta = Some(parse_floats(n, rest)?),
                "cem_mean" => mean = Some(parse_floats(n, rest)?),
                "cem_stddev" => stddev = Some(parse_floats(n, rest)?),
                "cem_best_theta" => best_theta = Some(parse_floats(n, rest)?),
                "cem_best_score" => {
                    best_score = Some(f64::from_bits(
                        u64::from_str_radix(rest.trim(), 16).map_err(|_| err("bad float bits"))?,
                    ))
                }
                "config" => in_config = true,
                _ => return Err(err(&format!("unknown checkpoint field '{key}'"))),
            }
        }
        let missing = |what: &str| Error::Parse {
            line: 0,
            message: format!("checkpoint is missing {what}"),
        };
        let cem = match (mean, stddev, best_theta, best_score) {
            (Some(mean), Some(stddev), Some(best), Some(best_score)) => Some(CemState {
                mean,
                stddev,
                best_theta: ParamVector(best),
                best_score,
            }),
            (None, None, None, None) => None,
            _ => return Err(missing("part of the CEM state")),
        };
        if !in_config {
            return Err(missing("the config section"));
        }
        Ok(Checkpoint {
            iteration: iteration.ok_or_else(|| missing("iteration"))?,
            cumulative_steps: cumulative_steps.ok_or_else(|| missing("cumulative_steps"))?,
            rng: rng.ok_or_else(|| missing("rng"))?,
            theta: ParamVector(theta.ok_or_else(|| missing("theta"))?),
            cem,
            config: RunConfig::from_text(&config_text)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(3);
        rng.next_u64();
        let mut config = RunConfig::default();
        config.seed = Some(5);
        let ckpt = Checkpoint {
            iteration: 4,
            cumulative_steps: 99,
            rng: rng.clone(),
            theta: ParamVector(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]),
            cem: Some(CemState {
                mean: vec![1.0],
                stddev: vec![1e-8],
                best_theta: ParamVector(vec![2.0]),
                best_score: f64::NEG_INFINITY,
            }),
            config,
        };
        let back = Checkpoint::parse(&ckpt.to_text()).unwrap();
        assert_eq!(back.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), ckpt.theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back, ckpt);
        let (mut a, mut b) = (back.rng, rng);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::parse("hello").is_err());
        assert!(Checkpoint::parse(&format!("{MAGIC}\niteration x\n")).is_err());
    }
}
