//! Per-iteration run log in CSV form.
//!
//! Floats are written in shortest round-trip form, so a log parsed back and
//! rewritten is byte-identical. Fields that do not apply to an algorithm, and
//! non-finite values, are written as `NA`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const SCHEMA_LINE: &str = "# trpo-runlog v1";

pub const COLUMNS: &[&str] = &[
    "iteration",
    "env_steps",
    "cumulative_steps",
    "mean_return",
    "mean_length",
    "eta_estimate",
    "eta_exact",
    "surrogate",
    "kl",
    "beta",
    "backtracks",
    "cg_residual",
    "accepted",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub cumulative_steps: usize,
    pub mean_return: f64,
    pub mean_length: f64,
    pub eta_estimate: Option<f64>,
    /// Exact `eta` of the policy that generated the samples, for tabular envs.
    pub eta_exact: Option<f64>,
    pub surrogate: Option<f64>,
    pub kl: Option<f64>,
    pub beta: Option<f64>,
    pub backtracks: Option<usize>,
    pub cg_residual: Option<f64>,
    pub accepted: bool,
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        "NA".into()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_else(|| "NA".into())
}

fn parse_opt(field: &str) -> Result<Option<f64>> {
    if field == "NA" {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::invalid(format!("bad number '{field}' in run log")))
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        [
            self.iteration.to_string(),
            self.env_steps.to_string(),
            self.cumulative_steps.to_string(),
            fmt_f(self.mean_return),
            fmt_f(self.mean_length),
            fmt_opt(self.eta_estimate),
            fmt_opt(self.eta_exact),
            fmt_opt(self.surrogate),
            fmt_opt(self.kl),
            fmt_opt(self.beta),
            self.backtracks.map(|b| b.to_string()).unwrap_or_else(|| "NA".into()),
            fmt_opt(self.cg_residual),
            (self.accepted as u8).to_string(),
        ]
        .join(",")
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != COLUMNS.len() {
            return Err(Error::invalid(format!("run log row has {} fields, expected {}", f.len(), COLUMNS.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid(format!("bad integer '{s}' in run log")));
        Ok(LogRow {
            iteration: int(f[0])?,
            env_steps: int(f[1])?,
            cumulative_steps: int(f[2])?,
            mean_return: parse_opt(f[3])?.unwrap_or(f64::NAN),
            mean_length: parse_opt(f[4])?.unwrap_or(f64::NAN),
            eta_estimate: parse_opt(f[5])?,
            eta_exact: parse_opt(f[6])?,
            surrogate: parse_opt(f[7])?,
            kl: parse_opt(f[8])?,
            beta: parse_opt(f[9])?,
            backtracks: if f[10] == "NA" { None } else { Some(int(f[10])?) },
            cg_residual: parse_opt(f[11])?,
            accepted: f[12] == "1",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn header() -> String {
        format!("{SCHEMA_LINE}\n{}\n", COLUMNS.join(","))
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header();
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.to_csv());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut seen_header = false;
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                if line.trim() != COLUMNS.join(",") {
                    return Err(Error::invalid("run log header does not match the v1 schema"));
                }
                seen_header = true;
                continue;
            }
            let row = LogRow::parse(line)?;
            if let Some(prev) = rows.last() {
                let prev: &LogRow = prev;
                if row.iteration <= prev.iteration {
                    return Err(Error::invalid("run log iterations are not strictly increasing"));
                }
            }
            rows.push(row);
        }
        Ok(RunLog { rows })
    }

    /// Mean of `mean_return` over the last `k` rows.
    pub fn final_return(&self, k: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(k)..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().map(|r| r.mean_return).sum::<f64>() / tail.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let row = LogRow {
            iteration: 3,
            env_steps: 100,
            cumulative_steps: 400,
            mean_return: 0.1 + 0.2,
            mean_length: 12.5,
            eta_estimate: Some(1.0 / 3.0),
            eta_exact: None,
            surrogate: Some(-2.0),
            kl: Some(0.009999999),
            beta: Some(f64::NAN),
            backtracks: Some(2),
            cg_residual: None,
            accepted: true,
        };
        let log = RunLog { rows: vec![row] };
        let text = log.to_csv();
        let back = RunLog::parse(&text).unwrap();
        assert_eq!(back.rows[0].beta, None);
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn rejects_non_increasing_iterations() {
        let mut text = RunLog::header();
        text.push_str("1,1,1,0.0,1.0,NA,NA,NA,NA,NA,NA,NA,0\n");
        text.push_str("1,1,2,0.0,1.0,NA,NA,NA,NA,NA,NA,NA,0\n");
        assert!(RunLog::parse(&text).is_err());
    }
}
