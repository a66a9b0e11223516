//! Finite discounted MDPs and their exact solution.
//!
//! Everything here is computed by dense direct solves, so the results serve as
//! ground truth for the sampled estimators elsewhere in the crate.
//!
//! Rewards are a function of the state only. The return of a trajectory is
//! `sum_t gamma^t r(s_t)`, so `Q(s, a) = r(s) + gamma * sum_s' P(s'|s,a) V(s')`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-12;

fn check_simplex(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// A finite MDP `(S, A, P, r, rho0, gamma)` with state-only rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// `P[s][a][s']`, row-major.
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    initial_dist: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial_dist: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::invalid("MDP needs at least one state and one action"));
        }
        if transitions.len() != num_states * num_actions * num_states {
            return Err(Error::Dimension {
                expected: num_states * num_actions * num_states,
                got: transitions.len(),
                context: "transition tensor",
            });
        }
        if rewards.len() != num_states {
            return Err(Error::Dimension {
                expected: num_states,
                got: rewards.len(),
                context: "reward vector",
            });
        }
        if initial_dist.len() != num_states {
            return Err(Error::Dimension {
                expected: num_states,
                got: initial_dist.len(),
                context: "initial distribution",
            });
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid(format!("discount {discount} not in (0, 1)")));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::invalid("non-finite reward"));
        }
        for (i, row) in transitions.chunks(num_states).enumerate() {
            check_simplex(
                row,
                &format!("P[{}][{}]", i / num_actions, i % num_actions),
            )?;
        }
        check_simplex(&initial_dist, "rho0")?;
        Ok(Self {
            num_states,
            num_actions,
            transitions,
            rewards,
            initial_dist,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Next-state distribution `P[s][a][.]`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = (s * self.num_actions + a) * n;
        &self.transitions[start..start + n]
    }

    /// State-to-state matrix under `policy`: `P_pi[s][s'] = sum_a pi(a|s) P[s][a][s']`.
    fn policy_transitions(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let n = self.num_states;
        let mut m = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.num_actions {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                for (t, &pt) in self.transition_row(s, a).iter().enumerate() {
                    m[(s, t)] += p * pt;
                }
            }
        }
        m
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(Error::invalid(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// Parses the whitespace-delimited text format:
    ///
    /// ```text
    /// mdp S A gamma
    /// rho0 p_0 ... p_{S-1}
    /// r r_0 ... r_{S-1}
    /// P s a p_0 ... p_{S-1}     (S*A lines)
    /// ```
    ///
    /// `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut header: Option<(usize, usize, f64)> = None;
        let mut rho0: Option<Vec<f64>> = None;
        let mut rewards: Option<Vec<f64>> = None;
        let mut transitions: Vec<f64> = Vec::new();
        let mut seen: Vec<bool> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let mut tokens = line.split_whitespace();
            let keyword = tokens.next().unwrap_or_default();
            let rest: Vec<&str> = tokens.collect();
            let floats = |toks: &[&str]| -> Result<Vec<f64>> {
                toks.iter()
                    .map(|t| t.parse::<f64>().map_err(|e| perr(format!("bad number {t:?}: {e}"))))
                    .collect()
            };
            match keyword {
                "mdp" => {
                    if header.is_some() {
                        return Err(perr("duplicate header".into()));
                    }
                    if rest.len() != 3 {
                        return Err(perr("header must be `mdp S A gamma`".into()));
                    }
                    let s: usize = rest[0].parse().map_err(|_| perr("bad S".into()))?;
                    let a: usize = rest[1].parse().map_err(|_| perr("bad A".into()))?;
                    let g: f64 = rest[2].parse().map_err(|_| perr("bad gamma".into()))?;
                    transitions = vec![0.0; s * a * s];
                    seen = vec![false; s * a];
                    header = Some((s, a, g));
                }
                "rho0" | "r" | "P" => {
                    let (s, a, _) = header.ok_or_else(|| perr("missing `mdp` header".into()))?;
                    match keyword {
                        "rho0" => {
                            let v = floats(&rest)?;
                            if v.len() != s {
                                return Err(perr(format!("rho0 needs {s} entries")));
                            }
                            rho0 = Some(v);
                        }
                        "r" => {
                            let v = floats(&rest)?;
                            if v.len() != s {
                                return Err(perr(format!("r needs {s} entries")));
                            }
                            rewards = Some(v);
                        }
                        _ => {
                            if rest.len() != s + 2 {
                                return Err(perr(format!("P line needs `s a` and {s} probabilities")));
                            }
                            let si: usize = rest[0].parse().map_err(|_| perr("bad state index".into()))?;
                            let ai: usize = rest[1].parse().map_err(|_| perr("bad action index".into()))?;
                            if si >= s || ai >= a {
                                return Err(perr(format!("index ({si}, {ai}) out of range")));
                            }
                            if seen[si * a + ai] {
                                return Err(perr(format!("duplicate row P {si} {ai}")));
                            }
                            seen[si * a + ai] = true;
                            let v = floats(&rest[2..])?;
                            let start = (si * a + ai) * s;
                            transitions[start..start + s].copy_from_slice(&v);
                        }
                    }
                }
                other => return Err(perr(format!("unknown keyword {other:?}"))),
            }
        }
        let (s, a, g) = header.ok_or(Error::Parse {
            line: 0,
            message: "missing `mdp` header".into(),
        })?;
        if let Some(missing) = seen.iter().position(|&b| !b) {
            return Err(Error::Parse {
                line: 0,
                message: format!("missing row P {} {}", missing / a, missing % a),
            });
        }
        let rho0 = rho0.ok_or(Error::Parse {
            line: 0,
            message: "missing rho0 line".into(),
        })?;
        let rewards = rewards.ok_or(Error::Parse {
            line: 0,
            message: "missing r line".into(),
        })?;
        Self::new(s, a, transitions, rewards, rho0, g)
    }

    /// Writes the text format read by [`TabularMdp::parse`]. Floats use Rust's
    /// shortest round-trip representation, so parse(to_text(m)) == m.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mdp {} {} {:?}", self.num_states, self.num_actions, self.discount);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "rho0 {}", join(&self.initial_dist));
        let _ = writeln!(out, "r {}", join(&self.rewards));
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let _ = writeln!(out, "P {s} {a} {}", join(self.transition_row(s, a)));
            }
        }
        out
    }
}

/// A stationary stochastic policy `pi[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(Error::Dimension {
                expected: num_states * num_actions,
                got: probs.len(),
                context: "policy table",
            });
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_simplex(row, &format!("pi[{s}]"))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::invalid("ragged policy rows"));
        }
        Self::new(rows.len(), num_actions, rows.concat())
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * num_actions + a] = 1.0;
        }
        Self {
            num_states: actions.len(),
            num_actions,
            probs,
        }
    }

    /// Row-wise softmax of a logit table.
    pub fn softmax(num_states: usize, num_actions: usize, logits: &[f64]) -> Self {
        assert_eq!(logits.len(), num_states * num_actions);
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(num_actions) {
            probs.extend(crate::policy::softmax(row));
        }
        Self {
            num_states,
            num_actions,
            probs,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        let start = s * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Exact value functions, advantages and visitation of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactEvaluation {
    pub v: Vec<f64>,
    /// `q[s * A + a]`.
    pub q: Vec<f64>,
    pub adv: Vec<f64>,
    /// Unnormalized discounted visitation; sums to `1 / (1 - gamma)`.
    pub visitation: Vec<f64>,
    pub eta: f64,
    num_actions: usize,
}

impl ExactEvaluation {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.num_actions + a]
    }

    pub fn adv(&self, s: usize, a: usize) -> f64 {
        self.adv[s * self.num_actions + a]
    }

    pub fn adv_row(&self, s: usize) -> &[f64] {
        &self.adv[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// `max_{s,a} |A(s, a)|`.
    pub fn max_abs_adv(&self) -> f64 {
        self.adv.iter().fold(0.0, |m, a| m.max(a.abs()))
    }
}

fn solve(matrix: DMatrix<f64>, rhs: DVector<f64>) -> Result<Vec<f64>> {
    matrix
        .lu()
        .solve(&rhs)
        .map(|x| x.iter().copied().collect())
        .ok_or_else(|| Error::Singular("dense LU found a singular system".into()))
}

/// Solves `V = r + gamma P_pi V` and `rho = rho0 + gamma P_pi^T rho` directly.
pub fn evaluate_exact(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<ExactEvaluation> {
    mdp.check_policy(policy)?;
    let n = mdp.num_states;
    let na = mdp.num_actions;
    let gamma = mdp.discount;
    let p_pi = mdp.policy_transitions(policy);
    let identity = DMatrix::<f64>::identity(n, n);

    let v = solve(
        &identity - &p_pi * gamma,
        DVector::from_column_slice(&mdp.rewards),
    )?;
    let visitation = solve(
        &identity - p_pi.transpose() * gamma,
        DVector::from_column_slice(&mdp.initial_dist),
    )?;

    let mut q = vec![0.0; n * na];
    let mut adv = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let next: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&v)
                .map(|(p, vt)| p * vt)
                .sum();
            let qsa = mdp.rewards[s] + gamma * next;
            q[s * na + a] = qsa;
            adv[s * na + a] = qsa - v[s];
        }
    }
    let eta = mdp.initial_dist.iter().zip(&v).map(|(p, x)| p * x).sum();
    Ok(ExactEvaluation {
        v,
        q,
        adv,
        visitation,
        eta,
        num_actions: na,
    })
}

/// Both sides of `eta(pi~) - eta(pi) = sum_s rho_pi~(s) sum_a pi~(a|s) A_pi(s,a)`.
pub fn eta_difference_identity(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_tilde: &TabularPolicy,
) -> Result<(f64, f64)> {
    let base = evaluate_exact(mdp, pi)?;
    let other = evaluate_exact(mdp, pi_tilde)?;
    let lhs = other.eta - base.eta;
    let rhs = (0..mdp.num_states)
        .map(|s| {
            let inner: f64 = pi_tilde
                .row(s)
                .iter()
                .zip(base.adv_row(s))
                .map(|(p, a)| p * a)
                .sum();
            other.visitation[s] * inner
        })
        .sum();
    Ok((lhs, rhs))
}

/// Howard policy iteration. Returns an optimal deterministic policy and its
/// evaluation; ties are broken toward the lowest action index.
pub fn policy_iteration(mdp: &TabularMdp) -> Result<(TabularPolicy, ExactEvaluation)> {
    let n = mdp.num_states;
    let na = mdp.num_actions;
    let mut actions = vec![0usize; n];
    // Policy iteration terminates in at most A^S steps; in practice a handful.
    for _ in 0..10_000 {
        let policy = TabularPolicy::deterministic(na, &actions);
        let eval = evaluate_exact(mdp, &policy)?;
        let mut changed = false;
        for s in 0..n {
            let current = eval.q(s, actions[s]);
            let (best, best_q) = (0..na)
                .map(|a| (a, eval.q(s, a)))
                .fold((actions[s], current), |acc, x| if x.1 > acc.1 + 1e-12 { x } else { acc });
            if best != actions[s] && best_q > current + 1e-12 {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((policy, eval));
        }
    }
    Err(Error::NoConvergence { residual: f64::NAN })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(reward: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![reward], vec![1.0], gamma).unwrap()
    }

    #[test]
    fn geometric_series_value() {
        let mdp = single_state(1.0, 0.5);
        let eval = evaluate_exact(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((eval.v[0] - 2.0).abs() < 1e-14);
        assert!((eval.eta - 2.0).abs() < 1e-14);
        assert!((eval.visitation[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_rows() {
        let err = TabularMdp::new(1, 1, vec![0.9], vec![0.0], vec![1.0], 0.5).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
        let err = TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![1.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
        assert!(TabularPolicy::new(1, 2, vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn identical_policies_give_zero_difference() {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 0.3, 0.7],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            0.9,
        )
        .unwrap();
        let pi = TabularPolicy::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let (lhs, rhs) = eta_difference_identity(&mdp, &pi, &pi).unwrap();
        assert_eq!(lhs, 0.0);
        assert!(rhs.abs() < 1e-12);
    }

    #[test]
    fn text_format_round_trip_and_errors() {
        let text = "# two states\nmdp 2 1 0.9\nrho0 1 0\nr 0 1 # reward\nP 0 0 0 1\nP 1 0 1 0\n";
        let mdp = TabularMdp::parse(text).unwrap();
        assert_eq!(mdp.num_states(), 2);
        assert_eq!(TabularMdp::parse(&mdp.to_text()).unwrap(), mdp);

        let missing = "mdp 2 1 0.9\nrho0 1 0\nr 0 1\nP 0 0 0 1\n";
        assert!(matches!(TabularMdp::parse(missing), Err(Error::Parse { .. })));
        let bad = "mdp 1 1 0.9\nrho0 1\nr x\nP 0 0 1\n";
        assert!(matches!(TabularMdp::parse(bad), Err(Error::Parse { line: 3, .. })));
    }
}
