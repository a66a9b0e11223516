//! Surrogate objective, policy divergences and the policy improvement bounds,
//! all computed exactly on tabular MDPs.
//!
//! The bounds have the form
//!
//! ```text
//! eta(pi~) >= L_pi(pi~) - (2 eps gamma / (1 - gamma)^2) * alpha^2
//! ```
//!
//! where `alpha` is the maximum total-variation divergence between the two
//! policies. [`certify_theorem1`] uses `eps = max_{s,a} |A_pi(s, a)|` and
//! [`certify_theorem1a`] the policy-dependent per-state ratio, which is never
//! larger. [`mm_policy_iteration`] maximizes the KL-penalized minorizer
//! `M_i(pi) = L_{pi_i}(pi) - C * max_s KL(pi_i(.|s) || pi(.|s))` every iteration.

use crate::error::{Error, Result};
use crate::mdp::{evaluate_exact, ExactEvaluation, TabularMdp, TabularPolicy};

/// KL divergence `KL(p || q)` with `0 log 0 = 0`; `+inf` when `q` drops support of `p`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pa, &qa)| {
            if pa == 0.0 {
                0.0
            } else if qa == 0.0 {
                f64::INFINITY
            } else {
                pa * (pa / qa).ln()
            }
        })
        .sum()
}

/// Total variation divergence, half the l1 distance.
pub fn tv_categorical(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub tv_max: f64,
    pub kl_max: f64,
    /// KL averaged under the supplied state weights.
    pub kl_mean: f64,
    pub tv_per_state: Vec<f64>,
    pub kl_per_state: Vec<f64>,
}

impl DivergenceReport {
    pub fn kl_is_infinite(&self) -> bool {
        self.kl_max.is_infinite()
    }
}

pub fn divergences(
    pi: &TabularPolicy,
    pi_tilde: &TabularPolicy,
    state_weights: &[f64],
) -> Result<DivergenceReport> {
    if pi.num_states() != pi_tilde.num_states() || pi.num_actions() != pi_tilde.num_actions() {
        return Err(Error::invalid("policies have different shapes"));
    }
    if state_weights.len() != pi.num_states() {
        return Err(Error::Dimension {
            expected: pi.num_states(),
            got: state_weights.len(),
            context: "state weights",
        });
    }
    let tv_per_state: Vec<f64> = (0..pi.num_states())
        .map(|s| tv_categorical(pi.row(s), pi_tilde.row(s)))
        .collect();
    let kl_per_state: Vec<f64> = (0..pi.num_states())
        .map(|s| kl_categorical(pi.row(s), pi_tilde.row(s)))
        .collect();
    let kl_mean = state_weights
        .iter()
        .zip(&kl_per_state)
        .map(|(&w, &k)| if w == 0.0 { 0.0 } else { w * k })
        .sum();
    Ok(DivergenceReport {
        tv_max: tv_per_state.iter().fold(0.0, |m, &x| m.max(x)),
        kl_max: kl_per_state.iter().fold(0.0, |m, &x| m.max(x)),
        kl_mean,
        tv_per_state,
        kl_per_state,
    })
}

/// `L_pi(pi~)` from an existing evaluation of `pi`.
pub fn surrogate_from_eval(eval: &ExactEvaluation, pi_tilde: &TabularPolicy) -> f64 {
    let gain: f64 = (0..pi_tilde.num_states())
        .map(|s| {
            let inner: f64 = pi_tilde
                .row(s)
                .iter()
                .zip(eval.adv_row(s))
                .map(|(p, a)| p * a)
                .sum();
            eval.visitation[s] * inner
        })
        .sum();
    eval.eta + gain
}

/// `L_pi(pi~) = eta(pi) + sum_s rho_pi(s) sum_a pi~(a|s) A_pi(s, a)`.
pub fn surrogate_l(mdp: &TabularMdp, pi: &TabularPolicy, pi_tilde: &TabularPolicy) -> Result<f64> {
    let eval = evaluate_exact(mdp, pi)?;
    Ok(surrogate_from_eval(&eval, pi_tilde))
}

/// Gradient of `L_{pi_old}(softmax(logits))` with respect to the logit table.
pub fn surrogate_softmax_gradient(eval: &ExactEvaluation, logits: &[f64]) -> Vec<f64> {
    let na = eval.num_actions();
    let mut grad = vec![0.0; logits.len()];
    for (s, row) in logits.chunks(na).enumerate() {
        let probs = crate::policy::softmax(row);
        let adv = eval.adv_row(s);
        let mean: f64 = probs.iter().zip(adv).map(|(p, a)| p * a).sum();
        for b in 0..na {
            grad[s * na + b] = eval.visitation[s] * probs[b] * (adv[b] - mean);
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCertificate {
    pub alpha: f64,
    pub eta_new: f64,
    pub surrogate: f64,
    pub epsilon: f64,
    pub penalty_coeff: f64,
    pub lower_bound: f64,
    /// `eta_new - lower_bound`.
    pub slack: f64,
}

fn certificate(eta_new: f64, surrogate: f64, epsilon: f64, gamma: f64, alpha: f64) -> BoundCertificate {
    let penalty_coeff = 2.0 * epsilon * gamma / ((1.0 - gamma) * (1.0 - gamma));
    let lower_bound = surrogate - penalty_coeff * alpha * alpha;
    BoundCertificate {
        alpha,
        eta_new,
        surrogate,
        epsilon,
        penalty_coeff,
        lower_bound,
        slack: eta_new - lower_bound,
    }
}

fn max_tv(pi: &TabularPolicy, pi_tilde: &TabularPolicy) -> f64 {
    (0..pi.num_states())
        .map(|s| tv_categorical(pi.row(s), pi_tilde.row(s)))
        .fold(0.0, f64::max)
}

/// Improvement bound with `alpha = D_TV^max` and `eps = max_{s,a} |A_pi(s, a)|`.
pub fn certify_theorem1(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_tilde: &TabularPolicy,
) -> Result<BoundCertificate> {
    let eval = evaluate_exact(mdp, pi)?;
    let eta_new = evaluate_exact(mdp, pi_tilde)?.eta;
    let surrogate = surrogate_from_eval(&eval, pi_tilde);
    Ok(certificate(
        eta_new,
        surrogate,
        eval.max_abs_adv(),
        mdp.discount(),
        max_tv(pi, pi_tilde),
    ))
}

/// Per-state ratio `|sum_a (pi~ - pi) Q| / sum_a |pi~ - pi|`; `None` where the rows agree.
/// The row difference sums to zero, so `A` is used in place of `Q`; it gives
/// the same value without the rounding noise of a large common offset.
pub fn theorem1a_ratios(eval: &ExactEvaluation, pi: &TabularPolicy, pi_tilde: &TabularPolicy) -> Vec<Option<f64>> {
    (0..pi.num_states())
        .map(|s| {
            let mut num = 0.0;
            let mut den = 0.0;
            for a in 0..pi.num_actions() {
                let d = pi_tilde.prob(s, a) - pi.prob(s, a);
                num += d * eval.adv(s, a);
                den += d.abs();
            }
            (den > 0.0).then(|| num.abs() / den)
        })
        .collect()
}

/// Improvement bound with the policy-dependent constant: the largest per-state
/// ratio of advantage-weighted probability change to total probability change.
pub fn certify_theorem1a(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_tilde: &TabularPolicy,
) -> Result<BoundCertificate> {
    let eval = evaluate_exact(mdp, pi)?;
    // Zero when every row agrees, in which case alpha is zero too.
    let epsilon = theorem1a_ratios(&eval, pi, pi_tilde)
        .iter()
        .flatten()
        .fold(0.0, |m: f64, &r| m.max(r));
    let eta_new = evaluate_exact(mdp, pi_tilde)?.eta;
    let surrogate = surrogate_from_eval(&eval, pi_tilde);
    Ok(certificate(eta_new, surrogate, epsilon, mdp.discount(), max_tv(pi, pi_tilde)))
}

/// Conservative-policy-iteration bound for `pi_new = (1 - a) pi_old + a pi'`,
/// using `eps = max_s |E_{a ~ pi'} A_pi(s, a)|` and the mixture weight as `alpha`.
pub fn certify_cpi(
    mdp: &TabularMdp,
    pi_old: &TabularPolicy,
    pi_prime: &TabularPolicy,
    mix: f64,
) -> Result<BoundCertificate> {
    let eval = evaluate_exact(mdp, pi_old)?;
    let pi_new = cpi_mixture(pi_old, pi_prime, mix)?;
    let epsilon = (0..mdp.num_states())
        .map(|s| {
            pi_prime
                .row(s)
                .iter()
                .zip(eval.adv_row(s))
                .map(|(p, a)| p * a)
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max);
    let eta_new = evaluate_exact(mdp, &pi_new)?.eta;
    let surrogate = surrogate_from_eval(&eval, &pi_new);
    Ok(certificate(eta_new, surrogate, epsilon, mdp.discount(), mix))
}

/// Rows `(1 - alpha) pi_old + alpha pi'`.
pub fn cpi_mixture(pi_old: &TabularPolicy, pi_prime: &TabularPolicy, alpha: f64) -> Result<TabularPolicy> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("mixture weight {alpha} not in [0, 1]")));
    }
    if pi_old.num_states() != pi_prime.num_states() || pi_old.num_actions() != pi_prime.num_actions() {
        return Err(Error::invalid("policies have different shapes"));
    }
    let probs = pi_old
        .probs()
        .iter()
        .zip(pi_prime.probs())
        .map(|(&o, &p)| {
            if alpha == 0.0 {
                o
            } else if alpha == 1.0 {
                p
            } else {
                (1.0 - alpha) * o + alpha * p
            }
        })
        .collect();
    TabularPolicy::new(pi_old.num_states(), pi_old.num_actions(), probs)
}

/// One state's KL-constrained linear maximization,
/// `max_q sum_a q_a adv_a  s.t.  KL(p || q) <= budget`, restricted to the support of `p`.
///
/// The maximizer has the form `q_a = lambda p_a / (nu - adv_a)`, where `lambda` is
/// the multiplier of the KL constraint (and the derivative of the optimal value
/// with respect to the budget).
#[derive(Debug, Clone)]
struct StateProblem<'a> {
    p: &'a [f64],
    adv: &'a [f64],
    adv_max: f64,
    /// KL of the greedy distribution (p restricted to the argmax set); budgets at
    /// or above this saturate.
    saturation_kl: f64,
    flat: bool,
}

#[derive(Debug, Clone)]
struct StateSolution {
    q: Vec<f64>,
    kl: f64,
    multiplier: f64,
}

impl<'a> StateProblem<'a> {
    fn new(p: &'a [f64], adv: &'a [f64]) -> Self {
        let support = || p.iter().zip(adv).filter(|(&pa, _)| pa > 0.0);
        let adv_max = support().map(|(_, &a)| a).fold(f64::NEG_INFINITY, f64::max);
        let adv_min = support().map(|(_, &a)| a).fold(f64::INFINITY, f64::min);
        let top_mass: f64 = support().filter(|(_, &a)| a == adv_max).map(|(&pa, _)| pa).sum();
        Self {
            p,
            adv,
            adv_max,
            saturation_kl: -top_mass.ln(),
            flat: adv_max - adv_min <= 1e-14 * adv_max.abs().max(1.0),
        }
    }

    fn unchanged(&self) -> StateSolution {
        StateSolution {
            q: self.p.to_vec(),
            kl: 0.0,
            multiplier: f64::INFINITY,
        }
    }

    fn greedy(&self) -> StateSolution {
        let top_mass: f64 = (-self.saturation_kl).exp();
        let q = self
            .p
            .iter()
            .zip(self.adv)
            .map(|(&pa, &a)| if pa > 0.0 && a == self.adv_max { pa / top_mass } else { 0.0 })
            .collect();
        StateSolution {
            q,
            kl: self.saturation_kl,
            multiplier: 0.0,
        }
    }

    /// `q(lambda)` with `nu` found so that `q` sums to one.
    fn at_multiplier(&self, lambda: f64) -> StateSolution {
        // mass(nu) - 1 and its derivative; mass decreases from +inf at adv_max
        // to <= 1 at adv_max + lambda.
        let residual = |nu: f64| -> (f64, f64) {
            self.p
                .iter()
                .zip(self.adv)
                .filter(|(&pa, _)| pa > 0.0)
                .fold((-1.0, 0.0), |(f, df), (&pa, &a)| {
                    let t = lambda * pa / (nu - a);
                    (f + t, df - t / (nu - a))
                })
        };
        let mut lo = self.adv_max;
        let mut hi = self.adv_max + lambda;
        let mut nu = hi;
        for _ in 0..200 {
            let (f, df) = residual(nu);
            if f > 0.0 {
                lo = nu;
            } else {
                hi = nu;
            }
            if f.abs() <= 1e-15 || hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1e-300) {
                break;
            }
            let newton = nu - f / df;
            nu = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        }
        let mut q: Vec<f64> = self
            .p
            .iter()
            .zip(self.adv)
            .map(|(&pa, &a)| if pa > 0.0 { lambda * pa / (nu - a) } else { 0.0 })
            .collect();
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= total);
        let kl = kl_categorical(self.p, &q);
        StateSolution {
            q,
            kl,
            multiplier: lambda,
        }
    }

    fn solve(&self, budget: f64) -> StateSolution {
        if self.flat || budget <= 0.0 {
            return self.unchanged();
        }
        if budget >= self.saturation_kl {
            return self.greedy();
        }
        // KL decreases in lambda; bisect in log space.
        let scale = (self.adv_max - self.adv.iter().copied().fold(f64::INFINITY, f64::min)).max(1e-300);
        let mut lo = (scale * 1e-30).ln();
        let mut hi = (scale * 1e30).ln();
        let mut best = self.at_multiplier(hi.exp());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let sol = self.at_multiplier(mid.exp());
            if sol.kl > budget {
                lo = mid;
            } else {
                hi = mid;
                best = sol;
            }
            if hi - lo < 1e-13 {
                break;
            }
        }
        best
    }
}

/// One iterate of [`mm_policy_iteration`].
#[derive(Debug, Clone)]
pub struct MmIterate {
    pub policy: TabularPolicy,
    pub eta: f64,
    /// `M_{i-1}(pi_i)`, the minorizer value achieved by this iterate (equals
    /// `eta` for the initial policy).
    pub surrogate: f64,
    /// Maximum per-state KL from the previous iterate.
    pub kl_max: f64,
}

/// Maximizes `M(pi) = L_{pi_i}(pi) - C * max_s KL(pi_i(.|s) || pi(.|s))` over
/// tabular policies supported on the support of `pi_i`.
///
/// Given a shared KL budget `k`, each state solves its own constrained linear
/// problem; the optimal budget satisfies `sum_s rho(s) lambda_s(k) = C`, whose
/// left side is non-increasing in `k`, and is found by bisection. The result is
/// compared against `pi_i` itself so the returned minorizer value never falls
/// below `eta(pi_i)`.
fn maximize_minorizer(eval: &ExactEvaluation, pi: &TabularPolicy, penalty: f64) -> Result<(TabularPolicy, f64, f64)> {
    let n = pi.num_states();
    let problems: Vec<StateProblem<'_>> = (0..n).map(|s| StateProblem::new(pi.row(s), eval.adv_row(s))).collect();
    let active: Vec<usize> = (0..n).filter(|&s| !problems[s].flat && eval.visitation[s] > 0.0).collect();
    if active.is_empty() {
        return Ok((pi.clone(), eval.eta, 0.0));
    }

    let solve_all = |budget: f64| -> Vec<StateSolution> { problems.iter().map(|p| p.solve(budget)).collect() };
    let objective = |sols: &[StateSolution]| -> f64 {
        let gain: f64 = sols
            .iter()
            .enumerate()
            .map(|(s, sol)| eval.visitation[s] * sol.q.iter().zip(eval.adv_row(s)).map(|(q, a)| q * a).sum::<f64>())
            .sum();
        let kl_max = sols.iter().map(|s| s.kl).fold(0.0, f64::max);
        eval.eta + gain - penalty * kl_max
    };
    let excess = |budget: f64| -> f64 {
        problems
            .iter()
            .enumerate()
            .map(|(s, p)| {
                let m = p.solve(budget).multiplier;
                if m.is_infinite() {
                    0.0
                } else {
                    eval.visitation[s] * m
                }
            })
            .sum::<f64>()
            - penalty
    };

    let upper = active.iter().map(|&s| problems[s].saturation_kl).fold(0.0, f64::max);
    let budget = if excess(upper * (1.0 - 1e-12)) >= 0.0 {
        upper
    } else {
        let mut lo = (upper * 1e-300).max(f64::MIN_POSITIVE).ln();
        let mut hi = upper.ln();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if excess(mid.exp()) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        lo.exp()
    };

    let sols = solve_all(budget);
    let value = objective(&sols);
    if !value.is_finite() {
        return Err(Error::NoConvergence { residual: value });
    }
    if value <= eval.eta {
        return Ok((pi.clone(), eval.eta, 0.0));
    }
    let kl_max = sols.iter().map(|s| s.kl).fold(0.0, f64::max);
    let probs: Vec<f64> = sols.into_iter().flat_map(|s| s.q).collect();
    let policy = TabularPolicy::new(n, pi.num_actions(), probs).map_err(|_| Error::NoConvergence { residual: budget })?;
    Ok((policy, value, kl_max))
}

/// Minorization-maximization policy iteration with the KL penalty coefficient
/// `C = 2 eps' gamma / (1 - gamma)^2`, `eps' = max_{s,a} |A_{pi_i}(s, a)|`.
///
/// Returns `iters + 1` iterates, the first being `pi0`.
pub fn mm_policy_iteration(mdp: &TabularMdp, pi0: &TabularPolicy, iters: usize) -> Result<Vec<MmIterate>> {
    let gamma = mdp.discount();
    let mut eval = evaluate_exact(mdp, pi0)?;
    let mut out = Vec::with_capacity(iters + 1);
    out.push(MmIterate {
        policy: pi0.clone(),
        eta: eval.eta,
        surrogate: eval.eta,
        kl_max: 0.0,
    });
    for _ in 0..iters {
        let current = &out.last().expect("non-empty").policy;
        let penalty = 2.0 * eval.max_abs_adv() * gamma / ((1.0 - gamma) * (1.0 - gamma));
        let (policy, surrogate, kl_max) = maximize_minorizer(&eval, current, penalty)?;
        eval = evaluate_exact(mdp, &policy)?;
        out.push(MmIterate {
            policy,
            eta: eval.eta,
            surrogate,
            kl_max,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> TabularPolicy {
        TabularPolicy::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn divergences_of_identical_policies_vanish() {
        let pi = rows(&[&[0.2, 0.8], &[0.5, 0.5]]);
        let d = divergences(&pi, &pi, &[0.5, 0.5]).unwrap();
        assert_eq!((d.tv_max, d.kl_max, d.kl_mean), (0.0, 0.0, 0.0));
    }

    #[test]
    fn disjoint_support_gives_unit_tv_and_infinite_kl() {
        let a = rows(&[&[1.0, 0.0]]);
        let b = rows(&[&[0.0, 1.0]]);
        let d = divergences(&a, &b, &[1.0]).unwrap();
        assert_eq!(d.tv_max, 1.0);
        assert!(d.kl_is_infinite());
        // The reverse direction has zero mass where the first argument is zero.
        assert_eq!(kl_categorical(&[0.5, 0.5, 0.0], &[0.25, 0.25, 0.5]), 0.5 * 2f64.ln() * 2.0);
    }

    #[test]
    fn cpi_mixture_endpoints_and_midpoint() {
        let old = rows(&[&[1.0, 0.0]]);
        let new = rows(&[&[0.0, 1.0]]);
        assert_eq!(cpi_mixture(&old, &new, 0.0).unwrap(), old);
        assert_eq!(cpi_mixture(&old, &new, 1.0).unwrap(), new);
        assert_eq!(cpi_mixture(&old, &new, 0.5).unwrap().row(0), &[0.5, 0.5]);
        assert!(cpi_mixture(&old, &new, 1.5).is_err());
    }

    #[test]
    fn state_problem_hits_budget() {
        let p = [0.2, 0.3, 0.5];
        let adv = [1.0, -0.5, 0.1];
        let prob = StateProblem::new(&p, &adv);
        for budget in [1e-8, 1e-4, 0.1, 1.0] {
            let sol = prob.solve(budget);
            assert!((sol.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if budget < prob.saturation_kl {
                assert!((sol.kl - budget).abs() <= 1e-9 * budget.max(1e-6), "{budget} {}", sol.kl);
            }
        }
        // More budget, more objective.
        let v = |b: f64| prob.solve(b).q.iter().zip(&adv).map(|(q, a)| q * a).sum::<f64>();
        assert!(v(1e-3) < v(1e-2) && v(1e-2) < v(1e-1));
    }

    #[test]
    fn theorem1a_on_identical_policies_is_trivial() {
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![1.0], vec![1.0], 0.9).unwrap();
        let pi = rows(&[&[0.4, 0.6]]);
        let c = certify_theorem1a(&mdp, &pi, &pi).unwrap();
        assert_eq!(c.slack, 0.0);
        assert_eq!(c.alpha, 0.0);
    }
}
