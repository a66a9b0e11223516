//! Independent reference computations shared by the integration tests. These
//! use plain fixed-point iteration, not the dense solves in the library.
#![allow(dead_code)]

use trpo_core::mdp::{TabularMdp, TabularPolicy};

const TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 200_000;

fn backup(mdp: &TabularMdp, pi: &TabularPolicy, v: &[f64]) -> Vec<f64> {
    let (n, na, g) = (mdp.num_states(), mdp.num_actions(), mdp.discount());
    (0..n)
        .map(|s| {
            let mut out = mdp.rewards()[s];
            for a in 0..na {
                let ev: f64 = mdp.transition_row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
                out += g * pi.prob(s, a) * ev;
            }
            out
        })
        .collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// State values by repeated Bellman backups.
pub fn iterative_values(mdp: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let mut v = vec![0.0; mdp.num_states()];
    for _ in 0..MAX_SWEEPS {
        let next = backup(mdp, pi, &v);
        let d = sup_diff(&next, &v);
        v = next;
        if d < TOL {
            break;
        }
    }
    v
}

pub fn iterative_eta(mdp: &TabularMdp, pi: &TabularPolicy) -> f64 {
    let v = iterative_values(mdp, pi);
    mdp.initial_dist().iter().zip(&v).map(|(p, x)| p * x).sum()
}

pub fn iterative_q(mdp: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let v = iterative_values(mdp, pi);
    let (n, na, g) = (mdp.num_states(), mdp.num_actions(), mdp.discount());
    let mut q = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let ev: f64 = mdp.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
            q[s * na + a] = mdp.rewards()[s] + g * ev;
        }
    }
    q
}

/// Discounted visitation as the truncated series `sum_t gamma^t P(s_t = s)`.
pub fn series_visitation(mdp: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let (n, na, g) = (mdp.num_states(), mdp.num_actions(), mdp.discount());
    let mut dist = mdp.initial_dist().to_vec();
    let mut rho = vec![0.0; n];
    let mut weight = 1.0;
    for _ in 0..MAX_SWEEPS {
        for s in 0..n {
            rho[s] += weight * dist[s];
        }
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..na {
                let m = dist[s] * pi.prob(s, a);
                for (t, p) in mdp.transition_row(s, a).iter().enumerate() {
                    next[t] += m * p;
                }
            }
        }
        dist = next;
        weight *= g;
        if weight < TOL * (1.0 - g) {
            break;
        }
    }
    rho
}

/// Optimal start value by value iteration.
pub fn optimal_eta(mdp: &TabularMdp) -> f64 {
    let (n, na, g) = (mdp.num_states(), mdp.num_actions(), mdp.discount());
    let mut v = vec![0.0; n];
    for _ in 0..MAX_SWEEPS {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        let ev: f64 = mdp.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                        mdp.rewards()[s] + g * ev
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let d = sup_diff(&next, &v);
        v = next;
        if d < TOL {
            break;
        }
    }
    mdp.initial_dist().iter().zip(&v).map(|(p, x)| p * x).sum()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
