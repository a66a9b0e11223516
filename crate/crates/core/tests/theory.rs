mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trpo_core::env::{random_mdp_with, random_policy};
use trpo_core::mdp::{evaluate_exact, TabularPolicy};
use trpo_core::theory::{
    certify_cpi, certify_theorem1, cpi_mixture, divergences, kl_categorical, mm_policy_iteration, surrogate_l,
    tv_categorical,
};

use common::{iterative_eta, series_visitation};

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pinsker_and_nonnegativity(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = simplex(&mut rng, n);
        let q = simplex(&mut rng, n);
        let kl = kl_categorical(&p, &q);
        let tv = tv_categorical(&p, &q);
        prop_assert!(kl >= -1e-15);
        prop_assert!((0.0..=1.0 + 1e-15).contains(&tv));
        prop_assert!(tv * tv <= 0.5 * kl + 1e-12);
        prop_assert!(kl_categorical(&p, &p).abs() < 1e-15);
    }

    #[test]
    fn bounds_hold_on_random_triples(seed in any::<u64>(), gamma in 0.3f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rng.random_range(1..=6);
        let a = rng.random_range(1..=4);
        let mdp = random_mdp_with(s, a, gamma, &mut rng).unwrap();
        let pi = random_policy(s, a, &mut rng);
        let other = random_policy(s, a, &mut rng);
        let mix: f64 = rng.random();
        let pi_tilde = cpi_mixture(&pi, &other, mix).unwrap();

        let t1 = certify_theorem1(&mdp, &pi, &pi_tilde).unwrap();
        prop_assert!(t1.slack >= -1e-9);
        prop_assert!((t1.eta_new - iterative_eta(&mdp, &pi_tilde)).abs() < 1e-9);

        // The KL form follows from TV^2 <= KL.
        let weights = series_visitation(&mdp, &pi);
        let d = divergences(&pi, &pi_tilde, &weights).unwrap();
        prop_assert!(d.tv_max * d.tv_max <= d.kl_max + 1e-12);
        prop_assert!(t1.eta_new >= t1.surrogate - t1.penalty_coeff * d.kl_max - 1e-9);

        let cpi = certify_cpi(&mdp, &pi, &other, mix).unwrap();
        prop_assert!(cpi.slack >= -1e-9);
        prop_assert!((cpi.surrogate - t1.surrogate).abs() < 1e-9);
    }

    #[test]
    fn surrogate_touches_eta_at_the_current_policy(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rng.random_range(1..=6);
        let a = rng.random_range(1..=4);
        let mdp = random_mdp_with(s, a, 0.9, &mut rng).unwrap();
        let pi = random_policy(s, a, &mut rng);
        let eta = evaluate_exact(&mdp, &pi).unwrap().eta;
        prop_assert!((surrogate_l(&mdp, &pi, &pi).unwrap() - eta).abs() < 1e-10);
    }
}

#[test]
fn mm_iterates_never_decrease() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let s = rng.random_range(2..=5);
        let a = rng.random_range(2..=3);
        let mdp = random_mdp_with(s, a, 0.8, &mut rng).unwrap();
        let trace = mm_policy_iteration(&mdp, &TabularPolicy::uniform(s, a), 30).unwrap();
        assert_eq!(trace.len(), 31);
        assert_eq!(trace[0].surrogate, trace[0].eta);
        for w in trace.windows(2) {
            assert!(w[1].eta >= w[0].eta - 1e-9);
            // The minorizer value lower-bounds the new return.
            assert!(w[1].eta >= w[1].surrogate - 1e-9);
            assert!(w[1].surrogate >= w[0].eta - 1e-9);
        }
    }
}

#[test]
fn mixture_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pi = random_policy(3, 2, &mut rng);
    let other = random_policy(3, 2, &mut rng);
    assert_eq!(cpi_mixture(&pi, &other, 0.0).unwrap(), pi);
    assert_eq!(cpi_mixture(&pi, &other, 1.0).unwrap(), other);
    assert!(cpi_mixture(&pi, &other, 1.5).is_err());
    let d = divergences(&pi, &pi, &[1.0, 1.0, 1.0]).unwrap();
    assert_eq!(d.tv_max, 0.0);
    assert!(!d.kl_is_infinite());
    let det = TabularPolicy::deterministic(2, &[0, 0, 0]);
    assert!(divergences(&pi, &det, &[1.0; 3]).unwrap().kl_is_infinite());
}
