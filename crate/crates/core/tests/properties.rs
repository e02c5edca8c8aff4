use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use imoc::agent::{select_option, uoae_advantage};
use imoc::baselines::{a2c_policy_gradient, aoc_termination_loss};
use imoc::infomax::{termination_loss, OptionTransitionBuffer, TerminationConfig, TerminationSegment};
use imoc::options::{u_omega, v_omega, OptionTransition};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn distribution(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

proptest! {
    #[test]
    fn running_option_is_kept(q in prop::collection::vec(-3.0f64..3.0, 1..6), c in 0.0f64..2.0, seed in 0usize..6) {
        let mu = vec![1.0 / q.len() as f64; q.len()];
        let current = seed % q.len();
        prop_assert_eq!(select_option(&q, &mu, c, current, false), current);
    }

    #[test]
    fn selection_maximizes_bonus_score(raw in prop::collection::vec((-3.0f64..3.0, 0.01f64..1.0), 1..6), c in 0.0f64..2.0) {
        let q: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let mu = distribution(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
        let picked = select_option(&q, &mu, c, 0, true);
        let score = |o: usize| q[o] - c * mu[o].ln();
        for o in 0..q.len() {
            prop_assert!(score(picked) >= score(o) - 1e-12);
        }
    }

    #[test]
    fn zero_bonus_selects_argmax(q in prop::collection::vec(-3.0f64..3.0, 1..6)) {
        let mu = vec![1.0 / q.len() as f64; q.len()];
        let picked = select_option(&q, &mu, 0.0, 0, true);
        let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(q[picked], best);
    }

    #[test]
    fn option_values_are_convex_combinations(raw in prop::collection::vec((-3.0f64..3.0, 0.01f64..1.0), 1..6), beta in 0.0f64..=1.0) {
        let q: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let mu = distribution(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
        let v = v_omega(&q, &mu).unwrap();
        let lo = q.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        let u = u_omega(q[0], v, beta);
        prop_assert!(u >= q[0].min(v) - 1e-12 && u <= q[0].max(v) + 1e-12);
    }

    #[test]
    fn buffer_keeps_the_most_recent(capacity in 1usize..50, pushes in 0usize..150) {
        let mut b = OptionTransitionBuffer::new(capacity);
        for i in 0..pushes {
            b.push(OptionTransition { start: i, end: i + 1, option: i % 3 });
        }
        let kept: Vec<usize> = b.iter().map(|t| t.start).collect();
        let expected: Vec<usize> = (pushes.saturating_sub(capacity)..pushes).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn batches_are_distinct_records(capacity in 1usize..60, batch in 1usize..80, seed in 0u64..1000) {
        let mut b = OptionTransitionBuffer::new(capacity);
        for i in 0..capacity {
            b.push(OptionTransition { start: i, end: i, option: 0 });
        }
        let drawn = b.sample_batch(batch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut starts: Vec<usize> = drawn.iter().map(|t| t.start).collect();
        starts.sort_unstable();
        starts.dedup();
        prop_assert_eq!(starts.len(), batch.min(capacity));
    }

    #[test]
    fn uoae_is_the_better_of_nstep_and_truncated(
        rewards in prop::collection::vec(-2.0f64..2.0, 1..10),
        k_raw in 0usize..10,
        v_k in -3.0f64..3.0, v_end in -3.0f64..3.0, u_end in -3.0f64..3.0, q in -3.0f64..3.0,
        gamma in 0.5f64..1.0,
    ) {
        let n = rewards.len();
        let disc = |a: usize, b: usize| -> f64 { (a..b).map(|i| gamma.powi(i as i32) * rewards[i]).sum() };
        let k = k_raw % (n + 1);
        let got = uoae_advantage(&rewards, Some(k), Some(v_k), v_end, u_end, q, gamma).unwrap();
        if k < n {
            let nstep = disc(0, n) + gamma.powi(n as i32) * v_end - q;
            let truncated = disc(0, k) + gamma.powi(k as i32) * v_k - q;
            assert_abs_diff_eq!(got, nstep.max(truncated), epsilon = 1e-10);
        } else {
            assert_abs_diff_eq!(got, disc(0, n) + gamma.powi(n as i32) * u_end - q, epsilon = 1e-10);
        }
    }

    #[test]
    fn a2c_returns_match_backward_recursion(
        steps in prop::collection::vec((-2.0f64..2.0, any::<bool>(), -2.0f64..2.0), 1..12),
        bootstrap in -2.0f64..2.0,
        gamma in 0.5f64..1.0,
    ) {
        let rewards: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let dones: Vec<bool> = steps.iter().map(|s| s.1).collect();
        let values: Vec<f64> = steps.iter().map(|s| s.2).collect();
        let adv = a2c_policy_gradient(&rewards, &dones, &values, bootstrap, gamma).unwrap();
        for t in 0..rewards.len() {
            // forward sum up to the first episode end
            let mut g = 0.0;
            let mut w = 1.0;
            let mut cut = false;
            for i in t..rewards.len() {
                g += w * rewards[i];
                w *= gamma;
                if dones[i] {
                    cut = true;
                    break;
                }
            }
            if !cut {
                g += w * bootstrap;
            }
            assert_abs_diff_eq!(adv[t], g - values[t], epsilon = 1e-10);
        }
    }

    #[test]
    fn aoc_gradient_matches_finite_difference(q in -3.0f64..3.0, v in -3.0f64..3.0, l in -4.0f64..4.0, gamma in 0.5f64..1.0) {
        let (_, d) = aoc_termination_loss(q, v, l, gamma);
        let h = 1e-6;
        let fd = (aoc_termination_loss(q, v, l + h, gamma).0 - aoc_termination_loss(q, v, l - h, gamma).0) / (2.0 * h);
        assert_abs_diff_eq!(d, fd, epsilon = 1e-7);
    }

    #[test]
    fn termination_gradient_pushes_toward_informative_states(
        arrivals in prop::collection::vec((-3.0f64..3.0, -4.0f64..0.0), 1..8),
        forced in any::<bool>(),
    ) {
        let k = arrivals.len();
        let logits: Vec<f64> = arrivals.iter().map(|a| a.0).collect();
        let log_p: Vec<f64> = arrivals.iter().map(|a| a.1).collect();
        let seg = TerminationSegment { start: 0, option: 0, arrivals: (1..=k).collect(), forced_end: forced };
        let cfg = TerminationConfig { entropy_coef: 0.0, beta_factor: true };
        let (_, grads) = termination_loss(&seg, &logits, &log_p, &cfg).unwrap();
        for j in 0..k {
            let expected = if forced && j == k - 1 { 0.0 } else { -sigmoid(logits[j]) * (log_p[j] - log_p[k - 1]) };
            assert_abs_diff_eq!(grads[j], expected, epsilon = 1e-12);
        }
    }
}
