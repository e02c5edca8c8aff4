//! Pieces specific to the A2C and AOC baselines. The training loop itself is
//! shared with A2IMOC (see [`crate::agent`]); an algorithm is a preset over
//! option selection, advantage estimation and the termination objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::primitives::logistic;
use crate::options::argmax;

/// N-step advantages over one actor's window:
/// Â_t = Σ_{i=t}^{N−1} γ^{i−t} R_i + γ^{N−t} V̂(x_N) − V̂(x_t),
/// with returns cut at episode ends (`dones[i]` means the episode ended after
/// step i, so nothing after it is bootstrapped).
pub fn a2c_policy_gradient(rewards: &[f64], dones: &[bool], values: &[f64], bootstrap: f64, gamma: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    if dones.len() != n || values.len() != n {
        return Err(Error::Shape("rewards, dones and values must have equal length".into()));
    }
    let mut ret = bootstrap;
    let mut out = vec![0.0; n];
    for t in (0..n).rev() {
        ret = rewards[t] + if dones[t] { 0.0 } else { gamma * ret };
        out[t] = ret - values[t];
    }
    Ok(out)
}

/// γ·β(x)·(q − v) with q and v constants. Returns the loss and its
/// derivative in the termination logit.
pub fn aoc_termination_loss(q: f64, v: f64, logit: f64, gamma: f64) -> (f64, f64) {
    let beta = logistic(logit);
    let adv = q - v;
    (gamma * beta * adv, gamma * adv * beta * (1.0 - beta))
}

/// Uniform random option with probability ε, else argmax Q (lowest index on
/// ties).
pub fn aoc_option_selection<R: Rng + ?Sized>(q_row: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..q_row.len())
    } else {
        argmax(q_row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rewards_and_values_give_zero_advantages() {
        let adv = a2c_policy_gradient(&[0.0; 5], &[false; 5], &[0.0; 5], 0.0, 0.99).unwrap();
        assert!(adv.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn hand_evaluated_two_step_window() {
        let adv = a2c_policy_gradient(&[1.0, 0.0], &[false, false], &[0.0, 0.0], 0.0, 1.0).unwrap();
        assert_eq!(adv[0], 1.0);
    }

    #[test]
    fn value_shift_is_affine() {
        let (r, d) = ([0.3, -0.2, 0.5], [false; 3]);
        let v = [0.1, 0.4, -0.3];
        let (g, c) = (0.9, 1.7);
        let base = a2c_policy_gradient(&r, &d, &v, 0.2, g).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let moved = a2c_policy_gradient(&r, &d, &shifted, 0.2 + c, g).unwrap();
        for t in 0..3 {
            let expect = (g.powi(3 - t as i32) - 1.0) * c;
            assert!((moved[t] - base[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn aoc_termination_sign() {
        assert_eq!(aoc_termination_loss(1.0, 1.0, 0.3, 0.99).1, 0.0);
        // descending the loss lowers β when holding the option is better
        let (_, d) = aoc_termination_loss(2.0, 1.0, 0.3, 0.99);
        assert!(logistic(0.3 - 0.1 * d) < logistic(0.3));
        let (_, d) = aoc_termination_loss(0.0, 1.0, 0.3, 0.99);
        assert!(logistic(0.3 - 0.1 * d) > logistic(0.3));
    }

    #[test]
    fn epsilon_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = [0.1, 0.9, 0.3, 0.2];
        assert!((0..100).all(|_| aoc_option_selection(&q, 0.0, &mut rng) == 1));
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[aoc_option_selection(&q, 1.0, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }
}
