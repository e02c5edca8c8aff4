//! Option semantics shared by the agents and the oracle: termination
//! sampling, the marginal option value V_Ω, the arrival value U_Ω and
//! option-transition records.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One completed option execution: started at `start`, terminated at `end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OptionTransition {
    pub start: usize,
    pub end: usize,
    pub option: usize,
}

/// The option an actor is currently executing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveOption {
    pub option: usize,
    pub start: usize,
    pub steps: usize,
}

impl ActiveOption {
    pub fn new(option: usize, start: usize) -> Self {
        Self { option, start, steps: 0 }
    }
}

/// Which μ defines V_Ω(x) = Σ_o μ(o|x) Q_Ω(x, o).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuMode {
    /// One-hot on the option the selection rule would pick.
    #[default]
    Greedy,
    /// The learned estimate μ̂.
    Estimated,
}

pub fn v_omega(q: &[f64], mu: &[f64]) -> Result<f64> {
    if q.len() != mu.len() {
        return Err(Error::Shape(format!("{} option values but {} option probabilities", q.len(), mu.len())));
    }
    let total: f64 = mu.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("option distribution sums to {total}")));
    }
    Ok(q.iter().zip(mu).map(|(q, m)| q * m).sum())
}

pub fn u_omega(q: f64, v: f64, beta: f64) -> f64 {
    (1.0 - beta) * q + beta * v
}

pub fn sample_termination<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> bool {
    // strict comparison keeps β = 0 from ever firing and β = 1 always firing
    rng.random::<f64>() < beta
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn v_omega_examples() {
        assert_eq!(v_omega(&[1.0, 3.0], &[0.5, 0.5]).unwrap(), 2.0);
        assert_eq!(v_omega(&[1.0, 3.0, -2.0], &one_hot(3, 2)).unwrap(), -2.0);
        assert!(v_omega(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn u_omega_examples() {
        assert_eq!(u_omega(4.0, 7.0, 0.0), 4.0);
        assert_eq!(u_omega(4.0, 7.0, 1.0), 7.0);
        assert_eq!(u_omega(4.0, 0.0, 0.25), 3.0);
    }

    #[test]
    fn termination_sampling_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..1000).all(|_| !sample_termination(0.0, &mut rng)));
        assert!((0..1000).all(|_| sample_termination(1.0, &mut rng)));
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_termination(0.3, &mut rng)).count();
        assert!((hits as f64 / n as f64 - 0.3).abs() < 0.01);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
