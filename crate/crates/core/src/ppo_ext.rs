//! Two formulas used by the PPO variant of the option critic: the upgoing
//! generalized option-advantage estimator and the clipped termination term.
//! There is no PPO training loop here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bootstrap values used when the option does not terminate inside the
/// window: R_{t+N}, U_Ω(x_{t+N+1}, o) and Q_Ω(x_{t+N}, o).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowTail {
    pub reward: f64,
    pub u_next: f64,
    pub q: f64,
}

/// TD errors seen from step t. `delta[i]` is the marginal TD error at t+i,
/// `delta_option[i]` the option TD error at t+i, `k` the offset at which the
/// option terminated (k ≥ N means it did not).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdSequences {
    pub delta: Vec<f64>,
    pub delta_option: Vec<f64>,
    pub k: usize,
    pub n: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub tail: Option<WindowTail>,
}

/// UGOAE. With termination at k < N:
/// Σ_{i=0}^{k} (γλ)^i δ^o_{t+i} + max(Σ_{i=k+1}^{N} (γλ)^i δ_{t+i}, 0).
/// Otherwise
/// Σ_{i=0}^{N−1} (γλ)^i δ^o_{t+i} + (γλ)^N (R_{t+N} + γU − Q).
pub fn ugoae(seq: &TdSequences) -> Result<f64> {
    if !(0.0..=1.0).contains(&seq.lambda) {
        return Err(Error::Contract(format!("lambda must lie in [0, 1], got {}", seq.lambda)));
    }
    let c = seq.gamma * seq.lambda;
    let discounted = |xs: &[f64], from: usize| -> f64 {
        xs.iter().enumerate().map(|(i, d)| c.powi((from + i) as i32) * d).sum()
    };
    if seq.k < seq.n {
        if seq.delta_option.len() < seq.k + 1 || seq.delta.len() < seq.n + 1 {
            return Err(Error::Shape(format!(
                "termination at {} in a window of {} needs {} option TD errors and {} marginal ones, got {} and {}",
                seq.k,
                seq.n,
                seq.k + 1,
                seq.n + 1,
                seq.delta_option.len(),
                seq.delta.len()
            )));
        }
        let before = discounted(&seq.delta_option[..=seq.k], 0);
        let after = discounted(&seq.delta[seq.k + 1..=seq.n], seq.k + 1);
        Ok(before + after.max(0.0))
    } else {
        let tail = seq
            .tail
            .ok_or_else(|| Error::Contract("a window without termination needs its bootstrap tail".into()))?;
        if seq.delta_option.len() < seq.n {
            return Err(Error::Shape(format!(
                "window of {} needs {} option TD errors, got {}",
                seq.n,
                seq.n,
                seq.delta_option.len()
            )));
        }
        let body = discounted(&seq.delta_option[..seq.n], 0);
        Ok(body + c.powi(seq.n as i32) * (tail.reward + seq.gamma * tail.u_next - tail.q))
    }
}

/// clip(l − l_old, −ε, ε)·β_old·coef and its derivative in `l`, which is
/// β_old·coef inside the clip range and 0 outside.
pub fn clipped_beta_term(l: f64, l_old: f64, eps_beta: f64, beta_old: f64, coef: f64) -> (f64, f64) {
    let diff = l - l_old;
    let value = diff.clamp(-eps_beta, eps_beta) * beta_old * coef;
    let grad = if diff.abs() <= eps_beta { beta_old * coef } else { 0.0 };
    (value, grad)
}
