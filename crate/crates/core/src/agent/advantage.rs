//! Option advantage estimators over one actor's rollout window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Upgoing: once the option terminates inside the window, the better of
    /// the realized post-termination return and the bootstrapped V_Ω.
    #[default]
    Uoae,
    /// Always the realized return to the window end.
    NStep,
    /// Bootstraps from V_Ω at the termination, ignoring later rewards.
    Truncated,
}

/// UOAE for a single start index, written out term by term:
/// if k < n: Σ_{i<k} γ^i R_i + max(Σ_{j=k}^{n−1} γ^j R_j + γ^n V_end, γ^k V_k) − Q,
/// else Σ_{i<n} γ^i R_i + γ^n U_end − Q. `rewards` holds R_t..R_{t+n−1}.
pub fn uoae_advantage(
    rewards: &[f64],
    k: Option<usize>,
    v_at_termination: Option<f64>,
    v_end: f64,
    u_end: f64,
    q: f64,
    gamma: f64,
) -> Result<f64> {
    let n = rewards.len();
    let disc = |from: usize, to: usize| (from..to).map(|i| gamma.powi(i as i32) * rewards[i]).sum::<f64>();
    match k {
        Some(k) if k < n => {
            let v_k = v_at_termination.ok_or_else(|| Error::Contract("missing V_Ω at the termination state".into()))?;
            let upgoing = disc(k, n) + gamma.powi(n as i32) * v_end;
            let truncated = gamma.powi(k as i32) * v_k;
            Ok(disc(0, k) + upgoing.max(truncated) - q)
        }
        _ => Ok(disc(0, n) + gamma.powi(n as i32) * u_end - q),
    }
}

/// Everything the window estimator needs for one actor, indexed by step t
/// in 0..N.
pub struct WindowValues<'a> {
    pub rewards: &'a [f64],
    /// The episode ended after step t.
    pub dones: &'a [bool],
    /// Step j > t at which the option active at t terminated by a β draw
    /// (None if it did not terminate inside the window).
    pub terminations: &'a [Option<usize>],
    /// Q_Ω(x_t, o_t).
    pub q: &'a [f64],
    /// V_Ω(x_t).
    pub v: &'a [f64],
    /// V_Ω(x_N) and U_Ω(x_N, o_t) per t; ignored after an episode end.
    pub v_final: f64,
    pub u_final: &'a [f64],
}

/// Regression targets (advantage + Q) for every step of a window.
pub fn window_targets(w: &WindowValues<'_>, gamma: f64, mode: AdvantageMode) -> Result<Vec<f64>> {
    let n = w.rewards.len();
    if [w.dones.len(), w.terminations.len(), w.q.len(), w.v.len(), w.u_final.len()].iter().any(|l| *l != n) {
        return Err(Error::Shape("window arrays must have equal length".into()));
    }
    // g[i]: realized discounted return from i, bootstrapped with V_Ω(x_N),
    // cut at episode ends
    let mut g = vec![0.0; n + 1];
    g[n] = w.v_final;
    for i in (0..n).rev() {
        g[i] = w.rewards[i] + if w.dones[i] { 0.0 } else { gamma * g[i + 1] };
    }
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let done_at = (t..n).find(|&i| w.dones[i]);
        let target = match (w.terminations[t], done_at) {
            // the episode ends while the option is still running
            (j, Some(e)) if j.is_none_or(|j| e < j) => g[t],
            (Some(j), _) => {
                let gk = gamma.powi((j - t) as i32);
                let prefix = g[t] - gk * g[j];
                let realized = gk * g[j];
                let bootstrapped = gk * w.v[j];
                match mode {
                    AdvantageMode::Uoae => prefix + realized.max(bootstrapped),
                    AdvantageMode::NStep => g[t],
                    AdvantageMode::Truncated => prefix + bootstrapped,
                }
            }
            (None, _) => {
                let gn = gamma.powi((n - t) as i32);
                g[t] - gn * w.v_final + gn * w.u_final[t]
            }
        };
        out.push(target);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_termination_branch_is_discounted_arrival_value() {
        let a = uoae_advantage(&[0.0; 4], None, None, 5.0, 3.0, 1.0, 0.9).unwrap();
        assert!((a - (0.9f64.powi(4) * 3.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_upgoing_example() {
        let a = uoae_advantage(&[1.0; 4], Some(2), Some(10.0), 0.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(a, 12.0);
    }

    #[test]
    fn large_post_termination_rewards_take_the_reward_arm() {
        let a = uoae_advantage(&[0.0, 0.0, 5.0, 5.0], Some(2), Some(0.1), 0.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(a, 10.0);
    }

    #[test]
    fn window_targets_match_the_termwise_form() {
        let rewards = [0.5, -0.2, 1.0, 0.3, 0.0];
        let v = [0.1, 0.7, 2.5, -0.4, 0.9];
        let q = [0.2, 0.3, 0.4, 0.5, 0.6];
        let u_final = [1.1, 1.2, 1.3, 1.4, 1.5];
        let terms = [Some(2), Some(2), Some(4), Some(4), None];
        let w = WindowValues {
            rewards: &rewards,
            dones: &[false; 5],
            terminations: &terms,
            q: &q,
            v: &v,
            v_final: 0.8,
            u_final: &u_final,
        };
        let gamma = 0.95;
        let targets = window_targets(&w, gamma, AdvantageMode::Uoae).unwrap();
        for t in 0..5 {
            let k = terms[t].map(|j| j - t);
            let vk = terms[t].map(|j| v[j]);
            let a = uoae_advantage(&rewards[t..], k, vk, 0.8, u_final[t], q[t], gamma).unwrap();
            assert!((targets[t] - q[t] - a).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn episode_end_stops_bootstrapping() {
        let w = WindowValues {
            rewards: &[1.0, 2.0, 4.0],
            dones: &[false, true, false],
            terminations: &[None, None, None],
            q: &[0.0; 3],
            v: &[0.0; 3],
            v_final: 100.0,
            u_final: &[100.0; 3],
        };
        let t = window_targets(&w, 0.5, AdvantageMode::Uoae).unwrap();
        assert_eq!(t[0], 1.0 + 0.5 * 2.0);
        assert_eq!(t[1], 2.0);
        assert_eq!(t[2], 4.0 + 0.5 * 100.0);
    }

    #[test]
    fn upgoing_dominates_truncated() {
        let rewards = [0.1, -3.0, 0.2, 0.0];
        let w = WindowValues {
            rewards: &rewards,
            dones: &[false; 4],
            terminations: &[Some(1), Some(3), Some(3), None],
            q: &[0.0; 4],
            v: &[0.0, 1.0, 0.0, 2.0],
            v_final: 0.5,
            u_final: &[0.0; 4],
        };
        let up = window_targets(&w, 0.99, AdvantageMode::Uoae).unwrap();
        let tr = window_targets(&w, 0.99, AdvantageMode::Truncated).unwrap();
        let ns = window_targets(&w, 0.99, AdvantageMode::NStep).unwrap();
        for t in 0..4 {
            assert!(up[t] >= tr[t] - 1e-12 && up[t] >= ns[t] - 1e-12);
        }
    }
}
