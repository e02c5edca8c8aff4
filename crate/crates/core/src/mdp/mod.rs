//! Tabular MDPs: the explicit transition/reward tables every other module
//! samples from, episode bookkeeping, and small fixture MDPs for the oracle.

mod four_rooms;

pub use four_rooms::{
    build_four_rooms, FourRoomsConfig, GoalRelocation, GridLayout, ACTION_NAMES, DEFAULT_LAYOUT,
};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-9;

/// A finite MDP with explicit tables.
///
/// Rewards are indexed by `(state, action, next_state)`: in the gridworld the
/// goal bonus depends on where a noisy action actually lands, so a
/// `(state, action)` table alone cannot reproduce sampled rewards.
/// [`TabularMdp::expected_reward`] gives the `(state, action)` view.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    terminal: Vec<bool>,
    initial: Vec<f64>,
    // sparse (next_state, cumulative probability) rows for sampling
    cumulative: Vec<Vec<(usize, f64)>>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        terminal: Vec<bool>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape("an MDP needs at least one state and one action".into()));
        }
        let cube = n_states * n_actions * n_states;
        if transition.len() != cube || reward.len() != cube {
            return Err(Error::Shape(format!(
                "transition/reward tables must have {cube} entries (got {} and {})",
                transition.len(),
                reward.len()
            )));
        }
        if terminal.len() != n_states || initial.len() != n_states {
            return Err(Error::Shape("terminal and initial vectors must have n_states entries".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reward table".into()));
        }
        check_distribution(&initial, "initial state distribution")?;
        let mut cumulative = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                check_distribution(row, &format!("transition row (state {s}, action {a})"))?;
                let mut acc = 0.0;
                let mut entries = Vec::new();
                for (next, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        entries.push((next, acc));
                    }
                }
                cumulative.push(entries);
            }
        }
        Ok(Self { n_states, n_actions, transition, reward, gamma, terminal, initial, cumulative })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        self.terminal.iter().enumerate().filter(|(_, t)| **t).map(|(s, _)| s)
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    /// Probability row p(· | state, action).
    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        &self.transition[(state * self.n_actions + action) * self.n_states..][..self.n_states]
    }

    pub fn prob(&self, state: usize, action: usize, next: usize) -> f64 {
        self.transition[(state * self.n_actions + action) * self.n_states + next]
    }

    pub fn reward(&self, state: usize, action: usize, next: usize) -> f64 {
        self.reward[(state * self.n_actions + action) * self.n_states + next]
    }

    pub fn expected_reward(&self, state: usize, action: usize) -> f64 {
        let base = (state * self.n_actions + action) * self.n_states;
        (0..self.n_states).map(|n| self.transition[base + n] * self.reward[base + n]).sum()
    }

    /// Policy-induced kernel p^π(x'|x) = Σ_a π(a|x) p(x'|x, a), row-major.
    pub fn policy_kernel(&self, policy: &[f64]) -> Vec<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut out = vec![0.0; ns * ns];
        for s in 0..ns {
            for a in 0..na {
                let w = policy[s * na + a];
                if w == 0.0 {
                    continue;
                }
                let row = self.transition_row(s, a);
                for (n, p) in row.iter().enumerate() {
                    out[s * ns + n] += w * p;
                }
            }
        }
        out
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, rng: &mut R, state: usize, action: usize) -> usize {
        let row = &self.cumulative[state * self.n_actions + action];
        let u: f64 = rng.random();
        let total = row.last().map(|e| e.1).unwrap_or(1.0);
        let target = u * total;
        row.iter().find(|(_, c)| target < *c).map(|(n, _)| *n).unwrap_or(row[row.len() - 1].0)
    }

    /// Same dynamics with a new reward table and terminal set.
    pub fn with_rewards(&self, reward: Vec<f64>, terminal: Vec<bool>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            reward,
            self.gamma,
            terminal,
            self.initial.clone(),
        )
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Config(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::Config(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

/// Inverse-CDF draw from an unnormalized-safe probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
    pub truncated: bool,
}

/// One transition of the MDP, without episode-length bookkeeping.
pub fn step<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    rng: &mut R,
    state: usize,
    action: usize,
) -> Result<EpisodeStep> {
    if state >= mdp.n_states() {
        return Err(Error::StateOutOfRange { state, n_states: mdp.n_states() });
    }
    if action >= mdp.n_actions() {
        return Err(Error::Usage(format!("action {action} out of range ({} actions)", mdp.n_actions())));
    }
    if mdp.is_terminal(state) {
        return Err(Error::Usage(format!("step called on terminal state {state}")));
    }
    let next_state = mdp.sample_next(rng, state, action);
    Ok(EpisodeStep {
        state,
        action,
        reward: mdp.reward(state, action, next_state),
        next_state,
        done: mdp.is_terminal(next_state),
        truncated: false,
    })
}

/// An episode in progress: current state plus the step counter that drives
/// time-limit truncation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub state: usize,
    pub t: usize,
    pub max_len: usize,
    pub ret: f64,
}

impl Episode {
    pub fn start<R: Rng + ?Sized>(mdp: &TabularMdp, rng: &mut R, max_len: usize) -> Self {
        Self { state: mdp.sample_initial(rng), t: 0, max_len, ret: 0.0 }
    }

    /// Advances one step. `done` is set on terminal arrival or when the
    /// step counter reaches `max_len` (then `truncated` is set too).
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        mdp: &TabularMdp,
        rng: &mut R,
        action: usize,
    ) -> Result<EpisodeStep> {
        let mut out = step(mdp, rng, self.state, action)?;
        self.t += 1;
        self.ret += out.reward;
        if !out.done && self.max_len > 0 && self.t >= self.max_len {
            out.truncated = true;
            out.done = true;
        }
        self.state = out.next_state;
        Ok(out)
    }
}

/// What actors interact with: one or more reward phases over a shared state
/// space, switched by the global environment-step count, plus the episode
/// time limit and (for gridworlds) the layout.
#[derive(Clone, Debug)]
pub struct Environment {
    phases: Vec<Arc<TabularMdp>>,
    phase_len: Option<u64>,
    max_episode_len: usize,
    grid: Option<Arc<GridLayout>>,
}

impl Environment {
    pub fn from_mdp(mdp: TabularMdp, max_episode_len: usize) -> Self {
        Self { phases: vec![Arc::new(mdp)], phase_len: None, max_episode_len, grid: None }
    }

    pub(crate) fn with_phases(
        phases: Vec<Arc<TabularMdp>>,
        phase_len: Option<u64>,
        max_episode_len: usize,
        grid: Option<Arc<GridLayout>>,
    ) -> Self {
        Self { phases, phase_len, max_episode_len, grid }
    }

    pub fn n_states(&self) -> usize {
        self.phases[0].n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.phases[0].n_actions()
    }

    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn max_episode_len(&self) -> usize {
        self.max_episode_len
    }

    pub fn grid(&self) -> Option<&GridLayout> {
        self.grid.as_deref()
    }

    /// The MDP in force after `env_steps` total environment steps.
    pub fn mdp_at(&self, env_steps: u64) -> &Arc<TabularMdp> {
        match self.phase_len {
            Some(len) if self.phases.len() > 1 => {
                &self.phases[((env_steps / len) % self.phases.len() as u64) as usize]
            }
            _ => &self.phases[0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMdpKind {
    Chain,
    Random,
}

/// Oracle fixtures. `chain` is a line of states with deterministic
/// left/right moves (reflecting at both ends, +1 for entering the right
/// end); `random` is a dense random kernel with 2 actions.
/// Neither has terminal states.
pub fn build_test_mdp<R: Rng + ?Sized>(kind: TestMdpKind, size: usize, rng: &mut R) -> Result<TabularMdp> {
    if size < 2 {
        return Err(Error::Config(format!("test MDP needs at least 2 states, got {size}")));
    }
    let n_actions = 2;
    let cube = size * n_actions * size;
    let mut transition = vec![0.0; cube];
    let mut reward = vec![0.0; cube];
    let idx = |s: usize, a: usize, n: usize| (s * n_actions + a) * size + n;
    match kind {
        TestMdpKind::Chain => {
            for s in 0..size {
                let left = s.saturating_sub(1);
                let right = (s + 1).min(size - 1);
                transition[idx(s, 0, left)] = 1.0;
                transition[idx(s, 1, right)] = 1.0;
                if right == size - 1 {
                    reward[idx(s, 1, right)] = 1.0;
                }
            }
        }
        TestMdpKind::Random => {
            for s in 0..size {
                for a in 0..n_actions {
                    let raw: Vec<f64> = (0..size).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let total: f64 = raw.iter().sum();
                    for (n, w) in raw.iter().enumerate() {
                        transition[idx(s, a, n)] = w / total;
                        reward[idx(s, a, n)] = rng.random_range(-1.0..1.0);
                    }
                    // exact normalization so rows sum to 1 to machine precision
                    let row = &mut transition[idx(s, a, 0)..idx(s, a, 0) + size];
                    let err: f64 = 1.0 - row.iter().sum::<f64>();
                    row[size - 1] += err;
                }
            }
        }
    }
    let mut initial = vec![0.0; size];
    match kind {
        TestMdpKind::Chain => initial[0] = 1.0,
        TestMdpKind::Random => initial.iter_mut().for_each(|p| *p = 1.0 / size as f64),
    }
    TabularMdp::new(size, n_actions, transition, reward, 0.99, vec![false; size], initial)
}

/// Start state 0, two actions that both end the episode in state 1 with
/// the given deterministic payoffs.
pub fn two_armed_bandit(payoffs: [f64; 2]) -> Result<TabularMdp> {
    let (ns, na) = (2, 2);
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na * ns];
    for a in 0..na {
        transition[a * ns + 1] = 1.0;
        reward[a * ns + 1] = payoffs[a];
        transition[(na + a) * ns + 1] = 1.0;
    }
    TabularMdp::new(ns, na, transition, reward, 0.99, vec![false, true], vec![1.0, 0.0])
}
