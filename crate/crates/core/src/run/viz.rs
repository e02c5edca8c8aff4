use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, EvalReport};
use crate::error::{Error, Result};
use crate::mdp::{sample_categorical, Episode, ACTION_NAMES};
use crate::nn::primitives::softmax;
use crate::options::sample_termination;

/// Executions of each option from each start state in [`termination_probe`].
pub const PROBE_EXECUTIONS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellView {
    pub row: usize,
    pub col: usize,
    pub state: usize,
    pub action_probs: Vec<f64>,
    pub beta: f64,
    pub q: f64,
    /// Share of this option's evaluation terminations that happened here.
    pub termination_frequency: f64,
    /// Share of this option's probe terminations that happened here.
    pub region_frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionView {
    pub option: usize,
    /// Terminations per selection during evaluation.
    pub termination_mass: f64,
    pub cells: Vec<CellView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    /// Mean total-variation distance between the terminating-state
    /// distributions of every pair of options that terminated at least once.
    pub mean_pairwise_tv: f64,
    pub min_pairwise_tv: f64,
    pub termination_mass: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visualization {
    pub rows: usize,
    pub cols: usize,
    pub n_options: usize,
    pub action_names: Vec<String>,
    pub episodes: usize,
    pub mean_return: f64,
    pub options: Vec<OptionView>,
    /// From the evaluation episodes, so it only sees options the greedy
    /// policy actually selects.
    pub diversity: Diversity,
    /// From [`termination_probe`]: every option run from every start state.
    pub region_diversity: Diversity,
}

fn distributions(report: &EvalReport) -> Vec<Option<Vec<f64>>> {
    report
        .termination_counts
        .iter()
        .map(|counts| {
            let total: u64 = counts.iter().sum();
            (total > 0).then(|| counts.iter().map(|c| *c as f64 / total as f64).collect())
        })
        .collect()
}

pub fn termination_diversity(report: &EvalReport) -> Diversity {
    let dists: Vec<Vec<f64>> = distributions(report).into_iter().flatten().collect();
    let mut tvs = Vec::new();
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            tvs.push(0.5 * dists[i].iter().zip(&dists[j]).map(|(a, b)| (a - b).abs()).sum::<f64>());
        }
    }
    let termination_mass = report
        .termination_counts
        .iter()
        .zip(&report.option_starts)
        .map(|(c, s)| if *s == 0 { 0.0 } else { c.iter().sum::<u64>() as f64 / *s as f64 })
        .collect();
    Diversity {
        mean_pairwise_tv: if tvs.is_empty() { 0.0 } else { tvs.iter().sum::<f64>() / tvs.len() as f64 },
        min_pairwise_tv: if tvs.is_empty() { 0.0 } else { tvs.iter().copied().fold(f64::INFINITY, f64::min) },
        termination_mass,
    }
}

/// Runs every option `executions` times from every non-terminal state until
/// its β draw fires, the episode ends or the time limit passes. β is first
/// drawn at the state after the first action, as during training. The report
/// counts terminations per `[option][state]`; `option_starts` holds the
/// executions per option.
pub fn termination_probe<R: Rng + ?Sized>(agent: &Agent, executions: usize, rng: &mut R) -> Result<EvalReport> {
    let mdp = agent.current_mdp().clone();
    let max_len = agent.environment().max_episode_len();
    let net = agent.network();
    let (n_states, k) = (net.spec().n_states, net.spec().n_options);
    let states: Vec<usize> = (0..n_states).collect();
    let fwd = net.forward(agent.params(), &states)?;
    let policies: Vec<Vec<Vec<f64>>> = (0..k).map(|o| states.iter().map(|&s| softmax(fwd.policy_row(s, o))).collect()).collect();
    let mut report = EvalReport {
        returns: vec![],
        termination_counts: vec![vec![0; n_states]; k],
        option_starts: vec![0; k],
        option_steps: vec![0; k],
    };
    for o in 0..k {
        for start in (0..n_states).filter(|s| !mdp.is_terminal(*s)) {
            for _ in 0..executions {
                let mut episode = Episode { state: start, t: 0, max_len, ret: 0.0 };
                report.option_starts[o] += 1;
                loop {
                    let a = sample_categorical(&policies[o][episode.state], rng);
                    report.option_steps[o] += 1;
                    if episode.step(&mdp, rng, a)?.done {
                        break;
                    }
                    if sample_termination(fwd.beta(episode.state, o), rng) {
                        report.termination_counts[o][episode.state] += 1;
                        break;
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Per option and open cell: action probabilities, β, Q_Ω and the empirical
/// terminating-state frequency over `episodes` evaluation episodes.
pub fn export_visualization<R: Rng + ?Sized>(agent: &Agent, episodes: usize, rng: &mut R) -> Result<Visualization> {
    let grid = agent
        .environment()
        .grid()
        .ok_or_else(|| Error::Unsupported("visualization needs a gridworld environment".into()))?;
    let net = agent.network();
    let n_states = net.spec().n_states;
    let k = net.spec().n_options;
    let states: Vec<usize> = (0..n_states).collect();
    let fwd = net.forward(agent.params(), &states)?;
    let report = agent.evaluate(episodes, rng)?;
    let dists = distributions(&report);
    let diversity = termination_diversity(&report);
    let probe = termination_probe(agent, PROBE_EXECUTIONS, rng)?;
    let region_dists = distributions(&probe);
    let options = (0..k)
        .map(|o| OptionView {
            option: o,
            termination_mass: diversity.termination_mass[o],
            cells: states
                .iter()
                .map(|&s| {
                    let (row, col) = grid.cell(s);
                    CellView {
                        row,
                        col,
                        state: s,
                        action_probs: softmax(fwd.policy_row(s, o)),
                        beta: fwd.beta(s, o),
                        q: fwd.q[[s, o]],
                        termination_frequency: dists[o].as_ref().map(|d| d[s]).unwrap_or(0.0),
                        region_frequency: region_dists[o].as_ref().map(|d| d[s]).unwrap_or(0.0),
                    }
                })
                .collect(),
        })
        .collect();
    Ok(Visualization {
        rows: grid.rows,
        cols: grid.cols,
        n_options: k,
        action_names: ACTION_NAMES.iter().map(|s| s.to_string()).collect(),
        episodes,
        mean_return: report.mean_return(),
        options,
        diversity,
        region_diversity: termination_diversity(&probe),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(counts: Vec<Vec<u64>>, starts: Vec<u64>) -> EvalReport {
        EvalReport { returns: vec![], option_steps: starts.clone(), termination_counts: counts, option_starts: starts }
    }

    #[test]
    fn disjoint_regions_have_unit_distance() {
        let d = termination_diversity(&report(vec![vec![5, 0, 0], vec![0, 3, 3]], vec![10, 10]));
        assert_eq!(d.mean_pairwise_tv, 1.0);
        assert_eq!(d.termination_mass, vec![0.5, 0.6]);
    }

    #[test]
    fn probe_terminates_immediately_or_never() {
        use crate::agent::{AgentConfig, Algorithm};
        use crate::mdp::FourRoomsConfig;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let env = FourRoomsConfig::default().environment().unwrap();
        let mut agent = Agent::new(AgentConfig::for_algorithm(Algorithm::A2imoc), env, 0).unwrap();
        let bias = agent.params_mut().block_mut("beta.b").unwrap();
        bias.data = vec![50.0, 50.0, -50.0, -50.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = termination_probe(&agent, 2, &mut rng).unwrap();
        let starts = r.option_starts[0];
        // β ≈ 1 ends every execution after one step, unless that step
        // reached a goal
        for o in 0..2 {
            assert_eq!(r.option_steps[o], starts);
            assert!(r.termination_counts[o].iter().sum::<u64>() > starts * 9 / 10);
        }
        for o in 2..4 {
            assert_eq!(r.termination_counts[o].iter().sum::<u64>(), 0);
        }
        let d = termination_diversity(&r);
        assert_eq!(d.termination_mass[2], 0.0);
        assert!(d.termination_mass[0] > 0.9);
    }

    #[test]
    fn identical_regions_have_zero_distance() {
        let d = termination_diversity(&report(vec![vec![1, 1], vec![4, 4], vec![0, 0]], vec![2, 8, 3]));
        assert_eq!(d.mean_pairwise_tv, 0.0);
        assert_eq!(d.min_pairwise_tv, 0.0);
        assert_eq!(d.termination_mass[2], 0.0);
    }
}
