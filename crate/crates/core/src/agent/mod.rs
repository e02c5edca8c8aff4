//! The synchronous advantage actor-critic loop over options. A2IMOC, A2C, AOC
//! and "our AOC" are presets of one loop that differ in option selection,
//! advantage estimation and the termination objective.

mod advantage;

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use advantage::{uoae_advantage, window_targets, AdvantageMode, WindowValues};

use crate::baselines::{aoc_option_selection, aoc_termination_loss};
use crate::error::{Error, Result};
use crate::infomax::{fit_models, termination_loss, OptionTransitionBuffer, TerminationConfig, TerminationSegment};
use crate::mdp::{sample_categorical, Environment, Episode, TabularMdp};
use crate::nn::primitives::{log_prob, mixture_entropy, softmax, softmax_entropy};
use crate::nn::{
    apply_gradients, EncoderSpec, Forward, GradBuffer, Network, NetworkSpec, OptimizerKind, OptimizerState, OutputGrads,
    Outputs, Params,
};
use crate::options::{argmax, sample_termination, u_omega, ActiveOption, MuMode, OptionTransition};
use crate::oracle::LOG_FLOOR;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    A2imoc,
    A2c,
    Aoc,
    OurAoc,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::A2imoc => "a2imoc",
            Algorithm::A2c => "a2c",
            Algorithm::Aoc => "aoc",
            Algorithm::OurAoc => "our_aoc",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    Rmsprop,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// argmax_o [Q_Ω(x, o) − c_μ log μ̂(o|x)]
    Uncertainty,
    /// ε-greedy over Q_Ω.
    EpsGreedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationObjective {
    Infomax,
    Aoc,
    /// Options never terminate (single-option A2C).
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub rollout_len: usize,
    pub n_actors: usize,
    pub n_options: usize,
    pub c_mu: f64,
    pub c_h_mu: f64,
    pub c_h: f64,
    pub c_h_beta: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerName,
    /// ε of ε-greedy option selection during evaluation.
    pub eps_opt: f64,
    /// ε of ε-greedy option selection during training (AOC, ablation).
    pub aoc_epsilon: f64,
    pub buffer_capacity: usize,
    pub classifier_batch: usize,
    pub encoder: EncoderSpec,
    pub split_encoder: bool,
    pub mu_mode: MuMode,
    /// Keep the stop-gradient β(x) factor in the infomax termination loss.
    pub beta_factor: bool,
    pub eps_greedy_selection: bool,
    pub disable_mi_reg: bool,
    /// Overrides the algorithm's advantage estimator.
    pub advantage_mode: Option<AdvantageMode>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::A2imoc,
            gamma: 0.99,
            rollout_len: 20,
            n_actors: 12,
            n_options: 4,
            c_mu: 0.5,
            c_h_mu: 0.04,
            c_h: 0.01,
            c_h_beta: 0.01,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            learning_rate: 2e-3,
            optimizer: OptimizerName::Rmsprop,
            eps_opt: 0.01,
            aoc_epsilon: 0.1,
            buffer_capacity: 480,
            classifier_batch: 240,
            encoder: EncoderSpec::default(),
            split_encoder: false,
            mu_mode: MuMode::Greedy,
            beta_factor: true,
            eps_greedy_selection: false,
            disable_mi_reg: false,
            advantage_mode: None,
        }
    }
}

/// The concrete behavior an [`AgentConfig`] resolves to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub selection: Selection,
    pub advantage: AdvantageMode,
    pub termination: TerminationObjective,
    pub c_h_mu: f64,
    pub n_options: usize,
    pub train_classifiers: bool,
}

impl AgentConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        Self { algorithm, ..Self::default() }
    }

    pub fn plan(&self) -> Plan {
        let mut plan = match self.algorithm {
            Algorithm::A2imoc => Plan {
                selection: Selection::Uncertainty,
                advantage: AdvantageMode::Uoae,
                termination: TerminationObjective::Infomax,
                c_h_mu: self.c_h_mu,
                n_options: self.n_options,
                train_classifiers: true,
            },
            Algorithm::OurAoc => Plan {
                selection: Selection::Uncertainty,
                advantage: AdvantageMode::Uoae,
                termination: TerminationObjective::Aoc,
                c_h_mu: self.c_h_mu,
                n_options: self.n_options,
                train_classifiers: true,
            },
            Algorithm::Aoc => Plan {
                selection: Selection::EpsGreedy,
                advantage: AdvantageMode::Truncated,
                termination: TerminationObjective::Aoc,
                c_h_mu: 0.0,
                n_options: self.n_options,
                train_classifiers: false,
            },
            Algorithm::A2c => Plan {
                selection: Selection::EpsGreedy,
                advantage: AdvantageMode::NStep,
                termination: TerminationObjective::Never,
                c_h_mu: 0.0,
                n_options: 1,
                train_classifiers: false,
            },
        };
        if self.eps_greedy_selection {
            plan.selection = Selection::EpsGreedy;
        }
        if self.disable_mi_reg {
            plan.c_h_mu = 0.0;
        }
        if let Some(mode) = self.advantage_mode {
            plan.advantage = mode;
        }
        plan
    }

    /// All problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let weights = [
            ("c_mu", self.c_mu),
            ("c_h_mu", self.c_h_mu),
            ("c_h", self.c_h),
            ("c_h_beta", self.c_h_beta),
            ("value_coef", self.value_coef),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                errs.push(format!("{name} must be a finite non-negative number, got {w}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            errs.push(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, p) in [("eps_opt", self.eps_opt), ("aoc_epsilon", self.aoc_epsilon)] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, n) in [
            ("rollout_len", self.rollout_len),
            ("n_actors", self.n_actors),
            ("n_options", self.n_options),
            ("classifier_batch", self.classifier_batch),
            ("buffer_capacity", self.buffer_capacity),
            ("encoder hidden width", self.encoder.hidden()),
        ] {
            if n == 0 {
                errs.push(format!("{name} must be at least 1"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(errs))
        }
    }

    fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Rmsprop => OptimizerKind::rmsprop(self.learning_rate),
            OptimizerName::Adam => OptimizerKind::adam(self.learning_rate),
        }
    }
}

/// argmax_o [q(o) − c_μ log μ̂(o)] when the current option terminated
/// (`terminated`), otherwise the current option. Ties go to the lowest id.
pub fn select_option(q_row: &[f64], mu_hat_row: &[f64], c_mu: f64, current: usize, terminated: bool) -> usize {
    if !terminated {
        return current;
    }
    let scores: Vec<f64> = q_row.iter().zip(mu_hat_row).map(|(q, m)| q - c_mu * m.max(LOG_FLOOR).ln()).collect();
    argmax(&scores)
}

fn mu_hat(fwd: &Forward, sample: usize) -> Vec<f64> {
    softmax(fwd.mu_row(sample)).into_iter().map(|p| p.max(LOG_FLOOR)).collect()
}

/// Per-window record of what every actor did. Arrays are indexed
/// `actor * len + t`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub n_actors: usize,
    pub len: usize,
    pub states: Vec<usize>,
    pub options: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// The episode ended after this step.
    pub dones: Vec<bool>,
    /// Termination draw at x_t for the option that was active on arrival.
    pub checks: Vec<Option<(usize, bool)>>,
    /// An option was (re)selected at x_t.
    pub option_starts: Vec<bool>,
    pub final_states: Vec<usize>,
    /// Option executions completed inside this window (possibly started in
    /// an earlier one).
    pub segments: Vec<TerminationSegment>,
    pub transitions: Vec<OptionTransition>,
    pub episode_returns: Vec<f64>,
}

impl Rollout {
    fn idx(&self, actor: usize, t: usize) -> usize {
        actor * self.len + t
    }

    /// For each step, the later step at which its option terminated by a β
    /// draw inside the window.
    pub fn terminations(&self, actor: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len];
        let mut next = None;
        for t in (0..self.len).rev() {
            out[t] = next;
            if let Some((_, true)) = self.checks[self.idx(actor, t)] {
                next = Some(t);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Actor {
    rng: ChaCha8Rng,
    episode: Episode,
    active: Option<ActiveOption>,
    arrivals: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub iteration: u64,
    pub env_steps: u64,
    pub episode_returns: Vec<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub termination_loss: f64,
    pub entropy: f64,
    pub mixture_entropy: f64,
    pub classifier_loss_p: Option<f64>,
    pub classifier_loss_mu: Option<f64>,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub option_usage: Vec<f64>,
    pub mean_option_duration: Option<f64>,
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub version: u32,
    pub config: AgentConfig,
    pub params: Params,
    pub optimizer: OptimizerState,
    pub classifier_optimizer: OptimizerState,
    pub buffer: OptionTransitionBuffer,
    actors: Vec<Actor>,
    learner_rng: ChaCha8Rng,
    pub env_steps: u64,
    pub iterations: u64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn observations(env: &Environment, encoder: &EncoderSpec) -> Result<Option<Array2<f64>>> {
    match encoder {
        EncoderSpec::OneHot { .. } => Ok(None),
        EncoderSpec::Conv { channels, height, width, .. } => {
            let grid = env
                .grid()
                .ok_or_else(|| Error::Unsupported("the conv encoder needs a gridworld to render states".into()))?;
            let images: Vec<Vec<f64>> = (0..env.n_states()).map(|s| grid.render(s)).collect();
            let len = images.first().map(Vec::len).unwrap_or(0);
            if len != channels * height * width {
                return Err(Error::Config(format!(
                    "conv encoder expects {channels}×{height}×{width} images but the grid renders {len} values"
                )));
            }
            Ok(Some(Array2::from_shape_vec((env.n_states(), len), images.concat()).expect("image shape")))
        }
    }
}

/// Result of running evaluation episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    /// β-draw terminations per `[option][state]`.
    pub termination_counts: Vec<Vec<u64>>,
    /// Times each option was selected.
    pub option_starts: Vec<u64>,
    pub option_steps: Vec<u64>,
}

impl EvalReport {
    pub fn mean_return(&self) -> f64 {
        if self.returns.is_empty() {
            0.0
        } else {
            self.returns.iter().sum::<f64>() / self.returns.len() as f64
        }
    }
}

/// Runs `n_episodes` with ε-greedy option selection over Q_Ω (ε = `eps_opt`),
/// sampled terminations and stochastic intra-option actions.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<R: Rng + ?Sized>(
    net: &Network,
    params: &Params,
    mdp: &TabularMdp,
    max_episode_len: usize,
    n_episodes: usize,
    eps_opt: f64,
    terminations: bool,
    rng: &mut R,
) -> Result<EvalReport> {
    let n_options = net.spec().n_options;
    let mut report = EvalReport {
        returns: Vec::with_capacity(n_episodes),
        termination_counts: vec![vec![0; mdp.n_states()]; n_options],
        option_starts: vec![0; n_options],
        option_steps: vec![0; n_options],
    };
    for _ in 0..n_episodes {
        let mut episode = Episode::start(mdp, rng, max_episode_len);
        let mut option: Option<usize> = None;
        loop {
            let fwd = net.forward(params, &[episode.state])?;
            let reselect = match option {
                None => true,
                Some(o) => {
                    let b = terminations && sample_termination(fwd.beta(0, o), rng);
                    if b {
                        report.termination_counts[o][episode.state] += 1;
                    }
                    b
                }
            };
            if reselect {
                let o = aoc_option_selection(fwd.q_row(0), eps_opt, rng);
                report.option_starts[o] += 1;
                option = Some(o);
            }
            let o = option.expect("option selected");
            report.option_steps[o] += 1;
            let a = sample_categorical(&softmax(fwd.policy_row(0, o)), rng);
            if episode.step(mdp, rng, a)?.done {
                break;
            }
        }
        report.returns.push(episode.ret);
    }
    Ok(report)
}

/// Loss values of one update, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct LossParts {
    policy: f64,
    value: f64,
    termination: f64,
    entropy: f64,
    mixture_entropy: f64,
}

pub struct Agent {
    config: AgentConfig,
    plan: Plan,
    env: Environment,
    net: Network,
    params: Params,
    optimizer: OptimizerState,
    classifier_optimizer: OptimizerState,
    buffer: OptionTransitionBuffer,
    actors: Vec<Actor>,
    learner_rng: ChaCha8Rng,
    env_steps: u64,
    iterations: u64,
}

impl Agent {
    pub fn new(config: AgentConfig, env: Environment, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = config.plan();
        let spec = NetworkSpec {
            n_states: env.n_states(),
            n_actions: env.n_actions(),
            n_options: plan.n_options,
            encoder: config.encoder.clone(),
            split_encoder: config.split_encoder,
        };
        let net = Network::new(spec, observations(&env, &config.encoder)?)?;
        let params = net.init_params(&mut rng_stream(seed, 0));
        let optimizer = OptimizerState::new(config.optimizer_kind(), &params);
        let classifier_optimizer = OptimizerState::new(config.optimizer_kind(), &params);
        let actors = (0..config.n_actors)
            .map(|i| {
                let mut rng = rng_stream(seed, 2 + i as u64);
                let episode = Episode::start(env.mdp_at(0), &mut rng, env.max_episode_len());
                Actor { rng, episode, active: None, arrivals: Vec::new() }
            })
            .collect();
        Ok(Self {
            buffer: OptionTransitionBuffer::new(config.buffer_capacity),
            learner_rng: rng_stream(seed, 1),
            config,
            plan,
            env,
            net,
            params,
            optimizer,
            classifier_optimizer,
            actors,
            env_steps: 0,
            iterations: 0,
        })
    }

    pub fn restore(env: Environment, ckpt: AgentCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        let mut agent = Self::new(ckpt.config, env, 0)?;
        if ckpt.params.blocks.len() != agent.params.blocks.len()
            || ckpt.params.blocks.iter().zip(&agent.params.blocks).any(|(a, b)| a.shape != b.shape)
        {
            return Err(Error::Shape("checkpoint parameters do not match the environment".into()));
        }
        if ckpt.actors.len() != agent.actors.len() {
            return Err(Error::Shape("checkpoint actor count does not match its config".into()));
        }
        agent.params = ckpt.params;
        agent.optimizer = ckpt.optimizer;
        agent.classifier_optimizer = ckpt.classifier_optimizer;
        agent.buffer = ckpt.buffer;
        agent.actors = ckpt.actors;
        agent.learner_rng = ckpt.learner_rng;
        agent.env_steps = ckpt.env_steps;
        agent.iterations = ckpt.iterations;
        Ok(agent)
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            classifier_optimizer: self.classifier_optimizer.clone(),
            buffer: self.buffer.clone(),
            actors: self.actors.clone(),
            learner_rng: self.learner_rng.clone(),
            env_steps: self.env_steps,
            iterations: self.iterations,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn buffer(&self) -> &OptionTransitionBuffer {
        &self.buffer
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn current_mdp(&self) -> &Arc<TabularMdp> {
        self.env.mdp_at(self.env_steps)
    }

    fn choose<R: Rng + ?Sized>(&self, fwd: &Forward, sample: usize, rng: &mut R) -> usize {
        if self.plan.n_options == 1 {
            return 0;
        }
        match self.plan.selection {
            Selection::Uncertainty => select_option(fwd.q_row(sample), &mu_hat(fwd, sample), self.config.c_mu, 0, true),
            Selection::EpsGreedy => aoc_option_selection(fwd.q_row(sample), self.config.aoc_epsilon, rng),
        }
    }

    /// V_Ω(x) for the sample under the policy over options: one-hot on the
    /// uncertainty-aware choice, the ε-greedy mixture for ε-greedy
    /// selection, or μ̂ when configured.
    fn v_omega(&self, fwd: &Forward, sample: usize) -> f64 {
        let q = fwd.q_row(sample);
        if self.plan.n_options == 1 {
            return q[0];
        }
        match (self.config.mu_mode, self.plan.selection) {
            (MuMode::Estimated, _) => {
                let mu = mu_hat(fwd, sample);
                mu.iter().zip(q).map(|(m, q)| m * q).sum::<f64>() / mu.iter().sum::<f64>()
            }
            (MuMode::Greedy, Selection::Uncertainty) => {
                q[select_option(q, &mu_hat(fwd, sample), self.config.c_mu, 0, true)]
            }
            (MuMode::Greedy, Selection::EpsGreedy) => {
                let eps = self.config.aoc_epsilon;
                (1.0 - eps) * q[argmax(q)] + eps * q.iter().sum::<f64>() / q.len() as f64
            }
        }
    }

    fn beta(&self, fwd: &Forward, sample: usize, option: usize) -> f64 {
        match self.plan.termination {
            TerminationObjective::Never => 0.0,
            _ => fwd.beta(sample, option),
        }
    }

    /// Runs every actor for one window of `rollout_len` steps.
    pub fn collect_rollout(&mut self) -> Result<Rollout> {
        let (n_actors, len) = (self.config.n_actors, self.config.rollout_len);
        let total = n_actors * len;
        let mut ro = Rollout {
            n_actors,
            len,
            states: vec![0; total],
            options: vec![0; total],
            actions: vec![0; total],
            rewards: vec![0.0; total],
            dones: vec![false; total],
            checks: vec![None; total],
            option_starts: vec![false; total],
            ..Default::default()
        };
        let emit = self.plan.termination != TerminationObjective::Never;
        let max_len = self.env.max_episode_len();
        let mut actors = std::mem::take(&mut self.actors);
        for t in 0..len {
            let mdp = self.env.mdp_at(self.env_steps).clone();
            let states: Vec<usize> = actors.iter().map(|a| a.episode.state).collect();
            let fwd = self.net.forward(&self.params, &states)?;
            for (i, actor) in actors.iter_mut().enumerate() {
                let idx = i * len + t;
                let x = states[i];
                ro.states[idx] = x;
                let option = match actor.active {
                    None => {
                        ro.option_starts[idx] = true;
                        self.choose(&fwd, i, &mut actor.rng)
                    }
                    Some(active) => {
                        let b = emit && sample_termination(fwd.beta(i, active.option), &mut actor.rng);
                        if emit {
                            ro.checks[idx] = Some((active.option, b));
                        }
                        if b {
                            ro.segments.push(TerminationSegment {
                                start: active.start,
                                option: active.option,
                                arrivals: std::mem::take(&mut actor.arrivals),
                                forced_end: false,
                            });
                            ro.transitions.push(OptionTransition { start: active.start, end: x, option: active.option });
                            ro.option_starts[idx] = true;
                            self.choose(&fwd, i, &mut actor.rng)
                        } else {
                            active.option
                        }
                    }
                };
                if ro.option_starts[idx] {
                    actor.active = Some(ActiveOption::new(option, x));
                    actor.arrivals.clear();
                }
                let a = sample_categorical(&softmax(fwd.policy_row(i, option)), &mut actor.rng);
                let step = actor.episode.step(&mdp, &mut actor.rng, a)?;
                ro.options[idx] = option;
                ro.actions[idx] = a;
                ro.rewards[idx] = step.reward;
                ro.dones[idx] = step.done;
                if let Some(active) = actor.active.as_mut() {
                    active.steps += 1;
                }
                actor.arrivals.push(step.next_state);
                if step.done {
                    let active = actor.active.take().expect("an option is active while acting");
                    if emit {
                        ro.segments.push(TerminationSegment {
                            start: active.start,
                            option: active.option,
                            arrivals: std::mem::take(&mut actor.arrivals),
                            forced_end: true,
                        });
                        ro.transitions.push(OptionTransition {
                            start: active.start,
                            end: step.next_state,
                            option: active.option,
                        });
                    }
                    actor.arrivals.clear();
                    ro.episode_returns.push(actor.episode.ret);
                    actor.episode = Episode::start(&mdp, &mut actor.rng, max_len);
                }
            }
            self.env_steps += n_actors as u64;
        }
        ro.final_states = actors.iter().map(|a| a.episode.state).collect();
        self.actors = actors;
        Ok(ro)
    }

    /// Builds the combined loss over the rollout and its gradient with
    /// respect to the head outputs. The forward batch is
    /// `[rollout states | final states | segment arrivals]`.
    fn losses(&self, ro: &Rollout) -> Result<(Vec<usize>, Forward, LossParts, OutputGrads)> {
        let (n_actors, len) = (ro.n_actors, ro.len);
        let main = n_actors * len;
        let infomax = self.plan.termination == TerminationObjective::Infomax;
        let mut batch: Vec<usize> = ro.states.clone();
        batch.extend(&ro.final_states);
        let arrivals_offset = batch.len();
        if infomax {
            for seg in &ro.segments {
                batch.extend(&seg.arrivals);
            }
        }
        let fwd = self.net.forward(&self.params, &batch)?;
        let v: Vec<f64> = (0..main + n_actors).map(|i| self.v_omega(&fwd, i)).collect();

        // regression targets
        let mut targets = vec![0.0; main];
        for a in 0..n_actors {
            let range = a * len..(a + 1) * len;
            let fin = main + a;
            let q: Vec<f64> = range.clone().map(|i| fwd.q[[i, ro.options[i]]]).collect();
            let u_final: Vec<f64> = range
                .clone()
                .map(|i| {
                    let o = ro.options[i];
                    u_omega(fwd.q[[fin, o]], v[fin], self.beta(&fwd, fin, o))
                })
                .collect();
            let w = WindowValues {
                rewards: &ro.rewards[range.clone()],
                dones: &ro.dones[range.clone()],
                terminations: &ro.terminations(a),
                q: &q,
                v: &v[range.clone()],
                v_final: v[fin],
                u_final: &u_final,
            };
            let tg = window_targets(&w, self.config.gamma, self.plan.advantage)?;
            targets[range].copy_from_slice(&tg);
        }

        let b = main as f64;
        let (n_opt, n_act) = (self.plan.n_options, self.net.spec().n_actions);
        let mut parts = LossParts::default();
        let mut d_policy = Array2::zeros(fwd.policy_logits.dim());
        let mut d_q = Array2::zeros(fwd.q.dim());
        let mut d_beta = Array2::zeros(fwd.beta_logits.dim());
        for i in 0..main {
            let (o, act) = (ro.options[i], ro.actions[i]);
            let q = fwd.q[[i, o]];
            let adv = targets[i] - q;
            let (logp, dlogp) = log_prob(fwd.policy_row(i, o), act);
            let (h, dh) = softmax_entropy(fwd.policy_row(i, o));
            parts.policy -= logp * adv / b;
            parts.entropy += h / b;
            for k in 0..n_act {
                d_policy[[i, o * n_act + k]] += (-adv * dlogp[k] - self.config.c_h * dh[k]) / b;
            }
            if self.plan.c_h_mu > 0.0 && n_opt > 1 {
                let rows: Vec<&[f64]> = (0..n_opt).map(|k| fwd.policy_row(i, k)).collect();
                let weights = softmax(fwd.mu_row(i));
                let (hm, dhm) = mixture_entropy(&rows, &weights);
                parts.mixture_entropy += hm / b;
                for (k, g) in dhm.iter().enumerate() {
                    for (j, v) in g.iter().enumerate() {
                        d_policy[[i, k * n_act + j]] -= self.plan.c_h_mu * v / b;
                    }
                }
            }
            parts.value += (q - targets[i]).powi(2) / b;
            d_q[[i, o]] += self.config.value_coef * 2.0 * (q - targets[i]) / b;
        }

        match self.plan.termination {
            TerminationObjective::Never => {}
            TerminationObjective::Aoc => {
                for i in 0..main {
                    if let Some((o, _)) = ro.checks[i] {
                        let (l, d) = aoc_termination_loss(fwd.q[[i, o]], v[i], fwd.beta_logit(i, o), self.config.gamma);
                        parts.termination += l / b;
                        d_beta[[i, o]] += d / b;
                    }
                }
            }
            TerminationObjective::Infomax => {
                let pairs: Vec<(usize, usize)> =
                    ro.segments.iter().flat_map(|s| s.arrivals.iter().map(move |x| (s.start, *x))).collect();
                if !pairs.is_empty() {
                    let inv = self.net.forward_pairs(&self.params, &pairs)?;
                    let cfg = TerminationConfig { entropy_coef: self.config.c_h_beta, beta_factor: self.config.beta_factor };
                    let mut offset = 0;
                    for seg in &ro.segments {
                        let k = seg.arrivals.len();
                        let rows = arrivals_offset + offset..arrivals_offset + offset + k;
                        let logits: Vec<f64> = rows.clone().map(|r| fwd.beta_logit(r, seg.option)).collect();
                        let log_p: Vec<f64> = (offset..offset + k)
                            .map(|p| softmax(inv.row(p))[seg.option].max(LOG_FLOOR).ln())
                            .collect();
                        let (l, d) = termination_loss(seg, &logits, &log_p, &cfg)?;
                        parts.termination += l / b;
                        for (r, g) in rows.zip(d) {
                            d_beta[[r, seg.option]] += g / b;
                        }
                        offset += k;
                    }
                }
            }
        }
        for (name, v) in [
            ("policy loss", parts.policy),
            ("value loss", parts.value),
            ("termination loss", parts.termination),
            ("policy entropy", parts.entropy),
            ("mixture entropy", parts.mixture_entropy),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        let grads = OutputGrads {
            policy: Some(d_policy),
            q: Some(d_q),
            beta: (self.plan.termination != TerminationObjective::Never).then_some(d_beta),
            ..Default::default()
        };
        Ok((batch, fwd, parts, grads))
    }

    /// Collect → losses → clipped optimizer step → classifier step.
    pub fn train_iteration(&mut self) -> Result<TrainingStats> {
        let ro = self.collect_rollout()?;
        let (_, fwd, parts, grads) = self.losses(&ro)?;
        for (head, g) in [("policy", &grads.policy), ("q", &grads.q), ("beta", &grads.beta)] {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of the {head} head")));
                }
            }
        }
        let mut buf = GradBuffer::zeros_like(&self.params);
        let out = Outputs { heads: Some(fwd), inverse: None };
        self.net.backward(&self.params, &out, &grads, &mut buf)?;
        let step = apply_gradients(&mut self.params, &mut buf, &mut self.optimizer, Some(self.config.max_grad_norm))?;

        for t in &ro.transitions {
            self.buffer.push(*t);
        }
        let mut classifier = None;
        if self.plan.train_classifiers {
            if let Some(batch) = self.buffer.sample_batch(self.config.classifier_batch, &mut self.learner_rng) {
                classifier = Some(fit_models(
                    &self.net,
                    &mut self.params,
                    &mut self.classifier_optimizer,
                    &batch,
                    Some(self.config.max_grad_norm),
                )?);
            }
        }
        self.iterations += 1;

        let n_opt = self.plan.n_options;
        let mut usage = vec![0.0; n_opt];
        for o in &ro.options {
            usage[*o] += 1.0;
        }
        let total: f64 = usage.iter().sum();
        usage.iter_mut().for_each(|u| *u /= total);
        let durations: Vec<f64> = ro.segments.iter().map(|s| s.arrivals.len() as f64).collect();
        Ok(TrainingStats {
            iteration: self.iterations,
            env_steps: self.env_steps,
            episode_returns: ro.episode_returns.clone(),
            policy_loss: parts.policy,
            value_loss: parts.value,
            termination_loss: parts.termination,
            entropy: parts.entropy,
            mixture_entropy: parts.mixture_entropy,
            classifier_loss_p: classifier.map(|c| c.0),
            classifier_loss_mu: classifier.map(|c| c.1),
            grad_norm: step.grad_norm,
            clipped_grad_norm: step.clipped_norm,
            option_usage: usage,
            mean_option_duration: (!durations.is_empty())
                .then(|| durations.iter().sum::<f64>() / durations.len() as f64),
        })
    }

    /// Evaluation on the current reward phase with the configured ε_opt.
    pub fn evaluate<R: Rng + ?Sized>(&self, n_episodes: usize, rng: &mut R) -> Result<EvalReport> {
        evaluate(
            &self.net,
            &self.params,
            self.current_mdp(),
            self.env.max_episode_len(),
            n_episodes,
            self.config.eps_opt,
            self.plan.termination != TerminationObjective::Never,
            rng,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_examples() {
        assert_eq!(select_option(&[0.5, 0.4], &[0.5, 0.5], 0.0, 1, true), 0);
        assert_eq!(select_option(&[0.5, 0.4], &[0.9, 0.1], 0.5, 0, true), 1);
        assert_eq!(select_option(&[0.5, 9.0], &[0.5, 0.5], 0.5, 0, false), 0);
        assert_eq!(select_option(&[1.0, 1.0], &[0.5, 0.5], 0.5, 1, true), 0);
    }

    #[test]
    fn presets_resolve() {
        let aoc = AgentConfig::for_algorithm(Algorithm::Aoc).plan();
        assert_eq!(aoc.selection, Selection::EpsGreedy);
        assert_eq!(aoc.advantage, AdvantageMode::Truncated);
        assert_eq!(aoc.c_h_mu, 0.0);
        let a2c = AgentConfig::for_algorithm(Algorithm::A2c).plan();
        assert_eq!(a2c.n_options, 1);
        let mut cfg = AgentConfig::default();
        cfg.disable_mi_reg = true;
        cfg.advantage_mode = Some(AdvantageMode::NStep);
        let plan = cfg.plan();
        assert_eq!((plan.c_h_mu, plan.advantage), (0.0, AdvantageMode::NStep));
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = AgentConfig { c_h: -1.0, rollout_len: 0, gamma: 2.0, ..Default::default() };
        match cfg.validate().unwrap_err() {
            Error::ConfigList(errs) => assert_eq!(errs.len(), 3),
            e => panic!("{e}"),
        }
    }
}
