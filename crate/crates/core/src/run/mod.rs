//! Config-driven experiment runs: training with incremental CSV logs,
//! checkpoints, evaluation, visualization export, ablations and option-count
//! sweeps.

mod ablation;
mod viz;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, run_sweep, AblationRow, AblationSummary, AblationTable, Variant};
pub use viz::{
    export_visualization, termination_diversity, termination_probe, CellView, Diversity, OptionView, Visualization,
    PROBE_EXECUTIONS,
};

use crate::agent::{Agent, AgentCheckpoint, AgentConfig, Algorithm, TerminationObjective, TrainingStats};
use crate::error::{Error, Result};
use crate::mdp::{build_test_mdp, Environment, FourRoomsConfig, TestMdpKind};
use crate::nn::primitives::softmax;
use crate::oracle::{exact_conditional_mi, Convention, ExactOptionModel, TabularOptionParams};

/// Output directories given as relative paths are resolved against this
/// variable when it is set.
pub const OUTPUT_ROOT_ENV: &str = "IMOC_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    FourRooms(FourRoomsConfig),
    TestMdp { mdp: TestMdpKind, size: usize, seed: u64, max_episode_len: usize },
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::FourRooms(FourRoomsConfig::default())
    }
}

impl EnvConfig {
    pub fn environment(&self) -> Result<Environment> {
        match self {
            EnvConfig::FourRooms(cfg) => cfg.environment(),
            EnvConfig::TestMdp { mdp, size, seed, max_episode_len } => {
                let mdp = build_test_mdp(*mdp, *size, &mut ChaCha8Rng::seed_from_u64(*seed))?;
                Ok(Environment::from_mdp(mdp, *max_episode_len))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub environment: EnvConfig,
    pub agent: AgentConfig,
    pub total_env_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// The final return is the mean over this many last evaluation points.
    pub final_evals: usize,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub n_options: Option<usize>,
    /// Option counts for `run_sweep`.
    pub n_options_sweep: Vec<usize>,
    /// Log the exact I(X_f; O | X_s) of the learned options at each
    /// evaluation point.
    pub oracle_attach: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::A2imoc,
            environment: EnvConfig::default(),
            agent: AgentConfig::default(),
            total_env_steps: 2_000_000,
            eval_interval: 50_000,
            eval_episodes: 20,
            final_evals: 5,
            seed: None,
            output_dir: None,
            n_options: None,
            n_options_sweep: Vec::new(),
            oracle_attach: false,
        }
    }
}

/// Sets `a.b.c = value` in a TOML table; the value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not of the form key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override `{spec}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// The agent config with the run-level algorithm and option count
    /// applied.
    pub fn agent_config(&self) -> AgentConfig {
        let mut agent = self.agent.clone();
        agent.algorithm = self.algorithm;
        if let Some(k) = self.n_options {
            agent.n_options = k;
        }
        agent
    }

    /// Defaults filled in and overrides folded into the agent block.
    pub fn resolved(&self) -> Self {
        Self { agent: self.agent_config(), n_options: None, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.total_env_steps == 0 {
            errs.push("total_env_steps must be positive".to_string());
        }
        if self.eval_interval == 0 {
            errs.push("eval_interval must be positive".to_string());
        }
        if self.eval_episodes == 0 {
            errs.push("eval_episodes must be positive".to_string());
        }
        if self.final_evals == 0 {
            errs.push("final_evals must be positive".to_string());
        }
        if self.seed.is_none() {
            errs.push("seed is required".to_string());
        }
        if self.n_options == Some(0) || self.n_options_sweep.contains(&0) {
            errs.push("option counts must be at least 1".to_string());
        }
        match self.agent_config().validate() {
            Err(Error::ConfigList(list)) => errs.extend(list),
            Err(e) => errs.push(e.to_string()),
            Ok(()) => {}
        }
        if let Err(e) = self.environment.environment() {
            errs.push(format!("environment: {e}"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList(errs))
        }
    }

    /// `output_dir`, resolved against the output-root variable when
    /// relative.
    pub fn output_path(&self) -> PathBuf {
        let dir = self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }
}

/// One CSV row, written at every evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub env_step: u64,
    pub iteration: u64,
    pub eval_return: f64,
    pub train_return: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub termination_loss: f64,
    pub entropy: f64,
    pub mixture_entropy: f64,
    pub classifier_loss_p: Option<f64>,
    pub classifier_loss_mu: Option<f64>,
    pub grad_norm: f64,
    pub mean_option_duration: Option<f64>,
    /// Fraction of steps per option, `;`-separated.
    pub option_usage: String,
    pub exact_mi: Option<f64>,
}

/// What `train` writes as `checkpoint.json`: the resolved run config plus
/// the agent state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub run: RunConfig,
    pub agent: AgentCheckpoint,
}

impl RunCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn agent(&self) -> Result<Agent> {
        Agent::restore(self.run.environment.environment()?, self.agent.clone())
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<LogRow>,
    pub final_return: f64,
    pub checkpoint: RunCheckpoint,
    pub dir: Option<PathBuf>,
}

pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Converts the network's option heads into oracle tables.
pub fn tabular_options(agent: &Agent) -> Result<TabularOptionParams> {
    let net = agent.network();
    let (ns, na, k) = (net.spec().n_states, net.spec().n_actions, net.spec().n_options);
    let states: Vec<usize> = (0..ns).collect();
    let fwd = net.forward(agent.params(), &states)?;
    let logits = (0..k).map(|o| (0..ns).map(|s| fwd.beta_logit(s, o)).collect()).collect();
    let policy = (0..k).map(|o| (0..ns).flat_map(|s| softmax(fwd.policy_row(s, o))).collect()).collect();
    let mu = (0..ns).map(|s| softmax(fwd.mu_row(s))).collect();
    TabularOptionParams::new(ns, na, logits, policy, mu)
}

/// Exact I(X_f; O | X_s) of the learned options with a uniform start
/// distribution over non-terminal states.
pub fn exact_agent_mi(agent: &Agent) -> Result<f64> {
    let mdp = agent.current_mdp();
    let params = tabular_options(agent)?;
    let open = (0..mdp.n_states()).filter(|s| !mdp.is_terminal(*s)).count().max(1);
    let start: Vec<f64> =
        (0..mdp.n_states()).map(|s| if mdp.is_terminal(s) { 0.0 } else { 1.0 / open as f64 }).collect();
    Ok(exact_conditional_mi(&ExactOptionModel::build(mdp, &params, &start, Convention::ActFirst)?))
}

struct Interval {
    stats: Vec<TrainingStats>,
}

impl Interval {
    fn row(&self, agent: &Agent, eval_return: f64, exact_mi: Option<f64>) -> LogRow {
        let avg = |f: &dyn Fn(&TrainingStats) -> f64| mean(&self.stats.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
        let avg_opt = |f: &dyn Fn(&TrainingStats) -> Option<f64>| mean(&self.stats.iter().filter_map(f).collect::<Vec<_>>());
        let returns: Vec<f64> = self.stats.iter().flat_map(|s| s.episode_returns.iter().copied()).collect();
        let k = agent.plan().n_options;
        let usage: Vec<String> = (0..k)
            .map(|o| avg(&|s: &TrainingStats| s.option_usage.get(o).copied().unwrap_or(0.0)).to_string())
            .collect();
        LogRow {
            env_step: agent.env_steps(),
            iteration: agent.iterations(),
            eval_return,
            train_return: mean(&returns),
            policy_loss: avg(&|s| s.policy_loss),
            value_loss: avg(&|s| s.value_loss),
            termination_loss: avg(&|s| s.termination_loss),
            entropy: avg(&|s| s.entropy),
            mixture_entropy: avg(&|s| s.mixture_entropy),
            classifier_loss_p: avg_opt(&|s| s.classifier_loss_p),
            classifier_loss_mu: avg_opt(&|s| s.classifier_loss_mu),
            grad_norm: avg(&|s| s.grad_norm),
            mean_option_duration: avg_opt(&|s| s.mean_option_duration),
            option_usage: usage.join(";"),
            exact_mi,
        }
    }
}

/// Trains until `total_env_steps`, evaluating every `eval_interval` steps
/// and at the end. With `dir` set, writes the resolved config, the log
/// (flushed after every row) and the final checkpoint there.
pub fn run_training(config: &RunConfig, dir: Option<&Path>) -> Result<RunSummary> {
    config.validate()?;
    let resolved = config.resolved();
    let seed = resolved.seed.expect("validated");
    let env = resolved.environment.environment()?;
    let mut agent = Agent::new(resolved.agent.clone(), env, seed)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(u64::MAX);

    let mut writer = match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            fs::write(d.join(CONFIG_FILE), resolved.to_toml()?)?;
            Some(csv::Writer::from_writer(File::create(d.join(LOG_FILE))?))
        }
        None => None,
    };
    let attach = resolved.oracle_attach
        && matches!(resolved.environment, EnvConfig::TestMdp { .. } | EnvConfig::FourRooms(_))
        && agent.plan().termination != TerminationObjective::Never;

    let mut rows = Vec::new();
    let mut interval = Interval { stats: Vec::new() };
    let mut next_eval = resolved.eval_interval;
    let result: Result<()> = (|| {
        while agent.env_steps() < resolved.total_env_steps {
            interval.stats.push(agent.train_iteration()?);
            let last = agent.env_steps() >= resolved.total_env_steps;
            if agent.env_steps() >= next_eval || last {
                while next_eval <= agent.env_steps() {
                    next_eval += resolved.eval_interval;
                }
                let eval = agent.evaluate(resolved.eval_episodes, &mut eval_rng)?;
                let mi = if attach { exact_agent_mi(&agent).ok() } else { None };
                let row = interval.row(&agent, eval.mean_return(), mi);
                interval.stats.clear();
                if let Some(w) = writer.as_mut() {
                    w.serialize(&row).map_err(Error::from)?;
                    w.flush()?;
                }
                rows.push(row);
            }
        }
        Ok(())
    })();
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    result?;

    let checkpoint = RunCheckpoint { run: resolved.clone(), agent: agent.checkpoint() };
    if let Some(d) = dir {
        checkpoint.save(&d.join(CHECKPOINT_FILE))?;
    }
    let tail: Vec<f64> = rows.iter().rev().take(resolved.final_evals).map(|r| r.eval_return).collect();
    Ok(RunSummary { final_return: mean(&tail).unwrap_or(0.0), rows, checkpoint, dir: dir.map(Path::to_path_buf) })
}

/// Reads a log written by [`run_training`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(Error::from)?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<LogRow>, _>>()
        .map_err(|e| Error::Serde(e.to_string()))
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
