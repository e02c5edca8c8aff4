//! Python bindings. Structured results cross the boundary as JSON and come
//! out as plain dicts and lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use imoc::agent::{select_option as select_option_rs, uoae_advantage as uoae_rs, Agent as AgentRs};
use imoc::infomax::{termination_loss as termination_loss_rs, TerminationConfig, TerminationSegment};
use imoc::oracle::{exact_conditional_mi, exact_entropy_gradients, Convention, OracleInstance};
use imoc::ppo_ext::{clipped_beta_term as clipped_beta_term_rs, ugoae as ugoae_rs, TdSequences, WindowTail};
use imoc::run::{export_visualization, run_training as run_training_rs, RunCheckpoint, RunConfig};
use imoc::verify::{run_suite, SuiteConfig};
use imoc::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::ConfigList(_) | Error::Usage(_) | Error::Shape(_) | Error::Contract(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config_from(toml_text: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = match toml_text {
        Some(t) => RunConfig::from_toml(t, &[]).map_err(err)?,
        None => RunConfig::default(),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// A training agent built from a run config (TOML text).
///
/// ```python
/// agent = Agent(seed=0)
/// stats = agent.train_iteration()
/// agent.evaluate(episodes=20, seed=1)["mean_return"]
/// ```
#[pyclass]
struct Agent {
    inner: AgentRs,
    run: RunConfig,
}

#[pymethods]
impl Agent {
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let run = config_from(config, Some(seed))?.resolved();
        run.validate().map_err(err)?;
        let env = run.environment.environment().map_err(err)?;
        let inner = AgentRs::new(run.agent.clone(), env, seed).map_err(err)?;
        Ok(Self { inner, run })
    }

    /// Rebuilds an agent from the JSON written by `train` or `checkpoint()`.
    #[staticmethod]
    fn from_checkpoint(json: &str) -> PyResult<Self> {
        let ckpt: RunCheckpoint = serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner = ckpt.agent().map_err(err)?;
        Ok(Self { inner, run: ckpt.run })
    }

    fn checkpoint(&self) -> PyResult<String> {
        let ckpt = RunCheckpoint { run: self.run.clone(), agent: self.inner.checkpoint() };
        serde_json::to_string(&ckpt).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn env_steps(&self) -> u64 {
        self.inner.env_steps()
    }

    #[getter]
    fn n_options(&self) -> usize {
        self.inner.plan().n_options
    }

    fn train_iteration<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let stats = self.inner.train_iteration().map_err(err)?;
        to_py(py, &stats)
    }

    #[pyo3(signature = (episodes=20, seed=0))]
    fn evaluate<'py>(&self, py: Python<'py>, episodes: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.evaluate(episodes, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        let out = serde_json::json!({
            "mean_return": report.mean_return(),
            "returns": report.returns,
            "option_starts": report.option_starts,
            "termination_counts": report.termination_counts,
        });
        to_py(py, &out)
    }

    #[pyo3(signature = (episodes=100, seed=0))]
    fn visualization<'py>(&self, py: Python<'py>, episodes: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let viz = export_visualization(&self.inner, episodes, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        to_py(py, &viz)
    }
}

/// Trains from a TOML config; writes files only when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config=None, seed=0, out_dir=None))]
fn run_training<'py>(py: Python<'py>, config: Option<&str>, seed: u64, out_dir: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from(config, Some(seed))?;
    let summary = run_training_rs(&cfg, out_dir.map(std::path::Path::new)).map_err(err)?;
    let out = serde_json::json!({ "final_return": summary.final_return, "rows": summary.rows });
    to_py(py, &out)
}

#[pyfunction]
fn select_option(q: Vec<f64>, mu_hat: Vec<f64>, c_mu: f64, current: usize, terminated: bool) -> PyResult<usize> {
    if q.len() != mu_hat.len() || q.is_empty() {
        return Err(PyValueError::new_err("q and mu_hat must be non-empty and of equal length"));
    }
    Ok(select_option_rs(&q, &mu_hat, c_mu, current, terminated))
}

#[pyfunction]
fn uoae_advantage(rewards: Vec<f64>, k: Option<usize>, v_at_termination: Option<f64>, v_end: f64, u_end: f64, q: f64, gamma: f64) -> PyResult<f64> {
    uoae_rs(&rewards, k, v_at_termination, v_end, u_end, q, gamma).map_err(err)
}

/// Loss and per-arrival logit gradients of one option execution.
#[pyfunction]
#[pyo3(signature = (start, option, arrivals, logits, log_p, entropy_coef=0.01, forced_end=false))]
fn termination_loss(
    start: usize,
    option: usize,
    arrivals: Vec<usize>,
    logits: Vec<f64>,
    log_p: Vec<f64>,
    entropy_coef: f64,
    forced_end: bool,
) -> PyResult<(f64, Vec<f64>)> {
    let seg = TerminationSegment { start, option, arrivals, forced_end };
    let cfg = TerminationConfig { entropy_coef, beta_factor: true };
    termination_loss_rs(&seg, &logits, &log_p, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (delta, delta_option, k, n, gamma, lam, tail=None))]
fn ugoae(delta: Vec<f64>, delta_option: Vec<f64>, k: usize, n: usize, gamma: f64, lam: f64, tail: Option<(f64, f64, f64)>) -> PyResult<f64> {
    let tail = tail.map(|(reward, u_next, q)| WindowTail { reward, u_next, q });
    ugoae_rs(&TdSequences { delta, delta_option, k, n, gamma, lambda: lam, tail }).map_err(err)
}

#[pyfunction]
fn clipped_beta_term(l: f64, l_old: f64, eps_beta: f64, beta_old: f64, coef: f64) -> (f64, f64) {
    clipped_beta_term_rs(l, l_old, eps_beta, beta_old, coef)
}

/// Exact I(X_f; O | X_s) and its gradient in the termination logits for a
/// random tabular instance.
#[pyfunction]
#[pyo3(signature = (n_states=5, n_options=2, seed=0))]
fn exact_mi<'py>(py: Python<'py>, n_states: usize, n_options: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let inst = OracleInstance::random(n_states, n_options, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
    let model = inst.model(Convention::ActFirst).map_err(err)?;
    let out = serde_json::json!({
        "mi": exact_conditional_mi(&model),
        "gradient": exact_entropy_gradients(&inst.mdp, &model).mi(),
    });
    to_py(py, &out)
}

/// Runs the oracle suite; returns one dict per check.
#[pyfunction]
#[pyo3(signature = (instances=30, seed=0))]
fn oracle_check<'py>(py: Python<'py>, instances: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let results = run_suite(&SuiteConfig { instances, seed, ..Default::default() }).map_err(err)?;
    to_py(py, &results)
}

#[pymodule]
pub fn imoc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Agent>()?;
    m.add_function(wrap_pyfunction!(run_training, m)?)?;
    m.add_function(wrap_pyfunction!(select_option, m)?)?;
    m.add_function(wrap_pyfunction!(uoae_advantage, m)?)?;
    m.add_function(wrap_pyfunction!(termination_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ugoae, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_beta_term, m)?)?;
    m.add_function(wrap_pyfunction!(exact_mi, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    Ok(())
}
