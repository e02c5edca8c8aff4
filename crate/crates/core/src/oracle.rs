//! Exact tabular computations for options: option-transition matrices,
//! conditional mutual information, the inverse option model, exact entropy
//! gradients, and Monte Carlo harnesses for the sampled gradient estimators.
//!
//! Two conventions for P^o are supported. `ActFirst` (the default) matches
//! how agents execute options: an option always takes one action, then
//! termination is sampled at each arrival state. `Literal` evaluates the
//! recursion P^o(f|s) = β(s)1[f=s] + (1 − β(s)) Σ_x p^π(x|s) P^o(f|x)
//! as written, which lets an option stop where it started.
//! Terminal MDP states always have β = 1.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{build_test_mdp, sample_categorical, TabularMdp, TestMdpKind};
use crate::nn::primitives::logistic;

/// Smallest probability fed to a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn ln_floor(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    #[default]
    ActFirst,
    Literal,
}

/// Tabular option parameters: termination logits, intra-option policies and
/// a fixed policy over options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularOptionParams {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_options: usize,
    /// `[option][state]`
    pub logits: Vec<Vec<f64>>,
    /// `[option][state * n_actions + action]`
    pub policy: Vec<Vec<f64>>,
    /// `[state][option]`
    pub mu: Vec<Vec<f64>>,
}

impl TabularOptionParams {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        logits: Vec<Vec<f64>>,
        policy: Vec<Vec<f64>>,
        mu: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_options = logits.len();
        if n_options == 0 || policy.len() != n_options || mu.len() != n_states {
            return Err(Error::Shape("option parameter tables disagree on sizes".into()));
        }
        for o in 0..n_options {
            if logits[o].len() != n_states || policy[o].len() != n_states * n_actions {
                return Err(Error::Shape(format!("option {o} tables have the wrong length")));
            }
            for s in 0..n_states {
                let row = &policy[o][s * n_actions..(s + 1) * n_actions];
                if row.iter().any(|p| *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!("policy of option {o} at state {s} is not a distribution")));
                }
            }
        }
        for (s, row) in mu.iter().enumerate() {
            if row.len() != n_options || row.iter().any(|p| *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("μ at state {s} is not a distribution over options")));
            }
        }
        Ok(Self { n_states, n_actions, n_options, logits, policy, mu })
    }

    /// Random policies, uniform-ish μ and β(x) drawn in `beta_range`.
    pub fn random<R: Rng + ?Sized>(mdp: &TabularMdp, n_options: usize, beta_range: (f64, f64), rng: &mut R) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let (lo, hi) = (logit(beta_range.0), logit(beta_range.1));
        let logits = (0..n_options).map(|_| (0..ns).map(|_| rng.random_range(lo..hi)).collect()).collect();
        let mut simplex = |n: usize| {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let t: f64 = w.iter().sum();
            w.into_iter().map(|x| x / t).collect::<Vec<f64>>()
        };
        let policy = (0..n_options).map(|_| (0..ns).flat_map(|_| simplex(na)).collect()).collect();
        let mu = (0..ns).map(|_| simplex(n_options)).collect();
        Self { n_states: ns, n_actions: na, n_options, logits, policy, mu }
    }

    pub fn beta(&self, mdp: &TabularMdp, option: usize, state: usize) -> f64 {
        if mdp.is_terminal(state) {
            1.0
        } else {
            logistic(self.logits[option][state])
        }
    }

    pub fn betas(&self, mdp: &TabularMdp, option: usize) -> Vec<f64> {
        (0..self.n_states).map(|s| self.beta(mdp, option, s)).collect()
    }

    pub fn policy_row(&self, option: usize, state: usize) -> &[f64] {
        &self.policy[option][state * self.n_actions..(state + 1) * self.n_actions]
    }

    fn check_mdp(&self, mdp: &TabularMdp) -> Result<()> {
        if mdp.n_states() != self.n_states || mdp.n_actions() != self.n_actions {
            return Err(Error::Shape("option parameters do not match the MDP".into()));
        }
        Ok(())
    }
}

pub fn policy_kernel(mdp: &TabularMdp, params: &TabularOptionParams, option: usize) -> DMatrix<f64> {
    let n = mdp.n_states();
    DMatrix::from_row_slice(n, n, &mdp.policy_kernel(&params.policy[option]))
}

/// Literal-recursion matrix A^o(f|x): the terminating-state distribution
/// given that the option has just arrived at x (termination is checked at x
/// first). Solves (I − diag(1 − β) P^π) A = diag(β).
pub fn arrival_matrix(mdp: &TabularMdp, params: &TabularOptionParams, option: usize) -> Result<DMatrix<f64>> {
    params.check_mdp(mdp)?;
    let n = mdp.n_states();
    let beta = params.betas(mdp, option);
    let kernel = policy_kernel(mdp, params, option);
    check_terminates(&kernel, &beta, option)?;
    let mut system = DMatrix::identity(n, n);
    for s in 0..n {
        for x in 0..n {
            system[(s, x)] -= (1.0 - beta[s]) * kernel[(s, x)];
        }
    }
    let rhs = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(beta));
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonTerminating(format!("option {option}: singular continuation system")))?;
    for s in 0..n {
        let total: f64 = sol.row(s).sum();
        if !total.is_finite() || (total - 1.0).abs() > 1e-8 {
            return Err(Error::NonTerminating(format!(
                "option {option}: termination distribution from state {s} sums to {total}"
            )));
        }
    }
    Ok(sol.map(|v| v.max(0.0)))
}

/// Every state must reach, in zero or more policy steps, a state where β > 0.
fn check_terminates(kernel: &DMatrix<f64>, beta: &[f64], option: usize) -> Result<()> {
    let n = beta.len();
    let mut reaches: Vec<bool> = beta.iter().map(|b| *b > 0.0).collect();
    let mut stack: Vec<usize> = (0..n).filter(|s| reaches[*s]).collect();
    while let Some(t) = stack.pop() {
        for s in 0..n {
            if !reaches[s] && kernel[(s, t)] > 0.0 {
                reaches[s] = true;
                stack.push(s);
            }
        }
    }
    match reaches.iter().position(|r| !r) {
        Some(s) => Err(Error::NonTerminating(format!("option {option} never terminates from state {s}"))),
        None => Ok(()),
    }
}

/// P^o(x_f | x_s) under the chosen convention, as a row-stochastic matrix.
pub fn exact_option_transition(
    mdp: &TabularMdp,
    params: &TabularOptionParams,
    option: usize,
    convention: Convention,
) -> Result<DMatrix<f64>> {
    let arrival = arrival_matrix(mdp, params, option)?;
    Ok(match convention {
        Convention::Literal => arrival,
        Convention::ActFirst => policy_kernel(mdp, params, option) * arrival,
    })
}

/// ∂P^o(f|s)/∂ℓ^o(y) for every y, from the termination gradient theorem:
/// P^o(y|s) (1[f = y] − A^o(f|y)). Entry `y` of the result is the matrix
/// over (s, f).
pub fn theorem_gradient(
    mdp: &TabularMdp,
    params: &TabularOptionParams,
    option: usize,
    convention: Convention,
) -> Result<Vec<DMatrix<f64>>> {
    let arrival = arrival_matrix(mdp, params, option)?;
    let p = match convention {
        Convention::Literal => arrival.clone(),
        Convention::ActFirst => policy_kernel(mdp, params, option) * &arrival,
    };
    let n = mdp.n_states();
    Ok((0..n)
        .map(|y| {
            let mut d = DMatrix::zeros(n, n);
            if mdp.is_terminal(y) {
                return d;
            }
            for s in 0..n {
                for f in 0..n {
                    let ind = if f == y { 1.0 } else { 0.0 };
                    d[(s, f)] = p[(s, y)] * (ind - arrival[(y, f)]);
                }
            }
            d
        })
        .collect())
}

/// Max |theorem − central finite difference| over all (y, s, f).
pub fn check_termination_gradient_theorem(
    mdp: &TabularMdp,
    params: &TabularOptionParams,
    option: usize,
    convention: Convention,
) -> Result<f64> {
    let h = 1e-5;
    let analytic = theorem_gradient(mdp, params, option, convention)?;
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for (y, grad) in analytic.iter().enumerate() {
        let base = params.logits[option][y];
        p.logits[option][y] = base + h;
        let up = exact_option_transition(mdp, &p, option, convention)?;
        p.logits[option][y] = base - h;
        let dn = exact_option_transition(mdp, &p, option, convention)?;
        p.logits[option][y] = base;
        let fd = (up - dn) / (2.0 * h);
        worst = worst.max((fd - grad).abs().max());
    }
    Ok(worst)
}

/// Exact option-transition model under a fixed start distribution
/// d^μ(x_s, o) = d(x_s) μ(o|x_s).
#[derive(Clone, Debug)]
pub struct ExactOptionModel {
    pub convention: Convention,
    /// P^o per option.
    pub option_transition: Vec<DMatrix<f64>>,
    /// A^o per option.
    pub arrival: Vec<DMatrix<f64>>,
    /// P(x_f|x_s) = Σ_o μ(o|x_s) P^o(x_f|x_s).
    pub marginal: DMatrix<f64>,
    /// d(x_s).
    pub start: Vec<f64>,
    /// μ(o|x_s), `[state][option]`.
    pub mu: DMatrix<f64>,
}

impl ExactOptionModel {
    pub fn build(mdp: &TabularMdp, params: &TabularOptionParams, start: &[f64], convention: Convention) -> Result<Self> {
        params.check_mdp(mdp)?;
        let n = mdp.n_states();
        if start.len() != n || (start.iter().sum::<f64>() - 1.0).abs() > 1e-8 || start.iter().any(|d| *d < 0.0) {
            return Err(Error::Contract("start distribution must be a distribution over states".into()));
        }
        let mut arrival = Vec::with_capacity(params.n_options);
        let mut option_transition = Vec::with_capacity(params.n_options);
        for o in 0..params.n_options {
            let a = arrival_matrix(mdp, params, o)?;
            option_transition.push(match convention {
                Convention::Literal => a.clone(),
                Convention::ActFirst => policy_kernel(mdp, params, o) * &a,
            });
            arrival.push(a);
        }
        let mu = DMatrix::from_fn(n, params.n_options, |s, o| params.mu[s][o]);
        let mut marginal = DMatrix::zeros(n, n);
        for (o, p) in option_transition.iter().enumerate() {
            for s in 0..n {
                for f in 0..n {
                    marginal[(s, f)] += mu[(s, o)] * p[(s, f)];
                }
            }
        }
        Ok(Self { convention, option_transition, arrival, marginal, start: start.to_vec(), mu })
    }

    pub fn n_states(&self) -> usize {
        self.start.len()
    }

    pub fn n_options(&self) -> usize {
        self.option_transition.len()
    }

    pub fn start_weight(&self, state: usize, option: usize) -> f64 {
        self.start[state] * self.mu[(state, option)]
    }

    /// (H(X_f|X_s), H(X_f|X_s, O)) in nats.
    pub fn entropies(&self) -> (f64, f64) {
        let n = self.n_states();
        let xlogx = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
        let mut marginal = 0.0;
        let mut conditional = 0.0;
        for s in 0..n {
            if self.start[s] == 0.0 {
                continue;
            }
            marginal -= self.start[s] * (0..n).map(|f| xlogx(self.marginal[(s, f)])).sum::<f64>();
            for (o, p) in self.option_transition.iter().enumerate() {
                conditional -= self.start_weight(s, o) * (0..n).map(|f| xlogx(p[(s, f)])).sum::<f64>();
            }
        }
        (marginal, conditional)
    }
}

/// I(X_f; O | X_s) = H(X_f|X_s) − H(X_f|X_s, O).
pub fn exact_conditional_mi(model: &ExactOptionModel) -> f64 {
    let (marginal, conditional) = model.entropies();
    marginal - conditional
}

/// p(o | x_s, x_f), defined where P(x_f|x_s) > 0.
#[derive(Clone, Debug)]
pub struct InverseModel {
    /// Per option, over (x_s, x_f).
    pub table: Vec<DMatrix<f64>>,
    pub defined: DMatrix<bool>,
}

impl InverseModel {
    pub fn get(&self, option: usize, start: usize, end: usize) -> Option<f64> {
        self.defined[(start, end)].then(|| self.table[option][(start, end)])
    }
}

pub fn exact_inverse_model(model: &ExactOptionModel) -> InverseModel {
    let n = model.n_states();
    let defined = model.marginal.map(|p| p > 0.0);
    let table = (0..model.n_options())
        .map(|o| {
            DMatrix::from_fn(n, n, |s, f| {
                let total = model.marginal[(s, f)];
                if total > 0.0 {
                    model.mu[(s, o)] * model.option_transition[o][(s, f)] / total
                } else {
                    0.0
                }
            })
        })
        .collect();
    InverseModel { table, defined }
}

/// Exact ∂H/∂ℓ^o(y) with d^μ held fixed, `[option][state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyGradients {
    /// ∇ H(X_f|X_s)
    pub marginal: Vec<Vec<f64>>,
    /// ∇ H(X_f|X_s, O)
    pub conditional: Vec<Vec<f64>>,
}

impl EntropyGradients {
    /// ∇ I(X_f; O | X_s)
    pub fn mi(&self) -> Vec<Vec<f64>> {
        self.marginal
            .iter()
            .zip(&self.conditional)
            .map(|(m, c)| m.iter().zip(c).map(|(a, b)| a - b).collect())
            .collect()
    }
}

/// Evaluates −Σ_{x_s,o} d^μ(x_s,o) Σ_x P^o(x|x_s) ∂ℓ(x) [L(x_s,x) − Σ_f A^o(f|x) L(x_s,f)]
/// with L = log P (marginal) and L = log P^o (conditional); 0·log 0 = 0.
pub fn exact_entropy_gradients(mdp: &TabularMdp, model: &ExactOptionModel) -> EntropyGradients {
    let n = model.n_states();
    let safe_log = |m: &DMatrix<f64>| m.map(|p| if p > 0.0 { p.ln() } else { 0.0 });
    let log_marginal = safe_log(&model.marginal);
    let mut marginal = Vec::with_capacity(model.n_options());
    let mut conditional = Vec::with_capacity(model.n_options());
    for o in 0..model.n_options() {
        let p = &model.option_transition[o];
        let a = &model.arrival[o];
        let one = |logs: &DMatrix<f64>| -> Vec<f64> {
            let k = logs - logs * a.transpose();
            (0..n)
                .map(|y| {
                    if mdp.is_terminal(y) {
                        return 0.0;
                    }
                    -(0..n).map(|s| model.start_weight(s, o) * p[(s, y)] * k[(s, y)]).sum::<f64>()
                })
                .collect()
        };
        marginal.push(one(&log_marginal));
        conditional.push(one(&safe_log(p)));
    }
    EntropyGradients { marginal, conditional }
}

/// (H(X_f|X_s), H(X_f|X_s,O)) for the given parameters and a fixed start
/// distribution.
pub fn entropies(mdp: &TabularMdp, params: &TabularOptionParams, start: &[f64], convention: Convention) -> Result<(f64, f64)> {
    Ok(ExactOptionModel::build(mdp, params, start, convention)?.entropies())
}

/// Central finite differences of both entropies in every logit.
pub fn finite_difference_entropy_gradients(
    mdp: &TabularMdp,
    params: &TabularOptionParams,
    start: &[f64],
    convention: Convention,
    h: f64,
) -> Result<EntropyGradients> {
    let mut p = params.clone();
    let mut marginal = vec![vec![0.0; params.n_states]; params.n_options];
    let mut conditional = marginal.clone();
    for o in 0..params.n_options {
        for y in 0..params.n_states {
            let base = params.logits[o][y];
            p.logits[o][y] = base + h;
            let up = entropies(mdp, &p, start, convention)?;
            p.logits[o][y] = base - h;
            let dn = entropies(mdp, &p, start, convention)?;
            p.logits[o][y] = base;
            marginal[o][y] = (up.0 - dn.0) / (2.0 * h);
            conditional[o][y] = (up.1 - dn.1) / (2.0 * h);
        }
    }
    Ok(EntropyGradients { marginal, conditional })
}

/// One simulated option execution (act-first): the arrival states x_1..x_k,
/// where x_k is the terminating state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub option: usize,
    pub arrivals: Vec<usize>,
}

impl Segment {
    pub fn end(&self) -> usize {
        *self.arrivals.last().expect("segment has at least one arrival")
    }
}

const MAX_SEGMENT_STEPS: usize = 1_000_000;

pub fn simulate_option<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    params: &TabularOptionParams,
    option: usize,
    start: usize,
    rng: &mut R,
) -> Result<Segment> {
    let mut arrivals = Vec::new();
    let mut x = start;
    loop {
        let a = sample_categorical(params.policy_row(option, x), rng);
        x = mdp.sample_next(rng, x, a);
        arrivals.push(x);
        if rng.random::<f64>() < params.beta(mdp, option, x) {
            return Ok(Segment { start, option, arrivals });
        }
        if arrivals.len() >= MAX_SEGMENT_STEPS {
            return Err(Error::NonTerminating(format!("option {option} ran {MAX_SEGMENT_STEPS} steps from {start}")));
        }
    }
}

/// Draws (x_s, o) from d(x_s) μ(o|x_s) and simulates the option.
pub fn sample_segment<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    params: &TabularOptionParams,
    start: &[f64],
    rng: &mut R,
) -> Result<Segment> {
    let s = sample_categorical(start, rng);
    let o = sample_categorical(&params.mu[s], rng);
    simulate_option(mdp, params, o, s, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Per-trajectory estimate of ∇H(X_f|X_s) from the true P.
    MarginalEntropy,
    /// Per-trajectory estimate of ∇H(X_f|X_s, O) from the true P^o.
    ConditionalEntropy,
    /// Per-trajectory estimate of ∇I(X_f; O|X_s) from the true p(o|x_s, x_f).
    InverseModel,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::MarginalEntropy, Estimator::ConditionalEntropy, Estimator::InverseModel];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::MarginalEntropy => "marginal_entropy",
            Estimator::ConditionalEntropy => "conditional_entropy",
            Estimator::InverseModel => "inverse_model",
        }
    }
}

/// Sample mean and standard error per (option, state) logit coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<Vec<f64>>,
    pub std_err: Vec<Vec<f64>>,
    pub n: usize,
}

struct Accumulator {
    n_states: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    current: Vec<f64>,
    touched: Vec<usize>,
}

impl Accumulator {
    fn new(n_options: usize, n_states: usize) -> Self {
        let len = n_options * n_states;
        Self { n_states, sum: vec![0.0; len], sum_sq: vec![0.0; len], current: vec![0.0; len], touched: Vec::new() }
    }

    fn add(&mut self, option: usize, state: usize, value: f64) {
        let i = option * self.n_states + state;
        if self.current[i] == 0.0 {
            self.touched.push(i);
        }
        self.current[i] += value;
    }

    fn finish_sample(&mut self) {
        for &i in &self.touched {
            let v = self.current[i];
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
            self.current[i] = 0.0;
        }
        self.touched.clear();
    }

    fn estimate(&self, n: usize) -> McEstimate {
        let nf = n as f64;
        let mut mean = Vec::new();
        let mut std_err = Vec::new();
        for chunk in 0..self.sum.len() / self.n_states {
            let range = chunk * self.n_states..(chunk + 1) * self.n_states;
            let m: Vec<f64> = self.sum[range.clone()].iter().map(|s| s / nf).collect();
            let se = self.sum_sq[range]
                .iter()
                .zip(&m)
                .map(|(sq, mu)| {
                    let var = (sq / nf - mu * mu).max(0.0) * nf / (nf - 1.0).max(1.0);
                    (var / nf).sqrt()
                })
                .collect();
            mean.push(m);
            std_err.push(se);
        }
        McEstimate { mean, std_err, n }
    }
}

/// Per-arrival coefficient of ∂ℓ^o(x) in the bracketed per-trajectory term.
fn coefficient(model: &ExactOptionModel, inverse: &InverseModel, est: Estimator, seg: &Segment, x: usize) -> f64 {
    let (s, o, f) = (seg.start, seg.option, seg.end());
    match est {
        Estimator::MarginalEntropy => -(ln_floor(model.marginal[(s, x)]) - ln_floor(model.marginal[(s, f)])),
        Estimator::ConditionalEntropy => {
            let p = &model.option_transition[o];
            -(ln_floor(p[(s, x)]) - ln_floor(p[(s, f)]))
        }
        Estimator::InverseModel => ln_floor(inverse.table[o][(s, x)]) - ln_floor(inverse.table[o][(s, f)]),
    }
}

/// How segment starts (x_s, o) are drawn from d^μ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// n independent draws.
    #[default]
    Iid,
    /// round(n·d^μ(x_s, o)) executions from each start pair (at least two),
    /// recombined with weights d^μ(x_s, o).
    Stratified,
}

/// Averages the per-trajectory terms of each estimator over `n` segments
/// started from d^μ. All estimators share the same segments.
pub fn mc_gradient_estimates<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    params: &TabularOptionParams,
    model: &ExactOptionModel,
    estimators: &[Estimator],
    n: usize,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Vec<McEstimate>> {
    if model.convention != Convention::ActFirst {
        return Err(Error::Unsupported("sampled estimators simulate the act-first convention".into()));
    }
    if n < 2 {
        return Err(Error::Usage("need at least two samples".into()));
    }
    let inverse = exact_inverse_model(model);
    let new_accs = || -> Vec<Accumulator> {
        estimators.iter().map(|_| Accumulator::new(params.n_options, params.n_states)).collect()
    };
    let run = |seg: &Segment, accs: &mut [Accumulator]| {
        // the terminating arrival contributes zero
        for &x in &seg.arrivals[..seg.arrivals.len() - 1] {
            if mdp.is_terminal(x) {
                continue;
            }
            let beta = params.beta(mdp, seg.option, x);
            for (acc, est) in accs.iter_mut().zip(estimators) {
                acc.add(seg.option, x, beta * coefficient(model, &inverse, *est, seg, x));
            }
        }
        accs.iter_mut().for_each(Accumulator::finish_sample);
    };
    match sampling {
        Sampling::Iid => {
            let mut accs = new_accs();
            for _ in 0..n {
                let seg = sample_segment(mdp, params, &model.start, rng)?;
                run(&seg, &mut accs);
            }
            Ok(accs.iter().map(|a| a.estimate(n)).collect())
        }
        Sampling::Stratified => {
            let mut out: Vec<McEstimate> = estimators
                .iter()
                .map(|_| McEstimate {
                    mean: vec![vec![0.0; params.n_states]; params.n_options],
                    std_err: vec![vec![0.0; params.n_states]; params.n_options],
                    n: 0,
                })
                .collect();
            for s in 0..model.n_states() {
                for o in 0..model.n_options() {
                    let w = model.start_weight(s, o);
                    if w == 0.0 {
                        continue;
                    }
                    let count = ((n as f64 * w).round() as usize).max(2);
                    let mut accs = new_accs();
                    for _ in 0..count {
                        let seg = simulate_option(mdp, params, o, s, rng)?;
                        run(&seg, &mut accs);
                    }
                    for (est, acc) in out.iter_mut().zip(&accs) {
                        let part = acc.estimate(count);
                        est.n += count;
                        for k in 0..params.n_options {
                            for y in 0..params.n_states {
                                est.mean[k][y] += w * part.mean[k][y];
                                // accumulate variances, square-rooted below
                                est.std_err[k][y] += (w * part.std_err[k][y]).powi(2);
                            }
                        }
                    }
                }
            }
            for est in &mut out {
                est.std_err.iter_mut().flatten().for_each(|v| *v = v.sqrt());
            }
            Ok(out)
        }
    }
}

pub fn mc_gradient_estimate<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    params: &TabularOptionParams,
    model: &ExactOptionModel,
    estimator: Estimator,
    n: usize,
    sampling: Sampling,
    rng: &mut R,
) -> Result<McEstimate> {
    Ok(mc_gradient_estimates(mdp, params, model, &[estimator], n, sampling, rng)?.remove(0))
}

/// Option-start state frequencies of call-and-return execution with μ
/// choosing options; episodes restart from the initial distribution when a
/// terminal state is reached.
pub fn estimate_start_distribution<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    params: &TabularOptionParams,
    n_starts: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; mdp.n_states()];
    let mut x = mdp.sample_initial(rng);
    for _ in 0..n_starts {
        counts[x] += 1.0;
        let o = sample_categorical(&params.mu[x], rng);
        let seg = simulate_option(mdp, params, o, x, rng)?;
        x = seg.end();
        if mdp.is_terminal(x) {
            x = mdp.sample_initial(rng);
        }
    }
    let total: f64 = counts.iter().sum();
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Plug-in estimate of I(X_f; O | X_s) from sampled (x_s, o, x_f) triples.
pub fn plugin_conditional_mi(triples: &[(usize, usize, usize)], n_states: usize, n_options: usize) -> f64 {
    let n = triples.len() as f64;
    let mut c_sof = vec![0.0; n_states * n_options * n_states];
    let mut c_so = vec![0.0; n_states * n_options];
    let mut c_sf = vec![0.0; n_states * n_states];
    let mut c_s = vec![0.0; n_states];
    for &(s, o, f) in triples {
        c_sof[(s * n_options + o) * n_states + f] += 1.0;
        c_so[s * n_options + o] += 1.0;
        c_sf[s * n_states + f] += 1.0;
        c_s[s] += 1.0;
    }
    let mut mi = 0.0;
    for s in 0..n_states {
        for o in 0..n_options {
            for f in 0..n_states {
                let c = c_sof[(s * n_options + o) * n_states + f];
                if c > 0.0 {
                    mi += c / n * (c * c_s[s] / (c_so[s * n_options + o] * c_sf[s * n_states + f])).ln();
                }
            }
        }
    }
    mi
}

/// A random tabular problem for oracle checks.
#[derive(Clone, Debug)]
pub struct OracleInstance {
    pub mdp: TabularMdp,
    pub params: TabularOptionParams,
    pub start: Vec<f64>,
}

impl OracleInstance {
    /// Dense random two-action MDP, random policies and μ, β ∈ (0.2, 0.8),
    /// random start distribution.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_options: usize, rng: &mut R) -> Result<Self> {
        let mdp = build_test_mdp(TestMdpKind::Random, n_states, rng)?;
        let params = TabularOptionParams::random(&mdp, n_options, (0.2, 0.8), rng);
        let w: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.1..1.0)).collect();
        let t: f64 = w.iter().sum();
        let start = w.into_iter().map(|x| x / t).collect();
        Ok(Self { mdp, params, start })
    }

    /// Noisy n-state ring (actions: clockwise, counter-clockwise; the other
    /// direction happens with probability `slip`) with two options that
    /// mostly circle in opposite directions and terminate at different
    /// states. Uniform start distribution and μ.
    pub fn ring(n_states: usize, slip: f64) -> Result<Self> {
        let n = n_states;
        if n < 3 {
            return Err(Error::Usage("ring needs at least three states".into()));
        }
        let mut transition = vec![0.0; n * 2 * n];
        for s in 0..n {
            let (cw, ccw) = ((s + 1) % n, (s + n - 1) % n);
            transition[(s * 2) * n + cw] += 1.0 - slip;
            transition[(s * 2) * n + ccw] += slip;
            transition[(s * 2 + 1) * n + ccw] += 1.0 - slip;
            transition[(s * 2 + 1) * n + cw] += slip;
        }
        let mdp = TabularMdp::new(n, 2, transition, vec![0.0; n * 2 * n], 0.99, vec![false; n], vec![1.0 / n as f64; n])?;
        let pattern = [[0.3, 0.6, 0.45, 0.7], [0.65, 0.35, 0.55, 0.4]];
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let logits = pattern.iter().map(|b| (0..n).map(|s| logit(b[s % 4])).collect()).collect();
        let policy = vec![
            (0..n).flat_map(|_| [0.85, 0.15]).collect(),
            (0..n).flat_map(|_| [0.2, 0.8]).collect(),
        ];
        let params = TabularOptionParams::new(n, 2, logits, policy, vec![vec![0.5, 0.5]; n])?;
        Ok(Self { mdp, params, start: vec![1.0 / n as f64; n] })
    }

    pub fn model(&self, convention: Convention) -> Result<ExactOptionModel> {
        ExactOptionModel::build(&self.mdp, &self.params, &self.start, convention)
    }
}
