//! The oracle verification suite: every gradient identity and estimator
//! checked against exact tabular computation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::infomax::{termination_loss, TerminationConfig, TerminationSegment};
use crate::mdp::{build_test_mdp, TestMdpKind};
use crate::oracle::{
    check_termination_gradient_theorem, exact_conditional_mi, exact_entropy_gradients, exact_inverse_model,
    finite_difference_entropy_gradients, ln_floor, mc_gradient_estimates, sample_segment, Convention, Estimator,
    ExactOptionModel, OracleInstance, Sampling, TabularOptionParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, measured: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.to_string(), passed, measured, threshold, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: measured {:.6e} (threshold {:.3e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.detail
        )
    }
}

/// Random instances with 4–6 states and 2–3 options.
pub fn random_instances(count: usize, seed: u64) -> Result<Vec<OracleInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(4..=6);
            let k = rng.random_range(2..=3);
            OracleInstance::random(n, k, &mut rng)
        })
        .collect()
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;

/// Termination gradient theorem against central finite differences, both
/// conventions, every option.
pub fn check_theorem(instances: &[OracleInstance]) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for inst in instances {
        for conv in [Convention::ActFirst, Convention::Literal] {
            for o in 0..inst.params.n_options {
                worst = worst.max(check_termination_gradient_theorem(&inst.mdp, &inst.params, o, conv)?);
            }
        }
    }
    Ok(CheckResult::new(
        "termination_gradient_theorem",
        worst <= GRADIENT_TOLERANCE,
        worst,
        GRADIENT_TOLERANCE,
        format!("max |analytic - fd| over {} instances", instances.len()),
    ))
}

/// Exact entropy gradients against finite differences of the exact
/// entropies with d^μ frozen.
pub fn check_entropy_gradients(instances: &[OracleInstance]) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for inst in instances {
        for conv in [Convention::ActFirst, Convention::Literal] {
            let model = inst.model(conv)?;
            let exact = exact_entropy_gradients(&inst.mdp, &model);
            let fd = finite_difference_entropy_gradients(&inst.mdp, &inst.params, &inst.start, conv, 1e-5)?;
            for (a, b) in [(&exact.marginal, &fd.marginal), (&exact.conditional, &fd.conditional)] {
                for (ra, rb) in a.iter().zip(b) {
                    for (x, y) in ra.iter().zip(rb) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
    }
    Ok(CheckResult::new(
        "exact_entropy_gradients",
        worst <= GRADIENT_TOLERANCE,
        worst,
        GRADIENT_TOLERANCE,
        format!("max |exact - fd| over {} instances", instances.len()),
    ))
}

pub const RELATIVE_TOLERANCE: f64 = 0.05;

/// Worst relative error of the sampled ∇I estimates (the inverse-model estimator
/// and the entropy difference) on `inst` over coordinates with
/// |exact| ≥ 1e-6.
pub fn check_unbiased(inst: &OracleInstance, n: usize, seed: u64) -> Result<CheckResult> {
    let model = inst.model(Convention::ActFirst)?;
    let exact = exact_entropy_gradients(&inst.mdp, &model).mi();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = mc_gradient_estimates(&inst.mdp, &inst.params, &model, &Estimator::ALL, n, Sampling::Stratified, &mut rng)?;
    let mut worst: f64 = 0.0;
    let mut worst_z: f64 = 0.0;
    let mut coords = 0;
    for (o, row) in exact.iter().enumerate() {
        for (y, g) in row.iter().enumerate() {
            if g.abs() < 1e-6 {
                continue;
            }
            coords += 1;
            let diff = est[0].mean[o][y] - est[1].mean[o][y];
            for m in [est[2].mean[o][y], diff] {
                worst = worst.max((m - g).abs() / g.abs());
            }
            worst_z = worst_z.max(est[2].std_err[o][y] / g.abs());
        }
    }
    Ok(CheckResult::new(
        "estimator_unbiasedness",
        worst <= RELATIVE_TOLERANCE,
        worst,
        RELATIVE_TOLERANCE,
        format!("worst relative error over {coords} coordinates at n = {n}; worst se/|exact| {worst_z:.4}"),
    ))
}

/// RMS error of the inverse-model estimate over all coordinates of all instances.
pub fn rms_error(instances: &[OracleInstance], n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sq, mut count) = (0.0, 0usize);
    for inst in instances {
        let model = inst.model(Convention::ActFirst)?;
        let exact = exact_entropy_gradients(&inst.mdp, &model).mi();
        let est = mc_gradient_estimates(&inst.mdp, &inst.params, &model, &[Estimator::InverseModel], n, Sampling::Iid, &mut rng)?;
        for (re, rm) in exact.iter().zip(&est[0].mean) {
            for (g, m) in re.iter().zip(rm) {
                sq += (m - g).powi(2);
                count += 1;
            }
        }
    }
    Ok((sq / count as f64).sqrt())
}

/// Least-squares slope of log error against log n.
pub fn log_log_slope(ns: &[usize], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|n| (*n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

pub const SLOPE_TARGET: f64 = -0.5;
pub const SLOPE_TOLERANCE: f64 = 0.1;

pub fn check_error_scaling(instances: &[OracleInstance], ns: &[usize], seed: u64) -> Result<CheckResult> {
    let errors = ns.iter().map(|n| rms_error(instances, *n, seed ^ *n as u64)).collect::<Result<Vec<_>>>()?;
    let slope = log_log_slope(ns, &errors);
    Ok(CheckResult::new(
        "estimator_error_scaling",
        (slope - SLOPE_TARGET).abs() <= SLOPE_TOLERANCE,
        slope,
        SLOPE_TOLERANCE,
        format!("log-log slope of RMS error over n = {ns:?} (errors {errors:?}), target -0.5"),
    ))
}

/// The entropy-difference estimator against the inverse-model estimator on shared
/// samples, within 2 pooled standard errors per coordinate. The detail
/// also reports agreement when the two use independent samples.
pub fn check_identity(instances: &[OracleInstance], n: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let (mut independent_ok, mut coords) = (0usize, 0usize);
    for inst in instances {
        let model = inst.model(Convention::ActFirst)?;
        let shared = mc_gradient_estimates(&inst.mdp, &inst.params, &model, &Estimator::ALL, n, Sampling::Iid, &mut rng)?;
        let other = mc_gradient_estimates(&inst.mdp, &inst.params, &model, &[Estimator::InverseModel], n, Sampling::Iid, &mut rng)?;
        for o in 0..inst.params.n_options {
            for y in 0..inst.params.n_states {
                let diff = shared[0].mean[o][y] - shared[1].mean[o][y];
                let se = shared[2].std_err[o][y];
                let pooled = (2.0 * se * se).sqrt();
                let gap = (diff - shared[2].mean[o][y]).abs();
                if pooled > 0.0 {
                    worst = worst.max(gap / pooled);
                } else if gap > 1e-12 {
                    worst = f64::INFINITY;
                }
                coords += 1;
                let pooled_ind = (se * se + other[0].std_err[o][y].powi(2)).sqrt();
                if (diff - other[0].mean[o][y]).abs() <= 2.0 * pooled_ind + 1e-12 {
                    independent_ok += 1;
                }
            }
        }
    }
    Ok(CheckResult::new(
        "entropy_difference_matches_inverse_model",
        worst <= 2.0,
        worst,
        2.0,
        format!(
            "max gap in pooled standard errors on shared samples; independent samples agree within 2 se on {independent_ok}/{coords} coordinates"
        ),
    ))
}

/// Settings of the MI-ascent experiment on the 10-state chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub n_states: usize,
    pub steps: usize,
    pub segments_per_step: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    /// Probability that option 0 moves right and option 1 moves left.
    pub policy_bias: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self { n_states: 10, steps: 200, segments_per_step: 1000, learning_rate: 3.0, entropy_coef: 0.01, policy_bias: 0.9 }
    }
}

/// Plain gradient descent on the termination loss of two options that
/// start with identical termination logits (all zero), with the exact
/// inverse model supplying p̂. Returns the exact I(X_f; O | X_s) before
/// every step and after the last.
pub fn mi_ascent(cfg: &AscentConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_states;
    let mdp = build_test_mdp(TestMdpKind::Chain, n, &mut rng)?;
    let (p, q) = (cfg.policy_bias, 1.0 - cfg.policy_bias);
    let policy = vec![(0..n).flat_map(|_| [q, p]).collect(), (0..n).flat_map(|_| [p, q]).collect()];
    let mut params = TabularOptionParams::new(n, 2, vec![vec![0.0; n]; 2], policy, vec![vec![0.5, 0.5]; n])?;
    let start = vec![1.0 / n as f64; n];
    let term = TerminationConfig { entropy_coef: cfg.entropy_coef, beta_factor: true };
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let model = ExactOptionModel::build(&mdp, &params, &start, Convention::ActFirst)?;
        curve.push(exact_conditional_mi(&model));
        let inverse = exact_inverse_model(&model);
        let mut grad = vec![vec![0.0; n]; 2];
        for _ in 0..cfg.segments_per_step {
            let seg = sample_segment(&mdp, &params, &start, &mut rng)?;
            let ts = TerminationSegment { start: seg.start, option: seg.option, arrivals: seg.arrivals, forced_end: false };
            let logits: Vec<f64> = ts.arrivals.iter().map(|x| params.logits[ts.option][*x]).collect();
            let log_p: Vec<f64> = ts.arrivals.iter().map(|x| ln_floor(inverse.table[ts.option][(ts.start, *x)])).collect();
            let (_, d) = termination_loss(&ts, &logits, &log_p, &term)?;
            for (x, g) in ts.arrivals.iter().zip(d) {
                grad[ts.option][*x] += g / cfg.segments_per_step as f64;
            }
        }
        for (row, g) in params.logits.iter_mut().zip(&grad) {
            for (l, d) in row.iter_mut().zip(g) {
                *l -= cfg.learning_rate * d;
            }
        }
    }
    curve.push(exact_conditional_mi(&ExactOptionModel::build(&mdp, &params, &start, Convention::ActFirst)?));
    Ok(curve)
}

/// Trailing moving average over `window` points (shorter at the start).
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub fn check_mi_ascent(cfg: &AscentConfig, seed: u64) -> Result<CheckResult> {
    let curve = mi_ascent(cfg, seed)?;
    let smoothed = smooth(&curve, 5);
    let drops = smoothed.windows(2).filter(|w| w[1] < w[0]).count();
    let target = 0.5 * 2f64.ln();
    let last = *curve.last().expect("curve has points");
    Ok(CheckResult::new(
        "mi_ascent",
        drops == 0 && last >= target,
        last,
        target,
        format!("I from {:.4} to {last:.4} in {} steps; smoothed decreases: {drops}", curve[0], cfg.steps),
    ))
}

/// Sizes of a suite run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub instances: usize,
    pub identity_instances: usize,
    pub seed: u64,
    pub unbiased_n: usize,
    pub scaling_ns: Vec<usize>,
    pub identity_n: usize,
    pub ascent: AscentConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 30,
            identity_instances: 10,
            seed: 0,
            unbiased_n: 100_000,
            scaling_ns: vec![1_000, 10_000, 100_000],
            identity_n: 100_000,
            ascent: AscentConfig::default(),
        }
    }
}

/// The structured instance used for the per-coordinate relative-error
/// check: a 4-state noisy ring, the ring size and slip with the lowest
/// standard error relative to the exact gradient.
pub fn unbiasedness_fixture() -> Result<OracleInstance> {
    OracleInstance::ring(4, 0.2)
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckResult>> {
    let instances = random_instances(cfg.instances, cfg.seed)?;
    let identity: Vec<OracleInstance> = random_instances(cfg.identity_instances, cfg.seed.wrapping_add(1))?;
    Ok(vec![
        check_theorem(&instances)?,
        check_entropy_gradients(&instances)?,
        check_unbiased(&unbiasedness_fixture()?, cfg.unbiased_n, cfg.seed)?,
        check_error_scaling(&instances, &cfg.scaling_ns, cfg.seed)?,
        check_identity(&identity, cfg.identity_n, cfg.seed)?,
        check_mi_ascent(&cfg.ascent, cfg.seed)?,
    ])
}
