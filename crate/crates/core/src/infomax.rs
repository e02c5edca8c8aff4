//! Infomax termination machinery: the option-transition replay buffer, the
//! classifiers p̂(o|x_s, x_f) and μ̂(o|x_s), and the termination loss that
//! ascends I(X_f; O | X_s).

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::primitives::{bernoulli_entropy, logistic, softmax_cross_entropy};
use crate::nn::{accumulate_gradient, apply_gradients, Batch, GradBuffer, Loss, Network, OptimizerState, OutputGrads, Outputs, Params};
use crate::options::OptionTransition;

/// Bounded buffer of the most recent option transitions; the oldest record is
/// evicted when full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionTransitionBuffer {
    capacity: usize,
    items: VecDeque<OptionTransition>,
}

impl OptionTransitionBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, transition: OptionTransition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(transition);
    }

    pub fn iter(&self) -> impl Iterator<Item = &OptionTransition> {
        self.items.iter()
    }

    /// min(batch_size, len) distinct records drawn uniformly without
    /// replacement; `None` when the buffer is empty.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Option<Vec<OptionTransition>> {
        if self.items.is_empty() {
            return None;
        }
        let k = batch_size.min(self.items.len());
        let idx = rand::seq::index::sample(rng, self.items.len(), k);
        Some(idx.iter().map(|i| self.items[i]).collect())
    }
}

/// Mean cross-entropy of o given (x_s, x_f) under p̂ plus that of o given x_s
/// under μ̂. Touches only the inverse and μ̂ heads.
pub struct ClassifierLoss<'a> {
    pub transitions: &'a [OptionTransition],
}

impl ClassifierLoss<'_> {
    pub fn batch(&self) -> Batch {
        Batch {
            states: self.transitions.iter().map(|t| t.start).collect(),
            pairs: self.transitions.iter().map(|t| (t.start, t.end)).collect(),
        }
    }

    fn parts(&self, out: &Outputs) -> Result<(f64, f64, OutputGrads)> {
        let heads = out.heads.as_ref().ok_or_else(|| Error::Contract("classifier loss needs head outputs".into()))?;
        let inv = out.inverse.as_ref().ok_or_else(|| Error::Contract("classifier loss needs pair outputs".into()))?;
        let n = self.transitions.len() as f64;
        let mut d_inv = Array2::zeros(inv.logits.dim());
        let mut d_mu = Array2::zeros(heads.mu_logits.dim());
        let (mut lp, mut lm) = (0.0, 0.0);
        for (i, t) in self.transitions.iter().enumerate() {
            let (ce, g) = softmax_cross_entropy(inv.row(i), t.option);
            lp += ce / n;
            for (k, v) in g.iter().enumerate() {
                d_inv[[i, k]] = v / n;
            }
            let (ce, g) = softmax_cross_entropy(heads.mu_row(i), t.option);
            lm += ce / n;
            for (k, v) in g.iter().enumerate() {
                d_mu[[i, k]] = v / n;
            }
        }
        Ok((lp, lm, OutputGrads { inverse: Some(d_inv), mu: Some(d_mu), ..Default::default() }))
    }

    pub fn losses(&self, out: &Outputs) -> Result<(f64, f64)> {
        let (lp, lm, _) = self.parts(out)?;
        Ok((lp, lm))
    }
}

impl Loss for ClassifierLoss<'_> {
    fn name(&self) -> &str {
        "classifier"
    }

    fn evaluate(&self, out: &Outputs) -> Result<(f64, OutputGrads)> {
        let (lp, lm, g) = self.parts(out)?;
        Ok((lp + lm, g))
    }
}

/// One gradient step on both classifiers. Returns (loss_p, loss_μ) measured
/// before the step.
pub fn fit_models(
    net: &Network,
    params: &mut Params,
    optimizer: &mut OptimizerState,
    transitions: &[OptionTransition],
    max_grad_norm: Option<f64>,
) -> Result<(f64, f64)> {
    if transitions.is_empty() {
        return Err(Error::Contract("classifier batch is empty".into()));
    }
    let loss = ClassifierLoss { transitions };
    let batch = loss.batch();
    let out = net.outputs(params, &batch)?;
    let (lp, lm) = loss.losses(&out)?;
    if !lp.is_finite() || !lm.is_finite() {
        return Err(Error::NonFinite("classifier loss".into()));
    }
    let mut buf = GradBuffer::zeros_like(params);
    accumulate_gradient(net, params, &loss, &batch, &mut buf)?;
    apply_gradients(params, &mut buf, optimizer, max_grad_norm)?;
    Ok((lp, lm))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminationConfig {
    /// Weight of the β-entropy bonus.
    pub entropy_coef: f64,
    /// Multiply each coefficient by stop-gradient β(x). Disabling it gives the
    /// form in which the factor is dropped.
    pub beta_factor: bool,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        Self { entropy_coef: 0.01, beta_factor: true }
    }
}

/// A completed option execution as seen by the termination loss: arrival
/// states x_1..x_k, the last being the terminating state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationSegment {
    pub start: usize,
    pub option: usize,
    pub arrivals: Vec<usize>,
    /// The segment ended because the episode ended, not by a β draw; the
    /// final arrival then carries no term.
    pub forced_end: bool,
}

impl TerminationSegment {
    pub fn end(&self) -> usize {
        *self.arrivals.last().expect("segment has an end")
    }

    /// Arrivals that receive a termination-loss term.
    pub fn scored(&self) -> &[usize] {
        let k = self.arrivals.len();
        if self.forced_end {
            &self.arrivals[..k - 1]
        } else {
            &self.arrivals
        }
    }
}

/// Loss for one segment and its derivative in each scored arrival's logit.
///
/// `logits[j]` is ℓ^o(x_j) and `log_p[j]` is log p̂(o | x_s, x_j) for every
/// arrival; the last entry of `log_p` is the terminating state's. The loss is
/// −Σ_j [ℓ(x_j) · sg(β(x_j)) · (log p̂(o|x_s,x_j) − log p̂(o|x_s,x_f)) + c · H(β(x_j))],
/// so descending it ascends the infomax objective plus the entropy bonus.
pub fn termination_loss(
    segment: &TerminationSegment,
    logits: &[f64],
    log_p: &[f64],
    config: &TerminationConfig,
) -> Result<(f64, Vec<f64>)> {
    let k = segment.arrivals.len();
    if k == 0 {
        return Err(Error::Contract("option segment has no terminating state".into()));
    }
    if logits.len() != k || log_p.len() != k {
        return Err(Error::Shape(format!("segment has {k} arrivals but {} logits / {} log-probs", logits.len(), log_p.len())));
    }
    let end = log_p[k - 1];
    let scored = segment.scored().len();
    let mut loss = 0.0;
    let mut grads = vec![0.0; k];
    for j in 0..scored {
        let beta = logistic(logits[j]);
        let coef = (if config.beta_factor { beta } else { 1.0 }) * (log_p[j] - end);
        let (h, dh) = bernoulli_entropy(logits[j]);
        loss -= logits[j] * coef + config.entropy_coef * h;
        grads[j] = -coef - config.entropy_coef * dh;
    }
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("termination loss".into()));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(i: usize) -> OptionTransition {
        OptionTransition { start: i, end: i + 1, option: i % 4 }
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut b = OptionTransitionBuffer::new(480);
        b.push(tr(0));
        assert_eq!(b.len(), 1);
        for i in 1..481 {
            b.push(tr(i));
        }
        assert_eq!(b.len(), 480);
        assert!(b.iter().all(|t| t.start != 0));
    }

    #[test]
    fn sampling_is_without_replacement_and_clamped() {
        let mut b = OptionTransitionBuffer::new(480);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample_batch(10, &mut rng).is_none());
        for i in 0..480 {
            b.push(tr(i));
        }
        let batch = b.sample_batch(240, &mut rng).unwrap();
        let mut starts: Vec<_> = batch.iter().map(|t| t.start).collect();
        starts.sort();
        starts.dedup();
        assert_eq!(starts.len(), 240);
        let mut small = OptionTransitionBuffer::new(480);
        small.push(tr(3));
        assert_eq!(small.sample_batch(240, &mut rng).unwrap().len(), 1);
    }

    #[test]
    fn equal_log_probs_give_zero_infomax_gradient() {
        let seg = TerminationSegment { start: 0, option: 1, arrivals: vec![3, 4, 5], forced_end: false };
        let cfg = TerminationConfig { entropy_coef: 0.0, beta_factor: true };
        let (_, g) = termination_loss(&seg, &[0.3, -1.0, 2.0], &[-0.7; 3], &cfg).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn entropy_bonus_is_stationary_at_one_half() {
        let seg = TerminationSegment { start: 0, option: 0, arrivals: vec![1, 2], forced_end: false };
        let cfg = TerminationConfig { entropy_coef: 0.5, beta_factor: true };
        let (_, g) = termination_loss(&seg, &[0.0, 0.0], &[-1.0, -1.0], &cfg).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences_with_stop_gradient() {
        let seg = TerminationSegment { start: 0, option: 0, arrivals: vec![1, 2, 3], forced_end: false };
        let cfg = TerminationConfig { entropy_coef: 0.1, beta_factor: true };
        let logits = [0.4, -0.8, 1.1];
        let log_p = [-0.2, -1.5, -0.9];
        let (_, g) = termination_loss(&seg, &logits, &log_p, &cfg).unwrap();
        // β inside the coefficient is a constant: differentiate with it frozen
        for j in 0..3 {
            let frozen = logistic(logits[j]) * (log_p[j] - log_p[2]);
            let h = 1e-6;
            let f = |l: f64| -(l * frozen) - cfg.entropy_coef * bernoulli_entropy(l).0;
            let num = (f(logits[j] + h) - f(logits[j] - h)) / (2.0 * h);
            assert!((g[j] - num).abs() < 1e-8);
        }
    }

    #[test]
    fn forced_end_drops_the_final_term() {
        let seg = TerminationSegment { start: 0, option: 0, arrivals: vec![1, 2], forced_end: true };
        let cfg = TerminationConfig { entropy_coef: 0.3, beta_factor: true };
        let (_, g) = termination_loss(&seg, &[0.5, 0.5], &[-0.1, -2.0], &cfg).unwrap();
        assert_eq!(g[1], 0.0);
        assert!(g[0] != 0.0);
    }

    #[test]
    fn empty_segment_is_a_contract_violation() {
        let seg = TerminationSegment { start: 0, option: 0, arrivals: vec![], forced_end: false };
        let err = termination_loss(&seg, &[], &[], &TerminationConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
