//! The closed set of differentiable primitives every loss is built from.
//! Each function returns its value together with the vector-Jacobian
//! product needed by the backward pass.

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// log softmax(logits)[index] and its gradient w.r.t. the logits.
pub fn log_prob(logits: &[f64], index: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let logp = log_softmax(logits)[index];
    let grad = p.iter().enumerate().map(|(i, pi)| if i == index { 1.0 - pi } else { -pi }).collect();
    (logp, grad)
}

/// Cross-entropy −log softmax(logits)[label].
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let (logp, grad) = log_prob(logits, label);
    (-logp, grad.into_iter().map(|g| -g).collect())
}

/// Entropy of softmax(logits).
pub fn softmax_entropy(logits: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let logp = log_softmax(logits);
    let h: f64 = -p.iter().zip(&logp).map(|(pi, li)| pi * li).sum::<f64>();
    let grad = p.iter().zip(&logp).map(|(pi, li)| -pi * (li + h)).collect();
    (h, grad)
}

/// Entropy of the mixture Σ_k w_k softmax(logits_k), with gradients w.r.t.
/// every component's logits. The weights are constants.
pub fn mixture_entropy(components: &[&[f64]], weights: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let width = components[0].len();
    let probs: Vec<Vec<f64>> = components.iter().map(|z| softmax(z)).collect();
    let mut mix = vec![0.0; width];
    for (p, w) in probs.iter().zip(weights) {
        for (m, pi) in mix.iter_mut().zip(p) {
            *m += w * pi;
        }
    }
    let log_mix: Vec<f64> = mix.iter().map(|m| if *m > 0.0 { m.ln() } else { 0.0 }).collect();
    let h: f64 = -mix.iter().zip(&log_mix).map(|(m, l)| m * l).sum::<f64>();
    let grads = probs
        .iter()
        .zip(weights)
        .map(|(p, w)| {
            let mean_log: f64 = p.iter().zip(&log_mix).map(|(pi, l)| pi * l).sum();
            p.iter().zip(&log_mix).map(|(pi, l)| w * pi * (mean_log - l)).collect()
        })
        .collect();
    (h, grads)
}

/// Entropy of Bernoulli(logistic(logit)) and its derivative in the logit.
pub fn bernoulli_entropy(logit: f64) -> (f64, f64) {
    let b = logistic(logit);
    let h = -(xlogx(b) + xlogx(1.0 - b));
    (h, -b * (1.0 - b) * logit)
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[i] += h;
                dn[i] -= h;
                (f(&up) - f(&dn)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-7, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn zero_logits_give_uniform_and_half() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        assert_eq!(logistic(0.0), 0.5);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[3.0, -1.0, 0.2, 700.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let z = [0.3, -1.2, 0.7, 0.05];
        close(&softmax_entropy(&z).1, &fd(|x| softmax_entropy(x).0, &z));
        close(&softmax_cross_entropy(&z, 2).1, &fd(|x| softmax_cross_entropy(x, 2).0, &z));
        close(&log_prob(&z, 1).1, &fd(|x| log_prob(x, 1).0, &z));
        let (_, dl) = bernoulli_entropy(0.8);
        let num = (bernoulli_entropy(0.8 + 1e-6).0 - bernoulli_entropy(0.8 - 1e-6).0) / 2e-6;
        assert!((dl - num).abs() < 1e-8);
    }

    #[test]
    fn mixture_entropy_gradient_matches_finite_differences() {
        let a = [0.3, -1.2, 0.7];
        let b = [-0.5, 0.4, 1.1];
        let w = [0.3, 0.7];
        let (_, grads) = mixture_entropy(&[&a, &b], &w);
        close(&grads[0], &fd(|x| mixture_entropy(&[x, &b], &w).0, &a));
        close(&grads[1], &fd(|x| mixture_entropy(&[&a, x], &w).0, &b));
    }

    #[test]
    fn identical_components_have_the_component_entropy() {
        let a = [0.3, -1.2, 0.7];
        let (hm, _) = mixture_entropy(&[&a, &a], &[0.5, 0.5]);
        assert!((hm - softmax_entropy(&a).0).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_entropy_is_stationary_at_half() {
        assert_eq!(bernoulli_entropy(0.0).1, 0.0);
        assert!((bernoulli_entropy(0.0).0 - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
