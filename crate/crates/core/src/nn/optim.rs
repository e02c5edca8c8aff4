//! Gradient clipping and first-order optimizers.

use serde::{Deserialize, Serialize};

use super::{GradBuffer, Params};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    RmsProp { lr: f64, alpha: f64, eps: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// PyTorch's defaults apart from the learning rate.
    pub fn rmsprop(lr: f64) -> Self {
        OptimizerKind::RmsProp { lr, alpha: 0.99, eps: 1e-8 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerKind::RmsProp { lr, .. } | OptimizerKind::Adam { lr, .. } => *lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    /// RMSProp square average, or Adam first moment.
    pub m1: Vec<Vec<f64>>,
    /// Adam second moment (empty for RMSProp).
    pub m2: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &Params) -> Self {
        let zeros = || params.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect();
        let m2 = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::RmsProp { .. } => Vec::new(),
        };
        Self { kind, step: 0, m1: zeros(), m2 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Rescales `buf` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(buf: &mut GradBuffer, max_norm: f64) -> f64 {
    let norm = buf.global_norm();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        buf.blocks.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

/// Clips, takes one optimizer step (descent on the accumulated gradient)
/// and zeroes the buffer.
pub fn apply_gradients(
    params: &mut Params,
    buf: &mut GradBuffer,
    state: &mut OptimizerState,
    max_norm: Option<f64>,
) -> Result<StepReport> {
    if buf.blocks.len() != params.blocks.len()
        || buf.blocks.iter().zip(&params.blocks).any(|(g, p)| g.len() != p.data.len())
        || state.m1.len() != params.blocks.len()
    {
        return Err(Error::Shape("gradient buffer or optimizer state does not match parameters".into()));
    }
    for (g, p) in buf.blocks.iter().zip(&params.blocks) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    let grad_norm = match max_norm {
        Some(m) => clip_global_norm(buf, m),
        None => buf.global_norm(),
    };
    let clipped_norm = buf.global_norm();
    state.step += 1;
    match state.kind {
        OptimizerKind::RmsProp { lr, alpha, eps } => {
            for ((p, g), sq) in params.blocks.iter_mut().zip(&buf.blocks).zip(&mut state.m1) {
                for ((w, g), s) in p.data.iter_mut().zip(g).zip(sq.iter_mut()) {
                    *s = alpha * *s + (1.0 - alpha) * g * g;
                    *w -= lr * g / (s.sqrt() + eps);
                }
            }
        }
        OptimizerKind::Adam { lr, beta1, beta2, eps } => {
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, g), m), v) in params.blocks.iter_mut().zip(&buf.blocks).zip(&mut state.m1).zip(&mut state.m2) {
                for (((w, g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
    buf.zero();
    Ok(StepReport { grad_norm, clipped_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBlock;

    fn params(values: &[f64]) -> Params {
        Params { blocks: vec![ParamBlock { name: "w".into(), shape: vec![1, values.len()], data: values.to_vec() }] }
    }

    #[test]
    fn clipping_halves_a_norm_two_gradient() {
        let mut buf = GradBuffer { blocks: vec![vec![2.0 * 0.6, 2.0 * 0.8]] };
        let before = clip_global_norm(&mut buf, 1.0);
        assert!((before - 2.0).abs() < 1e-12);
        assert!((buf.blocks[0][0] - 0.6).abs() < 1e-12 && (buf.blocks[0][1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for kind in [OptimizerKind::rmsprop(2e-3), OptimizerKind::adam(3e-4)] {
            let mut p = params(&[0.5, -1.0]);
            let mut st = OptimizerState::new(kind, &p);
            let mut buf = GradBuffer::zeros_like(&p);
            apply_gradients(&mut p, &mut buf, &mut st, Some(1.0)).unwrap();
            assert_eq!(p.blocks[0].data, vec![0.5, -1.0]);
        }
    }

    #[test]
    fn default_rmsprop_constants() {
        assert_eq!(OptimizerKind::rmsprop(2e-3), OptimizerKind::RmsProp { lr: 2e-3, alpha: 0.99, eps: 1e-8 });
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = params(&[0.0]);
        let mut st = OptimizerState::new(OptimizerKind::rmsprop(0.1), &p);
        let mut buf = GradBuffer { blocks: vec![vec![f64::INFINITY]] };
        assert!(apply_gradients(&mut p, &mut buf, &mut st, Some(1.0)).is_err());
    }

    #[test]
    fn both_optimizers_decrease_a_quadratic() {
        let target = [1.0, -2.0, 0.5];
        let loss = |w: &[f64]| w.iter().zip(&target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>();
        for kind in [OptimizerKind::rmsprop(1e-2), OptimizerKind::adam(1e-2)] {
            let mut p = params(&[0.0, 0.0, 0.0]);
            let mut st = OptimizerState::new(kind, &p);
            let mut buf = GradBuffer::zeros_like(&p);
            let mut prev = loss(&p.blocks[0].data);
            for _ in 0..100 {
                for (g, (w, t)) in buf.blocks[0].iter_mut().zip(p.blocks[0].data.iter().zip(&target)) {
                    *g = w - t;
                }
                apply_gradients(&mut p, &mut buf, &mut st, None).unwrap();
                let now = loss(&p.blocks[0].data);
                assert!(now < prev, "{kind:?}: {now} !< {prev}");
                prev = now;
            }
        }
    }
}
