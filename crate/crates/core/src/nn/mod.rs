//! Parametric function machinery: flat parameter blocks, the option-critic
//! network (shared encoder plus policy / Q / termination / μ̂ / inverse-model
//! heads), reverse-mode gradients over a fixed primitive set, optimizers,
//! clipping and orthogonal initialization.

mod conv;
mod init;
mod optim;
pub mod primitives;

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use init::{init_orthogonal, orthogonal_matrix};
pub use optim::{apply_gradients, clip_global_norm, OptimizerKind, OptimizerState, StepReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBlock {
    /// Weight blocks are viewed as `[shape[0], product(rest)]`.
    fn matrix_dims(&self) -> (usize, usize) {
        let rows = self.shape[0];
        (rows, self.data.len() / rows.max(1))
    }

    pub fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub blocks: Vec<ParamBlock>,
}

impl Params {
    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for b in &mut self.blocks {
            for v in &mut b.data {
                *v = *it.next().expect("flat parameter vector too short");
            }
        }
    }

    fn view(&self, idx: usize) -> ArrayView2<'_, f64> {
        let b = &self.blocks[idx];
        let dims = if b.is_bias() { (1, b.data.len()) } else { b.matrix_dims() };
        ArrayView2::from_shape(dims, &b.data).expect("block shape")
    }
}

/// Accumulated ∂loss/∂params, shaped like [`Params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub blocks: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(params: &Params) -> Self {
        Self { blocks: params.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect() }
    }

    pub fn zero(&mut self) {
        self.blocks.iter_mut().for_each(|b| b.iter_mut().for_each(|g| *g = 0.0));
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }

    pub fn block_norm(&self, params: &Params, prefix: &str) -> f64 {
        params
            .blocks
            .iter()
            .zip(&self.blocks)
            .filter(|(p, _)| p.name.starts_with(prefix))
            .flat_map(|(_, g)| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    fn add_matrix(&mut self, idx: usize, m: &Array2<f64>) {
        for (g, v) in self.blocks[idx].iter_mut().zip(m.iter()) {
            *g += v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// One-hot state → dense(hidden) → rectifier.
    OneHot { hidden: usize },
    /// Rendered state image → conv(filters, k1×k1, stride 1) → rectifier →
    /// conv(filters, k2×k2, stride 1) → rectifier → dense(hidden) → rectifier.
    Conv {
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel1: usize,
        kernel2: usize,
        hidden: usize,
    },
}

impl EncoderSpec {
    pub fn hidden(&self) -> usize {
        match self {
            EncoderSpec::OneHot { hidden } | EncoderSpec::Conv { hidden, .. } => *hidden,
        }
    }

    pub fn conv(height: usize, width: usize) -> Self {
        EncoderSpec::Conv { channels: 1, height, width, filters: 16, kernel1: 4, kernel2: 2, hidden: 128 }
    }
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::OneHot { hidden: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_options: usize,
    pub encoder: EncoderSpec,
    /// Separate encoder for the termination, μ̂ and inverse-model heads.
    pub split_encoder: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Policy,
    Q,
    Beta,
    Mu,
    Inverse,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Policy => "policy",
            Head::Q => "q",
            Head::Beta => "beta",
            Head::Mu => "mu",
            Head::Inverse => "inverse",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn forward(&self, params: &Params, x: &Array2<f64>) -> Array2<f64> {
        let w = params.view(self.w);
        let b = params.view(self.b);
        let mut out = x.dot(&w.t());
        out += &b;
        // row accessors hand out contiguous slices
        if out.is_standard_layout() {
            out
        } else {
            out.as_standard_layout().into_owned()
        }
    }

    /// Accumulates weight/bias gradients; returns ∂loss/∂x.
    fn backward(&self, params: &Params, x: &Array2<f64>, dout: &Array2<f64>, buf: &mut GradBuffer) -> Array2<f64> {
        let w = params.view(self.w);
        buf.add_matrix(self.w, &dout.t().dot(x));
        let db = dout.sum_axis(Axis(0));
        for (g, v) in buf.blocks[self.b].iter_mut().zip(db.iter()) {
            *g += v;
        }
        dout.dot(&w)
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    OneHot { w: usize, b: usize, hidden: usize, n_states: usize },
    Conv(conv::ConvEncoder),
}

#[derive(Clone, Debug)]
struct EncoderCache {
    inputs: Vec<usize>,
    pre: Array2<f64>,
    conv: Option<conv::ConvCache>,
}

impl Encoder {
    fn forward(&self, params: &Params, obs: Option<&Array2<f64>>, inputs: &[usize]) -> (Array2<f64>, EncoderCache) {
        match self {
            Encoder::OneHot { w, b, hidden, n_states } => {
                let wd = &params.blocks[*w].data;
                let bd = &params.blocks[*b].data;
                let mut pre = Array2::zeros((inputs.len(), *hidden));
                for (row, &s) in pre.rows_mut().into_iter().zip(inputs) {
                    for (h, v) in row.into_iter().enumerate() {
                        *v = wd[h * n_states + s] + bd[h];
                    }
                }
                let feat = pre.mapv(primitives::relu);
                (feat, EncoderCache { inputs: inputs.to_vec(), pre, conv: None })
            }
            Encoder::Conv(enc) => {
                let obs = obs.expect("conv encoder requires observations");
                let (pre, cache) = enc.forward(params, obs, inputs);
                let feat = pre.mapv(primitives::relu);
                (feat, EncoderCache { inputs: inputs.to_vec(), pre, conv: Some(cache) })
            }
        }
    }

    fn backward(
        &self,
        params: &Params,
        obs: Option<&Array2<f64>>,
        cache: &EncoderCache,
        dfeat: &Array2<f64>,
        buf: &mut GradBuffer,
    ) {
        let mut dpre = dfeat.clone();
        ndarray::Zip::from(&mut dpre).and(&cache.pre).for_each(|d, p| {
            if *p <= 0.0 {
                *d = 0.0;
            }
        });
        match self {
            Encoder::OneHot { w, b, n_states, .. } => {
                for (row, &s) in dpre.rows().into_iter().zip(&cache.inputs) {
                    for (h, v) in row.iter().enumerate() {
                        buf.blocks[*w][h * n_states + s] += v;
                        buf.blocks[*b][h] += v;
                    }
                }
            }
            Encoder::Conv(enc) => {
                let obs = obs.expect("conv encoder requires observations");
                enc.backward(params, obs, cache.conv.as_ref().unwrap(), &dpre, buf);
            }
        }
    }
}

/// Head outputs for a batch of states.
#[derive(Clone, Debug)]
pub struct Forward {
    enc: EncoderCache,
    feat: Array2<f64>,
    aux: Option<(EncoderCache, Array2<f64>)>,
    /// `[batch, n_options * n_actions]`, option-major.
    pub policy_logits: Array2<f64>,
    pub q: Array2<f64>,
    pub beta_logits: Array2<f64>,
    pub mu_logits: Array2<f64>,
    n_actions: usize,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn policy_row(&self, sample: usize, option: usize) -> &[f64] {
        let row = self.policy_logits.row(sample).to_slice().unwrap();
        &row[option * self.n_actions..(option + 1) * self.n_actions]
    }

    pub fn q_row(&self, sample: usize) -> &[f64] {
        self.q.row(sample).to_slice().unwrap()
    }

    pub fn beta_logit(&self, sample: usize, option: usize) -> f64 {
        self.beta_logits[[sample, option]]
    }

    pub fn beta(&self, sample: usize, option: usize) -> f64 {
        primitives::logistic(self.beta_logits[[sample, option]])
    }

    pub fn mu_row(&self, sample: usize) -> &[f64] {
        self.mu_logits.row(sample).to_slice().unwrap()
    }
}

/// Inverse-model logits for a batch of (x_s, x_f) pairs.
#[derive(Clone, Debug)]
pub struct InverseForward {
    start: EncoderCache,
    end: EncoderCache,
    joint: Array2<f64>,
    pub logits: Array2<f64>,
}

impl InverseForward {
    pub fn row(&self, sample: usize) -> &[f64] {
        self.logits.row(sample).to_slice().unwrap()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub states: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Outputs {
    pub heads: Option<Forward>,
    pub inverse: Option<InverseForward>,
}

/// ∂loss/∂(head outputs). `None` means the loss does not touch that head.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub policy: Option<Array2<f64>>,
    pub q: Option<Array2<f64>>,
    pub beta: Option<Array2<f64>>,
    pub mu: Option<Array2<f64>>,
    pub inverse: Option<Array2<f64>>,
}

impl OutputGrads {
    pub fn add_scaled(&mut self, other: OutputGrads, weight: f64) {
        fn merge(dst: &mut Option<Array2<f64>>, src: Option<Array2<f64>>, w: f64) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.scaled_add(w, &src),
                    None => *dst = Some(src * w),
                }
            }
        }
        merge(&mut self.policy, other.policy, weight);
        merge(&mut self.q, other.q, weight);
        merge(&mut self.beta, other.beta, weight);
        merge(&mut self.mu, other.mu, weight);
        merge(&mut self.inverse, other.inverse, weight);
    }

    fn check_finite(&self) -> Result<()> {
        let heads = [
            (Head::Policy, &self.policy),
            (Head::Q, &self.q),
            (Head::Beta, &self.beta),
            (Head::Mu, &self.mu),
            (Head::Inverse, &self.inverse),
        ];
        for (head, grad) in heads {
            if let Some(g) = grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of the {} head", head.name())));
                }
            }
        }
        Ok(())
    }
}

/// A scalar loss over network outputs. Implementations return the loss value
/// and ∂loss/∂outputs; anything a loss treats as a constant is stop-gradient.
pub trait Loss {
    fn name(&self) -> &str;
    fn evaluate(&self, out: &Outputs) -> Result<(f64, OutputGrads)>;
}

/// Σ_i w_i L_i.
pub struct WeightedSum<'a> {
    pub terms: Vec<(f64, &'a dyn Loss)>,
}

impl Loss for WeightedSum<'_> {
    fn name(&self) -> &str {
        "weighted_sum"
    }

    fn evaluate(&self, out: &Outputs) -> Result<(f64, OutputGrads)> {
        let mut total = 0.0;
        let mut grads = OutputGrads::default();
        for (w, loss) in &self.terms {
            let (v, g) = loss.evaluate(out)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss {}", loss.name())));
            }
            total += w * v;
            grads.add_scaled(g, *w);
        }
        Ok((total, grads))
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<(String, Vec<usize>)>,
    enc: Encoder,
    aux: Option<Encoder>,
    policy: Linear,
    q: Linear,
    beta: Linear,
    mu: Linear,
    inverse: Linear,
    observations: Option<Arc<Array2<f64>>>,
}

struct Layout {
    shapes: Vec<(String, Vec<usize>)>,
}

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.shapes.push((name, shape));
        self.shapes.len() - 1
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        Linear { w: self.add(format!("{name}.w"), vec![out, inp]), b: self.add(format!("{name}.b"), vec![out]) }
    }

    fn encoder(&mut self, prefix: &str, spec: &NetworkSpec) -> Encoder {
        match &spec.encoder {
            EncoderSpec::OneHot { hidden } => Encoder::OneHot {
                w: self.add(format!("{prefix}.w"), vec![*hidden, spec.n_states]),
                b: self.add(format!("{prefix}.b"), vec![*hidden]),
                hidden: *hidden,
                n_states: spec.n_states,
            },
            EncoderSpec::Conv { channels, height, width, filters, kernel1, kernel2, hidden } => {
                let h1 = height + 1 - kernel1;
                let w1 = width + 1 - kernel1;
                let h2 = h1 + 1 - kernel2;
                let w2 = w1 + 1 - kernel2;
                Encoder::Conv(conv::ConvEncoder {
                    c1w: self.add(format!("{prefix}.conv1.w"), vec![*filters, *channels, *kernel1, *kernel1]),
                    c1b: self.add(format!("{prefix}.conv1.b"), vec![*filters]),
                    c2w: self.add(format!("{prefix}.conv2.w"), vec![*filters, *filters, *kernel2, *kernel2]),
                    c2b: self.add(format!("{prefix}.conv2.b"), vec![*filters]),
                    fcw: self.add(format!("{prefix}.fc.w"), vec![*hidden, filters * h2 * w2]),
                    fcb: self.add(format!("{prefix}.fc.b"), vec![*hidden]),
                    channels: *channels,
                    height: *height,
                    width: *width,
                    filters: *filters,
                    k1: *kernel1,
                    k2: *kernel2,
                    hidden: *hidden,
                })
            }
        }
    }
}

impl Network {
    /// `observations` (`[n_states, channels·height·width]`) is required by
    /// the convolutional encoder and ignored otherwise.
    pub fn new(spec: NetworkSpec, observations: Option<Array2<f64>>) -> Result<Self> {
        if spec.n_states == 0 || spec.n_actions == 0 || spec.n_options == 0 {
            return Err(Error::Shape("network needs at least one state, action and option".into()));
        }
        if let EncoderSpec::Conv { channels, height, width, kernel1, kernel2, .. } = &spec.encoder {
            let obs = observations
                .as_ref()
                .ok_or_else(|| Error::Config("conv encoder needs rendered observations".into()))?;
            if obs.nrows() != spec.n_states || obs.ncols() != channels * height * width {
                return Err(Error::Shape(format!(
                    "observations must be [{}, {}], got {:?}",
                    spec.n_states,
                    channels * height * width,
                    obs.shape()
                )));
            }
            if kernel1 + kernel2 > (*height).min(*width) + 1 {
                return Err(Error::Shape("conv kernels larger than the image".into()));
            }
        }
        let hidden = spec.encoder.hidden();
        let (no, na) = (spec.n_options, spec.n_actions);
        let mut layout = Layout { shapes: Vec::new() };
        let enc = layout.encoder("enc", &spec);
        let aux = spec.split_encoder.then(|| layout.encoder("aux", &spec));
        let policy = layout.linear("policy", hidden, no * na);
        let q = layout.linear("q", hidden, no);
        let beta = layout.linear("beta", hidden, no);
        let mu = layout.linear("mu", hidden, no);
        let inverse = layout.linear("inverse", 2 * hidden, no);
        Ok(Self {
            spec,
            shapes: layout.shapes,
            enc,
            aux,
            policy,
            q,
            beta,
            mu,
            inverse,
            observations: observations.map(Arc::new),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn zero_params(&self) -> Params {
        Params {
            blocks: self
                .shapes
                .iter()
                .map(|(name, shape)| ParamBlock {
                    name: name.clone(),
                    shape: shape.clone(),
                    data: vec![0.0; shape.iter().product()],
                })
                .collect(),
        }
    }

    /// Orthogonal weights (gain 1), zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        let mut params = self.zero_params();
        init_orthogonal(&mut params, rng);
        params
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.blocks.len() != self.shapes.len()
            || params.blocks.iter().zip(&self.shapes).any(|(b, (_, s))| &b.shape != s || b.data.len() != s.iter().product::<usize>())
        {
            return Err(Error::Shape("parameters do not match the network layout".into()));
        }
        Ok(())
    }

    fn check_states(&self, states: impl Iterator<Item = usize>) -> Result<()> {
        for s in states {
            if s >= self.spec.n_states {
                return Err(Error::StateOutOfRange { state: s, n_states: self.spec.n_states });
            }
        }
        Ok(())
    }

    fn obs(&self) -> Option<&Array2<f64>> {
        self.observations.as_deref()
    }

    pub fn forward(&self, params: &Params, states: &[usize]) -> Result<Forward> {
        self.check_params(params)?;
        self.check_states(states.iter().copied())?;
        let (feat, enc) = self.enc.forward(params, self.obs(), states);
        let aux = self.aux.as_ref().map(|a| {
            let (f, c) = a.forward(params, self.obs(), states);
            (c, f)
        });
        let side = aux.as_ref().map(|(_, f)| f).unwrap_or(&feat);
        let out = Forward {
            policy_logits: self.policy.forward(params, &feat),
            q: self.q.forward(params, &feat),
            beta_logits: self.beta.forward(params, side),
            mu_logits: self.mu.forward(params, side),
            enc,
            feat,
            aux,
            n_actions: self.spec.n_actions,
        };
        for (head, m) in [
            (Head::Policy, &out.policy_logits),
            (Head::Q, &out.q),
            (Head::Beta, &out.beta_logits),
            (Head::Mu, &out.mu_logits),
        ] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{} head output", head.name())));
            }
        }
        Ok(out)
    }

    pub fn forward_pairs(&self, params: &Params, pairs: &[(usize, usize)]) -> Result<InverseForward> {
        self.check_params(params)?;
        self.check_states(pairs.iter().flat_map(|(a, b)| [*a, *b]))?;
        let enc = self.aux.as_ref().unwrap_or(&self.enc);
        let starts: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ends: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let (fs, start) = enc.forward(params, self.obs(), &starts);
        let (fe, end) = enc.forward(params, self.obs(), &ends);
        let joint = ndarray::concatenate(Axis(1), &[fs.view(), fe.view()]).expect("concat");
        let logits = self.inverse.forward(params, &joint);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inverse head output".into()));
        }
        Ok(InverseForward { start, end, joint, logits })
    }

    pub fn outputs(&self, params: &Params, batch: &Batch) -> Result<Outputs> {
        let heads = (!batch.states.is_empty()).then(|| self.forward(params, &batch.states)).transpose()?;
        let inverse = (!batch.pairs.is_empty()).then(|| self.forward_pairs(params, &batch.pairs)).transpose()?;
        Ok(Outputs { heads, inverse })
    }

    pub fn backward(&self, params: &Params, out: &Outputs, grads: &OutputGrads, buf: &mut GradBuffer) -> Result<()> {
        if buf.blocks.len() != params.blocks.len() {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        if let Some(fwd) = &out.heads {
            let mut dfeat: Option<Array2<f64>> = None;
            let mut dside: Option<Array2<f64>> = None;
            let side_feat = fwd.aux.as_ref().map(|(_, f)| f).unwrap_or(&fwd.feat);
            let acc = |slot: &mut Option<Array2<f64>>, d: Array2<f64>| match slot {
                Some(s) => *s += &d,
                None => *slot = Some(d),
            };
            if let Some(g) = &grads.policy {
                acc(&mut dfeat, self.policy.backward(params, &fwd.feat, g, buf));
            }
            if let Some(g) = &grads.q {
                acc(&mut dfeat, self.q.backward(params, &fwd.feat, g, buf));
            }
            if let Some(g) = &grads.beta {
                acc(&mut dside, self.beta.backward(params, side_feat, g, buf));
            }
            if let Some(g) = &grads.mu {
                acc(&mut dside, self.mu.backward(params, side_feat, g, buf));
            }
            match (&self.aux, &fwd.aux) {
                (Some(aux), Some((cache, _))) => {
                    if let Some(d) = dside {
                        aux.backward(params, self.obs(), cache, &d, buf);
                    }
                }
                _ => {
                    if let Some(d) = dside {
                        acc(&mut dfeat, d);
                    }
                }
            }
            if let Some(d) = dfeat {
                self.enc.backward(params, self.obs(), &fwd.enc, &d, buf);
            }
        }
        if let (Some(inv), Some(g)) = (&out.inverse, &grads.inverse) {
            let djoint = self.inverse.backward(params, &inv.joint, g, buf);
            let hidden = self.spec.encoder.hidden();
            let enc = self.aux.as_ref().unwrap_or(&self.enc);
            let ds = djoint.slice(s![.., ..hidden]).to_owned();
            let de = djoint.slice(s![.., hidden..]).to_owned();
            enc.backward(params, self.obs(), &inv.start, &ds, buf);
            enc.backward(params, self.obs(), &inv.end, &de, buf);
        }
        Ok(())
    }
}

/// Evaluates `loss` on `batch` and adds ∂loss/∂params into `buf`.
pub fn accumulate_gradient(
    net: &Network,
    params: &Params,
    loss: &dyn Loss,
    batch: &Batch,
    buf: &mut GradBuffer,
) -> Result<f64> {
    let out = net.outputs(params, batch)?;
    let (value, grads) = loss.evaluate(&out)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {}", loss.name())));
    }
    grads.check_finite()?;
    net.backward(params, &out, &grads, buf)?;
    Ok(value)
}

/// Loss value only (used by finite-difference checks).
pub fn evaluate_loss(net: &Network, params: &Params, loss: &dyn Loss, batch: &Batch) -> Result<f64> {
    let out = net.outputs(params, batch)?;
    Ok(loss.evaluate(&out)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::primitives::{softmax, softmax_cross_entropy, softmax_entropy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(split: bool) -> NetworkSpec {
        NetworkSpec {
            n_states: 6,
            n_actions: 3,
            n_options: 2,
            encoder: EncoderSpec::OneHot { hidden: 5 },
            split_encoder: split,
        }
    }

    /// A loss touching every head with random constant weights.
    struct Everything {
        w: Vec<f64>,
    }

    impl Loss for Everything {
        fn name(&self) -> &str {
            "everything"
        }

        fn evaluate(&self, out: &Outputs) -> Result<(f64, OutputGrads)> {
            let f = out.heads.as_ref().unwrap();
            let inv = out.inverse.as_ref().unwrap();
            let n = f.len();
            let mut g = OutputGrads {
                policy: Some(Array2::zeros(f.policy_logits.dim())),
                q: Some(Array2::zeros(f.q.dim())),
                beta: Some(Array2::zeros(f.beta_logits.dim())),
                mu: Some(Array2::zeros(f.mu_logits.dim())),
                inverse: Some(Array2::zeros(inv.logits.dim())),
            };
            let mut total = 0.0;
            for i in 0..n {
                let (h, dh) = softmax_entropy(f.policy_row(i, i % 2));
                total += self.w[0] * h;
                for (k, d) in dh.iter().enumerate() {
                    g.policy.as_mut().unwrap()[[i, (i % 2) * 3 + k]] += self.w[0] * d;
                }
                let q = f.q[[i, 1]];
                total += self.w[1] * q * q;
                g.q.as_mut().unwrap()[[i, 1]] += self.w[1] * 2.0 * q;
                let b = f.beta(i, 0);
                total += self.w[2] * b;
                g.beta.as_mut().unwrap()[[i, 0]] += self.w[2] * b * (1.0 - b);
                let (ce, dce) = softmax_cross_entropy(f.mu_row(i), 1);
                total += self.w[3] * ce;
                for (k, d) in dce.iter().enumerate() {
                    g.mu.as_mut().unwrap()[[i, k]] += self.w[3] * d;
                }
            }
            for i in 0..inv.logits.nrows() {
                let (ce, dce) = softmax_cross_entropy(inv.row(i), i % 2);
                total += self.w[4] * ce;
                for (k, d) in dce.iter().enumerate() {
                    g.inverse.as_mut().unwrap()[[i, k]] += self.w[4] * d;
                }
            }
            Ok((total, g))
        }
    }

    fn gradient_check(net: &Network, params: &Params, loss: &dyn Loss, batch: &Batch) {
        let mut buf = GradBuffer::zeros_like(params);
        accumulate_gradient(net, params, loss, batch, &mut buf).unwrap();
        let analytic = buf.flat();
        let base = params.flat();
        let h = 1e-5;
        let mut p = params.clone();
        for i in 0..base.len() {
            let mut x = base.clone();
            x[i] += h;
            p.set_flat(&x);
            let up = evaluate_loss(net, &p, loss, batch).unwrap();
            x[i] -= 2.0 * h;
            p.set_flat(&x);
            let dn = evaluate_loss(net, &p, loss, batch).unwrap();
            let numeric = (up - dn) / (2.0 * h);
            if analytic[i].abs() < 1e-8 && numeric.abs() < 1e-8 {
                continue;
            }
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs());
            assert!(rel < 1e-4, "param {i}: analytic {} vs numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn zero_params_give_uniform_policy_and_half_termination() {
        let net = Network::new(spec(false), None).unwrap();
        let fwd = net.forward(&net.zero_params(), &[0, 3, 5]).unwrap();
        for i in 0..3 {
            for o in 0..2 {
                let p = softmax(fwd.policy_row(i, o));
                assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
                assert_eq!(fwd.beta(i, o), 0.5);
            }
        }
    }

    #[test]
    fn forward_is_pure_and_normalized() {
        let net = Network::new(spec(false), None).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let a = net.forward(&params, &[1, 2, 4]).unwrap();
        let b = net.forward(&params, &[1, 2, 4]).unwrap();
        assert_eq!(a.policy_logits, b.policy_logits);
        for i in 0..3 {
            for o in 0..2 {
                assert!((softmax(a.policy_row(i, o)).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn out_of_range_state_is_an_error() {
        let net = Network::new(spec(false), None).unwrap();
        let err = net.forward(&net.zero_params(), &[6]).unwrap_err();
        assert!(matches!(err, Error::StateOutOfRange { state: 6, .. }));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for split in [false, true] {
            let net = Network::new(spec(split), None).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut params = net.init_params(&mut rng);
            // non-zero biases so no rectifier sits exactly at its kink
            for b in params.blocks.iter_mut().filter(|b| b.is_bias()) {
                b.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
            let loss = Everything { w: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let batch = Batch { states: vec![0, 1, 3, 5, 1], pairs: vec![(0, 2), (4, 1), (3, 3)] };
            gradient_check(&net, &params, &loss, &batch);
        }
    }

    struct Constant;

    impl Loss for Constant {
        fn name(&self) -> &str {
            "constant"
        }

        fn evaluate(&self, _: &Outputs) -> Result<(f64, OutputGrads)> {
            Ok((3.5, OutputGrads::default()))
        }
    }

    #[test]
    fn constant_loss_adds_nothing() {
        let net = Network::new(spec(false), None).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let mut buf = GradBuffer::zeros_like(&params);
        let v = accumulate_gradient(&net, &params, &Constant, &Batch { states: vec![1, 2], pairs: vec![] }, &mut buf)
            .unwrap();
        assert_eq!(v, 3.5);
        assert!(buf.flat().iter().all(|g| *g == 0.0));
    }

    struct Bad;

    impl Loss for Bad {
        fn name(&self) -> &str {
            "bad"
        }

        fn evaluate(&self, out: &Outputs) -> Result<(f64, OutputGrads)> {
            let f = out.heads.as_ref().unwrap();
            let mut g = Array2::zeros(f.beta_logits.dim());
            g[[0, 0]] = f64::NAN;
            Ok((0.0, OutputGrads { beta: Some(g), ..Default::default() }))
        }
    }

    #[test]
    fn non_finite_gradient_names_the_head() {
        let net = Network::new(spec(false), None).unwrap();
        let params = net.zero_params();
        let mut buf = GradBuffer::zeros_like(&params);
        let err = accumulate_gradient(&net, &params, &Bad, &Batch { states: vec![0], pairs: vec![] }, &mut buf)
            .unwrap_err()
            .to_string();
        assert!(err.contains("beta"), "{err}");
    }

    #[test]
    fn conv_encoder_gradient_matches_finite_differences() {
        let (h, w) = (5, 5);
        let n_states = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = Array2::from_shape_fn((n_states, h * w), |_| rng.random_range(0.0..2.0));
        let spec = NetworkSpec {
            n_states,
            n_actions: 3,
            n_options: 2,
            encoder: EncoderSpec::Conv { channels: 1, height: h, width: w, filters: 2, kernel1: 2, kernel2: 2, hidden: 4 },
            split_encoder: false,
        };
        let net = Network::new(spec, Some(obs)).unwrap();
        let mut params = net.init_params(&mut rng);
        for b in params.blocks.iter_mut().filter(|b| b.is_bias()) {
            b.data.iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
        }
        let loss = Everything { w: vec![0.7, -0.3, 0.5, 0.9, -0.4] };
        let batch = Batch { states: vec![0, 1, 3], pairs: vec![(0, 2), (3, 1)] };
        gradient_check(&net, &params, &loss, &batch);
    }

    #[test]
    fn conv_encoder_requires_observations() {
        let spec = NetworkSpec {
            n_states: 4,
            n_actions: 4,
            n_options: 2,
            encoder: EncoderSpec::conv(13, 13),
            split_encoder: false,
        };
        assert!(Network::new(spec, None).is_err());
    }
}
