//! Target classifiers and the flow vector-field network.
//!
//! Both families are plain functions of a [`ParamSet`], so the same forward
//! pass serves training, attacking (with parameters that are themselves
//! functions of other tensors) and evaluation.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamError, ParamSet};
use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{Checkpoint, CheckpointMeta, ModelSpec, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("input shape {got:?} does not match model input {want}")]
    Input { want: String, got: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("flow time {0} outside [0, 1]")]
    Time(f64),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Mlp,
    Convnet,
}

/// Architecture of a target classifier. `hidden` holds dense widths for
/// [`ClassifierKind::Mlp`] and convolution channel counts for
/// [`ClassifierKind::Convnet`]. All hidden layers use `tanh`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    /// `(channels, height, width)`.
    pub input: [usize; 3],
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ClassifierSpec {
    /// `d -> 128 -> 64 -> classes`.
    pub fn mlp(input: [usize; 3], classes: usize) -> Self {
        Self {
            kind: ClassifierKind::Mlp,
            input,
            hidden: vec![128, 64],
            classes,
        }
    }

    /// Two 3x3 convolutions with 8 and 16 channels and a dense head.
    pub fn convnet(input: [usize; 3], classes: usize) -> Self {
        Self {
            kind: ClassifierKind::Convnet,
            input,
            hidden: vec![8, 16],
            classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(NnError::Spec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input.iter().chain(&self.hidden).any(|&w| w == 0) {
            return Err(NnError::Spec("all widths must be >= 1".into()));
        }
        if self.kind == ClassifierKind::Convnet && self.hidden.is_empty() {
            return Err(NnError::Spec("a convnet needs at least one conv layer".into()));
        }
        Ok(())
    }

    /// Randomly initialised parameters, uniform in `±1/sqrt(fan_in)`.
    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        self.validate()?;
        let mut p = ParamSet::new();
        match self.kind {
            ClassifierKind::Mlp => {
                let mut fan_in = self.input_dim();
                for (i, &w) in self.hidden.iter().chain(std::iter::once(&self.classes)).enumerate() {
                    p.push(format!("fc{i}.weight"), uniform(rng, &[fan_in, w], fan_in))?;
                    p.push(format!("fc{i}.bias"), uniform(rng, &[w], fan_in))?;
                    fan_in = w;
                }
            }
            ClassifierKind::Convnet => {
                let mut channels = self.input[0];
                for (i, &o) in self.hidden.iter().enumerate() {
                    let fan_in = channels * 9;
                    p.push(format!("conv{i}.weight"), uniform(rng, &[o, channels, 3, 3], fan_in))?;
                    p.push(format!("conv{i}.bias"), uniform(rng, &[o], fan_in))?;
                    channels = o;
                }
                let fan_in = channels * self.input[1] * self.input[2];
                p.push("head.weight", uniform(rng, &[fan_in, self.classes], fan_in))?;
                p.push("head.bias", uniform(rng, &[self.classes], fan_in))?;
            }
        }
        Ok(p)
    }

    /// Parameters with the right names and shapes, all zero.
    pub fn zeros(&self) -> Result<ParamSet> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(self.init(&mut rng)?.map(|t| Tensor::zeros(t.shape())))
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input {
            return Err(NnError::Input {
                want: format!("(n, {}, {}, {})", self.input[0], self.input[1], self.input[2]),
                got: s.to_vec(),
            });
        }
        Ok(s[0])
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(data, shape).expect("shape from spec")
}

fn param<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Tensor> {
    params.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
}

/// `x @ w + b` with `b` repeated over rows.
fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.matmul(w)?;
    let bias = b.expand_axis(y.shape(), 1)?;
    Ok(y.add(&bias)?)
}

/// Activations feeding the final dense layer, shape `(n, features)`.
pub fn classifier_features(spec: &ClassifierSpec, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
    let n = spec.check_batch(batch)?;
    match spec.kind {
        ClassifierKind::Mlp => {
            let mut h = batch.reshape(&[n, spec.input_dim()])?;
            for i in 0..spec.hidden.len() {
                h = dense(&h, param(params, &format!("fc{i}.weight"))?, param(params, &format!("fc{i}.bias"))?)?.tanh();
            }
            Ok(h)
        }
        ClassifierKind::Convnet => {
            let mut h = batch.clone();
            for i in 0..spec.hidden.len() {
                let k = param(params, &format!("conv{i}.weight"))?;
                let b = param(params, &format!("conv{i}.bias"))?;
                let y = h.conv2d(k)?;
                h = y.add(&b.expand_axis(y.shape(), 1)?)?.tanh();
            }
            let feat = h.numel() / n;
            Ok(h.reshape(&[n, feat])?)
        }
    }
}

/// Logits of shape `(n, classes)` for a batch of shape `(n, C, H, W)`.
pub fn forward_classifier(spec: &ClassifierSpec, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
    let h = classifier_features(spec, params, batch)?;
    let (w, b) = match spec.kind {
        ClassifierKind::Mlp => {
            let last = spec.hidden.len();
            (param(params, &format!("fc{last}.weight"))?, param(params, &format!("fc{last}.bias"))?)
        }
        ClassifierKind::Convnet => (param(params, "head.weight")?, param(params, "head.bias")?),
    };
    dense(&h, w, b)
}

/// Mean negative log-likelihood of `labels` under `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(NnError::Input {
            want: format!("({}, classes)", labels.len()),
            got: s.to_vec(),
        });
    }
    let classes = s[1];
    let mut onehot = vec![0.0; logits.numel()];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(NnError::Label { label: y, classes });
        }
        onehot[i * classes + y] = 1.0;
    }
    soft_cross_entropy(logits, &Tensor::new(onehot, s)?)
}

/// Cross-entropy against a full target distribution per row.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let n = logits.shape()[0] as f64;
    let logp = logits.log_softmax()?;
    Ok(logp.mul(targets)?.sum().scale(-1.0 / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    #[default]
    Softplus,
}

impl Activation {
    fn apply(self, t: &Tensor) -> Tensor {
        match self {
            Activation::Tanh => t.tanh(),
            Activation::Softplus => t.softplus(),
        }
    }
}

/// Number of time features appended to the input: `[t, sin 2πt, cos 2πt]`.
pub const TIME_FEATURES: usize = 3;

/// Vector-field network `v(x, t)` on flattened images of dimension `dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowNetSpec {
    pub dim: usize,
    pub time_embed: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl FlowNetSpec {
    pub fn new(dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            dim,
            time_embed: TIME_FEATURES,
            hidden,
            activation: Activation::default(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden.contains(&0) {
            return Err(NnError::Spec("all widths must be >= 1".into()));
        }
        if self.time_embed != TIME_FEATURES {
            return Err(NnError::Spec(format!("time embedding must have {TIME_FEATURES} features")));
        }
        Ok(())
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamSet> {
        self.validate()?;
        let mut p = ParamSet::new();
        let mut fan_in = self.dim + self.time_embed;
        for (i, &w) in self.hidden.iter().chain(std::iter::once(&self.dim)).enumerate() {
            p.push(format!("fc{i}.weight"), uniform(rng, &[fan_in, w], fan_in))?;
            p.push(format!("fc{i}.bias"), uniform(rng, &[w], fan_in))?;
            fan_in = w;
        }
        Ok(p)
    }

    pub fn zeros(&self) -> Result<ParamSet> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(self.init(&mut rng)?.map(|t| Tensor::zeros(t.shape())))
    }
}

pub(crate) fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let phase = 2.0 * std::f64::consts::PI * t;
    [t, phase.sin(), phase.cos()]
}

/// Field at a single time `t` for `x` of shape `(n, dim)` or `(dim)`; the
/// result has the shape of `x`.
pub fn forward_flow(spec: &FlowNetSpec, params: &ParamSet, x: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(NnError::Time(t));
    }
    let n = if x.rank() == 2 { x.shape()[0] } else { 1 };
    forward_flow_times(spec, params, x, &vec![t; n])
}

/// Field with a separate time per row.
pub fn forward_flow_times(spec: &FlowNetSpec, params: &ParamSet, x: &Tensor, times: &[f64]) -> Result<Tensor> {
    let rows = match x.shape() {
        [d] if *d == spec.dim => x.reshape(&[1, spec.dim])?,
        [_, d] if *d == spec.dim => x.clone(),
        other => {
            return Err(NnError::Input {
                want: format!("(n, {})", spec.dim),
                got: other.to_vec(),
            })
        }
    };
    let n = rows.shape()[0];
    if times.len() != n {
        return Err(NnError::Input {
            want: format!("{n} times"),
            got: vec![times.len()],
        });
    }
    let mut feats = Vec::with_capacity(n * TIME_FEATURES);
    for &t in times {
        if !(0.0..=1.0).contains(&t) {
            return Err(NnError::Time(t));
        }
        feats.extend(time_features(t));
    }
    let feats = Tensor::new(feats, &[n, TIME_FEATURES])?;
    let mut h = Tensor::concat(&[rows, feats], 1)?;
    let layers = spec.hidden.len();
    for i in 0..=layers {
        h = dense(&h, param(params, &format!("fc{i}.weight"))?, param(params, &format!("fc{i}.bias"))?)?;
        if i < layers {
            h = spec.activation.apply(&h);
        }
    }
    Ok(h.reshape(x.shape())?)
}
