//! Flow-matching image prior.
//!
//! The network learns the straight-line field `x1 - x0` that carries
//! Gaussian noise `x0` to data `x1` along `x_t = (1 - t) x0 + t x1`. Images
//! live in `[0, 1]` pixel space and are mapped to `[-1, 1]` before they
//! meet the network.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{forward_flow, forward_flow_times, Checkpoint, CheckpointMeta, FlowNetSpec, ModelSpec, NnError};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::tensor::{grad, no_grad, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("non-finite value at step {step}")]
    Diverged { step: usize },
    #[error("iteration {i} is past the budget {k}")]
    Schedule { i: usize, k: usize },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Pixel value `p` in `[0, 1]` to model space.
pub fn to_model_space(p: f64) -> f64 {
    2.0 * p - 1.0
}

pub fn to_pixel_space(x: f64) -> f64 {
    (x + 1.0) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// A trained vector field with its provenance and training losses.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub spec: FlowNetSpec,
    pub params: ParamSet,
    pub meta: CheckpointMeta,
    pub loss_trace: Vec<f64>,
}

impl FlowModel {
    pub fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok(forward_flow(&self.spec, &self.params, x, t)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: ModelSpec::Flow(self.spec.clone()),
            params: self.params.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        match ck.spec {
            ModelSpec::Flow(spec) => Ok(Self {
                spec,
                params: ck.params,
                meta: ck.meta,
                loss_trace: Vec::new(),
            }),
            ModelSpec::Classifier(_) => Err(FlowError::Config("checkpoint holds a classifier, not a flow model".into())),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Trains a field on rows of `data` (already in model space, `dim` values
/// per row) with Adam.
pub fn fm_train_vectors(spec: &FlowNetSpec, data: &[f64], cfg: &FlowTrainConfig, dataset: &str) -> Result<FlowModel> {
    spec.validate()?;
    let dim = spec.dim;
    if data.is_empty() || !data.len().is_multiple_of(dim) {
        return Err(FlowError::Config(format!("{} values do not form rows of {dim}", data.len())));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(FlowError::Config("steps, batch size and learning rate must be positive".into()));
    }
    let rows = data.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = spec.init(&mut rng)?;
    let mut flat = init.flatten();
    let mut adam = Adam::new(cfg.lr, flat.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        let mut xt = Vec::with_capacity(b * dim);
        let mut target = Vec::with_capacity(b * dim);
        let mut times = Vec::with_capacity(b);
        for _ in 0..b {
            let row = &data[rng.random_range(0..rows) * dim..][..dim];
            let t: f64 = rng.random_range(0.0..=1.0);
            for &x1 in row {
                let x0: f64 = rng.sample(StandardNormal);
                xt.push((1.0 - t) * x0 + t * x1);
                target.push(x1 - x0);
            }
            times.push(t);
        }
        let params = init.unflatten(&flat).map_err(NnError::from)?.leaves();
        let v = forward_flow_times(spec, &params, &Tensor::new(xt, &[b, dim])?, &times)?;
        let loss = v.sub(&Tensor::new(target, &[b, dim])?)?.sq_norm().scale(1.0 / (b * dim) as f64);
        if !loss.item().is_finite() {
            return Err(FlowError::Diverged { step });
        }
        let grads = grad(&loss, &params.tensors(), false)?;
        let g: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
        adam.step(&mut flat, &g);
        trace.push(loss.item());
    }
    Ok(FlowModel {
        spec: spec.clone(),
        params: init.unflatten(&flat).map_err(NnError::from)?,
        meta: CheckpointMeta {
            seed: cfg.seed,
            steps: cfg.steps as u64,
            dataset: dataset.to_string(),
        },
        loss_trace: trace,
    })
}

/// Trains on images given as back-to-back pixel arrays in `[0, 1]`.
pub fn fm_train(spec: &FlowNetSpec, pixels: &[f64], cfg: &FlowTrainConfig, dataset: &str) -> Result<FlowModel> {
    let data: Vec<f64> = pixels.iter().map(|&p| to_model_space(p)).collect();
    fm_train_vectors(spec, &data, cfg, dataset)
}

/// Euler integration of the field from `N(0, I)` noise over `steps` equal
/// time steps. Returns `n` rows in model space.
pub fn fm_sample(model: &FlowModel, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 || steps == 0 {
        return Err(FlowError::Config("need at least one sample and one step".into()));
    }
    let dim = model.spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let v = no_grad(|| model.velocity(&Tensor::new(x.clone(), &[n, dim])?, k as f64 * h))?;
        for (xi, vi) in x.iter_mut().zip(v.data()) {
            *xi += h * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::Diverged { step: k });
        }
    }
    Ok(x)
}

/// Flow-prior penalty for pixel-space images `x_hat` (leading batch axis)
/// at iteration `i` of a `k`-iteration attack: the squared norm of the
/// field at time `i / k`, averaged over the batch.
pub fn flow_reg(model: &FlowModel, x_hat: &Tensor, i: usize, k: usize) -> Result<Tensor> {
    if i > k || k == 0 {
        return Err(FlowError::Schedule { i, k });
    }
    let n = x_hat.shape()[0];
    let x = x_hat.reshape(&[n, model.spec.dim])?.scale(2.0).add_scalar(-1.0);
    let v = model.velocity(&x, i as f64 / k as f64)?;
    Ok(v.sq_norm().scale(1.0 / n as f64))
}

/// One row of a mean-squared-flow probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsfRow {
    pub noise_level: f64,
    pub t: f64,
    pub msf_raw: f64,
    pub msf_normalized: f64,
}

/// Mean squared field value on images blended with noise,
/// `(1 - p) x + p e` in model space, for every noise level `p` and time
/// `t`. Each image keeps the same noise draw across levels. Values are
/// normalised by the pure-noise (`p = 1`) value at the same `t`.
pub fn msf_probe(model: &FlowModel, pixels: &[f64], levels: &[f64], times: &[f64], seed: u64) -> Result<Vec<MsfRow>> {
    let dim = model.spec.dim;
    if pixels.is_empty() || !pixels.len().is_multiple_of(dim) {
        return Err(FlowError::Config("probe images do not match the model dimension".into()));
    }
    if levels.iter().any(|p| !(0.0..=1.0).contains(p)) || !levels.contains(&1.0) {
        return Err(FlowError::Config("noise levels must lie in [0, 1] and include 1".into()));
    }
    let n = pixels.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..pixels.len()).map(|_| rng.sample(StandardNormal)).collect();
    let clean: Vec<f64> = pixels.iter().map(|&p| to_model_space(p)).collect();
    let mut raw = vec![vec![0.0; times.len()]; levels.len()];
    for (li, &p) in levels.iter().enumerate() {
        let x: Vec<f64> = clean.iter().zip(&noise).map(|(c, e)| (1.0 - p) * c + p * e).collect();
        let x = Tensor::new(x, &[n, dim])?;
        for (ti, &t) in times.iter().enumerate() {
            let v = no_grad(|| model.velocity(&x, t))?;
            raw[li][ti] = v.sq_norm().item() / v.numel() as f64;
        }
    }
    let pure = levels.iter().position(|&p| p == 1.0).expect("checked above");
    let mut rows = Vec::with_capacity(levels.len() * times.len());
    for (li, &p) in levels.iter().enumerate() {
        for (ti, &t) in times.iter().enumerate() {
            rows.push(MsfRow {
                noise_level: p,
                t,
                msf_raw: raw[li][ti],
                msf_normalized: raw[li][ti] / raw[pure][ti],
            });
        }
    }
    Ok(rows)
}

pub fn write_msf_csv(rows: &[MsfRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "noise_level,t,msf_raw,msf_normalized")?;
    for r in rows {
        writeln!(out, "{:.9e},{:.9e},{:.12e},{:.12e}", r.noise_level, r.t, r.msf_raw, r.msf_normalized)?;
    }
    Ok(())
}

/// Largest observed `|v(a) - v(b)| / |a - b|` over random pairs with `b`
/// at distance `radius` from a model-space point `a` drawn from `points`.
pub fn lipschitz_probe(model: &FlowModel, points: &[f64], t: f64, pairs: usize, radius: f64, seed: u64) -> Result<f64> {
    let dim = model.spec.dim;
    let rows = points.len() / dim;
    if rows == 0 || pairs == 0 || !(radius > 0.0) {
        return Err(FlowError::Config("lipschitz probe needs points, pairs and a positive radius".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::with_capacity(pairs * dim), Vec::with_capacity(pairs * dim));
    for _ in 0..pairs {
        let row = &points[rng.random_range(0..rows) * dim..][..dim];
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        a.extend_from_slice(row);
        b.extend(row.iter().zip(&dir).map(|(x, d)| x + radius * d / norm));
    }
    let va = no_grad(|| model.velocity(&Tensor::new(a, &[pairs, dim])?, t))?;
    let vb = no_grad(|| model.velocity(&Tensor::new(b, &[pairs, dim])?, t))?;
    Ok(va
        .data()
        .chunks(dim)
        .zip(vb.data().chunks(dim))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt() / radius)
        .fold(0.0, f64::max))
}

/// Plain gradient descent on `mean |v(x, t)|^2` from model-space rows `x`.
/// Returns the energy before each step (plus the final one) and the end
/// point.
pub fn descend_field_energy(model: &FlowModel, x: &[f64], t: f64, steps: usize, lr: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = model.spec.dim;
    let n = x.len() / dim;
    let mut x = x.to_vec();
    let mut energies = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let leaf = Tensor::new(x.clone(), &[n, dim])?.requires_grad();
        let (e, g) = crate::tensor::with_grad_mode(true, || -> Result<_> {
            let v = model.velocity(&leaf, t)?;
            let e = v.sq_norm().scale(1.0 / v.numel() as f64);
            let g = grad(&e, std::slice::from_ref(&leaf), false)?.remove(0);
            Ok((e.item(), g))
        })?;
        if !e.is_finite() {
            return Err(FlowError::Diverged { step });
        }
        energies.push(e);
        if step == steps {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(g.data()) {
            *xi -= lr * gi;
        }
    }
    Ok((energies, x))
}

pub fn write_loss_trace(trace: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l:.12e}\n"));
    }
    std::fs::write(path.as_ref(), out).map_err(|e| FlowError::Io(format!("{}: {e}", path.as_ref().display())))
}
