//! FedAvg simulation: local client training and server-side aggregation.
//!
//! The attacker's view of a client is a [`ClientUpdate`]: the weights it was
//! sent, the weights it returned, its sample count and the (public) local
//! training recipe.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClientDataset;
use crate::nn::{cross_entropy, forward_classifier, ClassifierSpec, NnError};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{ParamError, ParamRecord, ParamSet};
use crate::tensor::{grad, no_grad, TensorError};

#[derive(Debug, Error)]
pub enum FlError {
    #[error("invalid local training config: {0}")]
    Config(String),
    #[error("non-finite loss at local step {step}")]
    Diverged { step: usize },
    #[error("need at least one client")]
    NoClients,
    #[error("update: {0}")]
    Update(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FlError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Stops local training after this many steps when set.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl LocalTrainConfig {
    pub fn sgd(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer: OptimizerKind::Sgd,
            lr,
            shuffle_seed: 0,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(FlError::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FlError::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.max_steps == Some(0) {
            return Err(FlError::Config("max_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// `E * ceil(N / B)`, capped by `max_steps`.
    pub fn steps_for(&self, n: usize) -> usize {
        let full = self.epochs * n.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |m| full.min(m))
    }
}

/// Mean cross-entropy gradient of the classifier at `params` on a batch.
pub fn loss_gradient(spec: &ClassifierSpec, params: &ParamSet, data: &ClientDataset, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
    let leaves = params.leaves();
    let logits = forward_classifier(spec, &leaves, &data.batch(indices))?;
    let loss = cross_entropy(&logits, &data.labels_at(indices))?;
    let grads = grad(&loss, &leaves.tensors(), false)?;
    let mut flat = Vec::with_capacity(params.numel());
    for g in &grads {
        flat.extend_from_slice(g.data());
    }
    Ok((loss.item(), flat))
}

/// Runs local training and returns the final weights and the number of
/// optimiser steps taken, `E * ceil(N / B)` (or `max_steps` if smaller).
///
/// Each epoch visits a fresh seeded permutation of the data in batches of
/// `B`; the last batch of an epoch may be short.
pub fn local_train(spec: &ClassifierSpec, params: &ParamSet, data: &ClientDataset, cfg: &LocalTrainConfig) -> Result<(ParamSet, usize)> {
    cfg.validate()?;
    let n = data.len();
    let total = cfg.steps_for(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut flat = params.flatten();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, flat.len());
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let current = params.unflatten(&flat)?;
            let (loss, g) = loss_gradient(spec, &current, data, batch)?;
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(FlError::Diverged { step });
            }
            opt.step(&mut flat, &g);
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(FlError::Diverged { step });
            }
            step += 1;
        }
    }
    Ok((params.unflatten(&flat)?, step))
}

/// What an honest-but-curious server sees from one client.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub w0: ParamSet,
    pub wt: ParamSet,
    pub num_samples: usize,
    pub config: LocalTrainConfig,
    pub arch: ClassifierSpec,
    pub loss: String,
    pub steps: usize,
}

#[derive(Serialize, Deserialize)]
struct ClientUpdateFile {
    w0: Vec<ParamRecord>,
    #[serde(rename = "wT")]
    wt: Vec<ParamRecord>,
    #[serde(rename = "N")]
    n: usize,
    config: LocalTrainConfig,
    arch: ClassifierSpec,
    loss: String,
    steps: usize,
}

impl ClientUpdate {
    /// Trains a copy of `global` on `data` and packages the result.
    pub fn train(spec: &ClassifierSpec, global: &ParamSet, data: &ClientDataset, cfg: &LocalTrainConfig) -> Result<Self> {
        let (wt, steps) = local_train(spec, global, data, cfg)?;
        Ok(Self {
            w0: global.detached(),
            wt,
            num_samples: data.len(),
            config: cfg.clone(),
            arch: spec.clone(),
            loss: "cross_entropy".into(),
            steps,
        })
    }

    /// `flatten(wT) - flatten(w0)`.
    pub fn weight_update(&self) -> Result<Vec<f64>> {
        self.w0.check_compatible(&self.wt)?;
        Ok(self.wt.flatten().iter().zip(self.w0.flatten()).map(|(a, b)| a - b).collect())
    }

    /// A copy whose final weights are `w0 + delta`.
    pub fn with_delta(&self, delta: &[f64]) -> Result<Self> {
        let base = self.w0.flatten();
        if base.len() != delta.len() {
            return Err(FlError::Update(format!("delta has {} entries, model has {}", delta.len(), base.len())));
        }
        let wt: Vec<f64> = base.iter().zip(delta).map(|(a, d)| a + d).collect();
        Ok(Self {
            wt: self.w0.unflatten(&wt)?,
            ..self.clone()
        })
    }

    pub fn to_json(&self) -> String {
        let file = ClientUpdateFile {
            w0: self.w0.to_records(),
            wt: self.wt.to_records(),
            n: self.num_samples,
            config: self.config.clone(),
            arch: self.arch.clone(),
            loss: self.loss.clone(),
            steps: self.steps,
        };
        serde_json::to_string_pretty(&file).expect("update serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ClientUpdateFile = serde_json::from_str(text).map_err(|e| FlError::Update(e.to_string()))?;
        let w0 = ParamSet::from_records(file.w0)?;
        let wt = ParamSet::from_records(file.wt)?;
        w0.check_compatible(&wt)?;
        file.arch.zeros()?.check_compatible(&w0)?;
        Ok(Self {
            w0,
            wt,
            num_samples: file.n,
            config: file.config,
            arch: file.arch,
            loss: file.loss,
            steps: file.steps,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| FlError::Update(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| FlError::Update(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}

/// Fraction of `data` the classifier labels correctly.
pub fn accuracy(spec: &ClassifierSpec, params: &ParamSet, data: &ClientDataset) -> Result<f64> {
    let logits = no_grad(|| forward_classifier(spec, params, &data.all()))?;
    let k = spec.classes;
    let correct = logits
        .data()
        .chunks(k)
        .zip(data.labels())
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// `sum_i N_i w_i / sum_i N_i`, folded in client order.
pub fn fedavg(updates: &[(ParamSet, usize)]) -> Result<ParamSet> {
    let (first, _) = updates.first().ok_or(FlError::NoClients)?;
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let mut acc = vec![0.0; first.numel()];
    for (p, n) in updates {
        first.check_compatible(p)?;
        let w = *n as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(p.flatten()) {
            *a += w * v;
        }
    }
    Ok(first.unflatten(&acc)?)
}

/// Global model state after a round (round 0 is the initial model).
#[derive(Clone, Debug)]
pub struct RoundSnapshot {
    pub round: usize,
    pub global: ParamSet,
    pub accuracy: f64,
}

/// Runs `rounds` of FedAvg. Every client starts each round from the global
/// weights; client `c` in round `r` shuffles with seed
/// `cfg.shuffle_seed + 1000 * r + c`. Clients train in parallel, and the
/// aggregate is a deterministic fold in client order.
pub fn run_global_rounds(
    spec: &ClassifierSpec,
    init: &ParamSet,
    clients: &[ClientDataset],
    cfg: &LocalTrainConfig,
    rounds: usize,
    eval: &ClientDataset,
) -> Result<Vec<RoundSnapshot>> {
    run_global_rounds_with(spec, init, clients, cfg, rounds, eval, None)
}

/// Signature of a client-side transform `(round, client, delta) -> delta`
/// applied to each weight update before it is sent.
pub type UpdateTransform<'a> = dyn Fn(usize, usize, Vec<f64>) -> Result<Vec<f64>> + Sync + 'a;

/// [`run_global_rounds`] where every client passes its weight update
/// through `transform`, if given, before aggregation.
pub fn run_global_rounds_with(
    spec: &ClassifierSpec,
    init: &ParamSet,
    clients: &[ClientDataset],
    cfg: &LocalTrainConfig,
    rounds: usize,
    eval: &ClientDataset,
    transform: Option<&UpdateTransform>,
) -> Result<Vec<RoundSnapshot>> {
    if clients.is_empty() {
        return Err(FlError::NoClients);
    }
    let mut global = init.detached();
    let mut history = vec![RoundSnapshot {
        round: 0,
        global: global.clone(),
        accuracy: accuracy(spec, &global, eval)?,
    }];
    for round in 1..=rounds {
        let trained: Vec<Result<(ParamSet, usize)>> = clients
            .par_iter()
            .enumerate()
            .map(|(c, data)| {
                let mut local = cfg.clone();
                local.shuffle_seed = cfg.shuffle_seed.wrapping_add(1000 * round as u64 + c as u64);
                let (w, _) = local_train(spec, &global, data, &local)?;
                let Some(transform) = transform else {
                    return Ok((w, data.len()));
                };
                let base = global.flatten();
                let delta: Vec<f64> = w.flatten().iter().zip(&base).map(|(a, b)| a - b).collect();
                let delta = transform(round, c, delta)?;
                let sent: Vec<f64> = base.iter().zip(&delta).map(|(b, d)| b + d).collect();
                Ok((global.unflatten(&sent)?, data.len()))
            })
            .collect();
        let trained: Vec<(ParamSet, usize)> = trained.into_iter().collect::<Result<_>>()?;
        global = fedavg(&trained)?;
        history.push(RoundSnapshot {
            round,
            global: global.clone(),
            accuracy: accuracy(spec, &global, eval)?,
        });
    }
    Ok(history)
}
