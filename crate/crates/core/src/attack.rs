//! Gradient-inversion attack on a FedAvg client update.
//!
//! The server knows `w0`, `wT` and the local recipe but not the `T`
//! intermediate weights. It replaces the trajectory by a single surrogate
//! point `w_hat = wT + alpha (w0 - wT)` and optimises dummy images so that
//! the loss gradient at `w_hat` points along `-(wT - w0)`, optionally
//! pulled toward natural images by a flow-matching prior.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClientDataset;
use crate::fl::{ClientUpdate, FlError};
use crate::flow::{flow_reg, FlowError, FlowModel};
use crate::metrics::{fmse, tv_tensor, MetricPanel};
use crate::nn::{cross_entropy, forward_classifier, soft_cross_entropy, ClassifierSpec, NnError};
use crate::optim::Adam;
use crate::params::{ParamError, ParamSet};
use crate::tensor::{grad, with_grad_mode, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("degenerate similarity: {0}")]
    Degenerate(&'static str),
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("non-finite objective at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// How the dummy labels are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// The attacker is handed the true labels.
    #[default]
    Known,
    /// Soft labels are optimised jointly with the images.
    Optimize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub max_iters: usize,
    pub lr: f64,
    /// Weight of the flow prior; 0 disables it.
    pub lambda: f64,
    pub tv_weight: f64,
    /// Stop once the cosine loss drops below this.
    pub tau: f64,
    pub alpha_init: f64,
    /// Dummy pixels start uniform in `[init_low, init_high]`.
    pub init_low: f64,
    pub init_high: f64,
    pub labels: LabelMode,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            max_iters: 30_000,
            lr: 0.01,
            lambda: 1.4e-5,
            tv_weight: 0.1,
            tau: 1e-3,
            alpha_init: 0.5,
            init_low: 0.25,
            init_high: 0.75,
            labels: LabelMode::Known,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AttackError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lambda >= 0.0 && self.tv_weight >= 0.0 && self.tau >= 0.0) {
            return bad("lambda, tv_weight and tau must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.alpha_init) {
            return bad("alpha_init must be in [0, 1]");
        }
        if !(0.0 <= self.init_low && self.init_low <= self.init_high && self.init_high <= 1.0) {
            return bad("init range must satisfy 0 <= low <= high <= 1");
        }
        Ok(())
    }
}

/// Which point the dummy gradient is taken at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackVariant {
    /// `w_hat = wT + alpha (w0 - wT)` with `alpha` optimised.
    Surrogate,
    /// Treat the update as one gradient step from `w0` (`alpha` fixed at 1).
    Naive,
}

impl AttackVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttackVariant::Surrogate => "surrogate",
            AttackVariant::Naive => "naive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    Budget,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Threshold => "threshold",
            StopReason::Budget => "budget",
        }
    }
}

/// Per-iteration objective terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub sim: Vec<f64>,
    pub flow: Vec<f64>,
    pub tv: Vec<f64>,
    pub total: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.sim.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sim.is_empty()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "iteration,L_sim,L_flow,TV,total,alpha")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{i},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                self.sim[i], self.flow[i], self.tv[i], self.total[i], self.alpha[i]
            )?;
        }
        Ok(())
    }
}

/// Attack output. Metric fields are filled only when ground truth was
/// supplied for evaluation.
#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub variant: AttackVariant,
    pub image_shape: [usize; 3],
    /// Reconstructed images back to back, pixel values in `[0, 1]`.
    pub images: Vec<f64>,
    pub alpha: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub final_sim: f64,
    pub trace: LossTrace,
    /// `assignment[j]` is the reconstruction matched to target image `j`.
    pub assignment: Option<Vec<usize>>,
    pub per_image: Vec<MetricPanel>,
    pub panel: Option<MetricPanel>,
}

impl ReconstructionResult {
    pub fn image(&self, i: usize) -> &[f64] {
        let per: usize = self.image_shape.iter().product();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.image_shape.iter().product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// `wT + alpha (w0 - wT)` per tensor, differentiable in `alpha`.
pub fn surrogate_weights(w0: &ParamSet, wt: &ParamSet, alpha: &Tensor) -> Result<ParamSet> {
    w0.check_compatible(wt)?;
    let mut out = ParamSet::new();
    for ((name, a), (_, b)) in w0.iter().zip(wt.iter()) {
        let diff = a.sub(b)?;
        out.push(name, b.add(&diff.mul(alpha)?)?)?;
    }
    Ok(out)
}

/// `1 - <-delta, g> / (|delta| |g|)` where `g` is the flattened loss
/// gradient at `w_hat`. The returned scalar stays differentiable in
/// whatever `w_hat` and `loss` depend on.
pub fn sim_loss(delta: &Tensor, w_hat: &ParamSet, loss: &Tensor) -> Result<Tensor> {
    let dn = delta.sq_norm().item().sqrt();
    if !(dn > 0.0) {
        return Err(AttackError::Degenerate("the weight update is zero"));
    }
    let grads = grad(loss, &w_hat.tensors(), true)?;
    let flat: Vec<Tensor> = grads.iter().map(|g| g.flatten()).collect();
    let g = Tensor::concat(&flat, 0)?;
    let gn2 = g.sq_norm();
    if !(gn2.item() > 0.0) {
        return Err(AttackError::Degenerate("the dummy gradient is zero"));
    }
    let cos = delta.dot(&g)?.mul(&gn2.sqrt()?.recip()?)?.scale(-1.0 / dn);
    Ok(cos.neg().add_scalar(1.0))
}

/// Dummy-batch classification loss at `w_hat`.
fn dummy_loss(spec: &ClassifierSpec, w_hat: &ParamSet, x: &Tensor, labels: &Labels) -> Result<Tensor> {
    let logits = forward_classifier(spec, w_hat, x)?;
    Ok(match labels {
        Labels::Hard(y) => cross_entropy(&logits, y)?,
        Labels::Soft(z) => soft_cross_entropy(&logits, &z.log_softmax()?.exp())?,
    })
}

enum Labels {
    Hard(Vec<usize>),
    Soft(Tensor),
}

/// The three objective terms and their weighted sum for one iterate.
pub struct Objective {
    pub sim: Tensor,
    pub flow: Option<Tensor>,
    pub tv: Tensor,
    pub total: Tensor,
}

/// `L_sim + lambda L_flow + tv_weight TV` at iteration `i` of `k`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    update: &ClientUpdate,
    delta: &Tensor,
    w_hat: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    flow: Option<&FlowModel>,
    cfg: &AttackConfig,
    i: usize,
) -> Result<Objective> {
    objective(&update.arch, delta, w_hat, x, &Labels::Hard(labels.to_vec()), flow, cfg, i)
}

#[allow(clippy::too_many_arguments)]
fn objective(
    spec: &ClassifierSpec,
    delta: &Tensor,
    w_hat: &ParamSet,
    x: &Tensor,
    labels: &Labels,
    flow: Option<&FlowModel>,
    cfg: &AttackConfig,
    i: usize,
) -> Result<Objective> {
    let loss = dummy_loss(spec, w_hat, x, labels)?;
    let sim = sim_loss(delta, w_hat, &loss)?;
    let tv = tv_tensor(x)?;
    let mut total = sim.add(&tv.scale(cfg.tv_weight))?;
    let flow = match flow {
        Some(m) => {
            let f = flow_reg(m, x, i, cfg.max_iters.max(1))?;
            if cfg.lambda > 0.0 {
                total = total.add(&f.scale(cfg.lambda))?;
            }
            Some(f)
        }
        None => None,
    };
    Ok(Objective { sim, flow, tv, total })
}

/// Optimises `N` dummy images against `update` with Adam on the images and
/// on `alpha`, clamping both to `[0, 1]` after every step.
///
/// `labels` are the attacker's labels (used in [`LabelMode::Known`]).
/// `truth` is only read after optimisation to score the result.
pub fn run_attack(
    update: &ClientUpdate,
    labels: &[usize],
    flow: Option<&FlowModel>,
    cfg: &AttackConfig,
    variant: AttackVariant,
    truth: Option<&ClientDataset>,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let spec = &update.arch;
    let n = update.num_samples;
    let [c, h, w] = spec.input;
    let per = c * h * w;
    if cfg.labels == LabelMode::Known && labels.len() != n {
        return Err(AttackError::Config(format!("{} labels for {n} images", labels.len())));
    }
    if let Some(m) = flow {
        if m.spec.dim != per {
            return Err(AttackError::Config(format!("flow prior has dimension {}, images have {per}", m.spec.dim)));
        }
    }
    let delta_v = update.weight_update()?;
    let delta = Tensor::vector(delta_v);
    let w0 = update.w0.detached();
    let wt = update.wt.detached();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<f64> = (0..n * per).map(|_| rng.random_range(cfg.init_low..=cfg.init_high)).collect();
    let mut alpha = match variant {
        AttackVariant::Surrogate => cfg.alpha_init,
        AttackVariant::Naive => 1.0,
    };
    let mut z: Vec<f64> = match cfg.labels {
        LabelMode::Known => Vec::new(),
        LabelMode::Optimize => (0..n * spec.classes).map(|_| rng.random_range(-0.1..0.1)).collect(),
    };
    let mut opt_x = Adam::new(cfg.lr, x.len());
    let mut opt_a = Adam::new(cfg.lr, 1);
    let mut opt_z = Adam::new(cfg.lr, z.len());
    let mut trace = LossTrace::default();
    let mut stop = StopReason::Budget;
    let mut final_sim = f64::NAN;
    let mut iterations = 0;

    with_grad_mode(true, || -> Result<()> {
        for i in 0..cfg.max_iters {
            let xt = Tensor::new(x.clone(), &[n, c, h, w])?.requires_grad();
            let at = Tensor::scalar(alpha).requires_grad();
            let w_hat = match variant {
                AttackVariant::Surrogate => surrogate_weights(&w0, &wt, &at)?,
                AttackVariant::Naive => w0.leaves(),
            };
            let lab = match cfg.labels {
                LabelMode::Known => Labels::Hard(labels.to_vec()),
                LabelMode::Optimize => Labels::Soft(Tensor::new(z.clone(), &[n, spec.classes])?.requires_grad()),
            };
            let obj = objective(spec, &delta, &w_hat, &xt, &lab, flow, cfg, i)?;
            let total = obj.total.item();
            if !total.is_finite() {
                return Err(AttackError::Diverged { iteration: i });
            }
            final_sim = obj.sim.item();
            trace.sim.push(final_sim);
            trace.flow.push(obj.flow.as_ref().map_or(0.0, |f| f.item()));
            trace.tv.push(obj.tv.item());
            trace.total.push(total);
            trace.alpha.push(alpha);
            if final_sim < cfg.tau {
                stop = StopReason::Threshold;
                return Ok(());
            }
            let mut wrt = vec![xt.clone()];
            if variant == AttackVariant::Surrogate {
                wrt.push(at.clone());
            }
            if let Labels::Soft(zt) = &lab {
                wrt.push(zt.clone());
            }
            let grads = grad(&obj.total, &wrt, false)?;
            opt_x.step(&mut x, grads[0].data());
            for v in &mut x {
                *v = v.clamp(0.0, 1.0);
            }
            let mut next = 1;
            if variant == AttackVariant::Surrogate {
                let mut a = [alpha];
                opt_a.step(&mut a, grads[1].data());
                alpha = a[0].clamp(0.0, 1.0);
                next = 2;
            }
            if matches!(lab, Labels::Soft(_)) {
                opt_z.step(&mut z, grads[next].data());
            }
            iterations = i + 1;
        }
        Ok(())
    })?;
    if stop == StopReason::Threshold {
        iterations = trace.len() - 1;
    }

    let mut result = ReconstructionResult {
        variant,
        image_shape: [c, h, w],
        images: x,
        alpha,
        iterations,
        stop_reason: stop,
        final_sim,
        trace,
        assignment: None,
        per_image: Vec::new(),
        panel: None,
    };
    if let Some(t) = truth {
        evaluate(&mut result, t, spec, &update.wt)?;
    }
    Ok(result)
}

/// The naive baseline: gradient matching at `w0` with `alpha` frozen at 1.
pub fn naive_attack(
    update: &ClientUpdate,
    labels: &[usize],
    flow: Option<&FlowModel>,
    cfg: &AttackConfig,
    truth: Option<&ClientDataset>,
) -> Result<ReconstructionResult> {
    run_attack(update, labels, flow, cfg, AttackVariant::Naive, truth)
}

/// Matches reconstructions to targets by MSE and fills in the metrics.
/// FMSE uses the client's final weights.
pub fn evaluate(result: &mut ReconstructionResult, truth: &ClientDataset, spec: &ClassifierSpec, wt: &ParamSet) -> Result<()> {
    if truth.image_shape() != result.image_shape || truth.len() != result.len() {
        return Err(AttackError::Config("ground truth does not match the reconstruction batch".into()));
    }
    let recons: Vec<&[f64]> = (0..result.len()).map(|i| result.image(i)).collect();
    let targets: Vec<&[f64]> = (0..truth.len()).map(|i| truth.image(i)).collect();
    let assignment = match_reconstructions(&recons, &targets)?;
    let mut panels = Vec::with_capacity(targets.len());
    for (j, &r) in assignment.iter().enumerate() {
        let mut p = MetricPanel::image(recons[r], targets[j], result.image_shape);
        p.fmse = fmse(recons[r], targets[j], spec, wt)?;
        panels.push(p);
    }
    result.panel = Some(MetricPanel::mean(&panels));
    result.per_image = panels;
    result.assignment = Some(assignment);
    Ok(())
}

/// Largest batch matched by exhaustive search; larger batches are matched
/// greedily.
pub const EXACT_MATCH_LIMIT: usize = 8;

/// `assignment[j]` is the reconstruction paired with target `j`, chosen to
/// minimise total MSE (exactly up to [`EXACT_MATCH_LIMIT`] images).
pub fn match_reconstructions(recons: &[&[f64]], targets: &[&[f64]]) -> Result<Vec<usize>> {
    let n = targets.len();
    if recons.len() != n {
        return Err(AttackError::Config(format!("cannot match {} reconstructions to {n} targets", recons.len())));
    }
    let cost: Vec<Vec<f64>> = targets.iter().map(|t| recons.iter().map(|r| crate::metrics::mse(r, t)).collect()).collect();
    Ok(if n <= EXACT_MATCH_LIMIT {
        exact_assignment(&cost)
    } else {
        greedy_assignment(&cost)
    })
}

pub(crate) fn exact_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    // best[mask]: cheapest way to give the first popcount(mask) targets the
    // reconstructions in mask.
    let n = cost.len();
    let full = 1usize << n;
    let mut best = vec![f64::INFINITY; full];
    let mut from = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        if !best[mask].is_finite() {
            continue;
        }
        let j = mask.count_ones() as usize;
        if j == n {
            continue;
        }
        for r in 0..n {
            if mask & (1 << r) == 0 {
                let next = mask | (1 << r);
                let c = best[mask] + cost[j][r];
                if c < best[next] {
                    best[next] = c;
                    from[next] = r;
                }
            }
        }
    }
    let mut out = vec![0; n];
    let mut mask = full - 1;
    for j in (0..n).rev() {
        let r = from[mask];
        out[j] = r;
        mask &= !(1 << r);
    }
    out
}

pub(crate) fn greedy_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..n).map(move |r| (j, r))).collect();
    pairs.sort_by(|a, b| cost[a.0][a.1].total_cmp(&cost[b.0][b.1]).then(a.cmp(b)));
    let mut out = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (j, r) in pairs {
        if out[j] == usize::MAX && !used[r] {
            out[j] = r;
            used[r] = true;
        }
    }
    out
}

#[cfg(test)]
mod tests;
