//! Client-side perturbations of the weight update before it is shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fl::{ClientUpdate, FlError};

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("invalid {kind} parameter {param}: {msg}")]
    Param { kind: &'static str, param: f64, msg: &'static str },
    #[error(transparent)]
    Fl(#[from] FlError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    GaussianNoise,
    Clipping,
    Sparsification,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::GaussianNoise => "gaussian_noise",
            DefenseKind::Clipping => "clipping",
            DefenseKind::Sparsification => "sparsification",
        }
    }
}

/// What the sparsification fraction counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SparsifyMode {
    /// Zero the `ceil(f * len)` entries of smallest magnitude.
    #[default]
    DropSmallest,
    /// Keep only the `ceil(f * len)` entries of largest magnitude.
    KeepLargest,
}

/// `param` is the noise standard deviation, the clipping bound, or the
/// sparsification fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    #[serde(default)]
    pub param: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: SparsifyMode,
}

impl DefenseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(kind: DefenseKind, param: f64) -> Self {
        Self {
            kind,
            param,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        let bad = |msg| {
            Err(DefenseError::Param {
                kind: self.kind.name(),
                param: self.param,
                msg,
            })
        };
        match self.kind {
            DefenseKind::None => Ok(()),
            DefenseKind::GaussianNoise if !(self.param >= 0.0 && self.param.is_finite()) => bad("standard deviation must be finite and >= 0"),
            DefenseKind::Clipping if !(self.param > 0.0) => bad("bound must be > 0"),
            DefenseKind::Sparsification if !(0.0..=1.0).contains(&self.param) => bad("fraction must be in [0, 1]"),
            _ => Ok(()),
        }
    }
}

/// `ceil(f * len)`, ignoring rounding noise in the product.
fn count_of(fraction: f64, len: usize) -> usize {
    let raw = fraction * len as f64;
    let near = raw.round();
    let k = if (raw - near).abs() < 1e-9 { near } else { raw.ceil() };
    (k as usize).min(len)
}

/// Indices ordered by `|v|` ascending, ties by index.
fn magnitude_order(delta: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..delta.len()).collect();
    idx.sort_by(|&a, &b| delta[a].abs().total_cmp(&delta[b].abs()).then(a.cmp(&b)));
    idx
}

pub fn apply_defense(delta: &[f64], spec: &DefenseSpec) -> Result<Vec<f64>, DefenseError> {
    spec.validate()?;
    let mut out = delta.to_vec();
    match spec.kind {
        DefenseKind::None => {}
        DefenseKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let normal = Normal::new(0.0, spec.param).expect("validated sigma");
            for v in &mut out {
                *v += normal.sample(&mut rng);
            }
        }
        DefenseKind::Clipping => {
            for v in &mut out {
                *v = v.clamp(-spec.param, spec.param);
            }
        }
        DefenseKind::Sparsification => {
            let k = count_of(spec.param, out.len());
            let order = magnitude_order(delta);
            let zeroed = match spec.mode {
                SparsifyMode::DropSmallest => &order[..k],
                SparsifyMode::KeepLargest => &order[..out.len() - k],
            };
            for &i in zeroed {
                out[i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// The update the server receives when the client applies `spec`:
/// `wT' = w0 + defense(wT - w0)`.
pub fn defend_update(update: &ClientUpdate, spec: &DefenseSpec) -> Result<ClientUpdate, DefenseError> {
    let delta = apply_defense(&update.weight_update()?, spec)?;
    Ok(update.with_delta(&delta)?)
}
