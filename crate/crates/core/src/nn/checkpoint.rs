use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierSpec, FlowNetSpec, NnError, Result};
use crate::params::{ParamRecord, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Classifier(ClassifierSpec),
    Flow(FlowNetSpec),
}

/// Where a set of weights came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
    pub dataset: String,
}

/// A model spec with its weights, stored as JSON text with top-level keys
/// `version`, `spec`, `params` and `meta`. Parameter arrays are row-major
/// and listed in canonical order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    spec: ModelSpec,
    params: Vec<ParamRecord>,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            params: self.params.to_records(),
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", file.version)));
        }
        let params = ParamSet::from_records(file.params)?;
        let expected = match &file.spec {
            ModelSpec::Classifier(s) => s.zeros()?,
            ModelSpec::Flow(s) => s.zeros()?,
        };
        expected
            .check_compatible(&params)
            .map_err(|e| NnError::Checkpoint(format!("parameters do not match spec: {e}")))?;
        Ok(Self {
            spec: file.spec,
            params,
            meta: file.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}
