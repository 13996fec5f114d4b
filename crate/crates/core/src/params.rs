//! Named parameter collections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter name `{0}`")]
    Duplicate(String),
    #[error("flat vector has {got} values, parameter set needs {want}")]
    Length { want: usize, got: usize },
    #[error("parameter sets disagree at `{0}`")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// An ordered list of named tensors. The order is the canonical flattening
/// order used for every update vector.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(ParamError::Duplicate(name));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Concatenation of all entries as a recorded rank-1 tensor.
    pub fn flatten_tensor(&self) -> Result<Tensor, ParamError> {
        let parts: Vec<Tensor> = self.entries.iter().map(|(_, t)| t.flatten()).collect();
        Ok(Tensor::concat(&parts, 0)?)
    }

    /// A constant set with this set's names and shapes holding `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet, ParamError> {
        if flat.len() != self.numel() {
            return Err(ParamError::Length {
                want: self.numel(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let n = t.numel();
            entries.push((name.clone(), Tensor::new(flat[offset..offset + n].to_vec(), t.shape())?));
            offset += n;
        }
        Ok(ParamSet { entries })
    }

    /// Fresh tracked leaves with the same values.
    pub fn leaves(&self) -> ParamSet {
        self.map(|t| t.requires_grad())
    }

    /// Constant copies with no history.
    pub fn detached(&self) -> ParamSet {
        self.map(|t| t.detach())
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), f(t))).collect(),
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<(), ParamError> {
        if self.entries.len() != other.entries.len() {
            return Err(ParamError::Mismatch(format!(
                "{} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(ParamError::Mismatch(na.clone()));
            }
        }
        Ok(())
    }

    pub(crate) fn to_records(&self) -> Vec<ParamRecord> {
        self.entries
            .iter()
            .map(|(n, t)| ParamRecord {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect()
    }

    pub(crate) fn from_records(records: Vec<ParamRecord>) -> Result<ParamSet, ParamError> {
        let mut set = ParamSet::new();
        for r in records {
            set.push(r.name, Tensor::new(r.data, &r.shape)?)?;
        }
        Ok(set)
    }
}

/// Serialized form of one named array.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub(crate) struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
