//! Dense `f64` tensors with tape-style reverse-mode differentiation.
//!
//! Every tensor produced while gradient recording is enabled remembers the
//! operation that created it. The recorded operations form a DAG whose node
//! ids increase with creation time, so sorting by id is a valid topological
//! order. [`grad`] walks that DAG backwards. Each backward rule is written in
//! terms of the same public operations, so when `create_graph` is set the
//! backward pass is itself recorded and can be differentiated again.
//!
//! ```
//! use flowleak::tensor::{grad, Tensor};
//!
//! let x = Tensor::scalar(2.0).requires_grad();
//! let y = x.mul(&x).unwrap().mul(&x).unwrap(); // x³
//! let dy = &grad(&y, &[x.clone()], true).unwrap()[0]; // 3x²
//! let d2y = &grad(dy, &[x.clone()], false).unwrap()[0]; // 6x
//! assert!((dy.item() - 12.0).abs() < 1e-12);
//! assert!((d2y.item() - 12.0).abs() < 1e-12);
//! ```

mod autograd;
mod check;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use autograd::grad;
pub use check::finite_diff_check;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("grad: output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("grad: input {0} is not recorded on the graph")]
    NotOnGraph(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether operations executed on this thread are recorded.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with recording switched to `enabled`, restoring the previous
/// mode afterwards (also on panic).
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Runs `f` without recording any operation.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Option<ops::Op>,
}

/// A reference-counted, immutable n-dimensional array of `f64`.
///
/// Cloning is cheap and shares the underlying node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<ops::Op>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// A constant tensor. Fails if `shape` does not match `data.len()` or
    /// contains a zero dimension.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Invalid {
                op: "new",
                msg: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value], false, None)
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        assert!(n > 0, "empty vector tensor");
        Self::from_parts(vec![n], data, false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n], false, None)
    }

    /// 2-D identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data, false, None)
    }

    /// A fresh leaf with the same values that gradients can be taken with
    /// respect to. The returned tensor is detached from any history.
    pub fn requires_grad(&self) -> Self {
        Self::from_parts(self.shape().to_vec(), self.data().to_vec(), true, None)
    }

    /// A constant copy with no history.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.shape().to_vec(), self.data().to_vec(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single value of a one-element tensor.
    ///
    /// # Panics
    /// If the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// True when this tensor is part of a recorded graph.
    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&ops::Op> {
        self.0.op.as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Identity of the underlying node (clones compare equal).
    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("data", &preview)
            .field("requires_grad", &self.tracks_grad())
            .finish()
    }
}

/// Decomposes `shape` around `axis` into (outer, mid, inner) extents.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests;
