//! Dense f64 tensors and a reverse-mode differentiation graph.
//!
//! All numeric work runs in f64; f32 exists only as a checkpoint storage
//! format (see `persist`). Tensors are plain values; differentiation happens
//! by registering them as leaves of a [`Graph`] and walking the recorded
//! operations backwards.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod stats;

pub use gradcheck::{
    finite_diff_check, graph_fd_check, rel_err, FiniteDiffEntry, FiniteDiffReport,
};
pub use graph::{clip_global_norm, global_grad_norm, GradMap, Graph, NodeId};

use thiserror::Error;

/// Errors from tensor construction and graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: size mismatch on axis {axis}: expected {expected}, got {got}")]
    AxisMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected rank {expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: output spatial size {h}x{w} is empty (input too small for kernel)")]
    EmptyOutput { op: &'static str, h: i64, w: i64 },
    #[error("{op}: loss node must be scalar, got shape {shape:?}")]
    NonScalarLoss { op: &'static str, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Marks this tensor as a differentiation target when bound as a graph leaf.
    pub requires_grad: bool,
    /// Gradient of the same shape, filled in by [`GradMap::write_to`].
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "Tensor::new",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark as a differentiation target (builder style).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True when every element (and every gradient element) is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }
}
