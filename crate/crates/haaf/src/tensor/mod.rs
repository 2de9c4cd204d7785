//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Everything in this crate that needs a gradient is built on the tape in
//! [`Graph`]: a forward pass appends nodes to the tape, [`Graph::backward`]
//! replays it in reverse. Graphs are rebuilt per forward pass (define-by-run),
//! which keeps variable-size bags trivial to handle.

mod graph;
mod gradcheck;

pub use gradcheck::finite_diff_check;
pub use graph::{sigmoid, Graph, Var};

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Scalar element type. `f64` by default; the `f32` feature trades the tight
/// gradient-check tolerances for speed.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("{op}: non-finite value encountered in strict mode")]
    NonFinite { op: &'static str },
    #[error("tensor shape {shape:?} implies {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called twice on the same graph")]
    GraphConsumed,
    #[error("backward called on an empty graph")]
    EmptyGraph,
    #[error("function is not deterministic: two evaluations disagree")]
    NonDeterministic,
    #[error("gradient check: {0}")]
    GradCheck(String),
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Dense n-dimensional array of [`Real`] values, stored flat in row-major
/// order. Carries an optional gradient buffer of the same length; gradients
/// accumulate across backward passes until [`Tensor::zero_grad`].
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<Real>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
    id: u64,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        // Clones get a fresh identity: a clone bound to a graph must not
        // alias the original's leaf slot.
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<Real>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::BadLength {
                expected,
                actual: values.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    /// Trainable tensor (requires_grad = true).
    pub fn param(shape: Vec<usize>, values: Vec<Real>) -> Result<Self, TensorError> {
        let mut t = Tensor::new(shape, values)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: shape product matches")
    }

    pub fn full(shape: Vec<usize>, value: Real) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: shape product matches")
    }

    pub fn scalar(value: Real) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Real] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[Real]) {
        assert_eq!(delta.len(), self.values.len(), "gradient length mismatch");
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn l2_norm(&self) -> Real {
        self.values.iter().map(|v| v * v).sum::<Real>().sqrt()
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }
}
