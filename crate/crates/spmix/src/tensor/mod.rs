//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-d array (row-major). Operations live on
//! [`Graph`]; running an op through a graph records a node when any input
//! requires gradients, and [`Graph::backward`] replays the tape in reverse
//! to fill per-tensor gradient cells.

mod checkpoint;
mod graph;
mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::Graph;
pub use ops::detached_row_max;

use crate::error::{Result, SpmixError};
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Immutable dense tensor. Clones share the underlying buffer and gradient
/// cell, so a clone is the same logical tensor, not a copy.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: Rc<RefCell<Option<Vec<f64>>>>,
    id: u64,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(SpmixError::contract(format!(
                "tensor data length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                len
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(SpmixError::contract(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        debug_check_finite(&data, "tensor construction")?;
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            requires_grad: false,
            grad: Rc::new(RefCell::new(None)),
            id: fresh_id(),
        })
    }

    /// Internal constructor for op outputs; shape/data already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            shape,
            data: Rc::new(data),
            requires_grad,
            grad: Rc::new(RefCell::new(None)),
            id: fresh_id(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; len], false)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let len = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![v; len], false)
    }

    /// Marks the tensor as a gradient leaf (learnable parameter).
    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    /// View of the same data with gradients disconnected.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            requires_grad: false,
            grad: Rc::new(RefCell::new(None)),
            id: fresh_id(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    /// Gradient from the last backward pass, if one reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad.borrow().clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.data.len()])
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    pub(crate) fn set_grad(&self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.data.len());
        *self.grad.borrow_mut() = Some(g);
    }

    /// Element at a full multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().enumerate() {
            assert!(d < self.shape[i]);
            off = off * self.shape[i] + d;
        }
        self.data[off]
    }

    /// Reshape without touching data (shares the buffer).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(SpmixError::contract(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Rc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: Rc::clone(&self.grad),
            id: self.id,
        })
    }
}

/// Non-finite values are a checked contract error in debug builds.
pub(crate) fn debug_check_finite(data: &[f64], ctx: &str) -> Result<()> {
    if cfg!(debug_assertions) {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SpmixError::Numeric(format!(
                "non-finite value {} at flat index {pos} during {ctx}",
                data[pos]
            )));
        }
    }
    Ok(())
}
