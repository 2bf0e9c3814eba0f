//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tensor`] is a reference-counted
//! buffer of 64-bit floats plus an optional gradient buffer, and a [`Tape`]
//! records every differentiable operation so [`Tape::backward`] can replay
//! them in exact reverse order. Everything is f64 so finite-difference
//! checks stay tight, and every reduction runs in a fixed sequential order
//! so two runs with the same seed produce bit-identical buffers.
//!
//! Shape and contract violations panic with a message naming the operation
//! and the offending axes; they are programmer errors, not runtime data.
//! Tensors are `!Send` by construction — a tape and its tensors belong to
//! one thread. Heavy kernels parallelize internally over disjoint output
//! regions, which keeps results independent of the worker count.

mod gradcheck;
mod ops;
mod tape;


pub use gradcheck::{gradcheck, gradcheck_with_fault, GradcheckError};
pub use ops::{BnStats, OP_KINDS};
pub use tape::Tape;

pub(crate) use ops::bilinear_resize_plane;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Dense n-dimensional value, row-major, optionally participating in the tape.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<RefCell<Node>>,
}

impl Tensor {
    /// Non-differentiable tensor from raw parts.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor: shape {:?} implies {} elements but data has {}",
            shape,
            numel,
            data.len()
        );
        Tensor {
            node: Rc::new(RefCell::new(Node {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
            })),
        }
    }

    /// Trainable tensor: participates in the tape and accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(shape, data);
        t.node.borrow_mut().requires_grad = true;
        t
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    /// Borrow the data buffer. The borrow must be released before any
    /// in-place update of the same tensor.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.node.borrow(), |n| n.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self) -> f64 {
        let n = self.node.borrow();
        assert_eq!(
            n.data.len(),
            1,
            "value: expected scalar tensor, got shape {:?}",
            n.shape
        );
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.node.borrow_mut().requires_grad = flag;
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// Copy of the data as a fresh leaf tensor that does not require grad.
    /// This is the stop-gradient marker: backward traversal never crosses it.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.shape(), self.to_vec())
    }

    /// Mutate the data in place, outside the tape (optimizer updates, clamps).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.node.borrow_mut().data);
    }

    pub(crate) fn accum_grad(&self, delta: &[f64]) {
        let mut n = self.node.borrow_mut();
        assert_eq!(
            delta.len(),
            n.data.len(),
            "gradient length {} does not match tensor of {} elements",
            delta.len(),
            n.data.len()
        );
        match &mut n.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => n.grad = Some(delta.to_vec()),
        }
    }

    pub(crate) fn grad_snapshot(&self) -> Option<Vec<f64>> {
        self.node.borrow().grad.clone()
    }

    pub(crate) fn scale_grad(&self, factor: f64) {
        if let Some(g) = &mut self.node.borrow_mut().grad {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.node.borrow().data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.node.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, grad={})",
            n.shape,
            n.requires_grad,
            if n.grad.is_some() { "set" } else { "none" }
        )
    }
}

/// Exponential moving average update, outside the tape:
/// `target <- m * target + (1 - m) * source`, elementwise.
pub fn ema_update(target: &Tensor, source: &Tensor, m: f64) {
    assert!(
        (0.0..=1.0).contains(&m),
        "ema_update: momentum coefficient {m} outside [0, 1]"
    );
    let src = source.to_vec();
    target.update_data(|t| {
        assert_eq!(
            t.len(),
            src.len(),
            "ema_update: target has {} elements, source has {}",
            t.len(),
            src.len()
        );
        for (ti, si) in t.iter_mut().zip(&src) {
            *ti = m * *ti + (1.0 - m) * si;
        }
    });
}
