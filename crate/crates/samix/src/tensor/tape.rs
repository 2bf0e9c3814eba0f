use std::cell::{Cell, RefCell};

use super::Tensor;

pub(crate) struct TapeEntry {
    pub op: &'static str,
    pub output: Tensor,
    pub backward: Box<dyn Fn()>,
}

/// Ordered record of differentiable operations.
///
/// An op is recorded only while the tape is recording and at least one input
/// requires grad. [`Tape::backward`] replays the entries in exact reverse of
/// recording order, accumulating gradients with `+=`, then clears the tape.
///
/// A tape must stay on one thread; kernels parallelize internally instead.
pub struct Tape {
    entries: RefCell<Vec<TapeEntry>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            entries: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn set_recording(&self, flag: bool) {
        self.recording.set(flag);
    }

    /// Run `f` with recording suspended. Outputs produced inside do not
    /// require grad, so the result is detached from any enclosing graph.
    pub fn paused<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.get();
        self.recording.set(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    pub(crate) fn record(&self, op: &'static str, output: &Tensor, backward: impl Fn() + 'static) {
        self.entries.borrow_mut().push(TapeEntry {
            op,
            output: output.clone(),
            backward: Box::new(backward),
        });
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// recorded tensor reachable from the loss; the tape is cleared afterwards.
    pub fn backward(&self, loss: &Tensor) {
        self.backward_with_fault(loss, None);
    }

    /// Backward sweep with an optional fault injection: every entry whose op
    /// name matches `fault` has its upstream gradient scaled by 1.5 before
    /// its rule runs. Exists so the gradient-check driver can prove it
    /// detects a corrupted backward rule.
    pub fn backward_with_fault(&self, loss: &Tensor, fault: Option<&str>) {
        assert_eq!(
            loss.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            loss.shape()
        );
        loss.accum_grad(&[1.0]);
        let entries = std::mem::take(&mut *self.entries.borrow_mut());
        for entry in entries.iter().rev() {
            if entry.output.grad_snapshot().is_none() {
                continue;
            }
            if fault == Some(entry.op) {
                entry.output.scale_grad(1.5);
            }
            (entry.backward)();
        }
    }

    pub fn clear(&self) {
        self.entries.borrow_mut().clear();
    }

    /// Name of the first recorded op whose output contains a non-finite
    /// value, if any. Used by the gradient checker for diagnostics.
    pub fn first_non_finite_op(&self) -> Option<&'static str> {
        self.entries
            .borrow()
            .iter()
            .find(|e| !e.output.all_finite())
            .map(|e| e.op)
    }
}
