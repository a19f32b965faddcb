//! Minimal dense-tensor reverse-mode differentiation engine.
//!
//! Tensors are rank-2 `f64` arrays (scalars are 1x1, vectors 1xN or Nx1).
//! Forward operations push backward records onto a thread-local tape in
//! execution order; [`backward`] replays the tape in reverse, so each record
//! is visited exactly once and gradients accumulate additively across
//! fan-out. One tape per thread; tapes are never shared.
//!
//! Buffer allocations are tracked through [`alloc`] so benchmarks can report
//! peak transient memory without touching OS counters.

mod ops;
mod sparse;

pub mod gradcheck;

pub use ops::{concat_cols, softplus_inv};
pub use sparse::SparseMatrix;

use ndarray::Array2;
use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};

/// Allocation accounting for tensor buffers.
///
/// Tracks live bytes and the high-water mark across all threads. The
/// benchmark harness resets the peak before a run and reads it afterwards.
pub mod alloc {
    use super::*;

    static CURRENT: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    pub(super) fn on_alloc(bytes: usize) {
        let cur = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK.fetch_max(cur, Ordering::Relaxed);
    }

    pub(super) fn on_free(bytes: usize) {
        CURRENT.fetch_sub(bytes, Ordering::Relaxed);
    }

    /// Live tensor-buffer bytes right now.
    pub fn current_bytes() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    /// High-water mark since the last [`reset_peak`].
    pub fn peak_bytes() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Reset the high-water mark to the current live total.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);
static NAN_CHECKS: AtomicBool = AtomicBool::new(cfg!(debug_assertions));

/// Enable or disable NaN propagation checks on every op output.
///
/// On by default in debug builds. A non-finite output raises a panic naming
/// the offending operation, which is far easier to diagnose than a NaN loss
/// twenty layers later.
pub fn set_nan_checks(enabled: bool) {
    NAN_CHECKS.store(enabled, Ordering::Relaxed);
}

pub(crate) fn nan_checks_enabled() -> bool {
    NAN_CHECKS.load(Ordering::Relaxed)
}

struct Inner {
    id: u64,
    values: RwLock<Array2<f64>>,
    grad: Mutex<Option<Array2<f64>>>,
    requires_grad: bool,
    bytes: usize,
}

impl Drop for Inner {
    fn drop(&mut self) {
        alloc::on_free(self.bytes);
    }
}

/// Handle to a dense rank-2 tensor. Cheap to clone; clones share storage,
/// so a cloned parameter accumulates gradient into the same slot.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.inner.values.read().unwrap();
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &(v.nrows(), v.ncols()))
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(values: Array2<f64>, requires_grad: bool) -> Tensor {
        let bytes = values.len() * std::mem::size_of::<f64>();
        alloc::on_alloc(bytes);
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                values: RwLock::new(values),
                grad: Mutex::new(None),
                requires_grad,
                bytes,
            }),
        }
    }

    /// Constant tensor (does not participate in backward).
    pub fn from_array(values: Array2<f64>) -> Tensor {
        Tensor::new(values, false)
    }

    /// Trainable leaf tensor. Its gradient survives [`backward`] until
    /// [`Tensor::zero_grad`] is called.
    pub fn param(values: Array2<f64>) -> Tensor {
        Tensor::new(values, true)
    }

    /// 1x1 constant.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_array(Array2::from_elem((1, 1), v))
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::from_array(Array2::zeros((rows, cols)))
    }

    pub fn ones(rows: usize, cols: usize) -> Tensor {
        Tensor::from_array(Array2::ones((rows, cols)))
    }

    pub fn rows(&self) -> usize {
        self.inner.values.read().unwrap().nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.values.read().unwrap().ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        let v = self.inner.values.read().unwrap();
        (v.nrows(), v.ncols())
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the values.
    pub fn value(&self) -> Array2<f64> {
        self.inner.values.read().unwrap().clone()
    }

    /// Read access without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        f(&self.inner.values.read().unwrap())
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        let v = self.inner.values.read().unwrap();
        assert!(v.len() == 1, "item() on non-scalar tensor {:?}", v.dim());
        v[(0, 0)]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Array2<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Overwrite the values in place. Only legal between graph builds:
    /// records on the tape may hold this tensor and read stale data
    /// otherwise. Used by the optimizer and by finite differencing.
    pub fn set_values(&self, values: Array2<f64>) {
        assert!(
            tape_len() == 0,
            "set_values while the tape holds {} records",
            tape_len()
        );
        let mut v = self.inner.values.write().unwrap();
        assert_eq!(v.dim(), values.dim(), "set_values shape mismatch");
        *v = values;
    }

    /// In-place update of the values (same legality rule as `set_values`).
    pub fn update_values(&self, f: impl FnOnce(&mut Array2<f64>)) {
        assert!(
            tape_len() == 0,
            "update_values while the tape holds {} records",
            tape_len()
        );
        f(&mut self.inner.values.write().unwrap());
    }

    /// Constant copy detached from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_array(self.value())
    }

    /// Pointer identity: true when two handles share storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn maybe_check_nan(&self, op: &'static str) {
        if nan_checks_enabled() {
            let v = self.inner.values.read().unwrap();
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                panic!("non-finite value {bad} produced by op `{op}`");
            }
        }
    }

    fn accumulate_grad(&self, delta: Array2<f64>) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.lock().unwrap();
        match &mut *g {
            Some(acc) => *acc += &delta,
            None => *g = Some(delta),
        }
    }

    /// Take the accumulated gradient, leaving the slot empty. Producer
    /// records call this so intermediate gradients are freed as the
    /// backward sweep proceeds.
    fn take_grad(&self) -> Option<Array2<f64>> {
        self.inner.grad.lock().unwrap().take()
    }
}

type Record = Box<dyn FnOnce()>;

thread_local! {
    static TAPE: RefCell<Vec<Record>> = const { RefCell::new(Vec::new()) };
    static RECORDING: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

pub(crate) fn is_recording() -> bool {
    RECORDING.with(|r| r.get())
}

fn push_record(rec: Record) {
    TAPE.with(|t| t.borrow_mut().push(rec));
}

/// Number of records on this thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().len())
}

/// Drop every record on this thread's tape without running it.
pub fn clear_tape() {
    TAPE.with(|t| t.borrow_mut().clear());
}

/// Run `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = RECORDING.with(|r| r.replace(false));
    let out = f();
    RECORDING.with(|r| r.set(prev));
    out
}

/// Reverse sweep from a scalar loss.
///
/// Seeds the loss gradient with 1, replays the tape in reverse record order,
/// and clears the tape. Every `requires_grad` leaf reachable from the loss
/// holds its accumulated gradient afterwards.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.shape() != (1, 1) {
        clear_tape();
        return Err(Error::ShapeMismatch {
            op: "backward",
            detail: format!("loss must be scalar, got {:?}", loss.shape()),
        });
    }
    if tape_len() == 0 {
        return Err(Error::EmptyInput {
            op: "backward",
            detail: "tape is empty".into(),
        });
    }
    loss.accumulate_grad(Array2::from_elem((1, 1), 1.0));
    let records = TAPE.with(|t| std::mem::take(&mut *t.borrow_mut()));
    for rec in records.into_iter().rev() {
        rec();
    }
    Ok(())
}

/// Output wiring shared by every op: marks the output `requires_grad` and
/// pushes the backward record only when recording and some input needs it.
fn finish_op(
    op: &'static str,
    values: Array2<f64>,
    inputs_need_grad: bool,
    make_record: impl FnOnce(Tensor) -> Record,
) -> Tensor {
    let tracked = is_recording() && inputs_need_grad;
    let out = Tensor::new(values, tracked);
    out.maybe_check_nan(op);
    if tracked {
        push_record(make_record(out.clone()));
    }
    out
}
