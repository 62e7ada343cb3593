//! Dense 64-bit float tensors with a reverse-mode autodiff tape.
//!
//! Tensors are rank 1-3, row-major, cheap to clone (shared handles). A [`Tape`]
//! records every operation whose output needs a gradient; [`Tape::backward`]
//! replays the records in reverse and accumulates `d(loss)/d(tensor)` into each
//! reachable tensor's grad buffer. Tapes are rebuilt per forward pass, so
//! variable sentence lengths and graph shapes cost nothing.
//!
//! A tape and its tensors are confined to one thread. Parameter *data* can be
//! shared across threads through `Arc` snapshots (see [`Tensor::data_arc`] and
//! [`Tensor::from_shared`]); each thread then builds its own tape against the
//! shared buffers.

mod check;
mod ops;

pub use check::{grad_check, grad_check_params};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicUsize = AtomicUsize::new(1);

/// Elementwise activation kinds understood by [`Tape::activate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    /// `x if x >= 0 else slope * x`; the derivative at exactly 0 is the slope.
    LeakyRelu(f64),
}

struct TensorInner {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Arc<Vec<f64>>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// A shared handle to a dense f64 tensor.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

/// Borrow guard over a tensor's data.
pub struct DataRef<'a>(Ref<'a, Arc<Vec<f64>>>);

impl Deref for DataRef<'_> {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        self.0.as_slice()
    }
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::contract(format!(
            "tensor rank must be 1-3, got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::contract(format!(
            "tensor dimensions must be positive, got shape {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::contract(format!(
            "shape {shape:?} expects {numel} elements, data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Internal constructor for op outputs: shape already validated by the op.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::build(shape, Arc::new(data), requires_grad)
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        validate_shape(shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor::build(shape.to_vec(), Arc::new(data), false))
    }

    /// A trainable tensor (participates in backward).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                id: t.inner.id,
                shape: t.inner.shape.clone(),
                data: RefCell::new(t.data_arc()),
                requires_grad: true,
                grad: RefCell::new(None),
            }),
        })
    }

    /// Wrap an existing shared buffer without copying.
    pub fn from_shared(shape: &[usize], data: Arc<Vec<f64>>, requires_grad: bool) -> Result<Tensor> {
        validate_shape(shape, data.len())?;
        Ok(Tensor::build(shape.to_vec(), data, requires_grad))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![1.0; n])
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(&[1], vec![v])
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Rows/cols of a rank-2 tensor; rank-1 is treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.inner.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => (s[0], s[1..].iter().product()),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> DataRef<'_> {
        DataRef(self.inner.data.borrow())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().as_slice().to_vec()
    }

    /// Snapshot of the backing buffer; cheap, and safe to send across threads.
    pub fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.inner.data.borrow())
    }

    /// Replace the tensor's contents (same shape).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::contract(format!(
                "set_data length {} != numel {}",
                data.len(),
                self.numel()
            )));
        }
        *self.inner.data.borrow_mut() = Arc::new(data);
        Ok(())
    }

    /// Mutate the contents in place. Copies on write if a snapshot is live.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut arc = self.inner.data.borrow_mut();
        f(Arc::make_mut(&mut arc).as_mut_slice());
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Gradient accumulated by backward passes, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Per-backward-pass gradient buffers keyed by tensor id.
pub(crate) struct GradStore {
    entries: HashMap<usize, (Tensor, Vec<f64>)>,
}

impl GradStore {
    fn new() -> GradStore {
        GradStore {
            entries: HashMap::new(),
        }
    }

    fn seed(&mut self, t: &Tensor) {
        self.entries
            .insert(t.id(), (t.clone(), vec![1.0; t.numel()]));
    }

    fn take_output_grad(&self, t: &Tensor) -> Option<Vec<f64>> {
        self.entries.get(&t.id()).map(|(_, g)| g.clone())
    }

    /// Get-or-create the buffer for `t` and let the caller add into it.
    pub(crate) fn with_entry(&mut self, t: &Tensor, f: impl FnOnce(&mut [f64])) {
        let entry = self
            .entries
            .entry(t.id())
            .or_insert_with(|| (t.clone(), vec![0.0; t.numel()]));
        f(&mut entry.1);
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct TapeOp {
    output: Tensor,
    backward: BackwardFn,
}

/// Ordered record of differentiable operations.
pub struct Tape {
    ops: RefCell<Vec<TapeOp>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            ops: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that computes forward values but records nothing; backward on it
    /// is a contract error. Used for evaluation and finite differences.
    pub fn no_grad() -> Tape {
        Tape {
            ops: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.borrow().is_empty()
    }

    pub(crate) fn record(&self, output: &Tensor, backward: BackwardFn) {
        if self.recording && output.requires_grad() {
            self.ops.borrow_mut().push(TapeOp {
                output: output.clone(),
                backward,
            });
        }
    }

    pub(crate) fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    /// Reverse pass from a scalar loss recorded on this tape.
    ///
    /// Every `requires_grad` tensor reachable from the loss gets
    /// `d(loss)/d(tensor)` *added* into its grad buffer, so repeated calls
    /// without zeroing accumulate.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let ops = self.ops.borrow();
        let position = ops.iter().rposition(|op| op.output.id() == loss.id());
        let last = match position {
            Some(i) => i,
            None => {
                return Err(Error::contract(
                    "loss was not produced on this tape",
                ))
            }
        };

        let mut store = GradStore::new();
        store.seed(loss);
        for op in ops[..=last].iter().rev() {
            if let Some(g) = store.take_output_grad(&op.output) {
                (op.backward)(&g, &mut store);
            }
        }
        drop(ops);

        for (tensor, grad) in store.entries.into_values() {
            if tensor.requires_grad() {
                tensor.accumulate_grad(&grad);
            }
        }
        Ok(())
    }
}
