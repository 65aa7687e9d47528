//! Dense N-dimensional tensors with tape-based reverse-mode autodiff.
//!
//! A [`Tensor`] is a cheap-to-clone handle (`Rc` inside) over row-major
//! data plus an optional gradient buffer. Operations live in [`ops`] and
//! [`nn`]; each records a backward closure on the [`Tape`] when the tape
//! is recording. Calling [`Tape::backward`] replays the closures in
//! reverse execution order and clears the tape.

pub mod check;
pub mod gemm;
pub mod nn;
pub mod ops;
mod scalar;

pub use scalar::Scalar;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};

struct Inner<T> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    /// True for requires_grad leaves and for outputs of recorded ops;
    /// gradients only propagate into tracked tensors.
    tracked: Cell<bool>,
}

pub struct Tensor<T> {
    inner: Rc<Inner<T>>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                tracked: Cell::new(false),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![v; numel]).expect("consistent shape")
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(&[1], vec![v]).expect("scalar")
    }

    /// Trainable leaf: requires_grad set, gradient propagation enabled.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                tracked: Cell::new(true),
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn tracked(&self) -> bool {
        self.inner.tracked.get()
    }

    pub(crate) fn mark_tracked(&self) {
        self.inner.tracked.set(true);
    }

    /// Borrow the gradient buffer, allocating zeros on first use.
    pub(crate) fn grad_mut(&self) -> RefMut<'_, Vec<T>> {
        {
            let mut g = self.inner.grad.borrow_mut();
            if g.is_none() {
                *g = Some(vec![T::zero(); self.numel()]);
            }
        }
        RefMut::map(self.inner.grad.borrow_mut(), |g| {
            g.as_mut().expect("just allocated")
        })
    }

    pub(crate) fn grad_ref(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.inner.grad.borrow();
        if g.is_none() {
            return None;
        }
        Some(Ref::map(g, |g| g.as_ref().expect("checked")))
    }

    /// True if any element is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.inner.data.borrow().iter().any(|v| !v.is_finite())
    }
}

type BackwardFn = Box<dyn FnOnce()>;

/// Ordered record of executed operations with their backward rules.
pub struct Tape {
    nodes: RefCell<Vec<BackwardFn>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Recording tape, for training.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// Non-recording tape, for inference.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(false),
        }
    }

    pub fn recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn push(&self, f: BackwardFn) {
        self.nodes.borrow_mut().push(f);
    }

    /// Record `out` as the output of an op with the given backward rule.
    pub(crate) fn record<T: Scalar>(&self, out: &Tensor<T>, f: BackwardFn) {
        if self.recording() {
            out.mark_tracked();
            self.push(f);
        }
    }

    /// Seeds the scalar loss with gradient 1, replays all backward rules
    /// in reverse execution order, then clears the tape.
    pub fn backward<T: Scalar>(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        loss.grad_mut()[0] = T::one();
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        for node in nodes.into_iter().rev() {
            node();
        }
        Ok(())
    }

    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }
}

/// Accumulate `src`, scaled elementwise, into a tensor's grad buffer.
pub(crate) fn accum_grad<T: Scalar>(t: &Tensor<T>, src: &[T]) {
    let mut g = t.grad_mut();
    debug_assert_eq!(g.len(), src.len());
    for (gv, &sv) in g.iter_mut().zip(src.iter()) {
        *gv = *gv + sv;
    }
}

/// Concrete aliases for the two precision modes.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
