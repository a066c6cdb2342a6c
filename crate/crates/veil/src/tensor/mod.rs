//! Dense row-major tensors with reverse-mode autodiff.
//!
//! A [`Tensor`] is a cheap handle (clones share storage). Operations allocate
//! fresh results and, while gradients are enabled and an operand requires
//! them, record a backward rule onto the per-thread [`tape`]. Gradients are
//! accumulated into `grad` slots by [`Tensor::backward`]; they add across
//! calls until cleared.
//!
//! Handles are sendable between threads; the tape is not. A graph recorded on
//! one thread must be differentiated on that thread.

pub mod conv;
pub mod ops;
pub mod serialize;
pub mod shape;
pub mod tape;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::scalar::Scalar;
use shape::{numel, strides_of};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<S> {
    id: u64,
    shape: Vec<usize>,
    requires_grad: bool,
    /// true when this tensor is the output of an operation (as opposed to a
    /// literal, a leaf variable, or a loaded constant)
    born_of_op: bool,
    /// forward-pass epoch at creation; 0 means "outside any pass"
    born_pass: u64,
    data: RwLock<Vec<S>>,
    grad: RwLock<Option<Vec<S>>>,
    /// (tape epoch, entry index) when attached to the recording tape
    node: RwLock<Option<(u64, usize)>>,
}

pub struct Tensor<S: Scalar> {
    inner: Arc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Tensor<S> {
    fn build(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, born_of_op: bool) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                requires_grad,
                born_of_op,
                born_pass: if born_of_op { tape::current_pass() } else { 0 },
                data: RwLock::new(data),
                grad: RwLock::new(None),
                node: RwLock::new(None),
            }),
        }
    }

    /// Constant tensor from row-major data. Panics if the length does not
    /// match the shape.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Self {
        Self::build(shape.into(), data, false, false)
    }

    /// Rank-0 constant.
    pub fn scalar(v: S) -> Self {
        Self::build(vec![], vec![v], false, false)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::build(shape, vec![S::zero(); n], false, false)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: S) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::build(shape, vec![v; n], false, false)
    }

    /// Leaf variable: participates in gradient recording.
    pub fn variable(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Self {
        Self::build(shape.into(), data, true, false)
    }

    /// Output of an operation; stamps op provenance and the current pass.
    pub(crate) fn op_output(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        Self::build(shape, data, requires_grad, true)
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the row-major data.
    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.read().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.read().iter().map(|v| v.into_f64()).collect()
    }

    /// Sole element of a one-element tensor.
    pub fn item(&self) -> S {
        assert!(
            self.is_scalar(),
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.inner.data.read()[0]
    }

    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let strides = strides_of(self.shape());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            assert!(ix < self.inner.shape[i], "index out of bounds");
            off += ix * strides[i];
        }
        self.inner.data.read()[off]
    }

    /// Overwrite the stored values in place (shape is fixed). This is how
    /// optimizers and samplers update leaf variables; every handle sees it.
    pub fn set_data(&self, data: &[S]) {
        let mut guard = self.inner.data.write();
        assert_eq!(guard.len(), data.len(), "set_data length mismatch");
        guard.copy_from_slice(data);
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.inner.data.read())
    }

    /// Accumulated gradient, if any backward pass has deposited one.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.read().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.write() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut guard = self.inner.grad.write();
        match guard.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => *guard = Some(g.to_vec()),
        }
    }

    pub(crate) fn node(&self) -> Option<(u64, usize)> {
        *self.inner.node.read()
    }

    pub(crate) fn set_node(&self, epoch: u64, index: usize) {
        *self.inner.node.write() = Some((epoch, index));
    }

    /// Detached copy: same values, no grad requirement, no tape attachment.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::from_vec(self.inner.shape.clone(), self.to_vec())
    }

    /// True when this tensor was produced by an operation during the current
    /// forward pass (as opposed to being a stored leaf or a literal). This is
    /// what makes a prior parameter "dynamic".
    pub fn computed_this_pass(&self) -> bool {
        let now = tape::current_pass();
        self.inner.born_of_op && now != 0 && self.inner.born_pass == now
    }

    /// Bitwise equality of shape and stored values.
    pub fn bits_eq(&self, other: &Tensor<S>) -> bool {
        self.shape() == other.shape()
            && self
                .to_f64_vec()
                .iter()
                .zip(other.to_f64_vec().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Propagate gradients from this scalar through the recorded graph. See
    /// [`tape::backward`].
    pub fn backward(&self) -> crate::error::Result<()> {
        tape::backward(self)
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let data = self.inner.data.read();
        let head: Vec<String> = data.iter().take(8).map(|v| format!("{v}")).collect();
        let ellipsis = if data.len() > 8 { ", .." } else { "" };
        write!(
            f,
            "Tensor{:?}[{}{}]{}",
            self.inner.shape,
            head.join(", "),
            ellipsis,
            if self.inner.requires_grad { " grad" } else { "" }
        )
    }
}

impl<S: Scalar> From<f64> for Tensor<S> {
    fn from(v: f64) -> Self {
        Tensor::scalar(S::from_f64(v))
    }
}

impl<S: Scalar> From<&Tensor<S>> for Tensor<S> {
    fn from(t: &Tensor<S>) -> Self {
        t.clone()
    }
}
