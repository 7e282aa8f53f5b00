use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::element::Element;
use super::ops::Op;
use super::AutodiffError;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static STRICT_FINITE: Cell<bool> = const { Cell::new(false) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let previous = GRAD_ENABLED.with(|g| g.replace(false));
        Self { previous }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

pub(crate) struct GradModeGuard {
    previous: bool,
}

impl GradModeGuard {
    pub(crate) fn set(enabled: bool) -> Self {
        let previous = GRAD_ENABLED.with(|g| g.replace(enabled));
        Self { previous }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// When set, every primitive rejects non-finite inputs on the current thread.
pub fn set_strict_finite(strict: bool) -> bool {
    STRICT_FINITE.with(|s| s.replace(strict))
}

pub(crate) fn strict_finite() -> bool {
    STRICT_FINITE.with(|s| s.get())
}

pub(crate) struct Node<T: Element> {
    pub(crate) op: Op<T>,
    pub(crate) parents: Vec<Tensor<T>>,
}

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// Immutable dense tensor, optionally attached to a computation graph.
///
/// Cloning is cheap: clones share storage and graph history.
pub struct Tensor<T: Element = f32> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.inner.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.node.as_ref().map(|n| n.op.name()))
            .field("data", &preview)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::raw(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![T::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![], vec![value], false, None)
    }

    /// A trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self, AutodiffError> {
        Ok(Self::from_vec(shape, data)?.requires_grad_(true))
    }

    pub(crate) fn raw(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    /// Builds the result of a primitive, recording it on the graph when any
    /// parent requires grad and recording is enabled.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>, parents: &[&Tensor<T>]) -> Self {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            let parents = parents.iter().map(|&p| p.clone()).collect();
            Self::raw(shape, data, true, Some(Node { op, parents }))
        } else {
            Self::raw(shape, data, false, None)
        }
    }

    /// Returns a leaf sharing no history, with the given grad flag.
    pub fn requires_grad_(self, requires_grad: bool) -> Self {
        match Arc::try_unwrap(self.inner) {
            Ok(inner) => Self::raw(inner.shape, inner.data, requires_grad, None),
            Err(shared) => Self::raw(shared.shape.clone(), shared.data.clone(), requires_grad, None),
        }
    }

    pub fn detach(&self) -> Self {
        Self::raw(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T, AutodiffError> {
        if self.numel() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.inner.data[0])
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .data()
            .iter()
            .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        Tensor::raw(self.shape().to_vec(), data, false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}
