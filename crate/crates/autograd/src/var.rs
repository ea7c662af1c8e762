use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::Tensor;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule of a recorded operation.
///
/// `needs[i]` tells whether the gradient for `parents[i]` is wanted; rules may
/// return `None` for parents that are not needed.
pub(crate) trait Backward: Send + Sync {
    fn backward(&self, parents: &[Var], out: &Var, grad: &Var, needs: &[bool]) -> Vec<Option<Var>>;
}

pub(crate) struct Node {
    pub(crate) id: usize,
    pub(crate) value: Tensor,
    pub(crate) parents: Vec<Var>,
    pub(crate) rule: Option<Box<dyn Backward>>,
    pub(crate) requires_grad: bool,
}

/// A tensor value together with the operation that produced it.
///
/// Cloning a `Var` is cheap; the value is shared.
#[derive(Clone)]
pub struct Var(pub(crate) Arc<Node>);

impl Var {
    fn new_node(value: Tensor, parents: Vec<Var>, rule: Option<Box<dyn Backward>>, requires_grad: bool) -> Var {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            parents,
            rule,
            requires_grad,
        }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: Tensor) -> Var {
        Self::new_node(value, Vec::new(), None, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Self::new_node(value, Vec::new(), None, false)
    }

    pub fn scalar(v: f64) -> Var {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Var {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Records an operation result. Parents are kept only when recording is
    /// enabled and at least one parent requires a gradient.
    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, rule: impl Backward + 'static) -> Var {
        if is_grad_enabled() && parents.iter().any(|p| p.requires_grad()) {
            Self::new_node(value, parents, Some(Box::new(rule)), true)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn into_value(self) -> Tensor {
        match Arc::try_unwrap(self.0) {
            Ok(mut node) => std::mem::take(&mut node.value),
            Err(shared) => shared.value.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub(crate) fn parents(&self) -> &[Var] {
        &self.0.parents
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

// Long op chains would otherwise drop recursively through `parents`.
impl Drop for Node {
    fn drop(&mut self) {
        let mut stack: Vec<Var> = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}
