//! Minimal reverse-mode autodiff on dense row-major tensors.
//!
//! The design is a dynamic graph: every operation allocates a fresh node that
//! records its parents and a backward closure. Calling [`Tensor::backward`] on
//! a scalar loss walks the graph in reverse topological order and accumulates
//! gradients into every reachable tensor that requires them. Leaf gradients
//! accumulate across calls (an explicit [`Tensor::zero_grad`] is required
//! between steps); non-leaf gradients are scratch state and are cleared after
//! each traversal.
//!
//! Nodes that do not require gradients record neither parents nor a backward
//! closure, so pure inference keeps no history and runs in constant graph
//! memory.
//!
//! Everything is generic over [`Scalar`] so the same operations run in `f32`
//! for training and in `f64` for finite-difference gradient checking.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use num_traits::Float;

mod adam;
mod conv;
pub mod gradcheck;
pub mod io;
mod layers;
mod norm;
mod ops;

pub use adam::Adam;
pub use conv::{conv_output_size, conv_transpose_output_size};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Init, Linear};
pub(crate) use layers::StateMap;

/// Element type bound for tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + fmt::Display
    + fmt::Debug
    + Default
    + 'static
{
    /// Human-readable dtype tag ("f32" / "f64").
    const DTYPE: &'static str;

    /// Lossy conversion from `f64` (panics only on NaN-free cast failure,
    /// which cannot happen for float targets).
    fn fl(v: f64) -> Self {
        num_traits::cast(v).expect("f64 -> scalar cast")
    }

    /// Widening conversion to `f64`.
    fn f64(self) -> f64 {
        num_traits::cast(self).expect("scalar -> f64 cast")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>])>;

/// Storage plus graph bookkeeping for one tensor.
pub(crate) struct Node<T: Scalar> {
    pub(crate) data: Vec<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A dense row-major tensor participating in the autodiff graph.
///
/// `Clone` is shallow: clones share the same storage and gradient buffer,
/// which is what optimizers and graph edges rely on.
pub struct Tensor<T: Scalar> {
    inner: Rc<RefCell<Node<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.inner.borrow();
        write!(
            f,
            "Tensor<{}>(shape={:?}, requires_grad={})",
            T::DTYPE,
            n.shape,
            n.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    /// Leaf tensor that does not require gradients.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor that requires gradients (a trainable parameter).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Self::leaf(data, shape, true)
    }

    fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Self {
        assert!(!shape.is_empty(), "tensor shape must have at least one dim");
        let numel: usize = shape.iter().product();
        assert!(
            data.len() == numel,
            "data length {} does not match shape {:?} (numel {})",
            data.len(),
            shape,
            numel
        );
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                data,
                shape: shape.to_vec(),
                grad: None,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    /// All-zeros leaf.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(vec![T::zero(); numel], shape)
    }

    /// All-ones leaf.
    pub fn ones(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(vec![T::one(); numel], shape)
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(v: T) -> Self {
        Self::new(vec![v], &[1])
    }

    /// Internal constructor for op results. Parents and the backward closure
    /// are only recorded when some parent requires gradients, so inference
    /// graphs keep no history.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[Tensor<T>]) + 'static,
    ) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            data.len() == numel,
            "op produced data length {} for shape {:?}",
            data.len(),
            shape
        );
        let requires = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                data,
                shape,
                grad: None,
                requires_grad: requires,
                parents: if requires { parents } else { Vec::new() },
                backward: if requires {
                    Some(Box::new(backward))
                } else {
                    None
                },
            })),
        }
    }

    pub(crate) fn node_ref(&self) -> Ref<'_, Node<T>> {
        self.inner.borrow()
    }

    /// Shape as a fresh vector.
    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copy of the underlying data.
    pub fn data(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Run a closure over the raw data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// The single element of a `[1]`-shaped tensor.
    pub fn item(&self) -> T {
        let n = self.inner.borrow();
        assert!(
            n.data.len() == 1,
            "item() requires a single-element tensor, got shape {:?}",
            n.shape
        );
        n.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    /// Overwrite the stored values in place (used by optimizers and loaders).
    pub fn set_data(&self, new: &[T]) {
        let mut n = self.inner.borrow_mut();
        assert!(
            new.len() == n.data.len(),
            "set_data length {} does not match tensor numel {}",
            new.len(),
            n.data.len()
        );
        n.data.copy_from_slice(new);
    }

    /// Apply an in-place update to the stored values.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.inner.borrow_mut().data);
    }

    /// Drop the accumulated gradient.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Whether gradients will be accumulated into this tensor.
    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Toggle gradient tracking on a leaf.
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.borrow_mut().requires_grad = value;
    }

    /// A new leaf holding a copy of this tensor's data, cut off from the
    /// graph (`requires_grad == false`). Backward stops here.
    pub fn detach(&self) -> Tensor<T> {
        let n = self.inner.borrow();
        Tensor::new(n.data.clone(), &n.shape)
    }

    /// True for tensors with no recorded parents.
    pub fn is_leaf(&self) -> bool {
        self.inner.borrow().parents.is_empty()
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[T]) {
        if !self.requires_grad() {
            return;
        }
        let mut n = self.inner.borrow_mut();
        let len = n.data.len();
        assert!(
            contrib.len() == len,
            "gradient contribution length {} does not match tensor numel {}",
            contrib.len(),
            len
        );
        let g = n.grad.get_or_insert_with(|| vec![T::zero(); len]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += *ci;
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Seeds the loss gradient with 1, propagates through every node that
    /// requires gradients, accumulates into leaves, then clears the scratch
    /// gradients of non-leaf nodes. Panics if the tensor is not a single
    /// element or does not require gradients.
    pub fn backward(&self) {
        {
            let n = self.inner.borrow();
            assert!(
                n.data.len() == 1,
                "backward() requires a scalar loss, got shape {:?}",
                n.shape
            );
            assert!(
                n.requires_grad,
                "backward() called on a tensor that does not require gradients"
            );
        }
        self.accumulate_grad(&[T::one()]);

        let order = topo_order(self);
        for node in order.iter().rev() {
            let inner = node.inner.borrow();
            if let (Some(f), Some(g)) = (&inner.backward, &inner.grad) {
                f(g, &inner.parents);
            }
        }
        // Non-leaf gradients are per-sweep scratch; clearing them keeps
        // repeated backward calls additive on leaves only.
        for node in &order {
            let mut inner = node.inner.borrow_mut();
            if !inner.parents.is_empty() {
                inner.grad = None;
            }
        }
    }
}

/// Iterative post-order DFS over the grad-requiring subgraph: parents appear
/// before children, so reverse iteration is a valid backprop order.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut visited: HashSet<*const RefCell<Node<T>>> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];

    while let Some((node, idx)) = stack.pop() {
        let parent = {
            let inner = node.inner.borrow();
            inner.parents.get(idx).cloned()
        };
        match parent {
            Some(p) => {
                stack.push((node, idx + 1));
                let ptr = Rc::as_ptr(&p.inner) as *const _;
                if !visited.contains(&ptr) && p.requires_grad() {
                    stack.push((p, 0));
                }
            }
            None => {
                let ptr = Rc::as_ptr(&node.inner) as *const _;
                if visited.insert(ptr) {
                    order.push(node);
                }
            }
        }
    }
    order
}
