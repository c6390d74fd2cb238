//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a buffer plus optional autodiff
//! history. Operations record a node when gradients are being tracked; calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into the leaves that require them.
//!
//! The graph is single-threaded by construction. Detached tensors are plain
//! value buffers.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod reduce;
pub mod shape_ops;
pub mod softmax;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when operations should record autodiff nodes.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with gradient tracking disabled (restored on exit, panic-safe).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _guard = Guard(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

/// Product of extents.
pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Per-pass adjoint buffers keyed by tensor id. Backward closures route their
/// output adjoint into the entries of the parents that need gradients.
pub struct Adjoints<S: Scalar> {
    map: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> Adjoints<S> {
    fn new() -> Self {
        Adjoints {
            map: HashMap::new(),
        }
    }

    /// Zero-initialized adjoint buffer for `t`, created on first use.
    pub fn entry(&mut self, t: &Tensor<S>) -> &mut [S] {
        let numel = t.numel();
        self.map
            .entry(t.id())
            .or_insert_with(|| vec![S::zero(); numel])
            .as_mut_slice()
    }

    /// Adds `delta` elementwise into the adjoint of `t`.
    pub fn add(&mut self, t: &Tensor<S>, delta: &[S]) {
        let buf = self.entry(t);
        for (g, d) in buf.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    fn take(&mut self, id: u64) -> Option<Vec<S>> {
        self.map.remove(&id)
    }
}

pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &mut Adjoints<S>)>;

pub(crate) struct Node<S: Scalar> {
    parents: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    node: Option<Node<S>>,
}

/// Shared handle onto a dense buffer with optional autodiff history.
pub struct Tensor<S: Scalar>(Rc<RefCell<Inner<S>>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!(
                    "shape {:?} implies {} elements, buffer holds {}",
                    shape,
                    numel_of(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::new_leaf(shape, data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_leaf(shape.to_vec(), vec![S::zero(); numel_of(shape)], false)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::new_leaf(shape.to_vec(), vec![value; numel_of(shape)], false)
    }

    pub fn scalar(value: S) -> Self {
        Self::new_leaf(vec![1], vec![value], false)
    }

    fn new_leaf(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        Tensor(Rc::new(RefCell::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: None,
            requires_grad,
            node: None,
        })))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(RefCell::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: None,
            requires_grad: true,
            node: Some(Node { parents, backward }),
        })))
    }

    /// Marks this leaf as a differentiation target. Panics if the tensor
    /// already has autodiff history.
    pub fn requires_grad(self) -> Self {
        {
            let mut inner = self.0.borrow_mut();
            assert!(
                inner.node.is_none(),
                "requires_grad may only be set on leaf tensors"
            );
            inner.requires_grad = true;
        }
        self
    }

    pub fn id(&self) -> u64 {
        self.0.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn needs_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.borrow().node.is_none()
    }

    /// Borrow of the underlying buffer. Do not hold across graph mutation.
    pub fn data(&self) -> Ref<'_, [S]> {
        Ref::map(self.0.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.borrow().data.clone()
    }

    pub fn item(&self) -> S {
        let inner = self.0.borrow();
        assert_eq!(inner.data.len(), 1, "item() requires a scalar tensor");
        inner.data[0]
    }

    /// Overwrites the buffer in place (shape unchanged). Used by the
    /// optimizer and the finite-difference prober.
    pub fn set_data(&self, data: &[S]) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    /// Adds `scale * delta` into the buffer in place.
    pub fn apply_delta(&self, delta: &[S], scale: S) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.data.len(), delta.len());
        for (x, d) in inner.data.iter_mut().zip(delta) {
            *x = *x + scale * *d;
        }
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.borrow().grad.clone()
    }

    /// Explicitly clears the gradient buffer. Gradients are never zeroed
    /// implicitly.
    pub fn zero_grad(&self) {
        let mut inner = self.0.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            g.fill(S::zero());
        }
    }

    pub fn accumulate_grad(&self, delta: &[S]) {
        let mut inner = self.0.borrow_mut();
        assert!(inner.requires_grad, "gradient on a non-grad tensor");
        assert_eq!(inner.data.len(), delta.len());
        match inner.grad.as_mut() {
            Some(g) => {
                for (g, d) in g.iter_mut().zip(delta) {
                    *g = *g + *d;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    /// A fresh leaf with a copy of this buffer and no history.
    pub fn detach(&self) -> Tensor<S> {
        let inner = self.0.borrow();
        Self::new_leaf(inner.shape.clone(), inner.data.clone(), false)
    }

    /// Reverse-mode differentiation from a scalar. Gradients accumulate into
    /// every reachable leaf with `requires_grad`; repeated calls add up.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: self.numel(),
            });
        }

        // Iterative DFS postorder over parents.
        let mut topo: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                topo.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            let inner = t.0.borrow();
            if let Some(node) = &inner.node {
                for p in &node.parents {
                    if !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut adjoints = Adjoints::new();
        adjoints.map.insert(self.id(), vec![S::one()]);

        for t in topo.iter().rev() {
            let Some(adjoint) = adjoints.take(t.id()) else {
                continue;
            };
            let inner = t.0.borrow();
            match &inner.node {
                Some(node) => (node.backward)(&adjoint, &mut adjoints),
                None => {
                    if inner.requires_grad {
                        drop(inner);
                        t.accumulate_grad(&adjoint);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parents that participate in gradient routing for an op over `inputs`.
pub(crate) fn grad_parents<S: Scalar>(inputs: &[&Tensor<S>]) -> Vec<Tensor<S>> {
    inputs
        .iter()
        .filter(|t| t.needs_grad())
        .map(|t| (*t).clone())
        .collect()
}

/// True when the op over `inputs` should record a node.
pub(crate) fn tracking<S: Scalar>(inputs: &[&Tensor<S>]) -> bool {
    grad_enabled() && inputs.iter().any(|t| t.needs_grad())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::elementwise::{add, mul};
    use crate::tensor::reduce::sum;

    #[test]
    fn from_vec_checks_shape_product() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0f64; 5]);
        assert!(err.is_err());
        let ok = Tensor::from_vec(vec![2, 3], vec![0.0f64; 6]);
        assert!(ok.is_ok());
    }

    #[test]
    fn grad_never_allocated_without_requires_grad() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = sum(&x);
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_of_sum_routes_ones() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .requires_grad();
        let y = sum(&x);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_at_three_is_six() {
        let x = Tensor::<f64>::scalar(3.0).requires_grad();
        let y = mul(&x, &x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_is_additive() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![2.0, -1.5])
            .unwrap()
            .requires_grad();
        let y = sum(&mul(&x, &x).unwrap());
        y.backward().unwrap();
        let first = x.grad().unwrap();
        y.backward().unwrap();
        let second = x.grad().unwrap();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0])
            .unwrap()
            .requires_grad();
        let y = add(&x, &x).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn no_grad_suppresses_history() {
        let x = Tensor::<f64>::scalar(2.0).requires_grad();
        let y = no_grad(|| mul(&x, &x).unwrap());
        assert!(y.is_leaf());
        assert!(!y.needs_grad());
    }

    #[test]
    fn zero_grad_is_explicit() {
        let x = Tensor::<f64>::scalar(3.0).requires_grad();
        let y = mul(&x, &x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }
}
