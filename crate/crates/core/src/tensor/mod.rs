//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Operations that touch a
//! tensor requiring gradients record their lineage (inputs plus a closure
//! mapping the output gradient to input gradients); [`Tensor::backward`]
//! walks that graph once in reverse topological order and accumulates into
//! the `grad` of every reachable leaf.

mod conv;
mod element;
mod ops;
pub mod snapshot;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use conv::{
    avg_pool2d, batch_norm, conv2d, global_avg_pool, max_pool2d, BatchNormMode, BatchStats,
};
pub(crate) use element::gemm;
pub use element::Element;
pub use ops::{
    add, concat, forward_op, l2_normalize, l2_normalize_strict, matmul, mean, mse, mul, relu,
    reshape, scale, softmax_cross_entropy, sum, Op, L2_EPSILON,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("lineage of `{0}` was already consumed by an earlier backward pass")]
    LineageConsumed(&'static str),
    #[error("loss does not depend on any tensor requiring gradients")]
    NoLineage,
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("l2_normalize: zero vector at index {0}")]
    ZeroNorm(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording lineage for any operation.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Option<Vec<E>>>>;

struct Lineage<E: Element> {
    op: &'static str,
    inputs: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    op: Cell<Option<&'static str>>,
    lineage: RefCell<Option<Lineage<E>>>,
}

pub struct Tensor<E: Element = f32>(Rc<Node<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &E::NAME)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.get())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    fn make(data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op: Cell::new(None),
            lineage: RefCell::new(None),
        }))
    }

    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) || shape.contains(&0) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::make(data, shape.to_vec(), false))
    }

    /// A leaf that accumulates gradients.
    pub fn parameter(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Self::make(t.to_vec(), shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(vec![E::zero(); numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::make(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: E) -> Self {
        Self::make(vec![value], vec![1], false)
    }

    /// Builds the result of an operation, recording lineage when any input
    /// requires gradients and grad mode is on.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: &[&Tensor<E>],
        backward: impl Fn(&[E]) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let out = Self::make(data, shape, track);
        out.0.op.set(Some(op));
        if track {
            *out.0.lineage.borrow_mut() = Some(Lineage {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(backward),
            });
        }
        out
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the producing operation, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.get()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.0.data.borrow()
    }

    /// Mutable access for optimizers and EMA updates. Mutating a tensor whose
    /// value was captured by a pending graph invalidates that graph's gradients.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the value with no lineage.
    pub fn detach(&self) -> Self {
        Self::make(self.to_vec(), self.0.shape.clone(), false)
    }

    fn accumulate_grad(&self, g: &[E]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    fn is_leaf(&self) -> bool {
        self.0.op.get().is_none()
    }

    /// Backpropagates from a scalar loss, consuming the graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(TensorError::NoLineage);
        }
        if self.is_leaf() {
            self.accumulate_grad(&[E::one()]);
            return Ok(());
        }

        // Post-order DFS over interior nodes; reversed it is a topological order.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            let lineage = node.0.lineage.borrow();
            let Some(lineage) = lineage.as_ref() else {
                return Err(TensorError::LineageConsumed(node.op_name().unwrap_or("?")));
            };
            stack.push((node.clone(), true));
            for input in lineage.inputs.iter().rev() {
                if input.requires_grad() && !input.is_leaf() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }

        let mut pending: HashMap<u64, Vec<E>> = HashMap::new();
        pending.insert(self.id(), vec![E::one()]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            let lineage = node
                .0
                .lineage
                .borrow_mut()
                .take()
                .expect("checked during traversal");
            let grads = (lineage.backward)(&g);
            debug_assert_eq!(grads.len(), lineage.inputs.len(), "{}", lineage.op);
            for (input, grad) in lineage.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(grad.len(), input.numel(), "{} grad length", lineage.op);
                if input.is_leaf() {
                    input.accumulate_grad(&grad);
                } else {
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a = *a + b),
                        None => {
                            pending.insert(input.id(), grad);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Converts to another precision as a fresh leaf with the same `requires_grad`.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self
            .data()
            .iter()
            .map(|v| F::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        Tensor::<F>::make(data, self.shape().to_vec(), self.requires_grad())
    }
}

/// A named trainable (or EMA-tracked) tensor.
#[derive(Clone, Debug)]
pub struct Parameter<E: Element = f32> {
    pub name: String,
    pub value: Tensor<E>,
    /// Whether weight decay applies. Only conv and linear weights decay.
    pub decay: bool,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>, decay: bool) -> Self {
        Self {
            name: name.into(),
            value,
            decay,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let n = 7;
        let x = Tensor::<f64>::parameter(vec![0.5; n], &[n]).unwrap();
        mean(&x).backward().unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::<f64>::parameter(vec![3.0], &[1]).unwrap();
        scale(&x, 2.0).backward().unwrap();
        scale(&x, 2.0).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        x.zero_grad();
        scale(&x, 2.0).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_consumed() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = relu(&x);
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss(_))));
        let loss = sum(&y);
        loss.backward().unwrap();
        assert!(matches!(
            loss.backward(),
            Err(TensorError::LineageConsumed(_))
        ));
    }

    #[test]
    fn shared_subgraph_is_visited_once() {
        // loss = sum(h) + sum(h) with h = relu(x): each path contributes once.
        let x = Tensor::<f64>::parameter(vec![1.0, -1.0, 2.0], &[3]).unwrap();
        let h = relu(&x);
        let loss = add(&sum(&h), &sum(&h)).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 0.0, 2.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f32>::parameter(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| scale(&x, 3.0));
        assert!(!y.requires_grad());
        assert!(is_grad_enabled());
        assert!(matches!(y.backward(), Err(TensorError::NoLineage)));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::<f32>::from_vec(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![], &[0]).is_err());
    }
}
