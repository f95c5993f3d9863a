//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap-to-clone handle onto an immutable, row-major
//! (last axis fastest) buffer. Tensors produced by operations carry a
//! reference to the node that created them; calling [`Tensor::backward`]
//! on a scalar walks the recorded graph once in reverse topological order
//! and populates the gradient of every reachable leaf that requires one.
//!
//! The element type is generic: `f32` for training and inference, `f64`
//! for finite-difference gradient checking.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

mod activation;
mod conv;
mod elementwise;
mod linalg;

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Elem:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule attached to an op-produced tensor.
///
/// `grad_out` is d(loss)/d(output) flattened in the output's layout; the
/// rule returns d(loss)/d(input_i) for each recorded input, or `None` for
/// inputs that do not require gradients.
pub(crate) trait BackwardOp<T: Elem>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>>;
}

pub(crate) struct Node<T: Elem> {
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) op: Box<dyn BackwardOp<T>>,
}

struct Inner<T: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    node: Option<Node<T>>,
    grad: RwLock<Option<Vec<T>>>,
}

/// Dense N-dimensional array participating in a differentiation graph.
pub struct Tensor<T: Elem> {
    inner: Arc<Inner<T>>,
}

impl<T: Elem> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Elem> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<T: Elem> Tensor<T> {
    fn new_inner(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                node,
                grad: RwLock::new(None),
            }),
        }
    }

    /// Leaf tensor from raw data; errors when `data.len() != product(shape)`.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::new_inner(
            shape.to_vec(),
            Arc::new(data),
            false,
            None,
        ))
    }

    /// Leaf parameter: like [`Tensor::from_vec`] but tracked for gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.with_requires_grad(true))
    }

    /// Same data, new leaf with the given `requires_grad` flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::new_inner(
            self.inner.shape.clone(),
            Arc::clone(&self.inner.data),
            requires_grad,
            None,
        )
    }

    /// Detached view: same data, no graph history, no gradient tracking.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_inner(
            shape.to_vec(),
            Arc::new(vec![T::zero(); numel]),
            false,
            None,
        )
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_inner(shape.to_vec(), Arc::new(vec![value; numel]), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::new_inner(vec![1], Arc::new(vec![value]), false, None)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel).map(f).collect();
        Self::new_inner(shape.to_vec(), Arc::new(data), false, None)
    }

    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        op: Box<dyn BackwardOp<T>>,
    ) -> Self {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = if requires_grad {
            Some(Node { inputs, op })
        } else {
            None
        };
        Self::new_inner(shape, Arc::new(data), requires_grad, node)
    }

    /// Op output that shares the input's buffer (reshape-style views).
    pub(crate) fn view_op(
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        op: Box<dyn BackwardOp<T>>,
    ) -> Self {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = if requires_grad {
            Some(Node { inputs, op })
        } else {
            None
        };
        Self::new_inner(shape, data, requires_grad, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.inner.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True for tensors created directly from data rather than by an op.
    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        Ok(self.inner.data[0])
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds on axis {i}");
            flat = flat * ext + ix;
        }
        self.inner.data[flat]
    }

    /// Gradient populated by the most recent [`Tensor::backward`] call.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.read().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().expect("grad lock poisoned") = None;
    }

    fn set_grad(&self, g: Vec<T>) {
        *self.inner.grad.write().expect("grad lock poisoned") = Some(g);
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Max |a - b| over all elements; shapes must match exactly.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut m = T::zero();
        for (a, b) in self.data().iter().zip(other.data()) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        Ok(m)
    }

    /// Reverse-mode differentiation from a scalar tensor.
    ///
    /// Visits every reachable node exactly once. Leaf tensors with
    /// `requires_grad` get their gradient slot replaced (not accumulated
    /// across separate `backward` calls).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS for a deterministic topological order.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut state: HashMap<u64, bool> = HashMap::new(); // id -> fully processed
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                topo.push(t);
                continue;
            }
            match state.get(&t.id()) {
                Some(_) => continue,
                None => {
                    state.insert(t.id(), true);
                }
            }
            if !t.requires_grad() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !state.contains_key(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for t in topo.iter().rev() {
            let g = match grads.remove(&t.id()) {
                Some(g) => g,
                None => continue,
            };
            match &t.inner.node {
                Some(node) => {
                    let input_grads = node.op.backward(&g, &node.inputs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        debug_assert_eq!(ig.len(), input.numel(), "{} grad len", node.op.name());
                        match grads.get_mut(&input.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&ig) {
                                    *a = *a + *b;
                                }
                            }
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
                None => t.set_grad(g),
            }
        }
        Ok(())
    }
}

// Dropping a deep graph recursively would recurse once per node; flatten
// the walk so long op chains cannot overflow the stack.
impl<T: Elem> Drop for Inner<T> {
    fn drop(&mut self) {
        if let Some(node) = self.node.take() {
            let mut queue: Vec<Tensor<T>> = node.inputs;
            while let Some(t) = queue.pop() {
                if let Some(inner) = Arc::into_inner(t.inner) {
                    // Sole owner: steal its inputs instead of recursing.
                    let mut inner = inner;
                    if let Some(n) = inner.node.take() {
                        queue.extend(n.inputs);
                    }
                }
            }
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Decompose a shape around one axis: (outer, len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(vec![1.0f64, 2.0], &[3]).unwrap_err();
        assert!(matches!(err, Error::DataLength { .. }));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let w = Tensor::param(vec![1.0f64, -2.0, 3.0, 0.5], &[2, 2]).unwrap();
        let loss = w.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_half_square_sum_is_identity() {
        let w = Tensor::param(vec![1.0f64, -2.0, 3.0], &[3]).unwrap();
        let loss = w.mul(&w).unwrap().sum().unwrap().mul_scalar(0.5);
        loss.backward().unwrap();
        let g = w.grad().unwrap();
        for (gi, wi) in g.iter().zip(w.data()) {
            assert_eq!(gi, wi);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::param(vec![1.0f64, 2.0], &[2]).unwrap();
        let y = w.mul_scalar(2.0);
        assert!(matches!(
            y.backward().unwrap_err(),
            Error::NonScalarLoss { .. }
        ));
    }

    #[test]
    fn shared_input_accumulates_once_per_use() {
        // loss = sum(x * x) -> grad 2x.
        let x = Tensor::param(vec![3.0f64, -1.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -2.0]);
    }

    #[test]
    fn deep_graph_drops_without_overflow() {
        let x = Tensor::param(vec![1.0f32; 4], &[4]).unwrap();
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.add_scalar(1.0);
        }
        drop(y);
    }

    #[test]
    fn detach_stops_gradient_flow() {
        let x = Tensor::param(vec![2.0f64], &[1]).unwrap();
        let y = x.mul_scalar(3.0).detach();
        let loss = y.mul(&y).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
