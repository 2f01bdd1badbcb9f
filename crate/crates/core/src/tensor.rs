use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::Tape;

/// Handle into the differentiation graph a tensor was recorded on.
#[derive(Clone)]
pub(crate) struct NodeRef<T: Scalar> {
    pub tape: Tape<T>,
    pub id: usize,
}

/// N-dimensional array of scalars, immutable after creation.
///
/// A tensor built from constants carries no graph node. Tensors produced
/// by operations on graph leaves (see [`Tape::leaf`]) record themselves on
/// the tape so [`Tensor::backward`] can replay the graph in reverse.
///
/// Cloning is cheap: the data buffer is shared via `Arc`.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    pub(crate) shape: Shape,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) node: Option<NodeRef<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims);
        if shape.numel() != data.len() {
            return Err(TensorError::contract(
                "from_vec",
                format!("shape {} needs {} values, got {}", shape, shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims);
        let n = shape.numel();
        Tensor { shape, data: Arc::new(vec![T::zero(); n]), node: None }
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let shape = Shape::new(dims);
        let n = shape.numel();
        Tensor { shape, data: Arc::new(vec![v; n]), node: None }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(v: T) -> Self {
        Tensor::full(&[1], v)
    }

    pub(crate) fn from_parts(data: Vec<T>, shape: Shape, node: Option<NodeRef<T>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data: Arc::new(data), node }
    }

    pub(crate) fn from_arc(data: Arc<Vec<T>>, shape: Shape, node: Option<NodeRef<T>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data, node }
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::contract(
                "item",
                format!("expected a single element, got shape {}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Same data, no graph node. The result is safe to move across threads.
    pub fn detach(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// Whether this tensor is recorded on a differentiation graph.
    pub fn has_node(&self) -> bool {
        self.node.is_some()
    }

    /// Whether this tensor is a graph leaf (created via [`Tape::leaf`]).
    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some(n) => n.tape.is_leaf(n.id),
            None => false,
        }
    }

    /// Gradient accumulated by [`Tensor::backward`], if any reached this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let node = self.node.as_ref()?;
        let g = node.tape.grad_of(node.id)?;
        Some(Tensor { shape: self.shape.clone(), data: Arc::new(g), node: None })
    }

    /// Reverse-mode sweep from a scalar loss; accumulates into leaf grads.
    /// Repeated calls without a fresh tape add up.
    pub fn backward(&self) -> Result<()> {
        let node = self.node.as_ref().ok_or_else(|| {
            TensorError::contract("backward", "tensor has no graph node")
        })?;
        if self.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must have exactly one element, got shape {}", self.shape),
            ));
        }
        node.tape.backward_from(node.id)
    }

    /// Elementwise cast; drops any graph node.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), node: None }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.to_f64()).collect()
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={}, tracked={})", self.shape, self.node.is_some())
    }
}
