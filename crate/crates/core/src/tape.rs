use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::ops::conv::{self, NdSpec};
use crate::ops::linalg;
use crate::ops::norm;
use crate::ops::resample;
use crate::ops::shuffle;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::{NodeRef, Tensor};

/// Operand snapshot kept inside a node record. Holds the data `Arc` and the
/// producing node id, never a `Tensor` (that would cycle through the tape).
pub(crate) struct Saved<T: Scalar> {
    pub data: Arc<Vec<T>>,
    pub shape: Shape,
    pub node: Option<usize>,
}

impl<T: Scalar> Saved<T> {
    pub fn of(t: &Tensor<T>) -> Self {
        Saved {
            data: t.data_arc(),
            shape: t.shape().clone(),
            node: t.node_id(),
        }
    }
}

pub(crate) enum OpRec<T: Scalar> {
    Leaf,
    /// y = scale * x + shift; shift needs no record.
    Affine { x: Saved<T>, scale: T },
    Add { a: Saved<T>, b: Saved<T> },
    Sub { a: Saved<T>, b: Saved<T> },
    Mul { a: Saved<T>, b: Saved<T> },
    /// x: [N,C,sp...] * map: [N,1,sp...] broadcast over channels.
    MulChan { x: Saved<T>, map: Saved<T> },
    Div { a: Saved<T>, b: Saved<T> },
    Relu { x: Saved<T> },
    Sigmoid { y: Arc<Vec<T>>, x_node: Option<usize>, x_numel: usize },
    Matmul { a: Saved<T>, b: Saved<T> },
    Transpose { x: Saved<T> },
    Reshape { x: Saved<T> },
    Concat { parts: Vec<Saved<T>>, axis: usize },
    SumAll { x: Saved<T> },
    MeanAll { x: Saved<T> },
    Conv { input: Saved<T>, weight: Saved<T>, bias_node: Option<usize>, bias_numel: usize, spec: NdSpec },
    Pool { x: Saved<T>, nc: usize, in_sp: [usize; 3], out_sp: [usize; 3] },
    Resize { x: Saved<T>, nc: usize, in_sp: [usize; 3], out_sp: [usize; 3] },
    /// to_space: big-channel side -> small-channel side (depth-to-space).
    Shuffle { x: Saved<T>, n: usize, c_small: usize, factors: [usize; 3], sp_big: [usize; 3], to_space: bool },
    InstanceNorm {
        x_node: Option<usize>,
        gamma: Saved<T>,
        beta_node: Option<usize>,
        xhat: Arc<Vec<T>>,
        inv: Arc<Vec<T>>,
        batch: usize,
        channels: usize,
        k: usize,
    },
}

pub(crate) struct NodeRec<T: Scalar> {
    pub shape: Shape,
    pub op: OpRec<T>,
}

struct TapeInner<T: Scalar> {
    nodes: RefCell<Vec<NodeRec<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
}

/// Append-only differentiation graph. Inputs always precede outputs, so a
/// single reverse sweep visits every node exactly once.
///
/// A tape is single-threaded; independent tapes may live on different
/// threads concurrently.
pub struct Tape<T: Scalar> {
    inner: Rc<TapeInner<T>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                grads: RefCell::new(Vec::new()),
            }),
        }
    }

    /// Register a differentiable leaf sharing `t`'s data buffer.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push(t.shape().clone(), OpRec::Leaf);
        Tensor::from_arc(t.data_arc(), t.shape().clone(), Some(NodeRef { tape: self.clone(), id }))
    }

    pub fn leaf_from_vec(&self, data: Vec<T>, dims: &[usize]) -> Result<Tensor<T>> {
        let t = Tensor::from_vec(data, dims)?;
        Ok(self.leaf(&t))
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub(crate) fn push(&self, shape: Shape, op: OpRec<T>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(NodeRec { shape, op });
        nodes.len() - 1
    }

    pub(crate) fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn is_leaf(&self, id: usize) -> bool {
        matches!(self.inner.nodes.borrow()[id].op, OpRec::Leaf)
    }

    pub(crate) fn grad_of(&self, id: usize) -> Option<Vec<T>> {
        self.inner.grads.borrow().get(id).and_then(|g| g.clone())
    }

    pub(crate) fn backward_from(&self, start: usize) -> Result<()> {
        let nodes = self.inner.nodes.borrow();
        let mut grads = self.inner.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }

        {
            let slot = ensure(&mut grads, start, nodes[start].shape.numel());
            slot[0] = slot[0] + T::one();
        }

        for id in (0..=start).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let rec = &nodes[id];
            backward_node(rec, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(())
    }
}

fn ensure<'a, T: Scalar>(grads: &'a mut Vec<Option<Vec<T>>>, id: usize, numel: usize) -> &'a mut Vec<T> {
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); numel]);
    }
    slot.as_mut().unwrap()
}

fn add_into<T: Scalar>(
    grads: &mut Vec<Option<Vec<T>>>,
    node: Option<usize>,
    numel: usize,
    f: impl FnOnce(&mut [T]),
) {
    if let Some(id) = node {
        f(ensure(grads, id, numel));
    }
}

fn backward_node<T: Scalar>(rec: &NodeRec<T>, g: &[T], grads: &mut Vec<Option<Vec<T>>>) {
    match &rec.op {
        OpRec::Leaf => {}
        OpRec::Affine { x, scale } => {
            let s = *scale;
            add_into(grads, x.node, x.shape.numel(), |dx| {
                for i in 0..dx.len() {
                    dx[i] = dx[i] + s * g[i];
                }
            });
        }
        OpRec::Add { a, b } => {
            add_into(grads, a.node, a.shape.numel(), |da| {
                for i in 0..da.len() {
                    da[i] = da[i] + g[i];
                }
            });
            add_into(grads, b.node, b.shape.numel(), |db| {
                for i in 0..db.len() {
                    db[i] = db[i] + g[i];
                }
            });
        }
        OpRec::Sub { a, b } => {
            add_into(grads, a.node, a.shape.numel(), |da| {
                for i in 0..da.len() {
                    da[i] = da[i] + g[i];
                }
            });
            add_into(grads, b.node, b.shape.numel(), |db| {
                for i in 0..db.len() {
                    db[i] = db[i] - g[i];
                }
            });
        }
        OpRec::Mul { a, b } => {
            add_into(grads, a.node, a.shape.numel(), |da| {
                let bv = &b.data;
                for i in 0..da.len() {
                    da[i] = da[i] + g[i] * bv[i];
                }
            });
            add_into(grads, b.node, b.shape.numel(), |db| {
                let av = &a.data;
                for i in 0..db.len() {
                    db[i] = db[i] + g[i] * av[i];
                }
            });
        }
        OpRec::MulChan { x, map } => {
            let dims = x.shape.dims();
            let (n, c) = (dims[0], dims[1]);
            let sp: usize = dims[2..].iter().product();
            add_into(grads, x.node, x.shape.numel(), |dx| {
                let m = &map.data;
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * sp;
                        let mbase = bn * sp;
                        for s in 0..sp {
                            dx[base + s] = dx[base + s] + g[base + s] * m[mbase + s];
                        }
                    }
                }
            });
            add_into(grads, map.node, map.shape.numel(), |dm| {
                let xv = &x.data;
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * sp;
                        let mbase = bn * sp;
                        for s in 0..sp {
                            dm[mbase + s] = dm[mbase + s] + g[base + s] * xv[base + s];
                        }
                    }
                }
            });
        }
        OpRec::Div { a, b } => {
            add_into(grads, a.node, a.shape.numel(), |da| {
                let bv = &b.data;
                for i in 0..da.len() {
                    da[i] = da[i] + g[i] / bv[i];
                }
            });
            add_into(grads, b.node, b.shape.numel(), |db| {
                let (av, bv) = (&a.data, &b.data);
                for i in 0..db.len() {
                    db[i] = db[i] - g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        OpRec::Relu { x } => {
            add_into(grads, x.node, x.shape.numel(), |dx| {
                let xv = &x.data;
                for i in 0..dx.len() {
                    // subgradient at exactly zero is zero
                    if xv[i] > T::zero() {
                        dx[i] = dx[i] + g[i];
                    }
                }
            });
        }
        OpRec::Sigmoid { y, x_node, x_numel } => {
            add_into(grads, *x_node, *x_numel, |dx| {
                for i in 0..dx.len() {
                    let yi = y[i];
                    dx[i] = dx[i] + g[i] * yi * (T::one() - yi);
                }
            });
        }
        OpRec::Matmul { a, b } => {
            let (m, k) = (a.shape.dims()[0], a.shape.dims()[1]);
            let n = b.shape.dims()[1];
            add_into(grads, a.node, a.shape.numel(), |da| {
                linalg::matmul_backward_a(g, &b.data, m, k, n, da);
            });
            add_into(grads, b.node, b.shape.numel(), |db| {
                linalg::matmul_backward_b(g, &a.data, m, k, n, db);
            });
        }
        OpRec::Transpose { x } => {
            let (m, k) = (x.shape.dims()[0], x.shape.dims()[1]);
            add_into(grads, x.node, x.shape.numel(), |dx| {
                for i in 0..m {
                    for j in 0..k {
                        dx[i * k + j] = dx[i * k + j] + g[j * m + i];
                    }
                }
            });
        }
        OpRec::Reshape { x } => {
            add_into(grads, x.node, x.shape.numel(), |dx| {
                for i in 0..dx.len() {
                    dx[i] = dx[i] + g[i];
                }
            });
        }
        OpRec::Concat { parts, axis } => {
            let axis = *axis;
            let out_dims = rec.shape.dims();
            let outer: usize = out_dims[..axis].iter().product();
            let inner: usize = out_dims[axis + 1..].iter().product();
            let out_axis = out_dims[axis];
            let mut offset = 0usize;
            for p in parts {
                let p_axis = p.shape.dims()[axis];
                add_into(grads, p.node, p.shape.numel(), |dp| {
                    for o in 0..outer {
                        let src = (o * out_axis + offset) * inner;
                        let dst = o * p_axis * inner;
                        let len = p_axis * inner;
                        for i in 0..len {
                            dp[dst + i] = dp[dst + i] + g[src + i];
                        }
                    }
                });
                offset += p_axis;
            }
        }
        OpRec::SumAll { x } => {
            let g0 = g[0];
            add_into(grads, x.node, x.shape.numel(), |dx| {
                for v in dx.iter_mut() {
                    *v = *v + g0;
                }
            });
        }
        OpRec::MeanAll { x } => {
            let numel = x.shape.numel();
            let g0 = g[0] * T::from_f64(1.0 / numel as f64);
            add_into(grads, x.node, numel, |dx| {
                for v in dx.iter_mut() {
                    *v = *v + g0;
                }
            });
        }
        OpRec::Conv { input, weight, bias_node, bias_numel, spec } => {
            add_into(grads, input.node, input.shape.numel(), |dx| {
                conv::conv_backward_input(g, &weight.data, spec, dx);
            });
            add_into(grads, weight.node, weight.shape.numel(), |dw| {
                conv::conv_backward_weight(g, &input.data, spec, dw);
            });
            add_into(grads, *bias_node, *bias_numel, |db| {
                conv::conv_backward_bias(g, spec, db);
            });
        }
        OpRec::Pool { x, nc, in_sp, out_sp } => {
            add_into(grads, x.node, x.shape.numel(), |dx| {
                resample::pool_backward(g, *nc, *in_sp, *out_sp, dx);
            });
        }
        OpRec::Resize { x, nc, in_sp, out_sp } => {
            add_into(grads, x.node, x.shape.numel(), |dx| {
                resample::resize_backward(g, *nc, *in_sp, *out_sp, dx);
            });
        }
        OpRec::Shuffle { x, n, c_small, factors, sp_big, to_space } => {
            add_into(grads, x.node, x.shape.numel(), |dx| {
                if *to_space {
                    // forward was big -> small, so grads flow small -> big
                    shuffle::shuffle_small_to_big(g, dx, *n, *c_small, *factors, *sp_big);
                } else {
                    shuffle::shuffle_big_to_small(g, dx, *n, *c_small, *factors, *sp_big);
                }
            });
        }
        OpRec::InstanceNorm { x_node, gamma, beta_node, xhat, inv, batch, channels, k } => {
            let numel = batch * channels * k;
            add_into(grads, *x_node, numel, |dx| {
                norm::instance_norm_backward_input(g, xhat, inv, &gamma.data, *batch, *channels, *k, dx);
            });
            add_into(grads, gamma.node, *channels, |dg| {
                norm::instance_norm_backward_gamma(g, xhat, *batch, *channels, *k, dg);
            });
            add_into(grads, *beta_node, *channels, |db| {
                norm::instance_norm_backward_beta(g, *batch, *channels, *k, db);
            });
        }
    }
}
