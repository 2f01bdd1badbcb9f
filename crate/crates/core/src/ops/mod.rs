pub(crate) mod conv;
pub(crate) mod linalg;
pub(crate) mod norm;
pub(crate) mod resample;
pub(crate) mod shuffle;

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::{OpRec, Saved};
use crate::tensor::{NodeRef, Tensor};
use crate::Tape;

/// Shared tape of the node-carrying inputs, if any. Errors when two inputs
/// come from different graphs.
pub(crate) fn result_tape<T: Scalar>(
    op: &'static str,
    inputs: &[&Tensor<T>],
) -> Result<Option<Tape<T>>> {
    let mut tape: Option<&Tape<T>> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            match tape {
                None => tape = Some(&node.tape),
                Some(existing) => {
                    if !existing.same_tape(&node.tape) {
                        return Err(TensorError::contract(op, "operands belong to different graphs"));
                    }
                }
            }
        }
    }
    Ok(tape.cloned())
}

pub(crate) fn attach<T: Scalar>(
    tape: Option<Tape<T>>,
    data: Vec<T>,
    shape: Shape,
    op: OpRec<T>,
) -> Tensor<T> {
    match tape {
        Some(tp) => {
            let id = tp.push(shape.clone(), op);
            Tensor::from_parts(data, shape, Some(NodeRef { tape: tp, id }))
        }
        None => Tensor::from_parts(data, shape, None),
    }
}

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        return Ok(());
    }
    let (da, db) = (a.dims(), b.dims());
    if da.len() != db.len() {
        return Err(TensorError::contract(
            op,
            format!("rank mismatch: {} vs {}", a.shape(), b.shape()),
        ));
    }
    let axis = da.iter().zip(db).position(|(x, y)| x != y).unwrap_or(0);
    Err(TensorError::ShapeMismatch {
        op,
        axis,
        expected: da[axis].to_string(),
        got: db[axis].to_string(),
    })
}

impl<T: Scalar> Tensor<T> {
    /// y = scale * x + shift, elementwise.
    pub fn affine(&self, scale: T, shift: T) -> Result<Tensor<T>> {
        let tape = result_tape("affine", &[self])?;
        let data: Vec<T> = self.data().iter().map(|&v| scale * v + shift).collect();
        Ok(attach(tape, data, self.shape().clone(), OpRec::Affine { x: Saved::of(self), scale }))
    }

    pub fn mul_scalar(&self, s: T) -> Result<Tensor<T>> {
        self.affine(s, T::zero())
    }

    pub fn add_scalar(&self, s: T) -> Result<Tensor<T>> {
        self.affine(T::one(), s)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("add", self, other)?;
        let tape = result_tape("add", &[self, other])?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(attach(
            tape,
            data,
            self.shape().clone(),
            OpRec::Add { a: Saved::of(self), b: Saved::of(other) },
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("sub", self, other)?;
        let tape = result_tape("sub", &[self, other])?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(attach(
            tape,
            data,
            self.shape().clone(),
            OpRec::Sub { a: Saved::of(self), b: Saved::of(other) },
        ))
    }

    /// Elementwise product. As a special case a `[N,1,spatial...]` map may be
    /// multiplied with a `[N,C,spatial...]` tensor (broadcast over channels),
    /// in either argument order.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() == other.shape() {
            let tape = result_tape("mul", &[self, other])?;
            let data: Vec<T> = self
                .data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| a * b)
                .collect();
            return Ok(attach(
                tape,
                data,
                self.shape().clone(),
                OpRec::Mul { a: Saved::of(self), b: Saved::of(other) },
            ));
        }
        if is_channel_broadcast(other, self) {
            return mul_chan(self, other);
        }
        if is_channel_broadcast(self, other) {
            return mul_chan(other, self);
        }
        check_same_shape("mul", self, other)?;
        unreachable!("check_same_shape rejects differing shapes");
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("div", self, other)?;
        let tape = result_tape("div", &[self, other])?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a / b)
            .collect();
        Ok(attach(
            tape,
            data,
            self.shape().clone(),
            OpRec::Div { a: Saved::of(self), b: Saved::of(other) },
        ))
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        let tape = result_tape("relu", &[self])?;
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Ok(attach(tape, data, self.shape().clone(), OpRec::Relu { x: Saved::of(self) }))
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        let tape = result_tape("sigmoid", &[self])?;
        let data: Vec<T> = self.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let arc = Arc::new(data);
        let rec = OpRec::Sigmoid {
            y: Arc::clone(&arc),
            x_node: self.node_id(),
            x_numel: self.numel(),
        };
        match tape {
            Some(tp) => {
                let shape = self.shape().clone();
                let id = tp.push(shape.clone(), rec);
                Ok(Tensor::from_arc(arc, shape, Some(NodeRef { tape: tp, id })))
            }
            None => Ok(Tensor::from_arc(arc, self.shape().clone(), None)),
        }
    }

    /// 2-D matrix product: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().rank() != 2 || other.shape().rank() != 2 {
            return Err(TensorError::contract(
                "matmul",
                format!("expects rank-2 operands, got {} and {}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.dims()[0], self.dims()[1]);
        let (k2, n) = (other.dims()[0], other.dims()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                axis: 0,
                expected: k.to_string(),
                got: k2.to_string(),
            });
        }
        let tape = result_tape("matmul", &[self, other])?;
        let data = linalg::matmul_forward(self.data(), other.data(), m, k, n);
        Ok(attach(
            tape,
            data,
            Shape::new(&[m, n]),
            OpRec::Matmul { a: Saved::of(self), b: Saved::of(other) },
        ))
    }

    /// 2-D transpose.
    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.shape().rank() != 2 {
            return Err(TensorError::contract(
                "transpose2d",
                format!("expects a rank-2 tensor, got {}", self.shape()),
            ));
        }
        let (m, k) = (self.dims()[0], self.dims()[1]);
        let x = self.data();
        let mut data = vec![T::zero(); m * k];
        for i in 0..m {
            for j in 0..k {
                data[j * m + i] = x[i * k + j];
            }
        }
        let tape = result_tape("transpose2d", &[self])?;
        Ok(attach(tape, data, Shape::new(&[k, m]), OpRec::Transpose { x: Saved::of(self) }))
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let shape = Shape::new(dims);
        if shape.numel() != self.numel() {
            return Err(TensorError::contract(
                "reshape",
                format!("cannot reshape {} into {}", self.shape(), shape),
            ));
        }
        let tape = result_tape("reshape", &[self])?;
        let data = self.data().to_vec();
        Ok(attach(tape, data, shape, OpRec::Reshape { x: Saved::of(self) }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let tape = result_tape("sum_all", &[self])?;
        let s = linalg::sum_unrolled(self.data());
        Ok(attach(tape, vec![s], Shape::new(&[1]), OpRec::SumAll { x: Saved::of(self) }))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let tape = result_tape("mean_all", &[self])?;
        let s = linalg::sum_unrolled(self.data()) * T::from_f64(1.0 / self.numel() as f64);
        Ok(attach(tape, vec![s], Shape::new(&[1]), OpRec::MeanAll { x: Saved::of(self) }))
    }

    /// Concatenate along `axis`. All other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(TensorError::contract("concat", "needs at least one operand"));
        }
        let rank = parts[0].shape().rank();
        if axis >= rank {
            return Err(TensorError::contract(
                "concat",
                format!("axis {} out of range for rank {}", axis, rank),
            ));
        }
        let mut out_dims = parts[0].dims().to_vec();
        for (pi, p) in parts.iter().enumerate().skip(1) {
            if p.shape().rank() != rank {
                return Err(TensorError::contract(
                    "concat",
                    format!("operand {} has rank {}, expected {}", pi, p.shape().rank(), rank),
                ));
            }
            for (ax, (&d0, &dp)) in out_dims.iter().zip(p.dims()).enumerate() {
                if ax != axis && d0 != dp {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        axis: ax,
                        expected: d0.to_string(),
                        got: dp.to_string(),
                    });
                }
            }
        }
        out_dims[axis] = parts.iter().map(|p| p.dims()[axis]).sum();
        let shape = Shape::new(&out_dims);

        let outer: usize = out_dims[..axis].iter().product();
        let inner: usize = out_dims[axis + 1..].iter().product();
        let out_axis = out_dims[axis];
        let mut data = vec![T::zero(); shape.numel()];
        let mut offset = 0usize;
        for p in parts {
            let p_axis = p.dims()[axis];
            let pd = p.data();
            for o in 0..outer {
                let dst = (o * out_axis + offset) * inner;
                let src = o * p_axis * inner;
                let len = p_axis * inner;
                data[dst..dst + len].copy_from_slice(&pd[src..src + len]);
            }
            offset += p_axis;
        }

        let refs: Vec<&Tensor<T>> = parts.to_vec();
        let tape = result_tape("concat", &refs)?;
        let saved = parts.iter().map(|p| Saved::of(p)).collect();
        Ok(attach(tape, data, shape, OpRec::Concat { parts: saved, axis }))
    }
}

fn is_channel_broadcast<T: Scalar>(map: &Tensor<T>, x: &Tensor<T>) -> bool {
    let (md, xd) = (map.dims(), x.dims());
    md.len() == xd.len()
        && md.len() >= 3
        && md[0] == xd[0]
        && md[1] == 1
        && xd[1] >= 1
        && md[2..] == xd[2..]
}

fn mul_chan<T: Scalar>(x: &Tensor<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = result_tape("mul", &[x, map])?;
    let dims = x.dims();
    let (n, c) = (dims[0], dims[1]);
    let sp: usize = dims[2..].iter().product();
    let (xv, mv) = (x.data(), map.data());
    let mut data = vec![T::zero(); x.numel()];
    for bn in 0..n {
        for ch in 0..c {
            let base = (bn * c + ch) * sp;
            let mbase = bn * sp;
            for s in 0..sp {
                data[base + s] = xv[base + s] * mv[mbase + s];
            }
        }
    }
    Ok(attach(
        tape,
        data,
        x.shape().clone(),
        OpRec::MulChan { x: Saved::of(x), map: Saved::of(map) },
    ))
}

pub(crate) fn stable_sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
