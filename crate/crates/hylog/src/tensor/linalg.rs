//! Matrix products, shape manipulation and reductions.

use std::sync::Arc;

use super::{axis_split, BackwardOp, Elem, Tensor};
use crate::error::{Error, Result};

/// Raw row-major matmul: a[m,k] * b[k,n] -> [m,n].
///
/// Two loop orders: broadcast rows of `b` for wide outputs, and
/// dot-products against a transposed `b` when the output is narrow
/// (attention's AV product with a small head width).
pub(crate) fn matmul_raw<T: Elem>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n < 8 && k >= 16 {
        let bt = transpose_raw(b, k, n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let bcol = &bt[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&av, &bv) in arow.iter().zip(bcol) {
                    acc = acc + av * bv;
                }
                out[i * n + j] = acc;
            }
        }
        return out;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Elem>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// a^T * g for a[m,k], g[m,n] -> [k,n], without materializing a^T
/// (outer-product accumulation; the transpose of a large attention map
/// would dominate the backward pass otherwise).
fn matmul_ta_raw<T: Elem>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    match n {
        1 => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let gv = g[i];
                for (o, &av) in out.iter_mut().zip(arow) {
                    *o = *o + av * gv;
                }
            }
        }
        2 => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let (g0, g1) = (g[2 * i], g[2 * i + 1]);
                for (o, &av) in out.chunks_exact_mut(2).zip(arow) {
                    o[0] = o[0] + av * g0;
                    o[1] = o[1] + av * g1;
                }
            }
        }
        _ => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let grow = &g[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    let orow = &mut out[p * n..(p + 1) * n];
                    for (o, &gv) in orow.iter_mut().zip(grow) {
                        *o = *o + av * gv;
                    }
                }
            }
        }
    }
    out
}

struct MatmulBackward {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Elem> BackwardOp<T> for MatmulBackward {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = &inputs[0];
        let b = &inputs[1];
        let ga = a.requires_grad().then(|| {
            // dA = G * B^T
            let bt = transpose_raw(b.data(), k, n);
            matmul_raw(grad_out, &bt, m, n, k)
        });
        let gb = b.requires_grad().then(|| {
            // dB = A^T * G, fused
            matmul_ta_raw(a.data(), grad_out, m, k, n)
        });
        vec![ga, gb]
    }
}

struct TransposeBackward {
    rows: usize,
    cols: usize,
}

impl<T: Elem> BackwardOp<T> for TransposeBackward {
    fn name(&self) -> &'static str {
        "transpose2d"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![inputs[0]
            .requires_grad()
            .then(|| transpose_raw(grad_out, self.cols, self.rows))]
    }
}

struct ReshapeBackward;

impl<T: Elem> BackwardOp<T> for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        debug_assert_eq!(grad_out.len(), inputs[0].numel());
        vec![inputs[0].requires_grad().then(|| grad_out.to_vec())]
    }
}

struct NarrowBackward {
    axis: usize,
    start: usize,
    len: usize,
}

impl<T: Elem> BackwardOp<T> for NarrowBackward {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        vec![x.requires_grad().then(|| {
            let (outer, ext, inner) = axis_split(x.shape(), self.axis);
            let mut dx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                for j in 0..self.len {
                    let src = (o * self.len + j) * inner;
                    let dst = (o * ext + self.start + j) * inner;
                    dx[dst..dst + inner].copy_from_slice(&grad_out[src..src + inner]);
                }
            }
            dx
        })]
    }
}

struct ConcatBackward {
    axis: usize,
    extents: Vec<usize>,
    out_shape: Vec<usize>,
}

impl<T: Elem> BackwardOp<T> for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (outer, total_ext, inner) = axis_split(&self.out_shape, self.axis);
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(inputs.len());
        let mut offset = 0usize;
        for (input, &ext) in inputs.iter().zip(&self.extents) {
            if input.requires_grad() {
                let mut g = vec![T::zero(); input.numel()];
                for o in 0..outer {
                    for j in 0..ext {
                        let src = (o * total_ext + offset + j) * inner;
                        let dst = (o * ext + j) * inner;
                        g[dst..dst + inner].copy_from_slice(&grad_out[src..src + inner]);
                    }
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += ext;
        }
        grads
    }
}

struct SumBackward {
    numel: usize,
}

impl<T: Elem> BackwardOp<T> for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![inputs[0]
            .requires_grad()
            .then(|| vec![grad_out[0]; self.numel])]
    }
}

impl<T: Elem> Tensor<T> {
    /// Standard product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        if other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(MatmulBackward { m, k, n }),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::RankMismatch {
                op: "transpose2d",
                expected: 2,
                shape: self.shape().to_vec(),
            });
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let data = transpose_raw(self.data(), rows, cols);
        Ok(Tensor::from_op(
            data,
            vec![cols, rows],
            vec![self.clone()],
            Box::new(TransposeBackward { rows, cols }),
        ))
    }

    /// Same data, new shape; shares the underlying buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::DataLength {
                len: self.numel(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::view_op(
            self.data_arc(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(ReshapeBackward),
        ))
    }

    /// Contiguous band `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::geometry(
                "narrow",
                format!(
                    "band {start}..{} out of range on axis {axis} of {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let (outer, ext, inner) = axis_split(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(NarrowBackward { axis, start, len }),
        ))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(xs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = xs.first().ok_or_else(|| {
            Error::geometry("concat", "empty input list".to_string())
        })?;
        if axis >= first.rank() {
            return Err(Error::geometry(
                "concat",
                format!("axis {axis} out of range for rank {}", first.rank()),
            ));
        }
        let mut out_shape = first.shape().to_vec();
        let mut total_ext = 0usize;
        for x in xs {
            if x.rank() != first.rank() {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            for (d, (&a, &b)) in first.shape().iter().zip(x.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: x.shape().to_vec(),
                    });
                }
            }
            total_ext += x.shape()[axis];
        }
        out_shape[axis] = total_ext;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); numel];
        let mut offset = 0usize;
        for x in xs {
            let ext = x.shape()[axis];
            let src = x.data();
            for o in 0..outer {
                let s = o * ext * inner;
                let d = (o * total_ext + offset) * inner;
                data[d..d + ext * inner].copy_from_slice(&src[s..s + ext * inner]);
            }
            offset += ext;
        }
        let extents = xs.iter().map(|x| x.shape()[axis]).collect();
        Ok(Tensor::from_op(
            data,
            out_shape.clone(),
            xs.to_vec(),
            Box::new(ConcatBackward {
                axis,
                extents,
                out_shape,
            }),
        ))
    }

    /// Full reduction to a one-element tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        Ok(Tensor::from_op(
            vec![acc],
            vec![1],
            vec![self.clone()],
            Box::new(SumBackward {
                numel: self.numel(),
            }),
        ))
    }

    /// Mean over all elements.
    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        Ok(self.sum()?.mul_scalar(1.0 / n as f64))
    }
}

#[allow(dead_code)]
pub(crate) fn shared_buffer<T: Elem>(t: &Tensor<T>) -> Arc<Vec<T>> {
    t.data_arc()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0f64 } else { 0.0 });
        let m = Tensor::from_vec((0..9).map(|i| i as f64).collect(), &[3, 3]).unwrap();
        let out = eye.matmul(&m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn one_by_one_matmul() {
        let a = Tensor::from_vec(vec![2.0f64], &[1, 1]).unwrap();
        let b = Tensor::from_vec(vec![3.0f64], &[1, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_inner_extent_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn concat_channel_geometry() {
        let a = Tensor::<f64>::ones(&[8, 8, 4]);
        let b = Tensor::<f64>::zeros(&[8, 8, 4]);
        let c = Tensor::concat(&[a, b], 2).unwrap();
        assert_eq!(c.shape(), &[8, 8, 8]);
        assert_eq!(c.at(&[3, 3, 0]), 1.0);
        assert_eq!(c.at(&[3, 3, 4]), 0.0);
    }

    #[test]
    fn narrow_then_concat_roundtrip() {
        let x = Tensor::from_vec((0..24).map(|i| i as f64).collect(), &[2, 3, 4]).unwrap();
        let left = x.narrow(1, 0, 1).unwrap();
        let right = x.narrow(1, 1, 2).unwrap();
        let back = Tensor::concat(&[left, right], 1).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn reshape_shares_data_and_routes_grad() {
        let x = Tensor::param(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = x.reshape(&[4]).unwrap();
        let loss = y.mul(&y).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
    }
}
