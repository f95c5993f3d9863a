//! Elementwise binary ops with singleton-axis broadcasting, plus scalar ops.

use super::{BackwardOp, Elem, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Elem>(self, a: T, b: T) -> T {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
        }
    }
}

/// Broadcast result shape for equal-rank operands: each axis must match
/// or be 1 on one side.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        })
        .collect()
}

/// Strides into `shape` when iterated over `out_shape` coordinates;
/// broadcast axes get stride 0.
fn effective_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let real = super::strides(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(real)
        .map(|((&ext, &out), s)| if ext == out { s } else { 0 })
        .collect()
}

/// Apply `f(a_elem, b_elem)` over the broadcast iteration space.
fn map_broadcast<T: Elem>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = effective_strides(a_shape, out_shape);
    let sb = effective_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        out.push(f(a[ia], b[ib]));
        // advance coordinates, updating the flat operand offsets in step
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `src` (laid out as `out_shape`) into a buffer of `dst_shape`,
/// collapsing every broadcast axis. The explicit-tiling adjoint.
pub(crate) fn reduce_to_shape<T: Elem>(src: &[T], out_shape: &[usize], dst_shape: &[usize]) -> Vec<T> {
    if dst_shape == out_shape {
        return src.to_vec();
    }
    let numel_dst: usize = dst_shape.iter().product();
    let mut dst = vec![T::zero(); numel_dst];
    let sd = effective_strides(dst_shape, out_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut id = 0usize;
    for &v in src {
        dst[id] = dst[id] + v;
        for d in (0..rank).rev() {
            coords[d] += 1;
            id += sd[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            id -= sd[d] * out_shape[d];
        }
    }
    dst
}

struct BinBackward {
    kind: BinKind,
    out_shape: Vec<usize>,
}

impl<T: Elem> BackwardOp<T> for BinBackward {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let a = &inputs[0];
        let b = &inputs[1];
        let ga = if a.requires_grad() {
            let full = match self.kind {
                BinKind::Add | BinKind::Sub => grad_out.to_vec(),
                BinKind::Mul => map_broadcast(
                    grad_out,
                    &self.out_shape,
                    b.data(),
                    b.shape(),
                    &self.out_shape,
                    |g, bv| g * bv,
                ),
                BinKind::Div => map_broadcast(
                    grad_out,
                    &self.out_shape,
                    b.data(),
                    b.shape(),
                    &self.out_shape,
                    |g, bv| g / bv,
                ),
            };
            Some(reduce_to_shape(&full, &self.out_shape, a.shape()))
        } else {
            None
        };
        let gb = if b.requires_grad() {
            let full = match self.kind {
                BinKind::Add => grad_out.to_vec(),
                BinKind::Sub => grad_out.iter().map(|&g| -g).collect(),
                BinKind::Mul => map_broadcast(
                    grad_out,
                    &self.out_shape,
                    a.data(),
                    a.shape(),
                    &self.out_shape,
                    |g, av| g * av,
                ),
                BinKind::Div => {
                    // d(a/b)/db = -a / b^2
                    let ga_scaled = map_broadcast(
                        grad_out,
                        &self.out_shape,
                        a.data(),
                        a.shape(),
                        &self.out_shape,
                        |g, av| g * av,
                    );
                    map_broadcast(
                        &ga_scaled,
                        &self.out_shape,
                        b.data(),
                        b.shape(),
                        &self.out_shape,
                        |g, bv| -g / (bv * bv),
                    )
                }
            };
            Some(reduce_to_shape(&full, &self.out_shape, b.shape()))
        } else {
            None
        };
        vec![ga, gb]
    }
}

impl<T: Elem> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinKind) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(kind.name(), self.shape(), other.shape())?;
        let data = map_broadcast(
            self.data(),
            self.shape(),
            other.data(),
            other.shape(),
            &out_shape,
            |a, b| kind.apply(a, b),
        );
        if kind == BinKind::Div && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "div" });
        }
        Ok(Tensor::from_op(
            data,
            out_shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(BinBackward { kind, out_shape }),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinKind::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let cv = T::from_f64(c);
        let data = self.data().iter().map(|&x| x + cv).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(AddScalarBackward),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let cv = T::from_f64(c);
        let data = self.data().iter().map(|&x| x * cv).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(MulScalarBackward { c }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-1.0)
    }
}

struct AddScalarBackward;

impl<T: Elem> BackwardOp<T> for AddScalarBackward {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![inputs[0].requires_grad().then(|| grad_out.to_vec())]
    }
}

struct MulScalarBackward {
    c: f64,
}

impl<T: Elem> BackwardOp<T> for MulScalarBackward {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let cv = T::from_f64(self.c);
        vec![inputs[0]
            .requires_grad()
            .then(|| grad_out.iter().map(|&g| g * cv).collect())]
    }
}
