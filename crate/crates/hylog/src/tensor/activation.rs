//! Nonlinearities and normalizations.

use std::sync::Arc;

use super::{axis_split, BackwardOp, Elem, Tensor};
use crate::error::{Error, Result};

pub(crate) const LAYERNORM_EPS: f64 = 1e-5;

struct SoftmaxBackward<T: Elem> {
    axis: usize,
    out: Arc<Vec<T>>,
}

impl<T: Elem> BackwardOp<T> for SoftmaxBackward<T> {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let (outer, len, inner) = axis_split(x.shape(), self.axis);
        let y = &self.out;
        let mut dx = vec![T::zero(); x.numel()];
        if inner == 1 {
            let lanes = grad_out
                .chunks_exact(len)
                .zip(y.chunks_exact(len))
                .zip(dx.chunks_exact_mut(len));
            for ((g_lane, y_lane), dx_lane) in lanes {
                let mut dot = T::zero();
                for (&g, &yv) in g_lane.iter().zip(y_lane) {
                    dot = dot + g * yv;
                }
                for ((d, &g), &yv) in dx_lane.iter_mut().zip(g_lane).zip(y_lane) {
                    *d = yv * (g - dot);
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        let idx = base + j * inner;
                        dot = dot + grad_out[idx] * y[idx];
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        dx[idx] = y[idx] * (grad_out[idx] - dot);
                    }
                }
            }
        }
        vec![x.requires_grad().then_some(dx)]
    }
}

struct LayerNormBackward<T: Elem> {
    axis: usize,
    /// (mean, 1/sigma) per lane, saved from the forward pass.
    lane_stats: Vec<(T, T)>,
}

impl<T: Elem> BackwardOp<T> for LayerNormBackward<T> {
    fn name(&self) -> &'static str {
        "layernorm"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let gamma = &inputs[1];
        let (outer, len, inner) = axis_split(x.shape(), self.axis);
        let xd = x.data();
        let gd = gamma.data();
        let n = T::from_f64(len as f64);

        let mut dx = vec![T::zero(); x.numel()];
        let mut dgamma = vec![T::zero(); len];
        let mut dbeta = vec![T::zero(); len];

        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let (mean, inv_sigma) = self.lane_stats[o * inner + i];

                // ghat = g * gamma; dx = inv_sigma*(ghat - mean(ghat) - xhat*mean(ghat*xhat))
                let mut mean_ghat = T::zero();
                let mut mean_ghat_xhat = T::zero();
                for j in 0..len {
                    let idx = base + j * inner;
                    let xhat = (xd[idx] - mean) * inv_sigma;
                    let g = grad_out[idx];
                    let ghat = g * gd[j];
                    mean_ghat = mean_ghat + ghat;
                    mean_ghat_xhat = mean_ghat_xhat + ghat * xhat;
                    dgamma[j] = dgamma[j] + g * xhat;
                    dbeta[j] = dbeta[j] + g;
                }
                mean_ghat = mean_ghat / n;
                mean_ghat_xhat = mean_ghat_xhat / n;
                for (j, &gamma_j) in gd.iter().enumerate() {
                    let idx = base + j * inner;
                    let xhat = (xd[idx] - mean) * inv_sigma;
                    let ghat = grad_out[idx] * gamma_j;
                    dx[idx] = inv_sigma * (ghat - mean_ghat - xhat * mean_ghat_xhat);
                }
            }
        }

        vec![
            x.requires_grad().then_some(dx),
            gamma.requires_grad().then_some(dgamma),
            inputs[2].requires_grad().then_some(dbeta),
        ]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

struct GeluBackward<T: Elem> {
    /// tanh(c (x + a x^3)) saved from the forward pass.
    tanh_u: Vec<T>,
}

impl<T: Elem> BackwardOp<T> for GeluBackward<T> {
    fn name(&self) -> &'static str {
        "gelu"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        vec![x.requires_grad().then(|| {
            x.data()
                .iter()
                .zip(&self.tanh_u)
                .zip(grad_out)
                .map(|((&xv, &t), &g)| {
                    let sech2 = T::one() - t * t;
                    let du = c * (T::one() + three * a * xv * xv);
                    let d = half * (T::one() + t) + half * xv * sech2 * du;
                    g * d
                })
                .collect()
        })]
    }
}

struct ReluBackward;

impl<T: Elem> BackwardOp<T> for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        vec![x.requires_grad().then(|| {
            x.data()
                .iter()
                .zip(grad_out)
                .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                .collect()
        })]
    }
}

struct SigmoidBackward<T: Elem> {
    out: Arc<Vec<T>>,
}

impl<T: Elem> BackwardOp<T> for SigmoidBackward<T> {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![inputs[0].requires_grad().then(|| {
            self.out
                .iter()
                .zip(grad_out)
                .map(|(&y, &g)| g * y * (T::one() - y))
                .collect()
        })]
    }
}

struct SqrtBackward<T: Elem> {
    out: Arc<Vec<T>>,
}

impl<T: Elem> BackwardOp<T> for SqrtBackward<T> {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let half = T::from_f64(0.5);
        vec![inputs[0].requires_grad().then(|| {
            self.out
                .iter()
                .zip(grad_out)
                .map(|(&y, &g)| {
                    // Subgradient 0 at the origin keeps gradients finite.
                    if y == T::zero() {
                        T::zero()
                    } else {
                        g * half / y
                    }
                })
                .collect()
        })]
    }
}

impl<T: Elem> Tensor<T> {
    /// Softmax along `axis`; rows of the result sum to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::geometry(
                "softmax",
                format!("axis {axis} out of range for rank {}", self.rank()),
            ));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let xd = self.data();
        let mut out = vec![T::zero(); self.numel()];
        if inner == 1 {
            // last-axis lanes are contiguous
            for (lane_in, lane_out) in xd.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                let mut m = T::neg_infinity();
                for &v in lane_in {
                    m = m.max(v);
                }
                let mut z = T::zero();
                for (o, &v) in lane_out.iter_mut().zip(lane_in) {
                    let e = (v - m).exp();
                    *o = e;
                    z = z + e;
                }
                let inv = T::one() / z;
                for o in lane_out.iter_mut() {
                    *o = *o * inv;
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut m = T::neg_infinity();
                    for j in 0..len {
                        m = m.max(xd[base + j * inner]);
                    }
                    let mut z = T::zero();
                    for j in 0..len {
                        let idx = base + j * inner;
                        let e = (xd[idx] - m).exp();
                        out[idx] = e;
                        z = z + e;
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        out[idx] = out[idx] / z;
                    }
                }
            }
        }
        let out = Arc::new(out);
        Ok(Tensor::view_op(
            Arc::clone(&out),
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(SoftmaxBackward { axis, out }),
        ))
    }

    /// Layer normalization along `axis` with learned gain/bias vectors of
    /// that axis' extent. Epsilon is fixed at 1e-5.
    pub fn layernorm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::geometry(
                "layernorm",
                format!("axis {axis} out of range for rank {}", self.rank()),
            ));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if gamma.shape() != [len] || beta.shape() != [len] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: vec![len],
                rhs: gamma.shape().to_vec(),
            });
        }
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let eps = T::from_f64(LAYERNORM_EPS);
        let n = T::from_f64(len as f64);
        let mut out = vec![T::zero(); self.numel()];
        let mut lane_stats = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mean = T::zero();
                for j in 0..len {
                    mean = mean + xd[base + j * inner];
                }
                mean = mean / n;
                let mut var = T::zero();
                for j in 0..len {
                    let d = xd[base + j * inner] - mean;
                    var = var + d * d;
                }
                var = var / n;
                let inv_sigma = T::one() / (var + eps).sqrt();
                lane_stats.push((mean, inv_sigma));
                for j in 0..len {
                    let idx = base + j * inner;
                    out[idx] = (xd[idx] - mean) * inv_sigma * gd[j] + bd[j];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(LayerNormBackward { axis, lane_stats }),
        ))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let tanh_u: Vec<T> = self
            .data()
            .iter()
            .map(|&x| (c * (x + a * x * x * x)).tanh())
            .collect();
        let data = self
            .data()
            .iter()
            .zip(&tanh_u)
            .map(|(&x, &t)| half * x * (T::one() + t))
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(GeluBackward { tanh_u }),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(ReluBackward),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let out = Arc::new(data);
        Tensor::view_op(
            Arc::clone(&out),
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(SigmoidBackward { out }),
        )
    }

    /// Elementwise square root; negative inputs are an error.
    pub fn sqrt_elem(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        let data: Vec<T> = self.data().iter().map(|&x| x.sqrt()).collect();
        let out = Arc::new(data);
        Ok(Tensor::view_op(
            Arc::clone(&out),
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(SqrtBackward { out }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::<f64>::zeros(&[2, 5]);
        let y = x.softmax(1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[4, 7], |_| rng.random::<f64>() * 4.0 - 2.0);
        let y = x.softmax(1).unwrap();
        for r in 0..4 {
            let s: f64 = (0..7).map(|j| y.at(&[r, j])).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_standardizes_each_lane() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[3, 8], |_| rng.random::<f64>() * 3.0);
        let gamma = Tensor::<f64>::ones(&[8]);
        let beta = Tensor::<f64>::zeros(&[8]);
        let y = x.layernorm(&gamma, &beta, 1).unwrap();
        for r in 0..3 {
            let mean: f64 = (0..8).map(|j| y.at(&[r, j])).sum::<f64>() / 8.0;
            let var: f64 = (0..8).map(|j| (y.at(&[r, j]) - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::<f64>::zeros(&[1]);
        assert_eq!(x.sigmoid().data()[0], 0.5);
    }

    #[test]
    fn sqrt_rejects_negative() {
        let x = Tensor::from_vec(vec![-1.0f64], &[1]).unwrap();
        assert!(x.sqrt_elem().is_err());
    }
}
