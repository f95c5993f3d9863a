//! Complementary features selection module.
//!
//! Channel attention that gates the reflectance/shading complementary
//! features before they are summed into the dehazing decoder. The three
//! inputs are summed, squeezed to two channel statistics (global average
//! and global max), pushed through per-stream bottleneck convolutions,
//! and turned into per-channel sigmoid scores:
//!
//! `out = d_prev + a_r * d_r + a_s * d_s`
//!
//! with the scores broadcast over the spatial extent. Forcing both scores
//! to one recovers the plain-summation ablation [`fuse_sum`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::tensor::{Elem, Tensor};

/// One stream's squeeze-excite pair: channel-downscaling and -upscaling
/// 1x1 convolutions for each of the two statistics.
#[derive(Clone, Debug)]
pub struct StreamGate<T: Elem> {
    pub down_ave_w: Tensor<T>,
    pub down_ave_b: Tensor<T>,
    pub down_max_w: Tensor<T>,
    pub down_max_b: Tensor<T>,
    pub up_ave_w: Tensor<T>,
    pub up_ave_b: Tensor<T>,
    pub up_max_w: Tensor<T>,
    pub up_max_b: Tensor<T>,
}

impl<T: Elem> StreamGate<T> {
    fn init<R: Rng>(rng: &mut R, channels: usize, reduced: usize) -> Self {
        StreamGate {
            down_ave_w: fan_in_uniform(rng, channels, &[1, 1, channels, reduced]),
            down_ave_b: Tensor::zeros(&[reduced]).with_requires_grad(true),
            down_max_w: fan_in_uniform(rng, channels, &[1, 1, channels, reduced]),
            down_max_b: Tensor::zeros(&[reduced]).with_requires_grad(true),
            up_ave_w: fan_in_uniform(rng, reduced, &[1, 1, reduced, channels]),
            up_ave_b: Tensor::zeros(&[channels]).with_requires_grad(true),
            up_max_w: fan_in_uniform(rng, reduced, &[1, 1, reduced, channels]),
            up_max_b: Tensor::zeros(&[channels]).with_requires_grad(true),
        }
    }

    /// Sigmoid score in (0,1)^{1x1xC} from the two pooled statistics.
    fn score(&self, s_ave: &Tensor<T>, s_max: &Tensor<T>) -> Result<Tensor<T>> {
        let ave = s_ave
            .conv2d(&self.down_ave_w, Some(&self.down_ave_b), 1, 0)?
            .relu()
            .conv2d(&self.up_ave_w, Some(&self.up_ave_b), 1, 0)?;
        let max = s_max
            .conv2d(&self.down_max_w, Some(&self.down_max_b), 1, 0)?
            .relu()
            .conv2d(&self.up_max_w, Some(&self.up_max_b), 1, 0)?;
        Ok(ave.add(&max)?.sigmoid())
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.down_ave.weight"), &mut self.down_ave_w);
        f(format!("{prefix}.down_ave.bias"), &mut self.down_ave_b);
        f(format!("{prefix}.down_max.weight"), &mut self.down_max_w);
        f(format!("{prefix}.down_max.bias"), &mut self.down_max_b);
        f(format!("{prefix}.up_ave.weight"), &mut self.up_ave_w);
        f(format!("{prefix}.up_ave.bias"), &mut self.up_ave_b);
        f(format!("{prefix}.up_max.weight"), &mut self.up_max_w);
        f(format!("{prefix}.up_max.bias"), &mut self.up_max_b);
    }
}

/// Parameters of one selection module: independent gates for the
/// reflectance and shading streams (nothing is shared between streams or
/// between the average/max branches).
#[derive(Clone, Debug)]
pub struct CfsmParams<T: Elem> {
    pub channels: usize,
    pub reduction: usize,
    pub gate_r: StreamGate<T>,
    pub gate_s: StreamGate<T>,
}

impl<T: Elem> CfsmParams<T> {
    pub fn init<R: Rng>(rng: &mut R, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} not divisible by reduction {reduction}"
            )));
        }
        let reduced = channels / reduction;
        Ok(CfsmParams {
            channels,
            reduction,
            gate_r: StreamGate::init(rng, channels, reduced),
            gate_s: StreamGate::init(rng, channels, reduced),
        })
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.gate_r.for_each_param(&format!("{prefix}.gate_r"), f);
        self.gate_s.for_each_param(&format!("{prefix}.gate_s"), f);
    }
}

/// Output of [`cfsm_detailed`]: the fused map plus the read-only
/// intermediates needed to assert the recalibration algebra.
#[derive(Clone, Debug)]
pub struct CfsmOutput<T: Elem> {
    pub out: Tensor<T>,
    pub s_ave: Tensor<T>,
    pub s_max: Tensor<T>,
    pub score_r: Tensor<T>,
    pub score_s: Tensor<T>,
}

fn check_same_shape<T: Elem>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Full selection module with exposed intermediates.
pub fn cfsm_detailed<T: Elem>(
    d_prev: &Tensor<T>,
    d_r: &Tensor<T>,
    d_s: &Tensor<T>,
    p: &CfsmParams<T>,
) -> Result<CfsmOutput<T>> {
    check_same_shape("cfsm", d_prev, d_r)?;
    check_same_shape("cfsm", d_prev, d_s)?;
    if d_prev.rank() != 3 || d_prev.shape()[2] != p.channels {
        return Err(Error::ShapeMismatch {
            op: "cfsm",
            lhs: d_prev.shape().to_vec(),
            rhs: vec![p.channels],
        });
    }
    let u = d_prev.add(d_r)?.add(d_s)?;
    let s_ave = u.global_avg_pool()?;
    let s_max = u.global_max_pool()?;
    let score_r = p.gate_r.score(&s_ave, &s_max)?;
    let score_s = p.gate_s.score(&s_ave, &s_max)?;
    let out = d_prev
        .add(&score_r.mul(d_r)?)?
        .add(&score_s.mul(d_s)?)?;
    Ok(CfsmOutput {
        out,
        s_ave,
        s_max,
        score_r,
        score_s,
    })
}

/// Recalibrated aggregation `d_prev + a_r * d_r + a_s * d_s`.
pub fn cfsm<T: Elem>(
    d_prev: &Tensor<T>,
    d_r: &Tensor<T>,
    d_s: &Tensor<T>,
    p: &CfsmParams<T>,
) -> Result<Tensor<T>> {
    Ok(cfsm_detailed(d_prev, d_r, d_s, p)?.out)
}

/// Plain-summation ablation: the module with both scores forced to one.
pub fn fuse_sum<T: Elem>(
    d_prev: &Tensor<T>,
    d_r: &Tensor<T>,
    d_s: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_same_shape("fuse_sum", d_prev, d_r)?;
    check_same_shape("fuse_sum", d_prev, d_s)?;
    d_prev.add(d_r)?.add(d_s)
}

pub(crate) fn gradchecks() -> Vec<crate::gradcheck::suite::Check> {
    use crate::gradcheck::gradcheck;
    vec![
        ("cfsm", 1e-4, |rng, cfg| {
            let p = CfsmParams::<f64>::init(rng, 4, 2)?;
            let d_prev = Tensor::from_fn(&[3, 3, 4], |_| rng.random::<f64>() - 0.5);
            let d_r = Tensor::from_fn(&[3, 3, 4], |_| rng.random::<f64>() - 0.5);
            let d_s = Tensor::from_fn(&[3, 3, 4], |_| rng.random::<f64>() - 0.5);
            let (params, rebuild) = flatten_cfsm(&p);
            let mut all = vec![d_prev, d_r, d_s];
            all.extend(params);
            gradcheck(
                "cfsm",
                move |ins| {
                    let p = rebuild(&ins[3..]);
                    let y = cfsm(&ins[0], &ins[1], &ins[2], &p)?;
                    y.mul(&y)?.sum()
                },
                &all,
                cfg,
            )
        }),
        ("fuse_sum", 1e-5, |rng, cfg| {
            let a = Tensor::from_fn(&[3, 3, 2], |_| rng.random::<f64>() - 0.5);
            let b = Tensor::from_fn(&[3, 3, 2], |_| rng.random::<f64>() - 0.5);
            let c = Tensor::from_fn(&[3, 3, 2], |_| rng.random::<f64>() - 0.5);
            gradcheck(
                "fuse_sum",
                |ins| {
                    let y = fuse_sum(&ins[0], &ins[1], &ins[2])?;
                    y.mul(&y)?.sum()
                },
                &[a, b, c],
                cfg,
            )
        }),
    ]
}

/// Flatten the module's parameters for the finite-difference checker.
#[allow(clippy::type_complexity)]
pub(crate) fn flatten_cfsm<T: Elem>(
    p: &CfsmParams<T>,
) -> (Vec<Tensor<T>>, impl Fn(&[Tensor<T>]) -> CfsmParams<T> + Clone) {
    let gates = [&p.gate_r, &p.gate_s];
    let mut inputs = Vec::new();
    for g in gates {
        inputs.extend([
            g.down_ave_w.clone(),
            g.down_ave_b.clone(),
            g.down_max_w.clone(),
            g.down_max_b.clone(),
            g.up_ave_w.clone(),
            g.up_ave_b.clone(),
            g.up_max_w.clone(),
            g.up_max_b.clone(),
        ]);
    }
    let channels = p.channels;
    let reduction = p.reduction;
    let rebuild = move |ins: &[Tensor<T>]| {
        let gate = |o: usize| StreamGate {
            down_ave_w: ins[o].clone(),
            down_ave_b: ins[o + 1].clone(),
            down_max_w: ins[o + 2].clone(),
            down_max_b: ins[o + 3].clone(),
            up_ave_w: ins[o + 4].clone(),
            up_ave_b: ins[o + 5].clone(),
            up_max_w: ins[o + 6].clone(),
            up_max_b: ins[o + 7].clone(),
        };
        CfsmParams {
            channels,
            reduction,
            gate_r: gate(0),
            gate_s: gate(8),
        }
    };
    (inputs, rebuild)
}
