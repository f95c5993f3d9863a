//! Reconstruction, structural-similarity and edge-preservation losses,
//! the weighted hybrid objective, and the PSNR/SSIM evaluation metrics.
//!
//! Reflectance and dehazing streams train on L2 + SSIM; the shading
//! stream trains on L2 plus an edge term that compares forward spatial
//! differences, so it is blind to constant offsets by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ForwardOutputs;
use crate::tensor::{Elem, Tensor};

/// Weights of the three task losses.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 1.0,
            lambda_s: 1.0,
            lambda_d: 1.5,
        }
    }
}

fn check_same_shape<T: Elem>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn l2_loss<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("l2_loss", pred, target)?;
    let d = pred.sub(target)?;
    d.mul(&d)?.mean()
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 11x11 Gaussian window as a 1-channel convolution kernel.
fn gaussian_window<T: Elem>() -> Tensor<T> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut vals = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            vals.push(v);
            sum += v;
        }
    }
    Tensor::from_fn(&[SSIM_WINDOW, SSIM_WINDOW, 1, 1], |i| {
        T::from_f64(vals[i] / sum)
    })
}

/// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5, K1 0.01,
/// K2 0.03, dynamic range 1), computed per channel and averaged.
/// Differentiable in both arguments and symmetric.
pub fn ssim<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("ssim", pred, target)?;
    if pred.rank() != 3 {
        return Err(Error::RankMismatch {
            op: "ssim",
            expected: 3,
            shape: pred.shape().to_vec(),
        });
    }
    let (h, w, c) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::geometry(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let win = gaussian_window::<T>();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let blur = |t: &Tensor<T>| t.conv2d(&win, None, 1, 0);
    let mut channel_means = Vec::with_capacity(c);
    for ch in 0..c {
        let x = pred.narrow(2, ch, 1)?;
        let y = target.narrow(2, ch, 1)?;
        let mu_x = blur(&x)?;
        let mu_y = blur(&y)?;
        let mu_xx = mu_x.mul(&mu_x)?;
        let mu_yy = mu_y.mul(&mu_y)?;
        let mu_xy = mu_x.mul(&mu_y)?;
        let sigma_x = blur(&x.mul(&x)?)?.sub(&mu_xx)?;
        let sigma_y = blur(&y.mul(&y)?)?.sub(&mu_yy)?;
        let sigma_xy = blur(&x.mul(&y)?)?.sub(&mu_xy)?;

        let num = mu_xy
            .mul_scalar(2.0)
            .add_scalar(c1)
            .mul(&sigma_xy.mul_scalar(2.0).add_scalar(c2))?;
        let den = mu_xx
            .add(&mu_yy)?
            .add_scalar(c1)
            .mul(&sigma_x.add(&sigma_y)?.add_scalar(c2))?;
        channel_means.push(num.div(&den)?.mean()?);
    }
    let mut acc = channel_means[0].clone();
    for m in &channel_means[1..] {
        acc = acc.add(m)?;
    }
    Ok(acc.mul_scalar(1.0 / c as f64))
}

/// `1 - ssim`.
pub fn ssim_loss<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(ssim(pred, target)?.neg().add_scalar(1.0))
}

/// Edge preservation: L2 norms (over the whole map) of the differences
/// of forward spatial derivatives in x and y, summed.
pub fn edge_loss<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("edge_loss", pred, target)?;
    let dx = pred.spatial_diff_x()?.sub(&target.spatial_diff_x()?)?;
    let dy = pred.spatial_diff_y()?.sub(&target.spatial_diff_y()?)?;
    let nx = dx.mul(&dx)?.sum()?.sqrt_elem()?;
    let ny = dy.mul(&dy)?.sum()?.sqrt_elem()?;
    nx.add(&ny)
}

/// Ground truth for one sample; reflectance/shading may be absent when
/// the corresponding decoders are disabled.
#[derive(Clone, Debug)]
pub struct DehazeTargets<T: Elem> {
    pub clear: Tensor<T>,
    pub reflectance: Option<Tensor<T>>,
    pub shading: Option<Tensor<T>>,
}

/// The weighted objective plus the unweighted per-task components for
/// logging. Disabled streams contribute exactly zero.
#[derive(Clone, Debug)]
pub struct HybridLoss<T: Elem> {
    pub total: Tensor<T>,
    pub l_r: f64,
    pub l_s: f64,
    pub l_d: f64,
}

/// `L = lambda_R (L2+SSIM)(I_R) + lambda_S (L2+edge)(I_S)
///    + lambda_D (L2+SSIM)(I_D)`, with absent streams skipped.
pub fn hybrid_loss<T: Elem>(
    outputs: &ForwardOutputs<T>,
    targets: &DehazeTargets<T>,
    w: &LossWeights,
) -> Result<HybridLoss<T>> {
    let l_d = l2_loss(&outputs.dehazed, &targets.clear)?
        .add(&ssim_loss(&outputs.dehazed, &targets.clear)?)?;
    let l_d_val = l_d.item()?.to_f64();
    let mut total = l_d.mul_scalar(w.lambda_d);

    let mut l_r_val = 0.0;
    if let Some(pred) = &outputs.reflectance {
        let target = targets
            .reflectance
            .as_ref()
            .ok_or(Error::MissingTarget("reflectance"))?;
        let l_r = l2_loss(pred, target)?.add(&ssim_loss(pred, target)?)?;
        l_r_val = l_r.item()?.to_f64();
        total = total.add(&l_r.mul_scalar(w.lambda_r))?;
    }
    let mut l_s_val = 0.0;
    if let Some(pred) = &outputs.shading {
        let target = targets
            .shading
            .as_ref()
            .ok_or(Error::MissingTarget("shading"))?;
        let l_s = l2_loss(pred, target)?.add(&edge_loss(pred, target)?)?;
        l_s_val = l_s.item()?.to_f64();
        total = total.add(&l_s.mul_scalar(w.lambda_s))?;
    }
    Ok(HybridLoss {
        total,
        l_r: l_r_val,
        l_s: l_s_val,
        l_d: l_d_val,
    })
}

/// Peak signal-to-noise ratio in decibels; identical inputs report the
/// infinite sentinel (`f64::INFINITY`).
pub fn psnr<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>, max_val: f64) -> Result<f64> {
    check_same_shape("psnr", pred, target)?;
    let mut mse = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.to_f64() - t.to_f64();
        mse += d * d;
    }
    mse /= pred.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// SSIM as a plain number (no gradient tracking).
pub fn ssim_metric<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(ssim(&pred.detach(), &target.detach())?.item()?.to_f64())
}

pub(crate) fn gradchecks() -> Vec<crate::gradcheck::suite::Check> {
    use crate::gradcheck::gradcheck;
    use rand::Rng as _;
    vec![
        ("l2_loss", 1e-4, |rng, cfg| {
            let a = Tensor::from_fn(&[5, 5, 2], |_| rng.random::<f64>());
            let b = Tensor::from_fn(&[5, 5, 2], |_| rng.random::<f64>());
            gradcheck("l2_loss", |ins| l2_loss(&ins[0], &ins[1]), &[a, b], cfg)
        }),
        ("ssim_loss", 1e-4, |rng, cfg| {
            let a = Tensor::from_fn(&[11, 11, 2], |_| 0.1 + 0.8 * rng.random::<f64>());
            let b = Tensor::from_fn(&[11, 11, 2], |_| 0.1 + 0.8 * rng.random::<f64>());
            let cfg = cfg.clone().subsampled(40);
            gradcheck("ssim_loss", |ins| ssim_loss(&ins[0], &ins[1]), &[a, b], &cfg)
        }),
        ("edge_loss", 1e-4, |rng, cfg| {
            let a = Tensor::from_fn(&[6, 6, 2], |_| rng.random::<f64>());
            let b = Tensor::from_fn(&[6, 6, 2], |_| rng.random::<f64>());
            gradcheck("edge_loss", |ins| edge_loss(&ins[0], &ins[1]), &[a, b], cfg)
        }),
        ("hybrid_loss", 1e-4, |rng, cfg| {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                Tensor::from_fn(&[11, 11, 3], |_| 0.1 + 0.8 * rng.random::<f64>())
            };
            let inputs = vec![mk(rng), mk(rng), mk(rng), mk(rng), mk(rng), mk(rng)];
            let cfg = cfg.clone().subsampled(15);
            gradcheck(
                "hybrid_loss",
                |ins| {
                    let outputs = ForwardOutputs {
                        reflectance: Some(ins[0].clone()),
                        shading: Some(ins[1].clone()),
                        dehazed: ins[2].clone(),
                    };
                    let targets = DehazeTargets {
                        reflectance: Some(ins[3].clone()),
                        shading: Some(ins[4].clone()),
                        clear: ins[5].clone(),
                    };
                    Ok(hybrid_loss(&outputs, &targets, &LossWeights::default())?.total)
                },
                &inputs,
                &cfg,
            )
        }),
    ]
}
