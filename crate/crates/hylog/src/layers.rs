//! Convolution layer wrappers, activation normalization and the basic
//! residual conv block shared by the encoder/decoder stages and the CNN
//! ablation backbone.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::tensor::{Elem, Tensor};

/// Forward-pass mode. Training mode lets activation normalization
/// initialize itself from the first map it sees; inference mode treats an
/// uninitialized normalization as an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer<T: Elem> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Elem> Conv2dLayer<T> {
    pub fn init<R: Rng>(
        rng: &mut R,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2dLayer {
            weight: fan_in_uniform(rng, k * k * cin, &[k, k, cin, cout]),
            bias: Tensor::zeros(&[cout]).with_requires_grad(true),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2dLayer<T: Elem> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Elem> ConvTranspose2dLayer<T> {
    /// Deconvolution mapping `cin` input channels to `cout` output
    /// channels. The kernel is stored conv-style as k x k x cout x cin so
    /// the transposed convolution is the exact adjoint of a convolution
    /// with the same kernel.
    pub fn init<R: Rng>(
        rng: &mut R,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvTranspose2dLayer {
            weight: fan_in_uniform(rng, k * k * cin, &[k, k, cout, cin]),
            bias: Tensor::zeros(&[cout]).with_requires_grad(true),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv_transpose2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Per-channel affine `y = scale * (x + bias)` with data-dependent
/// initialization: the first map seen in training mode fixes scale and
/// bias so that map comes out with per-channel mean 0 and std 1.
/// Afterwards both are ordinary learned parameters.
#[derive(Clone, Debug)]
pub struct ActNorm<T: Elem> {
    pub scale: Tensor<T>,
    pub bias: Tensor<T>,
    pub initialized: bool,
}

impl<T: Elem> ActNorm<T> {
    pub fn new(channels: usize) -> Self {
        ActNorm {
            scale: Tensor::ones(&[1, 1, channels]).with_requires_grad(true),
            bias: Tensor::zeros(&[1, 1, channels]).with_requires_grad(true),
            initialized: false,
        }
    }

    /// Identity-initialized and marked ready; for tests and for layers
    /// restored from a checkpoint.
    pub fn new_initialized(channels: usize) -> Self {
        let mut a = Self::new(channels);
        a.initialized = true;
        a
    }

    fn init_from(&mut self, x: &Tensor<T>) {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = (h * w) as f64;
        let mut mean = vec![0.0f64; c];
        for pix in x.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(pix) {
                *m += v.to_f64();
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0f64; c];
        for pix in x.data().chunks_exact(c) {
            for ((vv, &v), m) in var.iter_mut().zip(pix).zip(&mean) {
                let d = v.to_f64() - m;
                *vv += d * d;
            }
        }
        let scale: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64(1.0 / (v / n).sqrt().max(1e-6)))
            .collect();
        let bias: Vec<T> = mean.iter().map(|&m| T::from_f64(-m)).collect();
        self.scale = Tensor::from_vec(scale, &[1, 1, c])
            .expect("channel count")
            .with_requires_grad(true);
        self.bias = Tensor::from_vec(bias, &[1, 1, c])
            .expect("channel count")
            .with_requires_grad(true);
        self.initialized = true;
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if !self.initialized {
            match mode {
                Mode::Train => self.init_from(x),
                Mode::Eval => return Err(Error::ActNormUninitialized),
            }
        }
        self.scale.mul(&x.add(&self.bias)?)
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.scale"), &mut self.scale);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Convolution followed by activation normalization and relu; the stage
/// machinery unit for every plain convolution outside the HyLoG fusion.
#[derive(Clone, Debug)]
pub struct ConvUnit<T: Elem> {
    pub conv: Conv2dLayer<T>,
    pub norm: ActNorm<T>,
}

impl<T: Elem> ConvUnit<T> {
    pub fn init<R: Rng>(
        rng: &mut R,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvUnit {
            conv: Conv2dLayer::init(rng, k, cin, cout, stride, pad),
            norm: ActNorm::new(cout),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.norm.forward(&self.conv.forward(x)?, mode)?.relu())
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv.for_each_param(&format!("{prefix}.conv"), f);
        self.norm.for_each_param(&format!("{prefix}.norm"), f);
    }
}

/// Transposed convolution followed by activation normalization and relu.
#[derive(Clone, Debug)]
pub struct DeconvUnit<T: Elem> {
    pub deconv: ConvTranspose2dLayer<T>,
    pub norm: ActNorm<T>,
}

impl<T: Elem> DeconvUnit<T> {
    pub fn init<R: Rng>(
        rng: &mut R,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        DeconvUnit {
            deconv: ConvTranspose2dLayer::init(rng, k, cin, cout, stride, pad),
            norm: ActNorm::new(cout),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.norm.forward(&self.deconv.forward(x)?, mode)?.relu())
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.deconv.for_each_param(&format!("{prefix}.deconv"), f);
        self.norm.for_each_param(&format!("{prefix}.norm"), f);
    }
}

/// Basic residual block: 3x3 conv, normalization, relu, 3x3 conv, skip.
#[derive(Clone, Debug)]
pub struct ResidualConvBlock<T: Elem> {
    pub conv1: Conv2dLayer<T>,
    pub norm: ActNorm<T>,
    pub conv2: Conv2dLayer<T>,
}

impl<T: Elem> ResidualConvBlock<T> {
    pub fn init<R: Rng>(rng: &mut R, channels: usize) -> Self {
        ResidualConvBlock {
            conv1: Conv2dLayer::init(rng, 3, channels, channels, 1, 1),
            norm: ActNorm::new(channels),
            conv2: Conv2dLayer::init(rng, 3, channels, channels, 1, 1),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.norm.forward(&self.conv1.forward(x)?, mode)?.relu();
        x.add(&self.conv2.forward(&y)?)
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.for_each_param(&format!("{prefix}.conv1"), f);
        self.norm.for_each_param(&format!("{prefix}.norm"), f);
        self.conv2.for_each_param(&format!("{prefix}.conv2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actnorm_standardizes_its_initialization_map() {
        let x = Tensor::from_fn(&[4, 4, 3], |i| (i as f64) * 0.37 - 2.0);
        let mut norm = ActNorm::new(3);
        let y = norm.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..16).map(|p| y.at(&[p / 4, p % 4, c])).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 16.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-5, "std {}", var.sqrt());
        }
    }

    #[test]
    fn identity_actnorm_passes_through() {
        let x = Tensor::from_fn(&[3, 3, 2], |i| i as f64);
        let mut norm = ActNorm::new_initialized(2);
        let y = norm.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn uninitialized_actnorm_fails_in_eval_mode() {
        let x = Tensor::<f64>::ones(&[2, 2, 1]);
        let mut norm = ActNorm::new(1);
        assert!(matches!(
            norm.forward(&x, Mode::Eval),
            Err(Error::ActNormUninitialized)
        ));
    }

    #[test]
    fn actnorm_is_an_ordinary_affine_after_init() {
        use crate::gradcheck::{gradcheck, GradCheckConfig};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(&[3, 3, 2], |_| rng.random::<f64>() - 0.5);
        let scale = Tensor::from_fn(&[1, 1, 2], |_| rng.random::<f64>() + 0.5);
        let bias = Tensor::from_fn(&[1, 1, 2], |_| rng.random::<f64>() - 0.5);
        let r = gradcheck(
            "actnorm",
            |ins| {
                let y = ins[1].mul(&ins[0].add(&ins[2])?)?;
                y.mul(&y)?.sum()
            },
            &[x, scale, bias],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "max rel {}", r.max_rel_err);
    }
}
