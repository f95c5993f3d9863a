//! Spatial ops on H x W x C feature maps: convolution, transposed
//! convolution, pooling, bilinear upsampling and forward differences.
//!
//! Kernels are laid out k x k x Cin x Cout. A transposed convolution with
//! the same kernel is the exact adjoint of the convolution, so
//! `<conv2d(x), y> == <x, conv_transpose2d(y)>` holds for zero bias.

use super::{BackwardOp, Elem, Tensor};
use crate::error::{Error, Result};

fn check_rank3<T: Elem>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::RankMismatch {
            op,
            expected: 3,
            shape: x.shape().to_vec(),
        });
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn conv_geom<T: Elem>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (h, w, ci) = check_rank3("conv2d", x)?;
    if weight.rank() != 4 || weight.shape()[0] != weight.shape()[1] {
        return Err(Error::geometry(
            "conv2d",
            format!("kernel must be k x k x Cin x Cout, got {:?}", weight.shape()),
        ));
    }
    let k = weight.shape()[0];
    if weight.shape()[2] != ci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::geometry("conv2d", "stride must be positive"));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::geometry(
            "conv2d",
            format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
        ));
    }
    Ok(ConvGeom {
        h,
        w,
        ci,
        co: weight.shape()[3],
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    })
}

struct Conv2dBackward {
    stride: usize,
    pad: usize,
}

impl<T: Elem> BackwardOp<T> for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let weight = &inputs[1];
        let g = conv_geom(x, weight, self.stride, self.pad).expect("geometry checked in forward");
        let xd = x.data();
        let wd = weight.data();

        let mut dx = vec![T::zero(); xd.len()];
        let mut dw = vec![T::zero(); wd.len()];
        let mut db = vec![T::zero(); g.co];

        if g.ci == 1 && g.co == 1 {
            let tap_range = |o: usize, extent: usize| {
                let base = o * g.stride;
                let lo = g.pad.saturating_sub(base).min(g.k);
                let hi = (extent + g.pad - base).min(g.k);
                (lo, hi.max(lo))
            };
            for oy in 0..g.ho {
                let (ky_lo, ky_hi) = tap_range(oy, g.h);
                for ox in 0..g.wo {
                    let (kx_lo, kx_hi) = tap_range(ox, g.w);
                    let x0 = ox * g.stride + kx_lo - g.pad;
                    let gv = grad_out[oy * g.wo + ox];
                    db[0] = db[0] + gv;
                    for ky in ky_lo..ky_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let n = kx_hi - kx_lo;
                        let xrow = &xd[iy * g.w + x0..][..n];
                        let wrow = &wd[ky * g.k + kx_lo..][..n];
                        let dxrow = &mut dx[iy * g.w + x0..][..n];
                        let dwrow = &mut dw[ky * g.k + kx_lo..][..n];
                        for i in 0..n {
                            dxrow[i] = dxrow[i] + wrow[i] * gv;
                            dwrow[i] = dwrow[i] + xrow[i] * gv;
                        }
                    }
                }
            }
        } else {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let grow = &grad_out[(oy * g.wo + ox) * g.co..][..g.co];
                    for (dbc, &gv) in db.iter_mut().zip(grow) {
                        *dbc = *dbc + gv;
                    }
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xbase = (iy as usize * g.w + ix as usize) * g.ci;
                            let wbase = (ky * g.k + kx) * g.ci * g.co;
                            for c in 0..g.ci {
                                let xv = xd[xbase + c];
                                let wrow = &wd[wbase + c * g.co..][..g.co];
                                let dwrow = &mut dw[wbase + c * g.co..][..g.co];
                                let mut acc = T::zero();
                                for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(grow) {
                                    *dwv = *dwv + xv * gv;
                                    acc = acc + wv * gv;
                                }
                                dx[xbase + c] = dx[xbase + c] + acc;
                            }
                        }
                    }
                }
            }
        }

        let mut grads = vec![
            x.requires_grad().then_some(dx),
            weight.requires_grad().then_some(dw),
        ];
        if let Some(b) = inputs.get(2) {
            grads.push(b.requires_grad().then_some(db));
        }
        grads
    }
}

struct ConvTranspose2dBackward {
    stride: usize,
    pad: usize,
}

fn deconv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let spanned = (input - 1) * stride + k;
    if spanned < 2 * pad + 1 {
        return Err(Error::geometry(
            "conv_transpose2d",
            format!("padding {pad} swallows the whole {input}-wide output (k={k}, stride={stride})"),
        ));
    }
    Ok(spanned - 2 * pad)
}

impl<T: Elem> BackwardOp<T> for ConvTranspose2dBackward {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let weight = &inputs[1];
        let (h, w, cx) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = weight.shape()[0];
        let ci = weight.shape()[2];
        let co = weight.shape()[3];
        debug_assert_eq!(cx, co);
        let ho = deconv_out_extent(h, k, self.stride, self.pad).expect("checked in forward");
        let wo = deconv_out_extent(w, k, self.stride, self.pad).expect("checked in forward");

        let xd = x.data();
        let wd = weight.data();
        let mut dx = vec![T::zero(); xd.len()];
        let mut dw = vec![T::zero(); wd.len()];
        let mut db = vec![T::zero(); ci];

        for (pix, chunk) in grad_out.chunks_exact(ci).enumerate() {
            let _ = pix;
            for (dbc, &gv) in db.iter_mut().zip(chunk) {
                *dbc = *dbc + gv;
            }
        }

        for iy in 0..h {
            for ix in 0..w {
                let xbase = (iy * w + ix) * co;
                for ky in 0..k {
                    let oy = (iy * self.stride + ky) as isize - self.pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = (ix * self.stride + kx) as isize - self.pad as isize;
                        if ox < 0 || ox >= wo as isize {
                            continue;
                        }
                        let gbase = (oy as usize * wo + ox as usize) * ci;
                        let wbase = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let gv = grad_out[gbase + c];
                            let wrow = &wd[wbase + c * co..][..co];
                            let dwrow = &mut dw[wbase + c * co..][..co];
                            let xrow = &xd[xbase..][..co];
                            let dxrow = &mut dx[xbase..][..co];
                            for o in 0..co {
                                dwrow[o] = dwrow[o] + xrow[o] * gv;
                                dxrow[o] = dxrow[o] + wrow[o] * gv;
                            }
                        }
                    }
                }
            }
        }

        let mut grads = vec![
            x.requires_grad().then_some(dx),
            weight.requires_grad().then_some(dw),
        ];
        if let Some(b) = inputs.get(2) {
            grads.push(b.requires_grad().then_some(db));
        }
        grads
    }
}

struct AvgPoolBackward {
    factor: usize,
}

impl<T: Elem> BackwardOp<T> for AvgPoolBackward {
    fn name(&self) -> &'static str {
        "avgpool2d"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let f = self.factor;
        let scale = T::from_f64(1.0 / (f * f) as f64);
        let wo = w / f;
        let mut dx = vec![T::zero(); x.numel()];
        for y in 0..h {
            for xx in 0..w {
                let src = ((y / f) * wo + xx / f) * c;
                let dst = (y * w + xx) * c;
                for ch in 0..c {
                    dx[dst + ch] = grad_out[src + ch] * scale;
                }
            }
        }
        vec![x.requires_grad().then_some(dx)]
    }
}

struct GlobalAvgPoolBackward;

impl<T: Elem> BackwardOp<T> for GlobalAvgPoolBackward {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let scale = T::from_f64(1.0 / (h * w) as f64);
        let mut dx = vec![T::zero(); x.numel()];
        for pix in 0..h * w {
            for ch in 0..c {
                dx[pix * c + ch] = grad_out[ch] * scale;
            }
        }
        vec![x.requires_grad().then_some(dx)]
    }
}

struct GlobalMaxPoolBackward {
    /// Spatial index of the (first) maximum per channel.
    argmax: Vec<usize>,
}

impl<T: Elem> BackwardOp<T> for GlobalMaxPoolBackward {
    fn name(&self) -> &'static str {
        "global_max_pool"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let c = x.shape()[2];
        let mut dx = vec![T::zero(); x.numel()];
        for (ch, &pos) in self.argmax.iter().enumerate() {
            dx[pos * c + ch] = dx[pos * c + ch] + grad_out[ch];
        }
        vec![x.requires_grad().then_some(dx)]
    }
}

/// Per-axis bilinear sampling table: (i0, i1, weight of i1).
fn bilinear_axis(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let scale = factor as f64;
    (0..in_len * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / scale - 0.5;
            let src = src.clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct UpsampleBackward {
    factor: usize,
}

impl<T: Elem> BackwardOp<T> for UpsampleBackward {
    fn name(&self) -> &'static str {
        "upsample2d"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ys = bilinear_axis(h, self.factor);
        let xs = bilinear_axis(w, self.factor);
        let wo = w * self.factor;
        let mut dx = vec![T::zero(); x.numel()];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let grow = &grad_out[(oy * wo + ox) * c..][..c];
                let w00 = T::from_f64((1.0 - wy) * (1.0 - wx));
                let w01 = T::from_f64((1.0 - wy) * wx);
                let w10 = T::from_f64(wy * (1.0 - wx));
                let w11 = T::from_f64(wy * wx);
                for ch in 0..c {
                    let g = grow[ch];
                    dx[(y0 * w + x0) * c + ch] = dx[(y0 * w + x0) * c + ch] + g * w00;
                    dx[(y0 * w + x1) * c + ch] = dx[(y0 * w + x1) * c + ch] + g * w01;
                    dx[(y1 * w + x0) * c + ch] = dx[(y1 * w + x0) * c + ch] + g * w10;
                    dx[(y1 * w + x1) * c + ch] = dx[(y1 * w + x1) * c + ch] + g * w11;
                }
            }
        }
        vec![x.requires_grad().then_some(dx)]
    }
}

/// Forward-difference axis: 0 = rows (y), 1 = columns (x).
struct SpatialDiffBackward {
    axis: usize,
}

impl<T: Elem> BackwardOp<T> for SpatialDiffBackward {
    fn name(&self) -> &'static str {
        "spatial_diff"
    }
    fn backward(&self, grad_out: &[T], inputs: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let x = &inputs[0];
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut dx = vec![T::zero(); x.numel()];
        let at = |y: usize, xx: usize, ch: usize| (y * w + xx) * c + ch;
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let mut g = T::zero();
                    if self.axis == 1 {
                        if xx + 1 < w {
                            g = g - grad_out[at(y, xx, ch)];
                        }
                        if xx > 0 {
                            g = g + grad_out[at(y, xx - 1, ch)];
                        }
                    } else {
                        if y + 1 < h {
                            g = g - grad_out[at(y, xx, ch)];
                        }
                        if y > 0 {
                            g = g + grad_out[at(y - 1, xx, ch)];
                        }
                    }
                    dx[at(y, xx, ch)] = g;
                }
            }
        }
        vec![x.requires_grad().then_some(dx)]
    }
}

impl<T: Elem> Tensor<T> {
    /// Zero-padded 2-D convolution; kernel k x k x Cin x Cout.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let g = conv_geom(self, weight, stride, pad)?;
        if let Some(b) = bias {
            if b.shape() != [g.co] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![g.co],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let xd = self.data();
        let wd = weight.data();
        let mut out = vec![T::zero(); g.ho * g.wo * g.co];
        if g.ci == 1 && g.co == 1 {
            // single-channel fast path (the SSIM blur): hoist the padding
            // bounds out of the tap loop so it reduces to short dots
            let b0 = bias.map(|b| b.data()[0]).unwrap_or_else(T::zero);
            let tap_range = |o: usize, extent: usize| {
                let base = o * g.stride; // input index = base + tap - pad
                let lo = g.pad.saturating_sub(base).min(g.k);
                let hi = (extent + g.pad - base).min(g.k);
                (lo, hi.max(lo))
            };
            for oy in 0..g.ho {
                let (ky_lo, ky_hi) = tap_range(oy, g.h);
                for ox in 0..g.wo {
                    let (kx_lo, kx_hi) = tap_range(ox, g.w);
                    let x0 = ox * g.stride + kx_lo - g.pad;
                    let mut acc = b0;
                    for ky in ky_lo..ky_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let xrow = &xd[iy * g.w + x0..][..kx_hi - kx_lo];
                        let wrow = &wd[ky * g.k + kx_lo..][..kx_hi - kx_lo];
                        for (&xv, &wv) in xrow.iter().zip(wrow) {
                            acc = acc + xv * wv;
                        }
                    }
                    out[oy * g.wo + ox] = acc;
                }
            }
        } else {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let orow = &mut out[(oy * g.wo + ox) * g.co..][..g.co];
                    if let Some(b) = bias {
                        orow.copy_from_slice(b.data());
                    }
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xbase = (iy as usize * g.w + ix as usize) * g.ci;
                            let wbase = (ky * g.k + kx) * g.ci * g.co;
                            for c in 0..g.ci {
                                let xv = xd[xbase + c];
                                let wrow = &wd[wbase + c * g.co..][..g.co];
                                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                                    *ov = *ov + xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![g.ho, g.wo, g.co],
            inputs,
            Box::new(Conv2dBackward { stride, pad }),
        ))
    }

    /// Transposed convolution: the adjoint of [`Tensor::conv2d`] with the
    /// same kernel. Input channels must equal the kernel's Cout; the
    /// output has the kernel's Cin channels and extent (H-1)*stride - 2*pad + k.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (h, w, cx) = check_rank3("conv_transpose2d", self)?;
        if weight.rank() != 4 || weight.shape()[0] != weight.shape()[1] {
            return Err(Error::geometry(
                "conv_transpose2d",
                format!("kernel must be k x k x Cin x Cout, got {:?}", weight.shape()),
            ));
        }
        let k = weight.shape()[0];
        let ci = weight.shape()[2];
        let co = weight.shape()[3];
        if cx != co {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::geometry("conv_transpose2d", "stride must be positive"));
        }
        let ho = deconv_out_extent(h, k, stride, pad)?;
        let wo = deconv_out_extent(w, k, stride, pad)?;
        if let Some(b) = bias {
            if b.shape() != [ci] {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d",
                    lhs: vec![ci],
                    rhs: b.shape().to_vec(),
                });
            }
        }

        let xd = self.data();
        let wd = weight.data();
        let mut out = vec![T::zero(); ho * wo * ci];
        if let Some(b) = bias {
            for chunk in out.chunks_exact_mut(ci) {
                chunk.copy_from_slice(b.data());
            }
        }
        for iy in 0..h {
            for ix in 0..w {
                let xrow = &xd[(iy * w + ix) * co..][..co];
                for ky in 0..k {
                    let oy = (iy * stride + ky) as isize - pad as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = (ix * stride + kx) as isize - pad as isize;
                        if ox < 0 || ox >= wo as isize {
                            continue;
                        }
                        let obase = (oy as usize * wo + ox as usize) * ci;
                        let wbase = (ky * k + kx) * ci * co;
                        for c in 0..ci {
                            let wrow = &wd[wbase + c * co..][..co];
                            let mut acc = T::zero();
                            for (&xv, &wv) in xrow.iter().zip(wrow) {
                                acc = acc + xv * wv;
                            }
                            out[obase + c] = out[obase + c] + acc;
                        }
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![ho, wo, ci],
            inputs,
            Box::new(ConvTranspose2dBackward { stride, pad }),
        ))
    }

    /// Mean over non-overlapping factor x factor cells.
    pub fn avgpool2d(&self, factor: usize) -> Result<Tensor<T>> {
        let (h, w, c) = check_rank3("avgpool2d", self)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::geometry(
                "avgpool2d",
                format!("extent {h}x{w} not divisible by factor {factor}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let scale = T::from_f64(1.0 / (factor * factor) as f64);
        let xd = self.data();
        let mut out = vec![T::zero(); ho * wo * c];
        for y in 0..h {
            for xx in 0..w {
                let dst = ((y / factor) * wo + xx / factor) * c;
                let src = (y * w + xx) * c;
                for ch in 0..c {
                    out[dst + ch] = out[dst + ch] + xd[src + ch];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        Ok(Tensor::from_op(
            out,
            vec![ho, wo, c],
            vec![self.clone()],
            Box::new(AvgPoolBackward { factor }),
        ))
    }

    /// Channelwise mean over the full spatial extent -> 1 x 1 x C.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let (h, w, c) = check_rank3("global_avg_pool", self)?;
        let scale = T::from_f64(1.0 / (h * w) as f64);
        let mut out = vec![T::zero(); c];
        for chunk in self.data().chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        Ok(Tensor::from_op(
            out,
            vec![1, 1, c],
            vec![self.clone()],
            Box::new(GlobalAvgPoolBackward),
        ))
    }

    /// Channelwise max over the full spatial extent -> 1 x 1 x C. The
    /// backward routes the gradient to the first maximum position per
    /// channel.
    pub fn global_max_pool(&self) -> Result<Tensor<T>> {
        let (h, w, c) = check_rank3("global_max_pool", self)?;
        let xd = self.data();
        let mut out = vec![T::neg_infinity(); c];
        let mut argmax = vec![0usize; c];
        for pix in 0..h * w {
            for ch in 0..c {
                let v = xd[pix * c + ch];
                if v > out[ch] {
                    out[ch] = v;
                    argmax[ch] = pix;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![1, 1, c],
            vec![self.clone()],
            Box::new(GlobalMaxPoolBackward { argmax }),
        ))
    }

    /// Bilinear upsampling by an integer factor, sample centers at
    /// (i + 0.5)/factor - 0.5.
    pub fn upsample2d(&self, factor: usize) -> Result<Tensor<T>> {
        let (h, w, c) = check_rank3("upsample2d", self)?;
        if factor == 0 {
            return Err(Error::geometry("upsample2d", "factor must be >= 1"));
        }
        let ys = bilinear_axis(h, factor);
        let xs = bilinear_axis(w, factor);
        let wo = w * factor;
        let xd = self.data();
        let mut out = vec![T::zero(); h * factor * wo * c];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let w00 = T::from_f64((1.0 - wy) * (1.0 - wx));
                let w01 = T::from_f64((1.0 - wy) * wx);
                let w10 = T::from_f64(wy * (1.0 - wx));
                let w11 = T::from_f64(wy * wx);
                let orow = &mut out[(oy * wo + ox) * c..][..c];
                let r00 = &xd[(y0 * w + x0) * c..][..c];
                let r01 = &xd[(y0 * w + x1) * c..][..c];
                let r10 = &xd[(y1 * w + x0) * c..][..c];
                let r11 = &xd[(y1 * w + x1) * c..][..c];
                for ch in 0..c {
                    orow[ch] = r00[ch] * w00 + r01[ch] * w01 + r10[ch] * w10 + r11[ch] * w11;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![h * factor, wo, c],
            vec![self.clone()],
            Box::new(UpsampleBackward { factor }),
        ))
    }

    /// Forward difference along x (columns); the last column is zero so
    /// the output keeps the input's shape.
    pub fn spatial_diff_x(&self) -> Result<Tensor<T>> {
        self.spatial_diff(1)
    }

    /// Forward difference along y (rows); the last row is zero.
    pub fn spatial_diff_y(&self) -> Result<Tensor<T>> {
        self.spatial_diff(0)
    }

    fn spatial_diff(&self, axis: usize) -> Result<Tensor<T>> {
        let (h, w, c) = check_rank3("spatial_diff", self)?;
        let ext = if axis == 0 { h } else { w };
        if ext < 2 {
            return Err(Error::geometry(
                "spatial_diff",
                format!("axis extent {ext} < 2"),
            ));
        }
        let xd = self.data();
        let mut out = vec![T::zero(); self.numel()];
        let at = |y: usize, xx: usize| (y * w + xx) * c;
        for y in 0..h {
            for xx in 0..w {
                let (ny, nx) = if axis == 0 { (y + 1, xx) } else { (y, xx + 1) };
                if ny >= h || nx >= w {
                    continue; // trailing edge stays zero
                }
                let cur = at(y, xx);
                let nxt = at(ny, nx);
                for ch in 0..c {
                    out[cur + ch] = xd[nxt + ch] - xd[cur + ch];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(SpatialDiffBackward { axis }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirac3x3() -> Tensor<f64> {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        Tensor::from_vec(w, &[3, 3, 1, 1]).unwrap()
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let x = Tensor::from_fn(&[5, 4, 1], |i| (i as f64) * 0.3 - 1.0);
        let y = x.conv2d(&dirac3x3(), None, 1, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn encoder_downscale_geometry() {
        // 8x8 input, k=4, stride 2, pad 1 -> 4x4.
        let x = Tensor::<f64>::ones(&[8, 8, 2]);
        let w = Tensor::<f64>::ones(&[4, 4, 2, 3]);
        let y = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[4, 4, 3]);
    }

    #[test]
    fn decoder_upscale_geometry() {
        // 4x4 input, k=4, stride 2, pad 1 -> 8x8.
        let x = Tensor::<f64>::ones(&[4, 4, 3]);
        let w = Tensor::<f64>::ones(&[4, 4, 2, 3]);
        let y = x.conv_transpose2d(&w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[8, 8, 2]);
    }

    #[test]
    fn kernel_larger_than_padded_input_errors() {
        let x = Tensor::<f64>::ones(&[2, 2, 1]);
        let w = Tensor::<f64>::ones(&[5, 5, 1, 1]);
        assert!(x.conv2d(&w, None, 1, 1).is_err());
    }

    #[test]
    fn adjoint_identity_conv_and_transpose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[8, 8, 2], |_| rng.random::<f64>() - 0.5);
        let w = Tensor::from_fn(&[4, 4, 2, 3], |_| rng.random::<f64>() - 0.5);
        let y = Tensor::from_fn(&[4, 4, 3], |_| rng.random::<f64>() - 0.5);
        let cx = x.conv2d(&w, None, 2, 1).unwrap();
        let cty = y.conv_transpose2d(&w, None, 2, 1).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(cty.data()).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
    }

    #[test]
    fn pooling_preserves_constants() {
        let x = Tensor::<f64>::full(&[6, 6, 3], 2.5);
        let p = x.avgpool2d(3).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3]);
        assert!(p.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let g = x.global_avg_pool().unwrap();
        assert_eq!(g.shape(), &[1, 1, 3]);
        assert!((g.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn avgpool_requires_divisible_extent() {
        let x = Tensor::<f64>::ones(&[5, 5, 1]);
        assert!(x.avgpool2d(2).is_err());
    }

    #[test]
    fn global_max_pool_finds_spike() {
        let mut data = vec![0.0f64; 4 * 4 * 2];
        data[(2 * 4 + 1) * 2 + 1] = 5.0;
        let x = Tensor::from_vec(data, &[4, 4, 2]).unwrap();
        let m = x.global_max_pool().unwrap();
        assert_eq!(m.data(), &[0.0, 5.0]);
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let x = Tensor::from_fn(&[3, 5, 2], |i| i as f64);
        let y = x.upsample2d(1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn upsample_preserves_constant_maps() {
        let x = Tensor::<f64>::full(&[4, 4, 3], 0.7);
        let y = x.upsample2d(2).unwrap();
        assert_eq!(y.shape(), &[8, 8, 3]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn spatial_diff_of_constant_is_zero() {
        let x = Tensor::<f64>::full(&[4, 4, 2], 3.0);
        let dx = x.spatial_diff_x().unwrap();
        let dy = x.spatial_diff_y().unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dy.data().iter().all(|&v| v == 0.0));
        assert_eq!(dx.shape(), x.shape());
    }
}
