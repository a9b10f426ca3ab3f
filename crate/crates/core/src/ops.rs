//! Tensor primitives the network is built from.
//!
//! Convolutions are lowered to an explicit im2col / col2im pair plus a single
//! matmul. The two reshaping ops are each other's adjoint, so every convolution
//! and every convolution input-gradient stays differentiable with respect to
//! both its data and its kernel. The critic's gradient penalty relies on that.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Geometry shared by an im2col / col2im pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

fn contiguous_slice<'a, T: WithDType>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [T]> {
    let Some((start, end)) = layout.contiguous_offsets() else {
        bail!("custom op expects a contiguous input")
    };
    Ok(&storage.as_slice::<T>()?[start..end])
}

fn im2col_impl<T: WithDType>(src: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let ncols = g.cols();
    let mut dst = vec![T::zero(); g.rows() * ncols];
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut dst[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src_plane = &src[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst_plane = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_line = &src_plane[iy as usize * g.width..][..g.width];
                        let dst_line = &mut dst_plane[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            // ix = ox + kx - padding, clipped to the image
                            let shift = kx as isize - g.padding as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = ((g.width as isize - shift).min(ow as isize)).max(lo as isize) as usize;
                            if hi > lo {
                                let s0 = (lo as isize + shift) as usize;
                                dst_line[lo..hi].copy_from_slice(&src_line[s0..s0 + hi - lo]);
                            }
                        } else {
                            for (ox, d) in dst_line.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix >= 0 && ix < g.width as isize {
                                    *d = src_line[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im_impl<T: WithDType>(src: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let ncols = g.cols();
    let mut dst = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &src[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst_plane = &mut dst[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let src_plane = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_line = &mut dst_plane[iy as usize * g.width..][..g.width];
                        let src_line = &src_plane[oy * ow..(oy + 1) * ow];
                        for (ox, &v) in src_line.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

struct Im2Col(ConvGeometry);
struct Col2Im(ConvGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match storage.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(im2col_impl(contiguous_slice::<f32>(storage, layout)?, g)),
            DType::F64 => f64::to_cpu_storage_owned(im2col_impl(contiguous_slice::<f64>(storage, layout)?, g)),
            dt => bail!("im2col: unsupported dtype {dt:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        let out = match storage.dtype() {
            DType::F32 => f32::to_cpu_storage_owned(col2im_impl(contiguous_slice::<f32>(storage, layout)?, g)),
            DType::F64 => f64::to_cpu_storage_owned(col2im_impl(contiguous_slice::<f64>(storage, layout)?, g)),
            dt => bail!("col2im: unsupported dtype {dt:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D cross-correlation with square kernels, `x: (B, C, H, W)`, `weight: (O, C, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_c, in_c, kh, kw) = weight.dims4()?;
    if in_c != channels || kh != kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.dims().to_vec(),
            rhs: weight.dims().to_vec(),
        });
    }
    let geom = ConvGeometry {
        batch,
        channels,
        height,
        width,
        kernel: kh,
        stride,
        padding,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(geom))?;
    let y = weight.reshape((out_c, in_c * kh * kw))?.matmul(&cols)?;
    let y = y
        .reshape((out_c, batch, geom.out_height(), geom.out_width()))?
        .transpose(0, 1)?;
    let y = match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, out_c, 1, 1))?)?,
        None => y.contiguous()?,
    };
    Ok(y)
}

/// Vector-Jacobian product of [`conv2d`] with respect to its input.
///
/// `grad: (B, O, Ho, Wo)` is the upstream gradient; the result has the input
/// shape `(B, C, height, width)`. Differentiable in both `grad` and `weight`.
pub fn conv2d_input_grad(
    grad: &Tensor,
    weight: &Tensor,
    height: usize,
    width: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, out_c, oh, ow) = grad.dims4()?;
    let (w_out, in_c, k, _) = weight.dims4()?;
    if w_out != out_c {
        return Err(Error::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: grad.dims().to_vec(),
            rhs: weight.dims().to_vec(),
        });
    }
    let geom = ConvGeometry {
        batch,
        channels: in_c,
        height,
        width,
        kernel: k,
        stride,
        padding,
    };
    if geom.out_height() != oh || geom.out_width() != ow {
        return Err(Error::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: grad.dims().to_vec(),
            rhs: vec![batch, out_c, geom.out_height(), geom.out_width()],
        });
    }
    let g = grad.transpose(0, 1)?.reshape((out_c, batch * oh * ow))?;
    let cols = weight.reshape((out_c, in_c * k * k))?.t()?.matmul(&g)?;
    Ok(cols.contiguous()?.apply_op1(Col2Im(geom))?)
}

struct LeakyMask(f64);

impl CustomOp1 for LeakyMask {
    fn name(&self) -> &'static str {
        "leaky-mask"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let slope = self.0;
        let out = match storage.dtype() {
            DType::F32 => {
                let s = slope as f32;
                let v = contiguous_slice::<f32>(storage, layout)?;
                f32::to_cpu_storage_owned(v.iter().map(|&x| if x > 0.0 { 1.0 } else { s }).collect())
            }
            DType::F64 => {
                let v = contiguous_slice::<f64>(storage, layout)?;
                f64::to_cpu_storage_owned(v.iter().map(|&x| if x > 0.0 { 1.0 } else { slope }).collect())
            }
            dt => bail!("leaky-mask: unsupported dtype {dt:?}"),
        };
        Ok((out, layout.shape().clone()))
    }
}

/// Constant (untracked) local slope of a leaky rectifier: 1 where `x > 0`, `slope` elsewhere.
pub fn leaky_relu_mask(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1_no_bwd(&LeakyMask(slope))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.mul(&leaky_relu_mask(x, slope)?)?)
}

/// Leaky rectifier that also returns its slope mask, for callers that replay the backward pass.
pub fn leaky_relu_with_mask(x: &Tensor, slope: f64) -> Result<(Tensor, Tensor)> {
    let mask = leaky_relu_mask(x, slope)?;
    Ok((x.mul(&mask)?, mask))
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct Sigmoid;
struct Softplus;

fn map_elementwise(
    storage: &CpuStorage,
    layout: &Layout,
    name: &str,
    f: fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let out = match storage.dtype() {
        DType::F32 => {
            let v = contiguous_slice::<f32>(storage, layout)?;
            f32::to_cpu_storage_owned(v.iter().map(|&x| f(x as f64) as f32).collect())
        }
        DType::F64 => {
            let v = contiguous_slice::<f64>(storage, layout)?;
            f64::to_cpu_storage_owned(v.iter().map(|&x| f(x)).collect())
        }
        dt => bail!("{name}: unsupported dtype {dt:?}"),
    };
    Ok((out, layout.shape().clone()))
}

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_elementwise(storage, layout, "sigmoid", sigmoid_f64)
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = res.mul(&res.affine(-1.0, 1.0)?)?;
        Ok(Some(grad_res.mul(&d)?))
    }
}

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_elementwise(storage, layout, "softplus", softplus_f64)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let s = arg.contiguous()?.apply_op1(Sigmoid)?;
        Ok(Some(grad_res.mul(&s)?))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softplus)?)
}

/// Sub-pixel rearrangement `(B, C·r², H, W) -> (B, C, r·H, r·W)`.
///
/// Output pixel `(h·r + i, w·r + j)` of channel `c` is input channel `c·r² + i·r + j` at `(h, w)`.
pub fn pixel_shuffle(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let r2 = factor * factor;
    if factor == 0 || c % r2 != 0 {
        return Err(Error::ChannelsIndivisible {
            op: "pixel_shuffle",
            channels: c,
            factor,
        });
    }
    let oc = c / r2;
    let y = x
        .reshape(vec![b, oc, factor, factor, h, w])?
        .permute(vec![0, 1, 4, 2, 5, 3])?
        .reshape((b, oc, h * factor, w * factor))?;
    Ok(y)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Indivisible {
            op: "pixel_unshuffle",
            height: h,
            width: w,
            divisor: factor,
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let y = x
        .reshape(vec![b, c, oh, factor, ow, factor])?
        .permute(vec![0, 1, 3, 5, 2, 4])?
        .reshape((b, c * factor * factor, oh, ow))?;
    Ok(y)
}

/// Flattens any tensor into an `f64` vector regardless of dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Scalar value of a single-element tensor as `f64`.
pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

pub(crate) fn ensure_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn naive_conv(x: &[f64], w: &[f64], b: usize, c: usize, h: usize, wd: usize, o: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let dev = Device::Cpu;
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let (b, c, h, w, o) = (2, 3, 6, 8, 4);
            let xv = ramp(b * c * h * w, 2.0);
            let wv = ramp(o * c * k * k, 1.0);
            let x = Tensor::from_vec(xv.clone(), (b, c, h, w), &dev).unwrap();
            let wt = Tensor::from_vec(wv.clone(), (o, c, k, k), &dev).unwrap();
            let got = to_f64_vec(&conv2d(&x, &wt, None, s, p).unwrap()).unwrap();
            let want = naive_conv(&xv, &wv, b, c, h, w, o, k, s, p);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "k={k} s={s} p={p}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn input_grad_is_adjoint_of_conv() {
        // <conv(x), g> == <x, conv_input_grad(g)>
        let dev = Device::Cpu;
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1)] {
            let x = Tensor::from_vec(ramp(2 * 3 * 8 * 8, 1.0), (2, 3, 8, 8), &dev).unwrap();
            let w = Tensor::from_vec(ramp(5 * 3 * k * k, 1.0), (5, 3, k, k), &dev).unwrap();
            let y = conv2d(&x, &w, None, s, p).unwrap();
            let g = Tensor::from_vec(ramp(y.elem_count(), 3.0), y.dims(), &dev).unwrap();
            let lhs = scalar_f64(&(&y * &g).unwrap().sum_all().unwrap()).unwrap();
            let xg = conv2d_input_grad(&g, &w, 8, 8, s, p).unwrap();
            let rhs = scalar_f64(&(&x * &xg).unwrap().sum_all().unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(ramp(1 * 2 * 5 * 5, 1.0), (1, 2, 5, 5), &dev).unwrap();
        let wv = ramp(3 * 2 * 9, 0.7);
        let w = Var::from_vec(wv.clone(), (3, 2, 3, 3), &dev).unwrap();
        let loss = |w: &Tensor| conv2d(&x, w, None, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss(w.as_tensor()).backward().unwrap();
        let g = to_f64_vec(grads.get(&w).unwrap()).unwrap();
        let h = 1e-6;
        for i in [0, 7, 20, 53] {
            let mut p = wv.clone();
            p[i] += h;
            let mut m = wv.clone();
            m[i] -= h;
            let lp = scalar_f64(&loss(&Tensor::from_vec(p, (3, 2, 3, 3), &dev).unwrap())).unwrap();
            let lm = scalar_f64(&loss(&Tensor::from_vec(m, (3, 2, 3, 3), &dev).unwrap())).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn pixel_shuffle_places_channels_in_raster_order() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(vec![1f64, 2., 3., 4.], (1, 4, 1, 1), &dev).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(to_f64_vec(&y).unwrap(), vec![1., 2., 3., 4.]);
        let back = pixel_unshuffle(&y, 2).unwrap();
        assert_eq!(to_f64_vec(&back).unwrap(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let x = Tensor::zeros((1, 6, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let err = pixel_shuffle(&x, 2).unwrap_err();
        assert!(err.to_string().contains("6 channels"), "{err}");
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        let x = Tensor::new(&[-800f64, -1.0, 0.0, 1.0, 800.0], &Device::Cpu).unwrap();
        let s = to_f64_vec(&sigmoid(&x).unwrap()).unwrap();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[2], 0.5);
        assert_eq!(s[4], 1.0);
        let sp = to_f64_vec(&softplus(&x).unwrap()).unwrap();
        assert_eq!(sp[0], 0.0);
        assert!((sp[2] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sp[4], 800.0);
    }

    #[test]
    fn smooth_activations_have_correct_gradients() {
        let dev = Device::Cpu;
        let v = Var::new(&[-2.0f64, -0.3, 0.4, 1.7], &dev).unwrap();
        let y = (sigmoid(v.as_tensor()).unwrap() + softplus(v.as_tensor()).unwrap()).unwrap().sum_all().unwrap();
        let g = to_f64_vec(y.backward().unwrap().get(&v).unwrap()).unwrap();
        for (i, &x) in [-2.0f64, -0.3, 0.4, 1.7].iter().enumerate() {
            let s = sigmoid_f64(x);
            assert!((g[i] - (s * (1.0 - s) + s)).abs() < 1e-12);
        }
    }
}
