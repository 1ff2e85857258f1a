//! Differentiable tensor primitives shared by every network.
//!
//! Convolution is lowered to an explicit im2col/col2im pair plus a batched
//! matmul, so both the forward pass and the two backward products run through
//! the same gemm kernel. Tensors are NCHW throughout.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, D};

use crate::error::{Error, Result};

/// Zero padding on each side of a 2-D input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self { top: p, bottom: p, left: p, right: p }
    }

    /// Padding that keeps H×W unchanged at stride 1. Even kernels put the
    /// extra row/column on the bottom/right.
    pub fn same(kernel: usize) -> Self {
        let lo = (kernel - 1) / 2;
        let hi = kernel - 1 - lo;
        Self { top: lo, bottom: hi, left: lo, right: hi }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Padding,
}

impl ConvGeometry {
    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + self.pad.top + self.pad.bottom;
        let pw = w + self.pad.left + self.pad.right;
        if ph < self.kh || pw < self.kw {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// (b, c, h, w) -> (b, c·kh·kw, ho·wo)
struct Im2Col(ConvGeometry);

/// Adjoint of [`Im2Col`]; scatters columns back with accumulation.
struct Col2Im {
    geo: ConvGeometry,
    channels: usize,
    h: usize,
    w: usize,
}

fn im2col_slice<T: Copy + Default>(
    src: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    geo: &ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let rows = c * geo.kh * geo.kw;
    let cols = ho * wo;
    let mut dst = vec![T::default(); b * rows * cols];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ki in 0..geo.kh {
                for kj in 0..geo.kw {
                    let row = (ci * geo.kh + ki) * geo.kw + kj;
                    let out = &mut dst[(bi * rows + row) * cols..(bi * rows + row + 1) * cols];
                    for oy in 0..ho {
                        let iy = (oy * geo.stride + ki) as isize - geo.pad.top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * geo.stride + kj) as isize - geo.pad.left as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im_slice<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    geo: &ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let rows = c * geo.kh * geo.kw;
    let cols = ho * wo;
    let mut dst = vec![T::default(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut dst[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ki in 0..geo.kh {
                for kj in 0..geo.kw {
                    let row = (ci * geo.kh + ki) * geo.kw + kj;
                    let col = &src[(bi * rows + row) * cols..(bi * rows + row + 1) * cols];
                    for oy in 0..ho {
                        let iy = (oy * geo.stride + ki) as isize - geo.pad.top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * geo.stride + kj) as isize - geo.pad.left as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[base + ix as usize] += col[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im expect a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let Some((ho, wo)) = self.0.out_hw(h, w) else {
            candle_core::bail!("kernel {}x{} larger than padded input {h}x{w}", self.0.kh, self.0.kw)
        };
        let dims = (b, c, h, w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_slice(contiguous_slice(v, layout)?, dims, &self.0, (ho, wo))),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_slice(contiguous_slice(v, layout)?, dims, &self.0, (ho, wo))),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c * self.0.kh * self.0.kw, ho * wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let op = Col2Im { geo: self.0, channels: c, h, w };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, _, _) = layout.shape().dims3()?;
        let (c, h, w) = (self.channels, self.h, self.w);
        let Some(out_hw) = self.geo.out_hw(h, w) else {
            candle_core::bail!("col2im geometry does not fit {h}x{w}")
        };
        let dims = (b, c, h, w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_slice(contiguous_slice(v, layout)?, dims, &self.geo, out_hw)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_slice(contiguous_slice(v, layout)?, dims, &self.geo, out_hw)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let _ = arg;
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Im2Col(self.geo))?))
    }
}

/// 2-D cross-correlation. `weight` is (cout, cin, kh, kw); `bias` is (cout).
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if cin != wcin {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {wcin} input channels, got {cin}"
        )));
    }
    let geo = ConvGeometry { kh, kw, stride, pad };
    let (ho, wo) = geo.out_hw(h, w).ok_or_else(|| {
        Error::ShapeMismatch(format!("kernel {kh}x{kw} does not fit input {h}x{w}"))
    })?;
    let cols = x.contiguous()?.apply_op1(Im2Col(geo))?;
    let wm = weight.reshape((cout, cin * kh * kw))?;
    let mut out = wm.broadcast_matmul(&cols)?;
    if let Some(bias) = bias {
        out = out.broadcast_add(&bias.reshape((1, cout, 1))?)?;
    }
    Ok(out.reshape((b, cout, ho, wo))?)
}

/// Logistic sigmoid in the tanh form, which has a well-defined gradient for
/// any finite input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `log(1 + exp(x))`, evaluated without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Mean absolute difference over every element.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Per-channel spatial mean and population variance of a (b, c, h, w) tensor,
/// both returned as (b, c, 1, 1).
pub fn spatial_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
    Ok((mean.reshape((b, c, 1, 1))?, var.reshape((b, c, 1, 1))?))
}

/// Instance normalisation without affine parameters.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (mean, var) = spatial_moments(x)?;
    Ok(x.broadcast_sub(&mean)?.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Row-stochastic bilinear interpolation matrix (half-pixel centres, no
/// corner alignment) mapping `src` samples onto `dst` samples.
pub fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let t = pos - lo as f64;
        m[i * src + lo] += 1.0 - t;
        m[i * src + hi] += t;
    }
    m
}

/// Differentiable bilinear resize of a (b, c, h, w) tensor, realised as
/// `Ry · X · Rxᵀ` with fixed interpolation matrices.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rxt = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let planes = x.reshape((b * c, h, w))?;
    let rows = ry.broadcast_matmul(&planes)?;
    let both = rows.broadcast_matmul(&rxt)?;
    Ok(both.reshape((b, c, out_h, out_w))?)
}

/// Scalar value of a single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn naive_conv(
        x: &[f64],
        (b, cin, h, w): (usize, usize, usize, usize),
        k: &[f64],
        (cout, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: Padding,
    ) -> (Vec<f64>, usize, usize) {
        let ho = (h + pad.top + pad.bottom - kh) / stride + 1;
        let wo = (w + pad.left + pad.right - kw) / stride + 1;
        let mut out = vec![0.0; b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad.top as isize;
                                    let ix = (ox * stride + kj) as isize - pad.left as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * k[((co * cin + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        (out, ho, wo)
    }

    #[test]
    fn conv_matches_direct_summation() -> Result<()> {
        let dev = Device::Cpu;
        let (b, cin, h, w, cout) = (2, 3, 7, 6, 4);
        for (k, stride, pad) in [
            (3, 1, Padding::uniform(1)),
            (4, 2, Padding::uniform(1)),
            (4, 1, Padding::same(4)),
            (7, 1, Padding::same(7)),
        ] {
            let xv: Vec<f64> = (0..b * cin * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let kv: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let x = Tensor::from_vec(xv.clone(), (b, cin, h, w), &dev)?;
            let wt = Tensor::from_vec(kv.clone(), (cout, cin, k, k), &dev)?;
            let y = conv2d(&x, &wt, None, stride, pad)?;
            let (expect, ho, wo) = naive_conv(&xv, (b, cin, h, w), &kv, (cout, k, k), stride, pad);
            assert_eq!(y.dims(), &[b, cout, ho, wo]);
            let got = y.flatten_all()?.to_vec1::<f64>()?;
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
        Ok(())
    }

    #[test]
    fn conv_gradients_match_finite_differences() -> Result<()> {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 5, 5), &dev)?)?;
        let wt = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &dev)?)?;
        let probe = Tensor::randn(0f64, 1.0, (2, 2, 2, 2), &dev)?;
        let f = |x: &Tensor, w: &Tensor| -> Result<f64> {
            scalar(&(conv2d(x, w, None, 2, Padding::uniform(1))? * &probe)?.sum_all()?)
        };
        let loss = (conv2d(x.as_tensor(), wt.as_tensor(), None, 2, Padding::uniform(1))? * &probe)?.sum_all()?;
        let grads = loss.backward()?;
        for var in [&x, &wt] {
            let g = grads.get(var.as_tensor()).unwrap().flatten_all()?.to_vec1::<f64>()?;
            let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
            for idx in [0, 7, base.len() / 2, base.len() - 1] {
                let mut plus = base.clone();
                plus[idx] += 1e-5;
                let mut minus = base.clone();
                minus[idx] -= 1e-5;
                let shape = var.as_tensor().shape().clone();
                let tp = Tensor::from_vec(plus, shape.clone(), &dev)?;
                let tm = Tensor::from_vec(minus, shape, &dev)?;
                let fd = if std::ptr::eq(var, &x) {
                    (f(&tp, wt.as_tensor())? - f(&tm, wt.as_tensor())?) / 2e-5
                } else {
                    (f(x.as_tensor(), &tp)? - f(x.as_tensor(), &tm)?) / 2e-5
                };
                assert!((fd - g[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[idx]);
            }
        }
        Ok(())
    }

    #[test]
    fn same_padding_preserves_size() {
        for k in 1..8 {
            let p = Padding::same(k);
            assert_eq!(p.top + p.bottom, k - 1);
        }
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (s, d) in [(4, 9), (16, 5), (3, 3)] {
            let m = bilinear_matrix(s, d);
            for row in m.chunks(s) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softplus_is_stable() -> Result<()> {
        let x = Tensor::new(&[-1000.0f64, 0.0, 1000.0], &Device::Cpu)?;
        let y = softplus(&x)?.to_vec1::<f64>()?;
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[2], 1000.0);
        Ok(())
    }
}
