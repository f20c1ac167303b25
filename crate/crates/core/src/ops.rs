//! Tensor primitives the U-Net needs beyond what candle ships with a fast
//! CPU backward: im2col-based convolution, a fused last-axis softmax and
//! fused group/layer normalisation.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, D};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

fn unfold<T: Copy + Default>(src: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let cols = oh * ow;
    let rows = g.rows();
    let width = batch * cols;
    let mut dst = vec![T::default(); rows * width];
    let plane = g.height * g.width;
    for b in 0..batch {
        for c in 0..g.channels {
            let src_plane = &src[(b * g.channels + c) * plane..][..plane];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    let out = &mut dst[row * width + b * cols..][..cols];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src_plane[iy as usize * g.width..][..g.width];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                out[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn fold<T: Copy + Default + std::ops::AddAssign>(src: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let cols = oh * ow;
    let width = batch * cols;
    let plane = g.height * g.width;
    let mut dst = vec![T::default(); batch * g.channels * plane];
    for b in 0..batch {
        for c in 0..g.channels {
            let dst_plane = &mut dst[(b * g.channels + c) * plane..][..plane];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let row = (c * g.kernel + ky) * g.kernel + kx;
                    let col = &src[row * width + b * cols..][..cols];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                dst_plane[iy as usize * g.width + ix as usize] += col[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

/// Patch matrix `[C*k*k, B*Hout*Wout]` of a `[B, C, H, W]` input.
struct Im2Col(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let (oh, ow) = g.out_hw();
        let shape = Shape::from((g.rows(), batch * oh * ow));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, layout, "im2col")?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, layout, "im2col")?, batch, g)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let batch = arg.dims()[0];
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0, batch))?))
    }
}

struct Col2Im(Geometry, usize);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (g, batch) = (self.0, self.1);
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous(v, layout, "col2im")?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous(v, layout, "col2im")?, batch, g)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }
}

/// 2-D convolution, `x: [B, Cin, H, W]`, `weight: [Cout, Cin, k, k]`, square
/// kernel, symmetric zero padding. Lowered to im2col and a single 2-D matmul
/// over the whole batch so the weight gradient needs no broadcast reduction.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (c_out, c_in, kernel, _) = weight.dims4()?;
    if c_in != channels {
        return Err(crate::Error::Dimension(format!(
            "conv2d expects {c_in} input channels, got {channels}"
        )));
    }
    let g = Geometry { channels, height, width, kernel, stride, padding };
    let (oh, ow) = g.out_hw();
    let cols = if kernel == 1 && stride == 1 && padding == 0 {
        x.reshape((batch, channels, height * width))?
            .transpose(0, 1)?
            .reshape((channels, batch * height * width))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let mut out = weight.reshape((c_out, g.rows()))?.matmul(&cols)?;
    if let Some(b) = bias {
        out = out.broadcast_add(&b.reshape((c_out, 1))?)?;
    }
    Ok(out.reshape((c_out, batch, oh, ow))?.transpose(0, 1)?.contiguous()?)
}

/// Normalisation over channel groups of a `[outer, channels, inner]` view
/// followed by a per-channel affine map. Layer norm is the case
/// `groups = 1, inner = 1`.
#[derive(Debug, Clone, Copy)]
struct AffineNorm {
    channels: usize,
    inner: usize,
    groups: usize,
    eps: f64,
}

impl AffineNorm {
    fn group_len(&self) -> usize {
        self.channels / self.groups * self.inner
    }

    /// Mean and reciprocal standard deviation of one group.
    fn stats<T: num_traits::Float>(&self, seg: &[T]) -> (T, T) {
        let n = T::from(seg.len()).expect("group length fits");
        let mean = seg.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = seg.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        (mean, T::one() / (var + T::from(self.eps).expect("eps")).sqrt())
    }

    fn forward<T: num_traits::Float>(&self, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); x.len()];
        let n = self.group_len();
        let per_group = self.channels / self.groups;
        for (gi, (seg, out)) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)).enumerate() {
            let (mean, rstd) = self.stats(seg);
            let c0 = (gi % self.groups) * per_group;
            for (j, (o, &v)) in out.iter_mut().zip(seg).enumerate() {
                let c = c0 + j / self.inner;
                *o = (v - mean) * rstd * w[c] + b[c];
            }
        }
        y
    }

    fn backward<T: num_traits::Float>(&self, x: &[T], w: &[T], gy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); self.channels];
        let mut db = vec![T::zero(); self.channels];
        let n = self.group_len();
        let nf = T::from(n).expect("group length fits");
        let per_group = self.channels / self.groups;
        for (gi, ((seg, g), d)) in x.chunks_exact(n).zip(gy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)).enumerate() {
            let (mean, rstd) = self.stats(seg);
            let c0 = (gi % self.groups) * per_group;
            let (mut sum_dh, mut sum_dh_xh) = (T::zero(), T::zero());
            for j in 0..n {
                let c = c0 + j / self.inner;
                let xh = (seg[j] - mean) * rstd;
                let dh = g[j] * w[c];
                sum_dh = sum_dh + dh;
                sum_dh_xh = sum_dh_xh + dh * xh;
                db[c] = db[c] + g[j];
                dw[c] = dw[c] + g[j] * xh;
            }
            let (m1, m2) = (sum_dh / nf, sum_dh_xh / nf);
            for j in 0..n {
                let c = c0 + j / self.inner;
                let xh = (seg[j] - mean) * rstd;
                d[j] = rstd * (g[j] * w[c] - m1 - xh * m2);
            }
        }
        (dx, dw, db)
    }

    fn backward_typed<T>(&self, x: &Tensor, w: &Tensor, gy: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor)>
    where
        T: candle_core::WithDType + num_traits::Float,
    {
        let xv = x.flatten_all()?.to_vec1::<T>()?;
        let wv = w.flatten_all()?.to_vec1::<T>()?;
        let gv = gy.flatten_all()?.to_vec1::<T>()?;
        let (dx, dw, db) = self.backward(&xv, &wv, &gv);
        Ok((
            Tensor::from_vec(dx, x.shape(), x.device())?,
            Tensor::from_vec(dw, w.shape(), w.device())?,
            Tensor::from_vec(db, w.shape(), w.device())?,
        ))
    }
}

impl CustomOp3 for AffineNorm {
    fn name(&self) -> &'static str {
        "affine-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(self.forward(
                contiguous(x, l1, "norm")?,
                contiguous(w, l2, "norm")?,
                contiguous(b, l3, "norm")?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(self.forward(
                contiguous(x, l1, "norm")?,
                contiguous(w, l2, "norm")?,
                contiguous(b, l3, "norm")?,
            )),
            (other, _, _) => candle_core::bail!("norm: unsupported or mixed dtype {:?}", other.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dw, db) = match x.dtype() {
            DType::F32 => self.backward_typed::<f32>(x, w, grad_res)?,
            DType::F64 => self.backward_typed::<f64>(x, w, grad_res)?,
            other => candle_core::bail!("norm: unsupported dtype {other:?}"),
        };
        Ok((Some(dx), Some(dw), Some(db)))
    }
}

struct SoftmaxLast;

fn softmax_rows<T>(src: &[T], dim: usize) -> Vec<T>
where
    T: num_traits::Float,
{
    let mut dst = vec![T::zero(); src.len()];
    for (row, out) in src.chunks_exact(dim).zip(dst.chunks_exact_mut(dim)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    }
    dst
}

fn softmax_bwd_typed<T>(y: &Tensor, gy: &Tensor) -> candle_core::Result<Tensor>
where
    T: candle_core::WithDType + num_traits::Float,
{
    let dim = y.dim(D::Minus1)?;
    let yv = y.flatten_all()?.to_vec1::<T>()?;
    let gv = gy.flatten_all()?.to_vec1::<T>()?;
    let mut dx = vec![T::zero(); yv.len()];
    for ((yr, gr), dr) in yv.chunks_exact(dim).zip(gv.chunks_exact(dim)).zip(dx.chunks_exact_mut(dim)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
        for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
            *d = p * (q - dot);
        }
    }
    Tensor::from_vec(dx, y.shape(), y.device())
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *layout.dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous(v, layout, "softmax")?, dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous(v, layout, "softmax")?, dim)),
            other => candle_core::bail!("softmax: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(match res.dtype() {
            DType::F32 => softmax_bwd_typed::<f32>(res, grad_res)?,
            DType::F64 => softmax_bwd_typed::<f64>(res, grad_res)?,
            other => candle_core::bail!("softmax: unsupported dtype {other:?}"),
        }))
    }
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

/// Nearest-neighbour 2x spatial upsampling expressed with broadcasts so the
/// backward pass is a plain sum.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Group normalisation over `[B, C, ...]` with per-channel affine parameters.
pub fn group_norm(x: &Tensor, groups: usize, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let dims = x.dims();
    let channels = dims[1];
    if groups == 0 || channels % groups != 0 {
        return Err(crate::Error::Dimension(format!("{groups} groups do not divide {channels} channels")));
    }
    let op = AffineNorm { channels, inner: dims[2..].iter().product(), groups, eps };
    Ok(x.contiguous()?.apply_op3(weight, bias, op)?)
}

/// Layer normalisation over the last axis.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let channels = x.dim(D::Minus1)?;
    let op = AffineNorm { channels, inner: 1, groups: 1, eps };
    Ok(x.contiguous()?.apply_op3(weight, bias, op)?)
}

/// Row-stochastic matrix `[c_out, c_in]` that linearly resamples the channel
/// index, end points aligned. Identity when `c_in == c_out`.
pub fn channel_interp_matrix(c_in: usize, c_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; c_out * c_in];
    for j in 0..c_out {
        let pos = if c_out == 1 || c_in == 1 {
            0.0
        } else {
            j as f64 * (c_in - 1) as f64 / (c_out - 1) as f64
        };
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if frac == 0.0 || lo + 1 >= c_in {
            m[j * c_in + lo.min(c_in - 1)] = 1.0;
        } else {
            m[j * c_in + lo] = 1.0 - frac;
            m[j * c_in + lo + 1] = frac;
        }
    }
    m
}

/// Applies [`channel_interp_matrix`] along axis 1 of `[B, C, H, W]`.
pub fn channel_interp(x: &Tensor, c_out: usize) -> Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    if c_in == c_out {
        return Ok(x.clone());
    }
    let m = Tensor::from_vec(channel_interp_matrix(c_in, c_out), (c_out, c_in), x.device())?
        .to_dtype(x.dtype())?;
    let flat = x.reshape((b, c_in, h * w))?;
    Ok(m.broadcast_matmul(&flat)?.reshape((b, c_out, h, w))?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn naive_conv(x: &[f64], w: &[f64], dims: (usize, usize, usize, usize), c_out: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let (b, c, h, wd) = dims;
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; b * c_out * oh * ow];
        for bi in 0..b {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w[((co * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let dev = Device::Cpu;
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, 6, 5), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap();
            let ours = conv2d(&x, &w, None, s, p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let want = naive_conv(
                &x.flatten_all().unwrap().to_vec1().unwrap(),
                &w.flatten_all().unwrap().to_vec1().unwrap(),
                (2, 3, 6, 5),
                4,
                k,
                s,
                p,
            );
            assert_eq!(ours.len(), want.len());
            for (a, b) in ours.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 2, 5, 5), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 2, 3, 3), &dev).unwrap();
        let loss = |t: &Tensor| conv2d(t, &w, None, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss(x.as_tensor()).backward().unwrap();
        let analytic = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for i in [0, 7, 13, 24, 31, 49] {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = loss(&Tensor::from_vec(plus, (1, 2, 5, 5), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let fm = loss(&Tensor::from_vec(minus, (1, 2, 5, 5), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-5 * (1.0 + numeric.abs()));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_matches_reference() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 2.0, (3, 5), &dev).unwrap()).unwrap();
        let y = softmax_last(x.as_tensor()).unwrap();
        for row in y.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let target = Tensor::randn(0f64, 1.0, (3, 5), &dev).unwrap();
        let g1 = (y * &target).unwrap().sum_all().unwrap().backward().unwrap();
        let reference = {
            let max = x.as_tensor().max_keepdim(1).unwrap();
            let e = x.as_tensor().broadcast_sub(&max).unwrap().exp().unwrap();
            e.broadcast_div(&e.sum_keepdim(1).unwrap()).unwrap()
        };
        let g2 = (reference * &target).unwrap().sum_all().unwrap().backward().unwrap();
        let a = g1.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = g2.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_matrix_is_identity_for_equal_channels_and_preserves_constants() {
        let m = channel_interp_matrix(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[i * 4 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        for (cin, cout) in [(3, 8), (8, 3), (320, 640), (5, 1)] {
            let m = channel_interp_matrix(cin, cout);
            for row in m.chunks(cin) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn reference_group_norm(x: &Tensor, groups: usize, w: &Tensor, b: &Tensor, eps: f64) -> Tensor {
        let dims = x.dims().to_vec();
        let xg = x.reshape((dims[0], groups, ())).unwrap();
        let mean = xg.mean_keepdim(D::Minus1).unwrap();
        let centered = xg.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let normed = centered.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap();
        let normed = normed.reshape(dims.as_slice()).unwrap();
        let mut shape = vec![1usize; dims.len()];
        shape[1] = dims[1];
        normed
            .broadcast_mul(&w.reshape(shape.as_slice()).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape(shape.as_slice()).unwrap())
            .unwrap()
    }

    fn grads_of(vars: &[&Var], loss: &Tensor) -> Vec<Vec<f64>> {
        let g = loss.backward().unwrap();
        vars.iter().map(|v| g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()).collect()
    }

    #[test]
    fn fused_norms_match_primitive_reference_forward_and_backward() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0.5f64, 2.0, (2, 6, 3, 4), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(1f64, 0.5, 6, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 0.5, 6, &dev).unwrap()).unwrap();
        let target = Tensor::randn(0f64, 1.0, (2, 6, 3, 4), &dev).unwrap();
        let ours = group_norm(x.as_tensor(), 3, w.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        let want = reference_group_norm(x.as_tensor(), 3, w.as_tensor(), b.as_tensor(), 1e-5);
        let diff = (&ours - &want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
        let ga = grads_of(&[&x, &w, &b], &(ours * &target).unwrap().sum_all().unwrap());
        let gb = grads_of(&[&x, &w, &b], &(want * &target).unwrap().sum_all().unwrap());
        for (p, q) in ga.iter().flatten().zip(gb.iter().flatten()) {
            assert!((p - q).abs() < 1e-10, "{p} vs {q}");
        }

        // layer norm is group norm over the last axis with one group
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 5, 6), &dev).unwrap()).unwrap();
        let target = Tensor::randn(0f64, 1.0, (2, 5, 6), &dev).unwrap();
        let ours = layer_norm(x.as_tensor(), w.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        let want = reference_group_norm(&x.as_tensor().reshape((10, 6, 1)).unwrap(), 1, w.as_tensor(), b.as_tensor(), 1e-5)
            .reshape((2, 5, 6))
            .unwrap();
        let ga = grads_of(&[&x, &w, &b], &(ours * &target).unwrap().sum_all().unwrap());
        let gb = grads_of(&[&x, &w, &b], &(want * &target).unwrap().sum_all().unwrap());
        for (p, q) in ga.iter().flatten().zip(gb.iter().flatten()) {
            assert!((p - q).abs() < 1e-10, "{p} vs {q}");
        }
    }

    #[test]
    fn upsample_repeats_each_pixel() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y = upsample_nearest2x(&x).unwrap().reshape((4, 4)).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(y[0], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(y[3], vec![2.0, 2.0, 3.0, 3.0]);
    }
}
