//! Direct grouped 2-D convolution with symmetric zero padding.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(k: usize, stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            kernel: (k, k),
            stride,
            padding,
            groups,
        }
    }

    pub fn pointwise(groups: usize) -> Self {
        ConvParams::new(1, 1, 0, groups)
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 {
            return Err(Error::Invalid("stride must be positive".into()));
        }
        if h + 2 * self.padding < kh {
            return Err(Error::Shape(format!(
                "height {h} with padding {} is smaller than kernel height {kh}",
                self.padding
            )));
        }
        if w + 2 * self.padding < kw {
            return Err(Error::Shape(format!(
                "width {w} with padding {} is smaller than kernel width {kw}",
                self.padding
            )));
        }
        Ok((
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        ))
    }

    /// Validates operand shapes and returns the output shape.
    pub fn check(&self, input: Shape, weight: Shape, bias: Option<Shape>) -> Result<Shape> {
        let g = self.groups;
        if g == 0 {
            return Err(Error::Divisibility("groups must be positive".into()));
        }
        if input.c % g != 0 {
            return Err(Error::Divisibility(format!(
                "input channels {} not divisible by groups {g}",
                input.c
            )));
        }
        if weight.n % g != 0 {
            return Err(Error::Divisibility(format!(
                "output channels {} not divisible by groups {g}",
                weight.n
            )));
        }
        if weight.c != input.c / g {
            return Err(Error::Shape(format!(
                "weight in-channel dimension {} != input channels {} / groups {g}",
                weight.c, input.c
            )));
        }
        if (weight.h, weight.w) != self.kernel {
            return Err(Error::Shape(format!(
                "weight kernel dimension {}x{} != configured kernel {}x{}",
                weight.h, weight.w, self.kernel.0, self.kernel.1
            )));
        }
        if let Some(b) = bias {
            if b.numel() != weight.n {
                return Err(Error::Shape(format!(
                    "bias length {} != output channels {}",
                    b.numel(),
                    weight.n
                )));
            }
        }
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, weight.n, oh, ow))
    }
}

/// Range of output columns whose input column `o * stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// `dst[i] += w * src[i * stride]`
#[inline(always)]
fn axpy_gather<T: Element>(dst: &mut [T], src: &[T], stride: usize, w: T) {
    if stride == 1 {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = *d + w * v;
        }
    } else {
        for (d, &v) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *d = *d + w * v;
        }
    }
}

/// `dst[i * stride] += w * src[i]`
#[inline(always)]
fn axpy_scatter<T: Element>(dst: &mut [T], src: &[T], stride: usize, w: T) {
    if stride == 1 {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = *d + w * v;
        }
    } else {
        for (d, &v) in dst.iter_mut().step_by(stride).zip(src) {
            *d = *d + w * v;
        }
    }
}

/// `acc + sum_i a[i] * b[i * stride]`, accumulated left to right.
#[inline(always)]
fn dot_gather<T: Element>(acc: T, a: &[T], b: &[T], stride: usize) -> T {
    if stride == 1 {
        a.iter().zip(b).fold(acc, |s, (&x, &y)| s + x * y)
    } else {
        a.iter().zip(b.iter().step_by(stride)).fold(acc, |s, (&x, &y)| s + x * y)
    }
}

pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<Tensor<T>> {
    let is = input.shape();
    let ws = weight.shape();
    let os = params.check(is, ws, bias.map(|b| b.shape()))?;
    let (kh, kw) = params.kernel;
    let (s, p) = (params.stride, params.padding);
    let cin_g = ws.c;
    let cout_g = ws.n / params.groups;
    let in_plane = is.plane();
    let out_plane = os.plane();
    let x = input.data();
    let wd = weight.data();
    // 1x1, stride 1, no padding: planes map onto each other element for element
    let flat = (kh, kw, s, p) == (1, 1, 1, 0);
    let mut out = Tensor::zeros(os);
    parallel::for_each_chunk(out.data_mut(), out_plane, |idx, plane| {
        let n = idx / os.c;
        let oc = idx % os.c;
        let g = oc / cout_g;
        let b = bias.map_or(T::zero(), |b| b.data()[oc]);
        plane.iter_mut().for_each(|v| *v = b);
        for icg in 0..cin_g {
            let ic = g * cin_g + icg;
            let xin = &x[(n * is.c + ic) * in_plane..][..in_plane];
            let wbase = (oc * cin_g + icg) * kh * kw;
            if flat {
                axpy_gather(plane, xin, 1, wd[wbase]);
                continue;
            }
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(os.h, is.h, ky, s, p);
                for kx in 0..kw {
                    let wv = wd[wbase + ky * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(os.w, is.w, kx, s, p);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let src = &xin[iy * is.w + ox_lo * s + kx - p..(iy + 1) * is.w];
                        let dst = &mut plane[oy * os.w + ox_lo..oy * os.w + ox_hi];
                        axpy_gather(dst, src, s, wv);
                    }
                }
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    params: ConvParams,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let is = input.shape();
    let ws = weight.shape();
    let os = params.check(is, ws, None)?;
    grad_out.expect_shape(os, "conv2d output gradient")?;
    let (kh, kw) = params.kernel;
    let (s, p) = (params.stride, params.padding);
    let cin_g = ws.c;
    let cout_g = ws.n / params.groups;
    let in_plane = is.plane();
    let out_plane = os.plane();
    let x = input.data();
    let wd = weight.data();
    let gy = grad_out.data();
    let flat = (kh, kw, s, p) == (1, 1, 1, 0);

    let mut gw = Tensor::zeros(ws);
    parallel::for_each_chunk(gw.data_mut(), cin_g * kh * kw, |oc, chunk| {
        let g = oc / cout_g;
        for n in 0..is.n {
            let gplane = &gy[(n * os.c + oc) * out_plane..][..out_plane];
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let xin = &x[(n * is.c + ic) * in_plane..][..in_plane];
                if flat {
                    chunk[icg] = chunk[icg] + dot_gather(T::zero(), gplane, xin, 1);
                    continue;
                }
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(os.h, is.h, ky, s, p);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(os.w, is.w, kx, s, p);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let gs = &gplane[oy * os.w + ox_lo..oy * os.w + ox_hi];
                            let xs = &xin[iy * is.w + ox_lo * s + kx - p..(iy + 1) * is.w];
                            acc = dot_gather(acc, gs, xs, s);
                        }
                        let slot = &mut chunk[(icg * kh + ky) * kw + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });

    let mut gx = Tensor::zeros(is);
    parallel::for_each_chunk(gx.data_mut(), is.c * in_plane, |n, sample| {
        for oc in 0..os.c {
            let g = oc / cout_g;
            let gplane = &gy[(n * os.c + oc) * out_plane..][..out_plane];
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let gin = &mut sample[ic * in_plane..][..in_plane];
                let wbase = (oc * cin_g + icg) * kh * kw;
                if flat {
                    axpy_scatter(gin, gplane, 1, wd[wbase]);
                    continue;
                }
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(os.h, is.h, ky, s, p);
                    for kx in 0..kw {
                        let wv = wd[wbase + ky * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(os.w, is.w, kx, s, p);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let gs = &gplane[oy * os.w + ox_lo..oy * os.w + ox_hi];
                            let dst = &mut gin[iy * is.w + ox_lo * s + kx - p..(iy + 1) * is.w];
                            axpy_scatter(dst, gs, s, wv);
                        }
                    }
                }
            }
        }
    });

    let gb = has_bias.then(|| {
        let mut b = vec![T::zero(); os.c];
        for n in 0..os.n {
            for (oc, slot) in b.iter_mut().enumerate() {
                let plane = &gy[(n * os.c + oc) * out_plane..][..out_plane];
                *slot = plane.iter().fold(*slot, |a, &v| a + v);
            }
        }
        Tensor::vector(b)
    });

    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}
