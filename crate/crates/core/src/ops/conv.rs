//! Temporal convolution over `[batch, channels, time, width]` feature maps.
//!
//! Filters are `[out, in, d, kw]`. The layers of the network use `kw = 1`,
//! so the sensor-attribute axis passes through untouched; the similarity
//! head of the local loss uses a 3x3 kernel with width padding.
//!
//! All paths are built from the three single-channel kernels below
//! ([`correlate_acc`], [`correlate_grad_input`], [`correlate_grad_kernel`]),
//! so the naive and split-transform-merge Lego paths pay identical per-MAC
//! cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Temporal kernel extent `d`.
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub kernel_width: usize,
    pub width_padding: usize,
}

impl ConvSpec {
    /// A `d x 1` kernel with stride 1 and no padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            kernel_width: 1,
            width_padding: 0,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Square `k x k` kernel, stride 1, padding `k / 2` on both axes.
    pub fn square_same(channels_in: usize, channels_out: usize, k: usize) -> Self {
        ConvSpec {
            in_channels: channels_in,
            out_channels: channels_out,
            kernel: k,
            stride: 1,
            padding: k / 2,
            kernel_width: k,
            width_padding: k / 2,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel_width,
        ]
    }

    pub fn out_time(&self, in_time: usize) -> Result<usize> {
        let padded = in_time + 2 * self.padding;
        if self.stride == 0 || self.kernel == 0 || padded < self.kernel {
            return Err(Error::invalid(format!(
                "conv: time extent {in_time} with padding {} too short for kernel {} (stride {})",
                self.padding, self.kernel, self.stride
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn out_width(&self, in_width: usize) -> Result<usize> {
        let padded = in_width + 2 * self.width_padding;
        if self.kernel_width == 0 || padded < self.kernel_width {
            return Err(Error::invalid(format!(
                "conv: width {in_width} too narrow for kernel width {}",
                self.kernel_width
            )));
        }
        Ok(padded - self.kernel_width + 1)
    }

    /// Multiply-accumulates for one example with the given input extent.
    pub fn macs(&self, in_time: usize, in_width: usize) -> Result<u64> {
        let t = self.out_time(in_time)? as u64;
        let w = self.out_width(in_width)? as u64;
        Ok((self.out_channels * self.in_channels * self.kernel * self.kernel_width) as u64 * t * w)
    }
}

/// Geometry of one single-channel correlation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Plane {
    pub t_in: usize,
    pub w_in: usize,
    pub t_out: usize,
    pub w_out: usize,
    pub kernel: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub padding: usize,
    pub width_padding: usize,
}

impl Plane {
    pub fn new(spec: &ConvSpec, t_in: usize, w_in: usize) -> Result<Self> {
        Ok(Plane {
            t_in,
            w_in,
            t_out: spec.out_time(t_in)?,
            w_out: spec.out_width(w_in)?,
            kernel: spec.kernel,
            kernel_width: spec.kernel_width,
            stride: spec.stride,
            padding: spec.padding,
            width_padding: spec.width_padding,
        })
    }

    #[inline]
    pub fn in_len(&self) -> usize {
        self.t_in * self.w_in
    }

    #[inline]
    pub fn out_len(&self) -> usize {
        self.t_out * self.w_out
    }

    #[inline]
    fn contiguous(&self) -> bool {
        self.kernel_width == 1 && self.width_padding == 0 && self.stride == 1
    }

    /// Output rows `[lo, hi)` whose input row `to + dt - padding` is in range (stride 1).
    #[inline]
    fn row_range(&self, dt: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(dt);
        let hi = (self.t_in + self.padding).saturating_sub(dt).min(self.t_out);
        (lo, hi.max(lo))
    }

    /// Input row feeding output row `to` at kernel tap `dt`, if not padding.
    #[inline]
    fn input_row(&self, to: usize, dt: usize) -> Option<usize> {
        let ti = (to * self.stride + dt).checked_sub(self.padding)?;
        (ti < self.t_in).then_some(ti)
    }

    /// Output columns `[lo, hi)` whose input column `wo + dw - width_padding` is in range.
    #[inline]
    fn col_range(&self, dw: usize) -> (usize, usize) {
        let lo = self.width_padding.saturating_sub(dw);
        let hi = (self.w_in + self.width_padding)
            .saturating_sub(dw)
            .min(self.w_out);
        (lo, hi.max(lo))
    }
}

/// `out += correlate(x, k)` for one input plane and one kernel plane.
#[inline]
pub(crate) fn correlate_acc<T: Scalar>(out: &mut [T], x: &[T], k: &[T], p: &Plane) {
    debug_assert_eq!(out.len(), p.out_len());
    debug_assert_eq!(x.len(), p.in_len());
    if p.contiguous() {
        let w = p.w_in;
        for (dt, &kv) in k.iter().enumerate().take(p.kernel) {
            let (lo, hi) = p.row_range(dt);
            if lo >= hi {
                continue;
            }
            let src = (lo + dt - p.padding) * w;
            let dst = &mut out[lo * w..hi * w];
            for (o, &xv) in dst.iter_mut().zip(&x[src..src + (hi - lo) * w]) {
                *o += kv * xv;
            }
        }
        return;
    }
    for to in 0..p.t_out {
        let out_row = &mut out[to * p.w_out..(to + 1) * p.w_out];
        for dt in 0..p.kernel {
            let Some(ti) = p.input_row(to, dt) else {
                continue;
            };
            let x_row = &x[ti * p.w_in..(ti + 1) * p.w_in];
            for dw in 0..p.kernel_width {
                let kv = k[dt * p.kernel_width + dw];
                let (lo, hi) = p.col_range(dw);
                let shift = dw as isize - p.width_padding as isize;
                for wo in lo..hi {
                    out_row[wo] += kv * x_row[(wo as isize + shift) as usize];
                }
            }
        }
    }
}

/// `gx += d(correlate(x, k))/dx ^T g`
#[inline]
pub(crate) fn correlate_grad_input<T: Scalar>(gx: &mut [T], g: &[T], k: &[T], p: &Plane) {
    if p.contiguous() {
        let w = p.w_in;
        for (dt, &kv) in k.iter().enumerate().take(p.kernel) {
            let (lo, hi) = p.row_range(dt);
            if lo >= hi {
                continue;
            }
            let dst = (lo + dt - p.padding) * w;
            for (o, &gv) in gx[dst..dst + (hi - lo) * w]
                .iter_mut()
                .zip(&g[lo * w..hi * w])
            {
                *o += kv * gv;
            }
        }
        return;
    }
    for to in 0..p.t_out {
        let g_row = &g[to * p.w_out..(to + 1) * p.w_out];
        for dt in 0..p.kernel {
            let Some(ti) = p.input_row(to, dt) else {
                continue;
            };
            let gx_row = &mut gx[ti * p.w_in..(ti + 1) * p.w_in];
            for dw in 0..p.kernel_width {
                let kv = k[dt * p.kernel_width + dw];
                let (lo, hi) = p.col_range(dw);
                let shift = dw as isize - p.width_padding as isize;
                for wo in lo..hi {
                    gx_row[(wo as isize + shift) as usize] += kv * g_row[wo];
                }
            }
        }
    }
}

/// `gk += d(correlate(x, k))/dk ^T g`
#[inline]
pub(crate) fn correlate_grad_kernel<T: Scalar>(gk: &mut [T], g: &[T], x: &[T], p: &Plane) {
    if p.contiguous() {
        let w = p.w_in;
        for (dt, gkv) in gk.iter_mut().enumerate().take(p.kernel) {
            let (lo, hi) = p.row_range(dt);
            if lo >= hi {
                continue;
            }
            let src = (lo + dt - p.padding) * w;
            let mut acc = T::zero();
            for (&gv, &xv) in g[lo * w..hi * w].iter().zip(&x[src..src + (hi - lo) * w]) {
                acc += gv * xv;
            }
            *gkv += acc;
        }
        return;
    }
    for dt in 0..p.kernel {
        for dw in 0..p.kernel_width {
            let (lo, hi) = p.col_range(dw);
            let shift = dw as isize - p.width_padding as isize;
            let mut acc = T::zero();
            for to in 0..p.t_out {
                let Some(ti) = p.input_row(to, dt) else {
                    continue;
                };
                let g_row = &g[to * p.w_out..(to + 1) * p.w_out];
                let x_row = &x[ti * p.w_in..(ti + 1) * p.w_in];
                for wo in lo..hi {
                    acc += g_row[wo] * x_row[(wo as isize + shift) as usize];
                }
            }
            gk[dt * p.kernel_width + dw] += acc;
        }
    }
}

fn check_conv_operands<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Plane> {
    if x.ndim() != 4 || x.dim(1) != spec.in_channels {
        let mut expected = x.shape().to_vec();
        expected.resize(4, 0);
        expected[1] = spec.in_channels;
        return Err(Error::shape(op, &expected, x.shape()));
    }
    w.expect_shape(op, &spec.weight_shape())?;
    Plane::new(spec, x.dim(2), x.dim(3))
}

/// Output shape of [`conv_forward`] for an input of shape `[b, c, t, w]`.
pub fn conv_output_shape(spec: &ConvSpec, input: &[usize]) -> Result<[usize; 4]> {
    Ok([
        input[0],
        spec.out_channels,
        spec.out_time(input[2])?,
        spec.out_width(input[3])?,
    ])
}

/// Cross-correlation of `x: [b, c, T, W]` with `w: [n, c, d, kw]`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let plane = check_conv_operands("conv_forward", x, w, spec)?;
    let (b, c, n) = (x.dim(0), spec.in_channels, spec.out_channels);
    let ksz = spec.kernel * spec.kernel_width;
    let (il, ol) = (plane.in_len(), plane.out_len());
    let mut out = Tensor::zeros(&[b, n, plane.t_out, plane.w_out]);
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for bi in 0..b {
        for j in 0..n {
            let dst = &mut od[(bi * n + j) * ol..(bi * n + j + 1) * ol];
            for ci in 0..c {
                let src = &xd[(bi * c + ci) * il..(bi * c + ci + 1) * il];
                let k = &wd[(j * c + ci) * ksz..(j * c + ci + 1) * ksz];
                correlate_acc(dst, src, k, &plane);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_forward`] with respect to its input and its filters.
pub fn conv_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let plane = check_conv_operands("conv_backward", x, w, spec)?;
    let (b, c, n) = (x.dim(0), spec.in_channels, spec.out_channels);
    grad_out.expect_shape("conv_backward", &[b, n, plane.t_out, plane.w_out])?;
    let ksz = spec.kernel * spec.kernel_width;
    let (il, ol) = (plane.in_len(), plane.out_len());
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    {
        let gxd = gx.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let dst = &mut gxd[(bi * c + ci) * il..(bi * c + ci + 1) * il];
                for j in 0..n {
                    let g = &gd[(bi * n + j) * ol..(bi * n + j + 1) * ol];
                    let k = &wd[(j * c + ci) * ksz..(j * c + ci + 1) * ksz];
                    correlate_grad_input(dst, g, k, &plane);
                }
            }
        }
    }
    {
        let gwd = gw.data_mut();
        for j in 0..n {
            for ci in 0..c {
                let dst = &mut gwd[(j * c + ci) * ksz..(j * c + ci + 1) * ksz];
                for bi in 0..b {
                    let g = &gd[(bi * n + j) * ol..(bi * n + j + 1) * ol];
                    let src = &xd[(bi * c + ci) * il..(bi * c + ci + 1) * il];
                    correlate_grad_kernel(dst, g, src, &plane);
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Adds a per-channel bias to `[b, n, ...]`.
pub fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let n = x.dim(1);
    bias.expect_shape("add_channel_bias", &[n])?;
    let inner: usize = x.shape()[2..].iter().product();
    let bd = bias.data().to_vec();
    for (idx, chunk) in x.data_mut().chunks_mut(inner).enumerate() {
        let bv = bd[idx % n];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
    Ok(())
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let n = grad_out.dim(1);
    let inner: usize = grad_out.shape()[2..].iter().product();
    let mut gb = Tensor::zeros(&[n]);
    let gbd = gb.data_mut();
    for (idx, chunk) in grad_out.data().chunks(inner).enumerate() {
        gbd[idx % n] += chunk.iter().copied().sum::<T>();
    }
    gb
}
