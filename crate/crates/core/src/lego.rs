//! Lego-filter convolution.
//!
//! A layer with `n` output channels over `c` input channels keeps only a
//! bank of `k = round(m * n)` filters of `c / o` channels each. The input is
//! split into `o` channel fragments; every (output channel, fragment) pair
//! picks exactly one bank filter through a one-hot mask row. The mask is the
//! argmax of a float proxy tensor, and the proxy receives the mask gradient
//! unchanged (straight-through estimator).
//!
//! Two execution paths produce the same output:
//!
//! * naive: for every output channel, convolve each fragment with its
//!   selected bank filter and sum (`n * o` fragment convolutions);
//! * split-transform-merge: convolve each fragment with every bank filter
//!   once (`o * k` intermediate maps), then gather and sum the selected
//!   intermediates per output channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::conv::{correlate_acc, correlate_grad_input, correlate_grad_kernel, ConvSpec, Plane};
use crate::tensor::{Param, Scalar, Tensor};

/// Half-width of the uniform range used to initialize mask proxies.
pub const PROXY_INIT_RANGE: f64 = 0.01;

/// Number of bank filters for `n` outputs at bank ratio `m`.
pub fn bank_size(n: usize, m: f64) -> usize {
    ((m * n as f64).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPath {
    Naive,
    SplitTransformMerge,
}

#[derive(Debug, Clone)]
pub struct LegoLayer<T = f32> {
    spec: ConvSpec,
    fragments: usize,
    bank_ratio: f64,
    /// `[k, c/o, d, kw]`
    pub bank: Param<T>,
    /// `[n, o, k]`
    pub proxy: Param<T>,
    mask: Tensor<T>,
    selection: Vec<usize>,
    cache: Option<LegoCache<T>>,
}

#[derive(Debug, Clone)]
struct LegoCache<T> {
    input: Tensor<T>,
    intermediates: Option<Intermediates<T>>,
}

/// The `o * k` maps `conv(fragment_i, bank_t)`, laid out `[o, k, b, T', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates<T> {
    fragments: usize,
    bank: usize,
    batch: usize,
    t_out: usize,
    w_out: usize,
    data: Vec<T>,
}

impl<T: Scalar> Intermediates<T> {
    fn plane_len(&self) -> usize {
        self.t_out * self.w_out
    }

    /// `conv(fragment, brick)` for batch item `b`.
    pub fn map(&self, fragment: usize, brick: usize, b: usize) -> &[T] {
        let p = self.plane_len();
        let start = ((fragment * self.bank + brick) * self.batch + b) * p;
        &self.data[start..start + p]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients produced by [`lego_backward`].
#[derive(Debug, Clone)]
pub struct LegoGrads<T> {
    pub input: Tensor<T>,
    pub bank: Tensor<T>,
    pub proxy: Tensor<T>,
}

/// The channel split of an input feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentSet<T> {
    pub fragments: Vec<Tensor<T>>,
}

impl<T: Scalar> FragmentSet<T> {
    /// Concatenates the fragments back along the channel axis.
    pub fn concat(&self) -> Tensor<T> {
        let first = &self.fragments[0];
        let (b, ct, t, w) = (first.dim(0), first.dim(1), first.dim(2), first.dim(3));
        let o = self.fragments.len();
        let plane = ct * t * w;
        let mut data = Vec::with_capacity(b * o * plane);
        for bi in 0..b {
            for f in &self.fragments {
                data.extend_from_slice(&f.data()[bi * plane..(bi + 1) * plane]);
            }
        }
        Tensor::from_vec(&[b, o * ct, t, w], data).expect("fragment shapes")
    }
}

/// Splits `[b, c, T, W]` into `o` fragments of `c / o` contiguous channels.
pub fn split_input<T: Scalar>(x: &Tensor<T>, o: usize) -> Result<FragmentSet<T>> {
    if x.ndim() != 4 {
        return Err(Error::shape("split_input", &[0, 0, 0, 0], x.shape()));
    }
    let (b, c, t, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    check_divisible(c, o)?;
    let ct = c / o;
    let plane = ct * t * w;
    let fragments = (0..o)
        .map(|i| {
            let mut data = Vec::with_capacity(b * plane);
            for bi in 0..b {
                let start = (bi * c + i * ct) * t * w;
                data.extend_from_slice(&x.data()[start..start + plane]);
            }
            Tensor::from_vec(&[b, ct, t, w], data).expect("fragment shape")
        })
        .collect();
    Ok(FragmentSet { fragments })
}

fn check_divisible(c: usize, o: usize) -> Result<()> {
    if o == 0 || c % o != 0 {
        return Err(Error::invalid(format!(
            "lego: {c} input channels cannot be split into {o} equal fragments \
             (channel count must be a multiple of o)"
        )));
    }
    Ok(())
}

/// Argmax index of every length-`k` row of `proxy`; ties go to the lowest index.
pub fn argmax_selection<T: Scalar>(proxy: &Tensor<T>) -> Vec<usize> {
    let k = *proxy.shape().last().expect("proxy rank");
    proxy
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (t, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = t;
                }
            }
            best
        })
        .collect()
}

/// One-hot mask with a 1 at the argmax of every row of `proxy`.
pub fn binarize<T: Scalar>(proxy: &Tensor<T>) -> Tensor<T> {
    let k = *proxy.shape().last().expect("proxy rank");
    mask_from_selection(proxy.shape(), k, &argmax_selection(proxy))
}

fn mask_from_selection<T: Scalar>(shape: &[usize], k: usize, selection: &[usize]) -> Tensor<T> {
    let mut mask = Tensor::zeros(shape);
    for (row, &t) in selection.iter().enumerate() {
        mask.data_mut()[row * k + t] = T::one();
    }
    mask
}

/// A layer with `n` outputs over `c` inputs, `d x 1` kernels, stride 1, no padding.
pub fn init_lego_layer<T: Scalar>(n: usize, c: usize, d: usize, o: usize, m: f64, seed: u64) -> Result<LegoLayer<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LegoLayer::new(ConvSpec::new(c, n, d), o, m, &mut rng)
}

impl<T: Scalar> LegoLayer<T> {
    /// Bank filters are He-normal over the assembled filter's fan-in; proxies
    /// are uniform in `±PROXY_INIT_RANGE`.
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, o: usize, m: f64, rng: &mut R) -> Result<Self> {
        check_divisible(spec.in_channels, o)?;
        if !(m > 0.0 && m <= 1.0) {
            return Err(Error::invalid(format!("lego: bank ratio m={m} must lie in (0, 1]")));
        }
        let n = spec.out_channels;
        let k = bank_size(n, m);
        let ct = spec.in_channels / o;
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel_width) as f64;
        let bank = Tensor::randn(
            &[k, ct, spec.kernel, spec.kernel_width],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        let proxy = Tensor::uniform(&[n, o, k], -PROXY_INIT_RANGE, PROXY_INIT_RANGE, rng);
        Self::from_parts(spec, o, m, bank, proxy)
    }

    /// Builds a layer from explicit bank filters and proxies.
    pub fn from_parts(spec: ConvSpec, o: usize, m: f64, bank: Tensor<T>, proxy: Tensor<T>) -> Result<Self> {
        check_divisible(spec.in_channels, o)?;
        let n = spec.out_channels;
        let k = bank_size(n, m);
        if k > n {
            return Err(Error::invalid(format!("lego: bank size {k} exceeds {n} outputs")));
        }
        bank.expect_shape(
            "lego_bank",
            &[k, spec.in_channels / o, spec.kernel, spec.kernel_width],
        )?;
        proxy.expect_shape("lego_proxy", &[n, o, k])?;
        let selection = argmax_selection(&proxy);
        let mask = mask_from_selection(proxy.shape(), k, &selection);
        Ok(LegoLayer {
            spec,
            fragments: o,
            bank_ratio: m,
            bank: Param::new(bank),
            proxy: Param::new(proxy),
            mask,
            selection,
            cache: None,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn fragments(&self) -> usize {
        self.fragments
    }

    pub fn bank_ratio(&self) -> f64 {
        self.bank_ratio
    }

    pub fn bank_size(&self) -> usize {
        self.bank.shape()[0]
    }

    pub fn fragment_channels(&self) -> usize {
        self.spec.in_channels / self.fragments
    }

    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }

    /// Selected bank filter for `(output, fragment)`.
    pub fn selected(&self, output: usize, fragment: usize) -> usize {
        self.selection[output * self.fragments + fragment]
    }

    /// Row-major `[n, o]` selected bank indices.
    pub fn selection(&self) -> &[usize] {
        &self.selection
    }

    /// Float weights stored by the layer: `k * (c/o) * d * kw`.
    pub fn weight_count(&self) -> usize {
        self.bank.len()
    }

    /// Re-derives the mask from the proxies after an optimizer step.
    pub fn rebinarize(&mut self) {
        self.selection = argmax_selection(&self.proxy.value);
        let k = self.bank_size();
        self.mask = mask_from_selection(self.proxy.shape(), k, &self.selection);
    }

    /// Checks `mask == binarize(proxy)` and that every mask row is one-hot.
    pub fn mask_is_consistent(&self) -> bool {
        let k = self.bank_size();
        let rows_one_hot = self.mask.data().chunks(k).all(|row| {
            row.iter().all(|&v| v == T::zero() || v == T::one())
                && row.iter().filter(|&&v| v == T::one()).count() == 1
        });
        rows_one_hot && self.mask == binarize(&self.proxy.value)
    }

    /// Training forward pass; keeps what [`LegoLayer::backward`] needs.
    pub fn forward_train(&mut self, x: &Tensor<T>, path: ConvPath) -> Result<Tensor<T>> {
        let (out, intermediates) = match path {
            ConvPath::Naive => (lego_conv_naive(x, self)?, None),
            ConvPath::SplitTransformMerge => {
                let inter = transform(x, self)?;
                (merge(&inter, self), Some(inter))
            }
        };
        self.cache = Some(LegoCache {
            input: x.clone(),
            intermediates,
        });
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor<T>, path: ConvPath) -> Result<Tensor<T>> {
        match path {
            ConvPath::Naive => lego_conv_naive(x, self),
            ConvPath::SplitTransformMerge => lego_conv_stm(x, self),
        }
    }

    /// Accumulates bank and proxy gradients, returns the input gradient.
    /// Consumes the state saved by the preceding [`LegoLayer::forward_train`].
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::invalid("lego: backward called without a preceding training forward pass")
        })?;
        let inter = match cache.intermediates {
            Some(i) => i,
            None => transform(&cache.input, self)?,
        };
        let grads = lego_backward(grad_out, &cache.input, self, &inter)?;
        self.bank.grad.axpy(T::one(), &grads.bank);
        self.proxy.grad.axpy(T::one(), &grads.proxy);
        Ok(grads.input)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn plane(&self, x: &Tensor<T>, op: &'static str) -> Result<Plane> {
        if x.ndim() != 4 || x.dim(1) != self.spec.in_channels {
            let mut expected = x.shape().to_vec();
            expected.resize(4, 0);
            expected[1] = self.spec.in_channels;
            return Err(Error::shape(op, &expected, x.shape()));
        }
        Plane::new(&self.spec, x.dim(2), x.dim(3))
    }
}

/// Full-size `[n, c, d, kw]` filters: channel block `i` of filter `j` is the
/// bank filter selected for `(j, i)`.
pub fn assemble_filters<T: Scalar>(layer: &LegoLayer<T>) -> Tensor<T> {
    let spec = layer.spec;
    let (n, c, o) = (spec.out_channels, spec.in_channels, layer.fragments);
    let block = layer.fragment_channels() * spec.kernel * spec.kernel_width;
    let mut data = Vec::with_capacity(n * c * spec.kernel * spec.kernel_width);
    for j in 0..n {
        for i in 0..o {
            let t = layer.selected(j, i);
            data.extend_from_slice(&layer.bank.value.data()[t * block..(t + 1) * block]);
        }
    }
    Tensor::from_vec(&spec.weight_shape(), data).expect("assembled shape")
}

/// Sum over fragments of `conv(fragment_i, selected bank filter)`.
pub fn lego_conv_naive<T: Scalar>(x: &Tensor<T>, layer: &LegoLayer<T>) -> Result<Tensor<T>> {
    let plane = layer.plane(x, "lego_conv_naive")?;
    let (b, c, n, o) = (x.dim(0), layer.spec.in_channels, layer.spec.out_channels, layer.fragments);
    let ct = layer.fragment_channels();
    let ksz = layer.spec.kernel * layer.spec.kernel_width;
    let (il, ol) = (plane.in_len(), plane.out_len());
    let mut out = Tensor::zeros(&[b, n, plane.t_out, plane.w_out]);
    let (xd, bd) = (x.data(), layer.bank.value.data());
    let od = out.data_mut();
    for bi in 0..b {
        for j in 0..n {
            let dst = &mut od[(bi * n + j) * ol..(bi * n + j + 1) * ol];
            for i in 0..o {
                let t = layer.selected(j, i);
                for ch in 0..ct {
                    let src = &xd[(bi * c + i * ct + ch) * il..][..il];
                    let k = &bd[(t * ct + ch) * ksz..][..ksz];
                    correlate_acc(dst, src, k, &plane);
                }
            }
        }
    }
    Ok(out)
}

/// Split and transform: every fragment convolved with every bank filter.
pub fn transform<T: Scalar>(x: &Tensor<T>, layer: &LegoLayer<T>) -> Result<Intermediates<T>> {
    let plane = layer.plane(x, "lego_transform")?;
    let (b, c, o, k) = (x.dim(0), layer.spec.in_channels, layer.fragments, layer.bank_size());
    let ct = layer.fragment_channels();
    let ksz = layer.spec.kernel * layer.spec.kernel_width;
    let (il, ol) = (plane.in_len(), plane.out_len());
    let mut data = vec![T::zero(); o * k * b * ol];
    let (xd, bd) = (x.data(), layer.bank.value.data());
    for i in 0..o {
        for t in 0..k {
            for bi in 0..b {
                let dst = &mut data[((i * k + t) * b + bi) * ol..][..ol];
                for ch in 0..ct {
                    let src = &xd[(bi * c + i * ct + ch) * il..][..il];
                    let kern = &bd[(t * ct + ch) * ksz..][..ksz];
                    correlate_acc(dst, src, kern, &plane);
                }
            }
        }
    }
    Ok(Intermediates {
        fragments: o,
        bank: k,
        batch: b,
        t_out: plane.t_out,
        w_out: plane.w_out,
        data,
    })
}

/// Merge: output channel `j` is the sum, fragment-ascending, of the selected
/// intermediates.
pub fn merge<T: Scalar>(inter: &Intermediates<T>, layer: &LegoLayer<T>) -> Tensor<T> {
    let (b, n, o) = (inter.batch, layer.spec.out_channels, layer.fragments);
    let ol = inter.plane_len();
    let mut out = Tensor::zeros(&[b, n, inter.t_out, inter.w_out]);
    let od = out.data_mut();
    for bi in 0..b {
        for j in 0..n {
            let dst = &mut od[(bi * n + j) * ol..][..ol];
            for i in 0..o {
                let src = inter.map(i, layer.selected(j, i), bi);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    out
}

pub fn lego_conv_stm<T: Scalar>(x: &Tensor<T>, layer: &LegoLayer<T>) -> Result<Tensor<T>> {
    let inter = transform(x, layer)?;
    Ok(merge(&inter, layer))
}

/// Exact gradients for input and bank under the current mask, plus the
/// straight-through proxy gradient
/// `grad_proxy[j, i, t] = <grad_out[:, j], conv(fragment_i, bank_t)>`.
pub fn lego_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    layer: &LegoLayer<T>,
    inter: &Intermediates<T>,
) -> Result<LegoGrads<T>> {
    let plane = layer.plane(x, "lego_backward")?;
    let (b, c, n, o, k) = (
        x.dim(0),
        layer.spec.in_channels,
        layer.spec.out_channels,
        layer.fragments,
        layer.bank_size(),
    );
    grad_out.expect_shape("lego_backward", &[b, n, plane.t_out, plane.w_out])?;
    if inter.batch != b || inter.fragments != o || inter.bank != k || inter.plane_len() != plane.out_len() {
        return Err(Error::invalid(
            "lego_backward: intermediates do not belong to this input (stale forward state)",
        ));
    }
    let ct = layer.fragment_channels();
    let ksz = layer.spec.kernel * layer.spec.kernel_width;
    let (il, ol) = (plane.in_len(), plane.out_len());
    let gd = grad_out.data();

    let mut grad_proxy = Tensor::zeros(&[n, o, k]);
    {
        let gp = grad_proxy.data_mut();
        for j in 0..n {
            for i in 0..o {
                for t in 0..k {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        let g = &gd[(bi * n + j) * ol..][..ol];
                        for (&gv, &iv) in g.iter().zip(inter.map(i, t, bi)) {
                            acc += gv * iv;
                        }
                    }
                    gp[(j * o + i) * k + t] = acc;
                }
            }
        }
    }

    // Gradient of each intermediate map: the sum of output gradients that select it.
    let mut grad_inter = vec![T::zero(); o * k * b * ol];
    let mut used = vec![false; o * k];
    for j in 0..n {
        for i in 0..o {
            let t = layer.selected(j, i);
            used[i * k + t] = true;
            for bi in 0..b {
                let g = &gd[(bi * n + j) * ol..][..ol];
                let dst = &mut grad_inter[((i * k + t) * b + bi) * ol..][..ol];
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
    }

    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_bank = Tensor::zeros(layer.bank.shape());
    let (xd, bd) = (x.data(), layer.bank.value.data());
    for i in 0..o {
        for t in (0..k).filter(|&t| used[i * k + t]) {
            for bi in 0..b {
                let g = &grad_inter[((i * k + t) * b + bi) * ol..][..ol];
                for ch in 0..ct {
                    let xoff = (bi * c + i * ct + ch) * il;
                    let koff = (t * ct + ch) * ksz;
                    correlate_grad_kernel(
                        &mut grad_bank.data_mut()[koff..koff + ksz],
                        g,
                        &xd[xoff..xoff + il],
                        &plane,
                    );
                    correlate_grad_input(
                        &mut grad_x.data_mut()[xoff..xoff + il],
                        g,
                        &bd[koff..koff + ksz],
                        &plane,
                    );
                }
            }
        }
    }

    Ok(LegoGrads {
        input: grad_x,
        bank: grad_bank,
        proxy: grad_proxy,
    })
}

/// Multiply-accumulates of the naive path for one example: `n * c * d * kw * T' * W'`.
pub fn naive_macs(spec: &ConvSpec, in_time: usize, in_width: usize) -> Result<u64> {
    spec.macs(in_time, in_width)
}

/// Multiply-accumulates of the transform stage: `o * k * (c/o) * d * kw * T' * W'`.
pub fn stm_macs(spec: &ConvSpec, o: usize, k: usize, in_time: usize, in_width: usize) -> Result<u64> {
    let per_map = (spec.in_channels / o * spec.kernel * spec.kernel_width) as u64
        * spec.out_time(in_time)? as u64
        * spec.out_width(in_width)? as u64;
    Ok(o as u64 * k as u64 * per_map)
}

/// Additions performed by the merge stage: `(o - 1) * n * T' * W'`.
pub fn merge_adds(spec: &ConvSpec, o: usize, in_time: usize, in_width: usize) -> Result<u64> {
    Ok((o as u64 - 1)
        * spec.out_channels as u64
        * spec.out_time(in_time)? as u64
        * spec.out_width(in_width)? as u64)
}
