//! Per-channel batch normalization over `[b, c, T, W]`.

use crate::error::{Error, Result};
use crate::tensor::{lit, Param, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    /// Unbiased running variance.
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

/// Saved activations for [`BatchNorm::backward`].
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: lit(BN_EPS),
            momentum: lit(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
        let c = self.channels();
        if x.ndim() < 2 || x.dim(1) != c {
            let mut expected = x.shape().to_vec();
            expected.resize(expected.len().max(2), 0);
            expected[1] = c;
            return Err(Error::shape("batchnorm", &expected, x.shape()));
        }
        let b = x.dim(0);
        let inner: usize = x.shape()[2..].iter().product();
        let count = b * inner;
        let (mean, var) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::invalid(
                        "batchnorm: training mode needs a batch of at least 2 examples",
                    ));
                }
                let (mean, var) = channel_stats(x, c, inner);
                let unbias = lit::<T>(count as f64 / (count as f64 - 1.0).max(1.0));
                let m = self.momentum;
                for ci in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ci];
                    *rm = (T::one() - m) * *rm + m * mean[ci];
                    let rv = &mut self.running_var.data_mut()[ci];
                    *rv = (T::one() - m) * *rv + m * var[ci] * unbias;
                }
                (mean, var)
            }
            Mode::Infer => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let (out, normalized, inv_std) = self.apply(x, &mean, &var, inner);
        let cache = (mode == Mode::Train).then_some(BatchNormCache { normalized, inv_std });
        Ok((out, cache))
    }

    /// Inference-mode forward pass with the running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels();
        if x.ndim() < 2 || x.dim(1) != c {
            return Err(Error::shape("batchnorm", &[x.dim(0), c], x.shape()));
        }
        let inner: usize = x.shape()[2..].iter().product();
        Ok(self.apply(x, self.running_mean.data(), self.running_var.data(), inner).0)
    }

    fn apply(&self, x: &Tensor<T>, mean: &[T], var: &[T], inner: usize) -> (Tensor<T>, Tensor<T>, Vec<T>) {
        let c = self.channels();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let mut normalized = x.clone();
        for (idx, chunk) in normalized.data_mut().chunks_mut(inner).enumerate() {
            let ci = idx % c;
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v - mean[ci]) * inv_std[ci]);
        }
        let mut out = normalized.clone();
        let (g, bt) = (self.gamma.value.data(), self.beta.value.data());
        for (idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let ci = idx % c;
            chunk.iter_mut().for_each(|v| *v = g[ci] * *v + bt[ci]);
        }
        (out, normalized, inv_std)
    }

    /// Accumulates `gamma`/`beta` gradients and returns the input gradient
    /// for a training-mode forward pass.
    pub fn backward(&mut self, grad_out: &Tensor<T>, cache: &BatchNormCache<T>) -> Result<Tensor<T>> {
        grad_out.expect_shape("batchnorm_backward", cache.normalized.shape())?;
        let c = self.channels();
        let inner: usize = grad_out.shape()[2..].iter().product();
        let count = lit::<T>((grad_out.dim(0) * inner) as f64);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (idx, (gc, xc)) in grad_out
            .data()
            .chunks(inner)
            .zip(cache.normalized.data().chunks(inner))
            .enumerate()
        {
            let ci = idx % c;
            for (&g, &xh) in gc.iter().zip(xc) {
                sum_g[ci] += g;
                sum_gx[ci] += g * xh;
            }
        }
        for ci in 0..c {
            self.gamma.grad.data_mut()[ci] += sum_gx[ci];
            self.beta.grad.data_mut()[ci] += sum_g[ci];
        }
        let gamma = self.gamma.value.data();
        let mut gx = grad_out.clone();
        for (idx, (gc, xc)) in gx
            .data_mut()
            .chunks_mut(inner)
            .zip(cache.normalized.data().chunks(inner))
            .enumerate()
        {
            let ci = idx % c;
            let scale = gamma[ci] * cache.inv_std[ci] / count;
            for (g, &xh) in gc.iter_mut().zip(xc) {
                *g = scale * (count * *g - sum_g[ci] - xh * sum_gx[ci]);
            }
        }
        Ok(gx)
    }
}

/// Per-channel mean and biased variance.
fn channel_stats<T: Scalar>(x: &Tensor<T>, c: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let count = lit::<T>((x.dim(0) * inner) as f64);
    let mut mean = vec![T::zero(); c];
    for (idx, chunk) in x.data().chunks(inner).enumerate() {
        mean[idx % c] += chunk.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); c];
    for (idx, chunk) in x.data().chunks(inner).enumerate() {
        let m = mean[idx % c];
        var[idx % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    (mean, var)
}
