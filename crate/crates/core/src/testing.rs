//! Independent oracles shared by unit tests.

use crate::ops::conv::ConvSpec;
use crate::tensor::{Scalar, Tensor};

/// Direct nested-loop cross-correlation, written without the plane kernels.
pub fn direct_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    let (b, c, t, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let n = spec.out_channels;
    let to = (t + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    let wo = wd + 2 * spec.width_padding - spec.kernel_width + 1;
    let mut out = vec![T::zero(); b * n * to * wo];
    for bi in 0..b {
        for j in 0..n {
            for ot in 0..to {
                for ow in 0..wo {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for dt in 0..spec.kernel {
                            for dw in 0..spec.kernel_width {
                                let it = (ot * spec.stride + dt) as isize - spec.padding as isize;
                                let iw = (ow + dw) as isize - spec.width_padding as isize;
                                if it < 0 || it >= t as isize || iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((bi * c + ci) * t + it as usize) * wd + iw as usize];
                                let kv = w.data()[((j * c + ci) * spec.kernel + dt)
                                    * spec.kernel_width
                                    + dw];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((bi * n + j) * to + ot) * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, n, to, wo], out).unwrap()
}

/// Central finite differences of `f` at `x`, compared to `analytic` by
/// vector relative error `|a - n| / (|a| + |n|)`.
pub fn finite_difference_check(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    f: impl Fn(&Tensor<f64>) -> f64,
    tol: f64,
) {
    let numeric = numeric_gradient(x, f, 1e-6);
    let rel = relative_error(analytic, &numeric);
    assert!(
        rel < tol,
        "finite-difference mismatch: relative error {rel:e} >= {tol:e}"
    );
}

pub fn numeric_gradient(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64, h: f64) -> Tensor<f64> {
    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    numeric
}

pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
        + b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        0.0
    } else {
        diff / norm
    }
}
