use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check<T: Scalar>(op: &'static str, x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    if x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0) {
        let expected = [x.shape().first().copied().unwrap_or(0), w.shape().first().copied().unwrap_or(0)];
        return Err(Error::shape(op, &expected, x.shape()));
    }
    bias.expect_shape(op, &[w.dim(1)])
}

/// `x @ w + bias` for `x: [b, f]`, `w: [f, u]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    check("dense_forward", x, w, bias)?;
    let (b, f, u) = (x.dim(0), x.dim(1), w.dim(1));
    let mut out = Vec::with_capacity(b * u);
    for bi in 0..b {
        let mut row = bias.data().to_vec();
        let xr = &x.data()[bi * f..(bi + 1) * f];
        for (fi, &xv) in xr.iter().enumerate() {
            let wr = &w.data()[fi * u..(fi + 1) * u];
            for (o, &wv) in row.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
        out.extend(row);
    }
    Tensor::from_vec(&[b, u], out)
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, f, u) = (x.dim(0), x.dim(1), w.dim(1));
    grad_out.expect_shape("dense_backward", &[b, u])?;
    let mut gx = Tensor::zeros(&[b, f]);
    let mut gw = Tensor::zeros(&[f, u]);
    let mut gb = Tensor::zeros(&[u]);
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    for bi in 0..b {
        let g = &gd[bi * u..(bi + 1) * u];
        for (o, &gv) in gb.data_mut().iter_mut().zip(g) {
            *o += gv;
        }
        let gxr = &mut gx.data_mut()[bi * f..(bi + 1) * f];
        for (fi, o) in gxr.iter_mut().enumerate() {
            let wr = &wd[fi * u..(fi + 1) * u];
            *o = wr.iter().zip(g).map(|(&a, &b)| a * b).sum();
        }
        let xr = &xd[bi * f..(bi + 1) * f];
        let gwd = gw.data_mut();
        for (fi, &xv) in xr.iter().enumerate() {
            for (o, &gv) in gwd[fi * u..(fi + 1) * u].iter_mut().zip(g) {
                *o += xv * gv;
            }
        }
    }
    Ok((gx, gw, gb))
}
