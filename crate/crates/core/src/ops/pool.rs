use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Argmax positions (flat input indices) recorded by [`maxpool`].
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

pub fn pool_out_time(t: usize, extent: usize, stride: usize) -> Result<usize> {
    if extent == 0 || stride == 0 {
        return Err(Error::invalid("maxpool: extent and stride must be positive"));
    }
    if extent > t {
        return Err(Error::invalid(format!(
            "maxpool: extent {extent} exceeds time extent {t}"
        )));
    }
    Ok((t - extent) / stride + 1)
}

/// Windowed max along the time axis of `[b, c, T, W]`.
pub fn maxpool<T: Scalar>(x: &Tensor<T>, extent: usize, stride: usize) -> Result<(Tensor<T>, PoolIndices)> {
    if x.ndim() != 4 {
        return Err(Error::shape("maxpool", &[0, 0, 0, 0], x.shape()));
    }
    let (b, c, t, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let to = pool_out_time(t, extent, stride)?;
    let mut out = Vec::with_capacity(b * c * to * w);
    let mut argmax = Vec::with_capacity(out.capacity());
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * t * w;
        for ot in 0..to {
            for wi in 0..w {
                let mut best = base + ot * stride * w + wi;
                for dt in 1..extent {
                    let idx = base + (ot * stride + dt) * w + wi;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[b, c, to, w], out)?,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool_backward<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::shape(
            "maxpool_backward",
            &[indices.argmax.len()],
            grad_out.shape(),
        ));
    }
    let mut gx = Tensor::zeros(&indices.input_shape);
    let gxd = gx.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(&indices.argmax) {
        gxd[idx] += g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::testing::finite_difference_check;

    #[test]
    fn unit_extent_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::<f32>::randn(&[2, 3, 5, 2], 1.0, &mut rng);
        assert_eq!(maxpool(&x, 1, 1).unwrap().0, x);
    }

    #[test]
    fn pairs_along_time() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 4, 1], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let (y, idx) = maxpool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
        let g = maxpool_backward(&Tensor::from_vec(&[1, 1, 2, 1], vec![5.0, 7.0]).unwrap(), &idx).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0, 0.0, 7.0]);
    }

    #[test]
    fn oversized_extent_rejected() {
        assert!(maxpool(&Tensor::<f32>::zeros(&[1, 1, 3, 1]), 4, 1).is_err());
    }

    #[test]
    fn gradient_routes_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::<f64>::randn(&[2, 2, 9, 3], 1.0, &mut rng);
        let (y, idx) = maxpool(&x, 3, 2).unwrap();
        let probe = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
        let gx = maxpool_backward(&probe, &idx).unwrap();
        finite_difference_check(
            &x,
            &gx,
            |p| {
                let (y, _) = maxpool(p, 3, 2).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            },
            1e-5,
        );
    }
}
