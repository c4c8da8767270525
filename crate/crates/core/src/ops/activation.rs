use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient gate is 1 where `x > 0`; ties at exactly zero pass nothing.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu_backward shape")
}

/// Row-wise softmax of `[b, C]` logits, max-shifted.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let classes = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

/// Mean cross-entropy of `[b, C]` logits against class ids, with its
/// gradient `(softmax - onehot) / b`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.ndim() != 2 || logits.dim(0) != targets.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            &[targets.len(), logits.shape().last().copied().unwrap_or(0)],
            logits.shape(),
        ));
    }
    let (b, classes) = (logits.dim(0), logits.dim(1));
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy: target {bad} out of range for {classes} classes"
        )));
    }
    let scale = T::one() / T::from_usize(b).unwrap();
    let mut grad = softmax(logits);
    let mut loss = T::zero();
    for (bi, &t) in targets.iter().enumerate() {
        let row = &logits.data()[bi * classes..(bi + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[t];
        let grow = &mut grad.data_mut()[bi * classes..(bi + 1) * classes];
        grow[t] -= T::one();
        grow.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grad))
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.dim(1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::testing::finite_difference_check;

    #[test]
    fn relu_examples() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::<f32>::from_vec(&[2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let g = relu_backward(&Tensor::full(&[3], 1.0), &x);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_matches_finite_differences_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[40], 1.0, &mut rng).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        let probe = Tensor::<f64>::randn(&[40], 1.0, &mut rng);
        let g = relu_backward(&probe, &x);
        finite_difference_check(
            &x,
            &g,
            |p| relu(p).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum(),
            1e-5,
        );
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::<f64>::full(&[4, 6], 0.3);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 5]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_target_gives_vanishing_loss() {
        let logits = Tensor::<f64>::from_vec(&[1, 3], vec![0.0, 60.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn out_of_range_target_rejected() {
        let logits = Tensor::<f32>::zeros(&[2, 3]);
        assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::<f32>::randn(&[16, 7], 5.0, &mut rng);
        for row in softmax(&logits).data().chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = Tensor::<f64>::randn(&[5, 4], 2.0, &mut rng);
        let targets = [0, 3, 1, 1, 2];
        let (_, g) = softmax_cross_entropy(&logits, &targets).unwrap();
        finite_difference_check(&logits, &g, |p| softmax_cross_entropy(p, &targets).unwrap().0, 1e-5);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let logits = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
    }
}
