//! Local objectives for layer-wise training.
//!
//! Each hidden block owns a [`LocalHead`]: a linear classifier scored by
//! cross-entropy (prediction loss) and a 3x3 convolution whose batch
//! similarity matrix is pulled towards the label similarity matrix
//! (similarity matching loss). The block loss is
//! `(1 - alpha) * prediction + alpha * similarity`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::activation::softmax_cross_entropy;
use crate::ops::conv::{conv_backward, conv_forward, ConvSpec};
use crate::ops::dense::{dense_backward, dense_forward};
use crate::tensor::{lit, Param, Scalar, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.99;

/// Flattened block outputs larger than this are average-pooled over time
/// before the local classifier.
pub const CLASSIFIER_POOL_THRESHOLD: usize = 16384;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalLoss<T> {
    pub prediction: T,
    pub similarity: T,
    pub total: T,
}

/// `(1 - alpha) * prediction + alpha * similarity`
pub fn combine<T: Scalar>(alpha: T, prediction: T, similarity: T) -> T {
    (T::one() - alpha) * prediction + alpha * similarity
}

#[derive(Debug, Clone)]
struct SimilarityCache<T> {
    rows: usize,
    cols: usize,
    /// Unit-norm centered rows; zero rows stay zero.
    unit: Vec<T>,
    norms: Vec<T>,
}

fn similarity_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, SimilarityCache<T>)> {
    let b = x.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::invalid("similarity_matrix: needs a batch of at least 2 examples"));
    }
    let f = x.len() / b;
    let mut unit = x.data().to_vec();
    let mut norms = vec![T::zero(); b];
    let inv_f = lit::<T>(1.0 / f as f64);
    // Centering a constant row leaves only rounding residue of order
    // eps * |value|; such rows count as zero variance.
    let residue = T::epsilon() * lit(16.0 * (f as f64).sqrt());
    for (r, row) in unit.chunks_mut(f).enumerate() {
        let scale = row.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let mean = row.iter().copied().sum::<T>() * inv_f;
        row.iter_mut().for_each(|v| *v -= mean);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > residue * scale {
            norms[r] = norm;
            row.iter_mut().for_each(|v| *v = *v / norm);
        } else {
            row.fill(T::zero());
        }
    }
    let mut s = Tensor::zeros(&[b, b]);
    for i in 0..b {
        for j in i..b {
            let v = if i == j {
                T::one()
            } else {
                let (ri, rj) = (&unit[i * f..(i + 1) * f], &unit[j * f..(j + 1) * f]);
                ri.iter().zip(rj).map(|(&a, &b)| a * b).sum::<T>()
            };
            s.data_mut()[i * b + j] = v;
            s.data_mut()[j * b + i] = v;
        }
    }
    Ok((
        s,
        SimilarityCache {
            rows: b,
            cols: f,
            unit,
            norms,
        },
    ))
}

/// Gradient with respect to the flattened input, given `dL/dS`.
fn similarity_backward<T: Scalar>(grad_s: &Tensor<T>, cache: &SimilarityCache<T>) -> Vec<T> {
    let (b, f) = (cache.rows, cache.cols);
    let mut grad_unit = vec![T::zero(); b * f];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let g = grad_s.data()[i * b + j] + grad_s.data()[j * b + i];
            if g == T::zero() {
                continue;
            }
            let rj = &cache.unit[j * f..(j + 1) * f];
            for (d, &v) in grad_unit[i * f..(i + 1) * f].iter_mut().zip(rj) {
                *d += g * v;
            }
        }
    }
    let inv_f = lit::<T>(1.0 / f as f64);
    for r in 0..b {
        let row = &mut grad_unit[r * f..(r + 1) * f];
        let norm = cache.norms[r];
        if norm == T::zero() {
            row.fill(T::zero());
            continue;
        }
        let u = &cache.unit[r * f..(r + 1) * f];
        let proj = row.iter().zip(u).map(|(&a, &b)| a * b).sum::<T>();
        for (d, &uv) in row.iter_mut().zip(u) {
            *d = (*d - uv * proj) / norm;
        }
        let mean = row.iter().copied().sum::<T>() * inv_f;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    grad_unit
}

/// Adjusted cosine similarity between the flattened examples of a batch:
/// each example is centered on its own mean, then pairwise cosine is taken.
/// Examples with zero variance have zero off-diagonal similarity.
pub fn similarity_matrix<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(similarity_forward(x)?.0)
}

pub fn one_hot<T: Scalar>(targets: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut y = Tensor::zeros(&[targets.len(), classes]);
    for (r, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::invalid(format!(
                "target {t} out of range for {classes} classes"
            )));
        }
        y.data_mut()[r * classes + t] = T::one();
    }
    Ok(y)
}

/// `||S(features) - S(labels)||_F / b`, and `dL/dS(features)`.
fn similarity_distance<T: Scalar>(s: &Tensor<T>, s_labels: &Tensor<T>) -> (T, Tensor<T>) {
    let b = lit::<T>(s.dim(0) as f64);
    let mut diff = s.clone();
    diff.axpy(-T::one(), s_labels);
    let norm = diff.data().iter().map(|&v| v * v).sum::<T>().sqrt();
    let loss = norm / b;
    let grad = if norm > T::zero() {
        diff.map(|v| v / (b * norm))
    } else {
        Tensor::zeros(diff.shape())
    };
    (loss, grad)
}

/// Training-only auxiliary head attached to one hidden block.
#[derive(Debug, Clone)]
pub struct LocalHead<T = f32> {
    /// `[features, classes]`
    pub classifier: Param<T>,
    pub classifier_bias: Param<T>,
    /// `[c, c, 3, 3]`
    pub sim_conv: Param<T>,
    sim_spec: ConvSpec,
    pub alpha: T,
    classes: usize,
    /// `[c, T, W]` of the block output this head reads.
    block_shape: [usize; 3],
    pool_over_time: bool,
    evaluations: usize,
}

impl<T: Scalar> LocalHead<T> {
    pub fn new<R: Rng + ?Sized>(block_shape: [usize; 3], classes: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("local loss: alpha={alpha} outside [0, 1]")));
        }
        let [c, t, w] = block_shape;
        let flat = c * t * w;
        let pool_over_time = flat > CLASSIFIER_POOL_THRESHOLD;
        let features = if pool_over_time { c * w } else { flat };
        let sim_spec = ConvSpec::square_same(c, c, 3);
        Ok(LocalHead {
            classifier: Param::new(Tensor::randn(&[features, classes], (1.0 / features as f64).sqrt(), rng)),
            classifier_bias: Param::new(Tensor::zeros(&[classes])),
            sim_conv: Param::new(Tensor::randn(&sim_spec.weight_shape(), (2.0 / (9 * c) as f64).sqrt(), rng)),
            sim_spec,
            alpha: lit(alpha),
            classes,
            block_shape,
            pool_over_time,
            evaluations: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pools_over_time(&self) -> bool {
        self.pool_over_time
    }

    /// How many times this head has been evaluated.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.classifier, &mut self.classifier_bias, &mut self.sim_conv]
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn as_4d(&self, block_out: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, t, w] = self.block_shape;
        let b = block_out.shape().first().copied().unwrap_or(0);
        if block_out.len() != b * c * t * w {
            return Err(Error::shape("local_head", &[b, c, t, w], block_out.shape()));
        }
        block_out.clone().reshape(&[b, c, t, w])
    }

    fn classifier_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = x.dim(0);
        if !self.pool_over_time {
            return x.clone().reshape(&[b, x.len() / b]);
        }
        let [c, t, w] = self.block_shape;
        let inv_t = lit::<T>(1.0 / t as f64);
        let mut pooled = Tensor::zeros(&[b, c * w]);
        for (plane, out) in x.data().chunks(t * w).zip(pooled.data_mut().chunks_mut(w)) {
            for row in plane.chunks(w) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v *= inv_t);
        }
        Ok(pooled)
    }

    fn classifier_input_backward(&self, grad: &Tensor<T>, b: usize) -> Tensor<T> {
        let [c, t, w] = self.block_shape;
        if !self.pool_over_time {
            return grad.clone().reshape(&[b, c, t, w]).expect("classifier grad shape");
        }
        let inv_t = lit::<T>(1.0 / t as f64);
        let mut gx = Tensor::zeros(&[b, c, t, w]);
        for (plane, g) in gx.data_mut().chunks_mut(t * w).zip(grad.data().chunks(w)) {
            for row in plane.chunks_mut(w) {
                for (o, &gv) in row.iter_mut().zip(g) {
                    *o = gv * inv_t;
                }
            }
        }
        gx
    }

    pub fn logits(&self, block_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.as_4d(block_out)?;
        dense_forward(
            &self.classifier_input(&x)?,
            &self.classifier.value,
            &self.classifier_bias.value,
        )
    }

    /// Cross-entropy of the local linear classifier.
    pub fn prediction_loss(&self, block_out: &Tensor<T>, targets: &[usize]) -> Result<T> {
        Ok(softmax_cross_entropy(&self.logits(block_out)?, targets)?.0)
    }

    /// Similarity matrix of the head's 3x3 convolution of the block output.
    pub fn feature_similarity(&self, block_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.as_4d(block_out)?;
        similarity_matrix(&conv_forward(&x, &self.sim_conv.value, &self.sim_spec)?)
    }

    pub fn similarity_loss(&self, block_out: &Tensor<T>, targets: &[usize]) -> Result<T> {
        let s = self.feature_similarity(block_out)?;
        let sy = similarity_matrix(&one_hot::<T>(targets, self.classes)?)?;
        Ok(similarity_distance(&s, &sy).0)
    }

    pub fn local_loss(&self, block_out: &Tensor<T>, targets: &[usize]) -> Result<LocalLoss<T>> {
        let prediction = self.prediction_loss(block_out, targets)?;
        let similarity = self.similarity_loss(block_out, targets)?;
        Ok(LocalLoss {
            prediction,
            similarity,
            total: combine(self.alpha, prediction, similarity),
        })
    }

    /// Evaluates the local loss, accumulates the head's own gradients and
    /// returns the gradient with respect to `block_out`.
    pub fn loss_and_backward(&mut self, block_out: &Tensor<T>, targets: &[usize]) -> Result<(LocalLoss<T>, Tensor<T>)> {
        self.evaluations += 1;
        let x = self.as_4d(block_out)?;
        let b = x.dim(0);
        let one_minus = T::one() - self.alpha;

        let features = self.classifier_input(&x)?;
        let logits = dense_forward(&features, &self.classifier.value, &self.classifier_bias.value)?;
        let (prediction, grad_logits) = softmax_cross_entropy(&logits, targets)?;
        let (gf, gw, gb) = dense_backward(&grad_logits.map(|v| v * one_minus), &features, &self.classifier.value)?;
        self.classifier.grad.axpy(T::one(), &gw);
        self.classifier_bias.grad.axpy(T::one(), &gb);
        let mut grad_x = self.classifier_input_backward(&gf, b);

        let transformed = conv_forward(&x, &self.sim_conv.value, &self.sim_spec)?;
        let (s, cache) = similarity_forward(&transformed)?;
        let sy = similarity_matrix(&one_hot::<T>(targets, self.classes)?)?;
        let (similarity, grad_s) = similarity_distance(&s, &sy);
        let grad_t = similarity_backward(&grad_s.map(|v| v * self.alpha), &cache);
        let grad_t = Tensor::from_vec(transformed.shape(), grad_t)?;
        let (gx_sim, gw_sim) = conv_backward(&grad_t, &x, &self.sim_conv.value, &self.sim_spec)?;
        self.sim_conv.grad.axpy(T::one(), &gw_sim);
        grad_x.axpy(T::one(), &gx_sim);

        let loss = LocalLoss {
            prediction,
            similarity,
            total: combine(self.alpha, prediction, similarity),
        };
        Ok((loss, grad_x.reshape(block_out.shape())?))
    }
}
