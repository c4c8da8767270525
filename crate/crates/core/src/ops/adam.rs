use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Param, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one group of parameters. The group's parameters must
/// be passed to [`AdamState::step`] in the same order on every call.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub learning_rate: f64,
    step_count: u64,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, learning_rate: f64) -> Self {
        AdamState {
            config,
            learning_rate,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Bias-corrected Adam update of every parameter from its `grad`.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if params.len() != self.first_moment.len() {
            return Err(Error::invalid(format!(
                "adam: expected {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.first_moment) {
            if p.shape() != m.shape() {
                return Err(Error::shape("adam_step", m.shape(), p.shape()));
            }
        }
        self.step_count += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let lr_t = self.learning_rate * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
        let bc2_sqrt = (1.0 - beta2.powi(t)).sqrt();
        let (b1, b2) = (lit::<T>(beta1), lit::<T>(beta2));
        let (lr_t, eps_hat) = (lit::<T>(lr_t), lit::<T>(eps * bc2_sqrt));
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let grads = p.grad.data().to_vec();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= lr_t * *m / (v.sqrt() + eps_hat);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Param::new(Tensor::<f32>::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let before = p.value.clone();
        let mut adam = AdamState::new(AdamConfig::default(), 0.01);
        for _ in 0..100 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value, before);
        assert_eq!(adam.step_count(), 100);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new(Tensor::<f64>::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap());
        p.grad = Tensor::from_vec(&[3], vec![3.0, -0.02, 100.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), 0.1);
        adam.step(&mut [&mut p]).unwrap();
        for (&w, &g) in p.value.data().iter().zip(p.grad.data()) {
            assert!((w + 0.1 * g.signum()).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        // scalar simulation: f(p) = p^2, grad = 2p
        let mut p = Param::new(Tensor::<f64>::scalar(1.0));
        let mut adam = AdamState::new(AdamConfig::default(), 0.1);
        let mut last = 1.0f64;
        let mut history = vec![last];
        for _ in 0..100 {
            p.grad.data_mut()[0] = 2.0 * p.value.data()[0];
            adam.step(&mut [&mut p]).unwrap();
            last = p.value.data()[0];
            history.push(last.abs());
        }
        assert!(last.abs() < 0.1, "final {last}");
        // monotone over the approach phase before any overshoot
        let first_cross = history.iter().position(|&v| v < 0.1).unwrap();
        assert!(history[..first_cross].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn parameter_count_change_rejected() {
        let mut a = Param::new(Tensor::<f32>::zeros(&[2]));
        let mut b = Param::new(Tensor::<f32>::zeros(&[2]));
        let mut adam = AdamState::new(AdamConfig::default(), 0.1);
        adam.step(&mut [&mut a]).unwrap();
        assert!(adam.step(&mut [&mut a, &mut b]).is_err());
    }
}
