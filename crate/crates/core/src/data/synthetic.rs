use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::series::SensorSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SYNTHETIC_RATE_HZ: f64 = 50.0;

fn default_noise() -> f64 {
    0.5
}
fn default_min_segment() -> usize {
    1000
}
fn default_max_segment() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub total_time: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_min_segment")]
    pub min_segment: usize,
    #[serde(default = "default_max_segment")]
    pub max_segment: usize,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, channels: usize, total_time: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes,
            channels,
            total_time,
            seed,
            noise_std: default_noise(),
            min_segment: default_min_segment(),
            max_segment: default_max_segment(),
        }
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }
}

/// Offset, amplitude and frequency (Hz) of class `c` on channel `ch`.
///
/// Channel 0 carries an evenly spaced offset per class, so window means
/// alone separate the classes.
pub fn class_signal(c: usize, ch: usize, classes: usize) -> (f64, f64, f64) {
    let spread = if classes > 1 { (c as f64) / (classes - 1) as f64 } else { 0.0 };
    let offset = if ch == 0 {
        2.0 * spread - 1.0
    } else {
        0.6 * (((c * (ch + 1)) % classes) as f64 / classes as f64) - 0.3
    };
    let amplitude = 0.6 + 0.25 * ((c + 2 * ch) % 3) as f64;
    let freq = 0.8 + 0.55 * c as f64 + 0.3 * ch as f64;
    (offset, amplitude, freq)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SensorSeries> {
    if spec.num_classes == 0 || spec.channels == 0 || spec.total_time == 0 {
        return Err(Error::invalid("synthetic classes, channels and total_time must be positive"));
    }
    if spec.min_segment == 0 || spec.min_segment > spec.max_segment {
        return Err(Error::invalid("synthetic segment bounds must satisfy 0 < min_segment <= max_segment"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::invalid("synthetic noise_std must be a finite non-negative number"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).expect("finite std");
    let (classes, ch) = (spec.num_classes, spec.channels);
    let mut data = Vec::with_capacity(spec.total_time * ch);
    let mut labels = Vec::with_capacity(spec.total_time);
    let mut class = rng.random_range(0..classes);
    while labels.len() < spec.total_time {
        let len = rng
            .random_range(spec.min_segment..=spec.max_segment)
            .min(spec.total_time - labels.len());
        let phases: Vec<f64> = (0..ch).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        for t in 0..len {
            let time = t as f64 / SYNTHETIC_RATE_HZ;
            for (c, phase) in phases.iter().enumerate() {
                let (offset, amp, freq) = class_signal(class, c, classes);
                let mut v = offset + amp * (2.0 * PI * freq * time + phase).sin();
                if spec.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v as f32);
            }
            labels.push(class);
        }
        if classes > 1 {
            class = (class + rng.random_range(1..classes)) % classes;
        }
    }
    SensorSeries::new(
        Tensor::from_vec(&[spec.total_time, ch], data)?,
        SYNTHETIC_RATE_HZ,
        labels,
        (0..classes).map(|c| format!("class{c}")).collect(),
    )
}
