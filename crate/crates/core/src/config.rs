//! JSON model/training configuration and its validation.
//!
//! Unknown keys are rejected everywhere so that a typo in `o` or `m` can
//! never silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::lego::ConvPath;
use crate::ops::adam::AdamConfig;
use crate::ops::pool::pool_out_time;

pub const DEFAULT_KERNEL: usize = 5;
pub const DEFAULT_EPOCHS: usize = 50;
pub const PAPER_SCALE_EPOCHS: usize = 500;

fn default_kernel() -> usize {
    DEFAULT_KERNEL
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn yes() -> bool {
    true
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_alpha() -> f64 {
    crate::local_loss::DEFAULT_ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub n: usize,
    #[serde(default = "default_kernel")]
    pub d: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `(d - 1) / 2`, which preserves the time extent at stride 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegoLayerSpec {
    pub n: usize,
    #[serde(default = "default_kernel")]
    pub d: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    /// Number of input fragments.
    pub o: usize,
    /// Bank size as a fraction of the output channels.
    pub m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolLayerSpec {
    #[serde(default = "two")]
    pub extent: usize,
    /// Defaults to `extent`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseLayerSpec {
    /// Output units; the final dense layer defaults to the class count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftmaxSpec {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    Lego(LegoLayerSpec),
    Pool(PoolLayerSpec),
    Dense(DenseLayerSpec),
    Softmax(SoftmaxSpec),
}

impl LayerSpec {
    pub fn conv(n: usize) -> Self {
        LayerSpec::Conv(ConvLayerSpec {
            n,
            d: DEFAULT_KERNEL,
            stride: 1,
            padding: None,
            batch_norm: true,
        })
    }

    pub fn lego(n: usize, o: usize, m: f64) -> Self {
        LayerSpec::Lego(LegoLayerSpec {
            n,
            d: DEFAULT_KERNEL,
            stride: 1,
            padding: None,
            batch_norm: true,
            o,
            m,
        })
    }

    pub fn pool(extent: usize) -> Self {
        LayerSpec::Pool(PoolLayerSpec { extent, stride: None })
    }

    pub fn dense(units: Option<usize>) -> Self {
        LayerSpec::Dense(DenseLayerSpec { units })
    }

    pub fn softmax() -> Self {
        LayerSpec::Softmax(SoftmaxSpec {})
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::Lego(_) => "lego",
            LayerSpec::Pool(_) => "pool",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Softmax(_) => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default = "unit_factor")]
    pub decay_factor: f64,
    /// Epochs between decays; `None` keeps the rate constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_every: Option<usize>,
}

fn unit_factor() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay_factor: 1.0,
            decay_every: None,
        }
    }

    /// Learning rate for the zero-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        match self.decay_every {
            Some(every) if every > 0 => self.initial * self.decay_factor.powi((epoch / every) as i32),
            _ => self.initial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub lr: LrSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathChoice {
    Naive,
    #[default]
    Stm,
}

impl From<PathChoice> for ConvPath {
    fn from(p: PathChoice) -> Self {
        match p {
            PathChoice::Naive => ConvPath::Naive,
            PathChoice::Stm => ConvPath::SplitTransformMerge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    /// Dataset manifest, relative to the config file.
    pub data: PathBuf,
    #[serde(default)]
    pub split: SplitSpec,
    pub layers: Vec<LayerSpec>,
    pub training: TrainingConfig,
    #[serde(default)]
    pub loss_mode: LossMode,
    /// Weight of the similarity term in local losses.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub lego_path: PathChoice,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Loads a config file; its `data` path is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config { message, .. } => Error::config(path.display().to_string(), message),
            other => other,
        })?;
        if cfg.data.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data = dir.join(&cfg.data);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate_static(&self) -> Result<()> {
        let t = &self.training;
        if t.epochs == 0 {
            return Err(Error::config("training.epochs", "must be at least 1"));
        }
        if t.batch_size < 2 {
            return Err(Error::config(
                "training.batch_size",
                "must be at least 2 (batch normalization needs batch statistics)",
            ));
        }
        if !(t.lr.initial > 0.0 && t.lr.initial.is_finite()) {
            return Err(Error::config("training.lr.initial", "must be a positive number"));
        }
        if !(t.lr.decay_factor > 0.0) {
            return Err(Error::config("training.lr.decay_factor", "must be positive"));
        }
        if t.lr.decay_every == Some(0) {
            return Err(Error::config("training.lr.decay_every", "must be at least 1"));
        }
        let AdamConfig { beta1, beta2, eps } = t.optimizer;
        if !(0.0..1.0).contains(&beta1) {
            return Err(Error::config("training.optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&beta2) {
            return Err(Error::config("training.optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(eps > 0.0) {
            return Err(Error::config("training.optimizer.eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("split.train_fraction", "must lie strictly between 0 and 1"));
        }
        validate_layer_order(&self.layers)
    }

    pub fn has_lego_layers(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Lego(_)))
    }

    /// Same architecture with every Lego layer replaced by a conventional one.
    pub fn baseline(&self) -> ModelConfig {
        let mut cfg = self.clone();
        for layer in &mut cfg.layers {
            if let LayerSpec::Lego(l) = layer {
                *layer = LayerSpec::Conv(ConvLayerSpec {
                    n: l.n,
                    d: l.d,
                    stride: l.stride,
                    padding: l.padding,
                    batch_norm: l.batch_norm,
                });
            }
        }
        cfg
    }

    /// Compresses every convolution except the first with Lego filters `(o, m)`.
    pub fn with_lego(&self, o: usize, m: f64) -> ModelConfig {
        let mut cfg = self.baseline();
        let mut seen_first = false;
        for layer in &mut cfg.layers {
            if let LayerSpec::Conv(c) = layer {
                if !seen_first {
                    seen_first = true;
                    continue;
                }
                *layer = LayerSpec::Lego(LegoLayerSpec {
                    n: c.n,
                    d: c.d,
                    stride: c.stride,
                    padding: c.padding,
                    batch_norm: c.batch_norm,
                    o,
                    m,
                });
            }
        }
        cfg
    }
}

fn validate_layer_order(layers: &[LayerSpec]) -> Result<()> {
    let n = layers.len();
    if n < 2 {
        return Err(Error::config("layers", "need at least a dense layer followed by softmax"));
    }
    if !matches!(layers[n - 1], LayerSpec::Softmax(_)) {
        return Err(Error::config(format!("layers[{}].type", n - 1), "the last layer must be softmax"));
    }
    if !matches!(layers[n - 2], LayerSpec::Dense(_)) {
        return Err(Error::config(
            format!("layers[{}].type", n - 2),
            "the layer before softmax must be dense",
        ));
    }
    let mut seen_conv = false;
    let mut seen_dense = false;
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Softmax(_) if i != n - 1 => {
                return Err(Error::config(format!("layers[{i}].type"), "softmax may only appear last"));
            }
            LayerSpec::Lego(l) => {
                if !seen_conv {
                    return Err(Error::config(
                        format!("layers[{i}].type"),
                        "the first convolutional layer cannot be lego",
                    ));
                }
                if seen_dense {
                    return Err(Error::config(format!("layers[{i}].type"), "convolution after a dense layer"));
                }
                if l.o == 0 {
                    return Err(Error::config(format!("layers[{i}].o"), "must be at least 1"));
                }
                if !(l.m > 0.0 && l.m <= 1.0) {
                    return Err(Error::config(format!("layers[{i}].m"), "must lie in (0, 1]"));
                }
                check_conv_fields(i, l.n, l.d, l.stride)?;
            }
            LayerSpec::Conv(c) => {
                if seen_dense {
                    return Err(Error::config(format!("layers[{i}].type"), "convolution after a dense layer"));
                }
                seen_conv = true;
                check_conv_fields(i, c.n, c.d, c.stride)?;
            }
            LayerSpec::Pool(p) => {
                if !seen_conv {
                    return Err(Error::config(
                        format!("layers[{i}].type"),
                        "pooling must follow a convolutional layer",
                    ));
                }
                if seen_dense {
                    return Err(Error::config(format!("layers[{i}].type"), "pooling after a dense layer"));
                }
                if p.extent == 0 {
                    return Err(Error::config(format!("layers[{i}].extent"), "must be at least 1"));
                }
                if p.stride == Some(0) {
                    return Err(Error::config(format!("layers[{i}].stride"), "must be at least 1"));
                }
            }
            LayerSpec::Dense(d) => {
                seen_dense = true;
                if d.units == Some(0) {
                    return Err(Error::config(format!("layers[{i}].units"), "must be at least 1"));
                }
                if i != n - 2 && d.units.is_none() {
                    return Err(Error::config(
                        format!("layers[{i}].units"),
                        "hidden dense layers need an explicit unit count",
                    ));
                }
            }
            LayerSpec::Softmax(_) => {}
        }
    }
    Ok(())
}

fn check_conv_fields(i: usize, n: usize, d: usize, stride: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config(format!("layers[{i}].n"), "must be at least 1"));
    }
    if d == 0 {
        return Err(Error::config(format!("layers[{i}].d"), "must be at least 1"));
    }
    if stride == 0 {
        return Err(Error::config(format!("layers[{i}].stride"), "must be at least 1"));
    }
    Ok(())
}

/// Input geometry of one window: `channels` of the first layer is 1, the
/// sensor attributes lie along `width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub time: usize,
    pub width: usize,
}

impl InputShape {
    pub fn window(window_len: usize, sensor_channels: usize) -> Self {
        InputShape {
            channels: 1,
            time: window_len,
            width: sensor_channels,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.time, self.width]
    }

    pub fn len(&self) -> usize {
        self.channels * self.time * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResolvedKind {
    Conv {
        spec: crate::ops::ConvSpec,
        batch_norm: bool,
    },
    Lego {
        spec: crate::ops::ConvSpec,
        batch_norm: bool,
        o: usize,
        m: f64,
        k: usize,
    },
    Pool {
        extent: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        units: usize,
        relu: bool,
    },
}

/// One layer with concrete input/output shapes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedLayer {
    pub index: usize,
    pub name: String,
    pub kind: ResolvedKind,
    pub input: InputShape,
    pub output: InputShape,
}

/// A config's layers resolved against a concrete input shape and class count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Architecture {
    pub input: InputShape,
    pub classes: usize,
    pub layers: Vec<ResolvedLayer>,
}

impl Architecture {
    pub fn resolve(layers: &[LayerSpec], input: InputShape, classes: usize) -> Result<Self> {
        validate_layer_order(layers)?;
        if classes < 2 {
            return Err(Error::config("data.class_names", "need at least two classes"));
        }
        let mut cur = input;
        let mut resolved = Vec::new();
        let last_dense = layers.len() - 2;
        for (i, layer) in layers.iter().enumerate() {
            let field = |f: &str| format!("layers[{i}].{f}");
            let (name, kind, out) = match layer {
                LayerSpec::Conv(c) => {
                    let spec = crate::ops::ConvSpec::new(cur.channels, c.n, c.d)
                        .with_stride(c.stride)
                        .with_padding(c.padding.unwrap_or((c.d - 1) / 2));
                    let time = spec
                        .out_time(cur.time)
                        .map_err(|e| Error::config(field("d"), e.to_string()))?;
                    (
                        format!("conv{i}"),
                        ResolvedKind::Conv {
                            spec,
                            batch_norm: c.batch_norm,
                        },
                        InputShape {
                            channels: c.n,
                            time,
                            width: cur.width,
                        },
                    )
                }
                LayerSpec::Lego(l) => {
                    if cur.channels % l.o != 0 {
                        return Err(Error::config(
                            field("o"),
                            format!(
                                "{} input channels are not divisible into o={} fragments",
                                cur.channels, l.o
                            ),
                        ));
                    }
                    let spec = crate::ops::ConvSpec::new(cur.channels, l.n, l.d)
                        .with_stride(l.stride)
                        .with_padding(l.padding.unwrap_or((l.d - 1) / 2));
                    let time = spec
                        .out_time(cur.time)
                        .map_err(|e| Error::config(field("d"), e.to_string()))?;
                    (
                        format!("lego{i}"),
                        ResolvedKind::Lego {
                            spec,
                            batch_norm: l.batch_norm,
                            o: l.o,
                            m: l.m,
                            k: crate::lego::bank_size(l.n, l.m),
                        },
                        InputShape {
                            channels: l.n,
                            time,
                            width: cur.width,
                        },
                    )
                }
                LayerSpec::Pool(p) => {
                    let stride = p.stride.unwrap_or(p.extent);
                    let time = pool_out_time(cur.time, p.extent, stride)
                        .map_err(|e| Error::config(field("extent"), e.to_string()))?;
                    (
                        format!("pool{i}"),
                        ResolvedKind::Pool {
                            extent: p.extent,
                            stride,
                        },
                        InputShape { time, ..cur },
                    )
                }
                LayerSpec::Dense(d) => {
                    let units = if i == last_dense {
                        match d.units {
                            Some(u) if u != classes => {
                                return Err(Error::config(
                                    field("units"),
                                    format!("final dense layer has {u} units but the dataset has {classes} classes"),
                                ))
                            }
                            _ => classes,
                        }
                    } else {
                        d.units.expect("validated")
                    };
                    (
                        format!("dense{i}"),
                        ResolvedKind::Dense {
                            inputs: cur.len(),
                            units,
                            relu: i != last_dense,
                        },
                        InputShape {
                            channels: units,
                            time: 1,
                            width: 1,
                        },
                    )
                }
                LayerSpec::Softmax(_) => continue,
            };
            resolved.push(ResolvedLayer {
                index: i,
                name,
                kind,
                input: cur,
                output: out,
            });
            cur = out;
        }
        Ok(Architecture {
            input,
            classes,
            layers: resolved,
        })
    }
}
