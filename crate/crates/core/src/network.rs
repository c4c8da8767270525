//! Sequential networks of conv, Lego and dense blocks.
//!
//! A block is one weight layer plus bias, optional batch norm, ReLU and the
//! pooling layers that follow it. Blocks are the unit of layer-wise training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Architecture, InputShape, ResolvedKind};
use crate::error::{Error, Result};
use crate::lego::{ConvPath, LegoLayer};
use crate::ops::activation::{argmax_rows, relu, relu_backward};
use crate::ops::batchnorm::{BatchNorm, BatchNormCache, Mode};
use crate::ops::conv::{add_channel_bias, channel_bias_grad, conv_backward, conv_forward, ConvSpec};
use crate::ops::dense::{dense_backward, dense_forward};
use crate::ops::pool::{maxpool, maxpool_backward, PoolIndices};
use crate::tensor::{Param, Scalar, Tensor};

#[derive(Debug, Clone)]
pub enum Transform<T = f32> {
    Conv { spec: ConvSpec, weight: Param<T> },
    Lego(LegoLayer<T>),
    /// `weight` is `[inputs, units]`.
    Dense { weight: Param<T>, relu: bool },
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor<T>,
    bn: Option<BatchNormCache<T>>,
    pre_relu: Tensor<T>,
    pools: Vec<PoolIndices>,
}

#[derive(Debug, Clone)]
pub struct Block<T = f32> {
    pub name: String,
    pub transform: Transform<T>,
    pub bias: Param<T>,
    pub bn: Option<BatchNorm<T>>,
    /// `(extent, stride)` of each trailing max-pool.
    pub pools: Vec<(usize, usize)>,
    pub input: InputShape,
    pub output: InputShape,
    cache: Option<BlockCache<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn is_lego(&self) -> bool {
        matches!(self.transform, Transform::Lego(_))
    }

    pub fn lego(&self) -> Option<&LegoLayer<T>> {
        match &self.transform {
            Transform::Lego(l) => Some(l),
            _ => None,
        }
    }

    pub fn lego_mut(&mut self) -> Option<&mut LegoLayer<T>> {
        match &mut self.transform {
            Transform::Lego(l) => Some(l),
            _ => None,
        }
    }

    fn applies_relu(&self) -> bool {
        match self.transform {
            Transform::Dense { relu, .. } => relu,
            _ => true,
        }
    }

    /// Parameters in a fixed order: weights (bank, proxy for Lego), bias, batch norm.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        match &mut self.transform {
            Transform::Conv { weight, .. } | Transform::Dense { weight, .. } => out.push(weight),
            Transform::Lego(l) => {
                out.push(&mut l.bank);
                out.push(&mut l.proxy);
            }
        }
        out.push(&mut self.bias);
        if let Some(bn) = &mut self.bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    /// Named parameter tensors, same order as [`Block::params_mut`].
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        match &self.transform {
            Transform::Conv { weight, .. } | Transform::Dense { weight, .. } => {
                out.push((format!("{}.weight", self.name), weight))
            }
            Transform::Lego(l) => {
                out.push((format!("{}.bank", self.name), &l.bank));
                out.push((format!("{}.proxy", self.name), &l.proxy));
            }
        }
        out.push((format!("{}.bias", self.name), &self.bias));
        if let Some(bn) = &self.bn {
            out.push((format!("{}.bn.gamma", self.name), &bn.gamma));
            out.push((format!("{}.bn.beta", self.name), &bn.beta));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn linear(&self, x: &Tensor<T>, path: ConvPath) -> Result<Tensor<T>> {
        let mut y = match &self.transform {
            Transform::Conv { spec, weight } => conv_forward(x, &weight.value, spec)?,
            Transform::Lego(l) => l.forward(x, path)?,
            Transform::Dense { weight, .. } => {
                let b = x.dim(0);
                let flat = x.clone().reshape(&[b, x.len() / b])?;
                let u = weight.value.dim(1);
                return dense_forward(&flat, &weight.value, &self.bias.value)?.reshape(&[b, u, 1, 1]);
            }
        };
        add_channel_bias(&mut y, &self.bias.value)?;
        Ok(y)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let b = x.shape().first().copied().unwrap_or(0);
        let mut expected = vec![b];
        expected.extend(self.input.dims());
        if x.shape() != expected.as_slice() {
            return Err(Error::shape("block_input", &expected, x.shape()));
        }
        Ok(())
    }

    /// Inference pass: batch norm uses running statistics, nothing is cached.
    pub fn infer(&self, x: &Tensor<T>, path: ConvPath) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut y = self.linear(x, path)?;
        if let Some(bn) = &self.bn {
            y = bn.infer(&y)?;
        }
        if self.applies_relu() {
            y = relu(&y);
        }
        for &(extent, stride) in &self.pools {
            y = maxpool(&y, extent, stride)?.0;
        }
        Ok(y)
    }

    /// Training pass; caches what [`Block::backward`] needs and updates
    /// batch-norm running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>, path: ConvPath) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut y = match &mut self.transform {
            Transform::Lego(l) => {
                let mut y = l.forward_train(x, path)?;
                add_channel_bias(&mut y, &self.bias.value)?;
                y
            }
            _ => self.linear(x, path)?,
        };
        let mut bn_cache = None;
        if let Some(bn) = &mut self.bn {
            let (out, cache) = bn.forward(&y, Mode::Train)?;
            y = out;
            bn_cache = cache;
        }
        let pre_relu = y.clone();
        if self.applies_relu() {
            y = relu(&y);
        }
        let mut pools = Vec::with_capacity(self.pools.len());
        for &(extent, stride) in &self.pools {
            let (out, idx) = maxpool(&y, extent, stride)?;
            y = out;
            pools.push(idx);
        }
        self.cache = Some(BlockCache {
            input: x.clone(),
            bn: bn_cache,
            pre_relu,
            pools,
        });
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid(format!("{}: backward without a training forward pass", self.name)))?;
        let mut g = grad_out.clone();
        for idx in cache.pools.iter().rev() {
            g = maxpool_backward(&g, idx)?;
        }
        if self.applies_relu() {
            g = relu_backward(&g, &cache.pre_relu);
        }
        if let (Some(bn), Some(bc)) = (&mut self.bn, &cache.bn) {
            g = bn.backward(&g, bc)?;
        }
        let x = &cache.input;
        match &mut self.transform {
            Transform::Conv { spec, weight } => {
                self.bias.grad.axpy(T::one(), &channel_bias_grad(&g));
                let (gx, gw) = conv_backward(&g, x, &weight.value, spec)?;
                weight.grad.axpy(T::one(), &gw);
                Ok(gx)
            }
            Transform::Lego(l) => {
                self.bias.grad.axpy(T::one(), &channel_bias_grad(&g));
                l.backward(&g)
            }
            Transform::Dense { weight, .. } => {
                let b = x.dim(0);
                let flat = x.clone().reshape(&[b, x.len() / b])?;
                let g = g.reshape(&[b, weight.value.dim(1)])?;
                let (gx, gw, gb) = dense_backward(&g, &flat, &weight.value)?;
                weight.grad.axpy(T::one(), &gw);
                self.bias.grad.axpy(T::one(), &gb);
                gx.reshape(x.shape())
            }
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        if let Some(l) = self.lego_mut() {
            l.clear_cache();
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    pub arch: Architecture,
    pub blocks: Vec<Block<T>>,
    pub path: ConvPath,
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes every block from `seed`.
    pub fn new(arch: Architecture, seed: u64, path: ConvPath) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks: Vec<Block<T>> = Vec::new();
        for layer in &arch.layers {
            let (transform, channels, bn) = match &layer.kind {
                ResolvedKind::Conv { spec, batch_norm } => {
                    let fan_in = (spec.in_channels * spec.kernel * spec.kernel_width) as f64;
                    let weight = Tensor::randn(&spec.weight_shape(), (2.0 / fan_in).sqrt(), &mut rng);
                    (
                        Transform::Conv {
                            spec: spec.clone(),
                            weight: Param::new(weight),
                        },
                        spec.out_channels,
                        *batch_norm,
                    )
                }
                ResolvedKind::Lego {
                    spec,
                    batch_norm,
                    o,
                    m,
                    ..
                } => (
                    Transform::Lego(LegoLayer::new(spec.clone(), *o, *m, &mut rng)?),
                    spec.out_channels,
                    *batch_norm,
                ),
                ResolvedKind::Dense { inputs, units, relu } => {
                    let gain = if *relu { 2.0 } else { 1.0 };
                    let weight = Tensor::randn(&[*inputs, *units], (gain / *inputs as f64).sqrt(), &mut rng);
                    (
                        Transform::Dense {
                            weight: Param::new(weight),
                            relu: *relu,
                        },
                        *units,
                        false,
                    )
                }
                ResolvedKind::Pool { extent, stride } => {
                    let last = blocks
                        .last_mut()
                        .ok_or_else(|| Error::config(format!("layers[{}].type", layer.index), "pooling must follow a convolutional layer"))?;
                    last.pools.push((*extent, *stride));
                    last.output = layer.output;
                    continue;
                }
            };
            blocks.push(Block {
                name: layer.name.clone(),
                transform,
                bias: Param::new(Tensor::zeros(&[channels])),
                bn: bn.then(|| BatchNorm::new(channels)),
                pools: Vec::new(),
                input: layer.input,
                output: layer.output,
                cache: None,
            });
        }
        Ok(Network { arch, blocks, path })
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input(&self) -> InputShape {
        self.arch.input
    }

    /// Logits for a batch, using running batch-norm statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for block in &self.blocks {
            y = block.infer(&y, self.path)?;
        }
        let b = y.dim(0);
        y.reshape(&[b, self.classes()])
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(x)?))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        let path = self.path;
        for block in &mut self.blocks {
            y = block.forward_train(&y, path)?;
        }
        let b = y.dim(0);
        y.reshape(&[b, self.arch.classes])
    }

    /// End-to-end backward pass from the logit gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_logits.clone();
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks.iter_mut().flat_map(Block::params_mut).collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.blocks.iter().flat_map(Block::named_params).collect()
    }

    pub fn zero_grad(&mut self) {
        self.blocks.iter_mut().for_each(Block::zero_grad);
    }

    /// Re-derives every Lego mask from its proxy.
    pub fn rebinarize(&mut self) {
        for block in &mut self.blocks {
            if let Some(l) = block.lego_mut() {
                l.rebinarize();
            }
        }
    }

    pub fn masks_consistent(&self) -> bool {
        self.blocks
            .iter()
            .filter_map(Block::lego)
            .all(LegoLayer::mask_is_consistent)
    }

    pub fn clear_caches(&mut self) {
        self.blocks.iter_mut().for_each(Block::clear_cache);
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            path: self.path,
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    name: b.name.clone(),
                    transform: match &b.transform {
                        Transform::Conv { spec, weight } => Transform::Conv {
                            spec: spec.clone(),
                            weight: weight.cast(),
                        },
                        Transform::Lego(l) => Transform::Lego(
                            LegoLayer::from_parts(
                                l.spec().clone(),
                                l.fragments(),
                                l.bank_ratio(),
                                l.bank.value.cast(),
                                l.proxy.value.cast(),
                            )
                            .expect("same geometry"),
                        ),
                        Transform::Dense { weight, relu } => Transform::Dense {
                            weight: weight.cast(),
                            relu: *relu,
                        },
                    },
                    bias: b.bias.cast(),
                    bn: b.bn.as_ref().map(|bn| BatchNorm {
                        gamma: bn.gamma.cast(),
                        beta: bn.beta.cast(),
                        running_mean: bn.running_mean.cast(),
                        running_var: bn.running_var.cast(),
                        eps: U::from_f64_lossy(bn.eps.to_f64().unwrap_or(0.0)),
                        momentum: U::from_f64_lossy(bn.momentum.to_f64().unwrap_or(0.0)),
                    }),
                    pools: b.pools.clone(),
                    input: b.input,
                    output: b.output,
                    cache: None,
                })
                .collect(),
        }
    }
}
