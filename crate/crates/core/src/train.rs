//! Mini-batch training with a global loss or with per-block local losses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{LossMode, LrSchedule, ModelConfig};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::local_loss::LocalHead;
use crate::metrics::{accuracy, confusion, weighted_f1, ConfusionMatrix};
use crate::network::Network;
use crate::ops::activation::softmax_cross_entropy;
use crate::ops::adam::{AdamConfig, AdamState};
use crate::tensor::{Param, Scalar, Tensor};

pub const EVAL_BATCH: usize = 256;

/// Seed offset for local heads so they do not share a stream with the network.
const HEAD_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub loss_mode: LossMode,
    pub alpha: f64,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        TrainOptions {
            epochs: cfg.training.epochs,
            batch_size: cfg.training.batch_size,
            schedule: cfg.training.lr,
            adam: cfg.training.optimizer,
            loss_mode: cfg.loss_mode,
            alpha: cfg.alpha,
            seed: cfg.seed,
        }
    }
}

/// Losses of one optimizer step. `loss` is the cross-entropy of the final
/// block; `block_losses` has one entry per block in local mode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub loss: f64,
    pub block_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_f1: f64,
    pub test_accuracy: f64,
    pub block_losses: Vec<f64>,
}

pub struct Trainer<T: Scalar = f32> {
    pub net: Network<T>,
    opts: TrainOptions,
    /// One optimizer for the whole network in global mode, one per block in local mode.
    optimizers: Vec<AdamState<T>>,
    /// One head per hidden block in local mode.
    heads: Vec<LocalHead<T>>,
}

fn finite<T: Scalar>(v: T, what: &str) -> Result<f64> {
    let v = v.to_f64().unwrap_or(f64::NAN);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is {v}")))
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, opts: TrainOptions) -> Result<Self> {
        let lr = opts.schedule.at(0);
        let (optimizers, heads) = match opts.loss_mode {
            LossMode::Global => (vec![AdamState::new(opts.adam, lr)], Vec::new()),
            LossMode::Local => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ HEAD_SEED_SALT);
                let hidden = net.blocks.len().saturating_sub(1);
                let heads = net.blocks[..hidden]
                    .iter()
                    .map(|b| LocalHead::new(b.output.dims(), net.classes(), opts.alpha, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let optimizers = (0..net.blocks.len()).map(|_| AdamState::new(opts.adam, lr)).collect();
                (optimizers, heads)
            }
        };
        Ok(Trainer {
            net,
            opts,
            optimizers,
            heads,
        })
    }

    pub fn options(&self) -> &TrainOptions {
        &self.opts
    }

    pub fn heads(&self) -> &[LocalHead<T>] {
        &self.heads
    }

    pub fn into_network(self) -> Network<T> {
        self.net
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizers.iter_mut().for_each(|o| o.learning_rate = lr);
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
        self.heads.iter_mut().for_each(LocalHead::zero_grad);
    }

    pub fn train_step(&mut self, x: &Tensor<T>, y: &[usize]) -> Result<StepLosses> {
        match self.opts.loss_mode {
            LossMode::Global => self.global_step(x, y),
            LossMode::Local => self.local_step(x, y),
        }
    }

    /// End-to-end backpropagation of the cross-entropy, then one Adam update.
    pub fn global_step(&mut self, x: &Tensor<T>, y: &[usize]) -> Result<StepLosses> {
        self.zero_grad();
        let logits = self.net.forward_train(x)?;
        let (loss, grad) = softmax_cross_entropy(&logits, y)?;
        let loss = finite(loss, "training loss")?;
        self.net.backward(&grad)?;
        let mut params = self.net.params_mut();
        self.optimizers[0].step(&mut params)?;
        self.net.rebinarize();
        Ok(StepLosses {
            loss,
            block_losses: Vec::new(),
        })
    }

    /// Computes every block's gradients from its own loss only. Each hidden
    /// block backpropagates its head's local loss within itself; the final
    /// block uses the cross-entropy. Block outputs are passed on as plain
    /// values, so no gradient crosses a block boundary.
    pub fn local_gradients(&mut self, x: &Tensor<T>, y: &[usize]) -> Result<StepLosses> {
        if self.heads.len() + 1 != self.net.blocks.len() {
            return Err(Error::invalid("local training needs one head per hidden block"));
        }
        self.zero_grad();
        let path = self.net.path;
        let last = self.net.blocks.len() - 1;
        let mut input = x.clone();
        let mut block_losses = Vec::with_capacity(last + 1);
        for i in 0..=last {
            let block = &mut self.net.blocks[i];
            let out = block.forward_train(&input, path)?;
            if i < last {
                let (loss, grad) = self.heads[i].loss_and_backward(&out, y)?;
                block_losses.push(finite(loss.total, &format!("local loss of {}", block.name))?);
                block.backward(&grad)?;
                input = out;
            } else {
                let b = out.dim(0);
                let logits = out.reshape(&[b, self.net.arch.classes])?;
                let (loss, grad) = softmax_cross_entropy(&logits, y)?;
                block_losses.push(finite(loss, "training loss")?);
                block.backward(&grad.reshape(&[b, self.net.arch.classes, 1, 1])?)?;
            }
        }
        Ok(StepLosses {
            loss: *block_losses.last().expect("at least one block"),
            block_losses,
        })
    }

    /// Forward through blocks `0..=j` and backpropagate only block `j`'s own
    /// loss; used to probe that no other block receives gradient.
    pub fn block_loss_gradients(&mut self, x: &Tensor<T>, y: &[usize], j: usize) -> Result<f64> {
        let last = self.net.blocks.len() - 1;
        if j > last || self.heads.len() != last {
            return Err(Error::invalid(format!("no local loss for block {j}")));
        }
        self.zero_grad();
        let path = self.net.path;
        let mut input = x.clone();
        for i in 0..j {
            input = self.net.blocks[i].forward_train(&input, path)?;
        }
        let block = &mut self.net.blocks[j];
        let out = block.forward_train(&input, path)?;
        if j < last {
            let (loss, grad) = self.heads[j].loss_and_backward(&out, y)?;
            block.backward(&grad)?;
            finite(loss.total, "local loss")
        } else {
            let b = out.dim(0);
            let classes = self.net.arch.classes;
            let (loss, grad) = softmax_cross_entropy(&out.reshape(&[b, classes])?, y)?;
            block.backward(&grad.reshape(&[b, classes, 1, 1])?)?;
            finite(loss, "training loss")
        }
    }

    /// Layer-wise step: every block (with its head) is updated by its own optimizer.
    pub fn local_step(&mut self, x: &Tensor<T>, y: &[usize]) -> Result<StepLosses> {
        let losses = self.local_gradients(x, y)?;
        for (i, block) in self.net.blocks.iter_mut().enumerate() {
            let mut params: Vec<&mut Param<T>> = block.params_mut();
            if let Some(head) = self.heads.get_mut(i) {
                params.extend(head.params_mut());
            }
            self.optimizers[i].step(&mut params)?;
        }
        self.net.rebinarize();
        Ok(losses)
    }

    /// Runs `epochs` passes over `train`, evaluating on `test` after each.
    /// Batches of fewer than two windows are skipped (batch norm).
    pub fn fit(
        &mut self,
        train: &WindowedDataset,
        test: &WindowedDataset,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        if train.len() < 2 {
            return Err(Error::invalid("training split needs at least two windows"));
        }
        if test.is_empty() {
            return Err(Error::invalid("test split is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(self.opts.epochs);
        for epoch in 0..self.opts.epochs {
            let lr = self.opts.schedule.at(epoch);
            self.set_learning_rate(lr);
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut block_totals: Vec<f64> = Vec::new();
            let mut steps = 0usize;
            for (bi, chunk) in order.chunks(self.opts.batch_size).enumerate() {
                if chunk.len() < 2 {
                    continue;
                }
                let (xb, yb) = train.batch(chunk);
                let losses = self.train_step(&xb.cast(), &yb).map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("{m} at epoch {}, batch {}", epoch + 1, bi + 1)),
                    other => other,
                })?;
                total += losses.loss;
                if block_totals.len() < losses.block_losses.len() {
                    block_totals.resize(losses.block_losses.len(), 0.0);
                }
                for (t, l) in block_totals.iter_mut().zip(&losses.block_losses) {
                    *t += l;
                }
                steps += 1;
            }
            self.net.clear_caches();
            let cm = evaluate(&self.net, test)?;
            let steps_f = steps.max(1) as f64;
            let metrics = EpochMetrics {
                epoch: epoch + 1,
                lr,
                train_loss: total / steps_f,
                test_f1: weighted_f1(&cm)?,
                test_accuracy: accuracy(&cm)?,
                block_losses: block_totals.iter().map(|t| t / steps_f).collect(),
            };
            log::info!(
                "epoch {:>4}  lr {:.2e}  loss {:.4}  test f1 {:.4}  acc {:.4}",
                metrics.epoch,
                lr,
                metrics.train_loss,
                metrics.test_f1,
                metrics.test_accuracy
            );
            on_epoch(&metrics);
            history.push(metrics);
        }
        Ok(history)
    }
}

/// Predictions for every window of `ds`, in order.
pub fn predict_dataset<T: Scalar>(net: &Network<T>, ds: &WindowedDataset) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = ds.batch(chunk);
        preds.extend(net.predict(&x.cast())?);
    }
    Ok(preds)
}

pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &WindowedDataset) -> Result<ConfusionMatrix> {
    if ds.channels() != net.input().width || ds.window_len != net.input().time {
        return Err(Error::invalid(format!(
            "dataset windows are {}x{}, the model expects {}x{}",
            ds.window_len,
            ds.channels(),
            net.input().time,
            net.input().width
        )));
    }
    if ds.num_classes() != net.classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, the model predicts {}",
            ds.num_classes(),
            net.classes()
        )));
    }
    confusion(&predict_dataset(net, ds)?, &ds.labels, net.classes())
}

/// Per-epoch metrics as CSV. Local runs get one `loss_<block>` column per block.
pub fn metrics_csv(history: &[EpochMetrics], block_names: &[String]) -> String {
    let local = history.first().is_some_and(|m| !m.block_losses.is_empty());
    let mut out = String::from("epoch,lr,train_loss,test_f1,test_accuracy");
    if local {
        for name in block_names {
            out.push_str(&format!(",loss_{name}"));
        }
    }
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{:e},{:.8},{:.8},{:.8}",
            m.epoch, m.lr, m.train_loss, m.test_f1, m.test_accuracy
        ));
        if local {
            for l in &m.block_losses {
                out.push_str(&format!(",{l:.8}"));
            }
        }
        out.push('\n');
    }
    out
}
