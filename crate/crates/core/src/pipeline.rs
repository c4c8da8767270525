//! Config to trained checkpoint: data loading, splitting, normalization and training.

use crate::checkpoint::{Checkpoint, TrainingRecord};
use crate::config::{Architecture, InputShape, ModelConfig};
use crate::cost::{cost_report, CostReport};
use crate::data::{load_windowed, normalize, split, ChannelStats, Manifest, WindowedDataset};
use crate::error::Result;
use crate::network::Network;
use crate::train::{EpochMetrics, TrainOptions, Trainer};

/// Normalized train and test windows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    /// Statistics of the training split, applied to both splits.
    pub stats: ChannelStats,
}

impl PreparedData {
    pub fn input(&self) -> InputShape {
        InputShape::window(self.train.window_len, self.train.channels())
    }

    pub fn classes(&self) -> usize {
        self.train.num_classes()
    }

    pub fn class_names(&self) -> &[String] {
        &self.train.class_names
    }
}

pub fn prepare(cfg: &ModelConfig) -> Result<PreparedData> {
    let manifest = Manifest::load(&cfg.data)?;
    prepare_dataset(&load_windowed(&manifest)?, cfg)
}

pub fn prepare_dataset(ds: &WindowedDataset, cfg: &ModelConfig) -> Result<PreparedData> {
    let parts = split(ds, &cfg.split)?;
    let mut train = ds.subset(&parts.train);
    let mut test = ds.subset(&parts.test);
    let stats = ChannelStats::from_dataset(&train);
    normalize(&mut train, &stats)?;
    normalize(&mut test, &stats)?;
    Ok(PreparedData { train, test, stats })
}

pub fn architecture(cfg: &ModelConfig, data: &PreparedData) -> Result<Architecture> {
    Architecture::resolve(&cfg.layers, data.input(), data.classes())
}

pub fn costs(cfg: &ModelConfig, data: &PreparedData) -> Result<CostReport> {
    cost_report(&cfg.layers, data.input(), data.classes())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
    pub block_names: Vec<String>,
}

impl RunOutcome {
    pub fn last(&self) -> &EpochMetrics {
        self.history.last().expect("at least one epoch")
    }
}

/// Builds the network from `cfg.seed` and trains it for `cfg.training.epochs`.
pub fn train_config(cfg: &ModelConfig, data: &PreparedData, on_epoch: impl FnMut(&EpochMetrics)) -> Result<RunOutcome> {
    cfg.validate_static()?;
    let arch = architecture(cfg, data)?;
    let net = Network::<f32>::new(arch, cfg.seed, cfg.lego_path.into())?;
    let block_names = net.blocks.iter().map(|b| b.name.clone()).collect();
    let mut trainer = Trainer::new(net, TrainOptions::from_config(cfg))?;
    let history = trainer.fit(&data.train, &data.test, on_epoch)?;
    let last = history.last();
    let training = TrainingRecord {
        epochs: history.len(),
        loss_mode: cfg.loss_mode,
        final_train_loss: last.map(|m| m.train_loss),
        final_test_f1: last.map(|m| m.test_f1),
        final_test_accuracy: last.map(|m| m.test_accuracy),
    };
    let mut network = trainer.into_network();
    network.clear_caches();
    Ok(RunOutcome {
        history,
        checkpoint: Checkpoint {
            config: cfg.clone(),
            class_names: data.class_names().to_vec(),
            normalization: Some(data.stats.clone()),
            training,
            network,
        },
        block_names,
    })
}
