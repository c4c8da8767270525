use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::series::WindowedDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStrategy {
    /// Stratified by class.
    #[default]
    Random,
    /// Whole subjects go to one side.
    BySubject,
}

fn default_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strategy: SplitStrategy,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: default_fraction(),
            seed: 0,
            strategy: SplitStrategy::Random,
        }
    }
}

impl SplitSpec {
    pub fn random(train_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            train_fraction,
            seed,
            strategy: SplitStrategy::Random,
        }
    }

    pub fn by_subject(train_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            train_fraction,
            seed,
            strategy: SplitStrategy::BySubject,
        }
    }
}

/// Sorted, disjoint and exhaustive window indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `total` items `counts` ways: floors first, then the remaining
/// items go to the largest fractional parts (lowest index on ties).
fn largest_remainder(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (total as f64 * fraction).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(alloc.iter().sum());
    for &i in order.iter().cycle().take(counts.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[i] < counts[i] {
            alloc[i] += 1;
            remaining -= 1;
        }
    }
    alloc
}

pub fn split(ds: &WindowedDataset, spec: &SplitSpec) -> Result<Split> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::config("split.train_fraction", "must lie strictly between 0 and 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    match spec.strategy {
        SplitStrategy::Random => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
            for (i, &l) in ds.labels.iter().enumerate() {
                by_class[l].push(i);
            }
            let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
            let alloc = largest_remainder(&counts, f);
            for (mut idx, take) in by_class.into_iter().zip(alloc) {
                idx.shuffle(&mut rng);
                train.extend_from_slice(&idx[..take]);
            }
        }
        SplitStrategy::BySubject => {
            let subjects = ds
                .subjects
                .as_ref()
                .ok_or_else(|| Error::config("split.strategy", "by-subject split needs a subject column"))?;
            let mut ids: Vec<u32> = subjects.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            if ids.len() < 2 {
                return Err(Error::config("split.strategy", "by-subject split needs at least two subjects"));
            }
            ids.shuffle(&mut rng);
            let take = ((ids.len() as f64 * f).round() as usize).clamp(1, ids.len() - 1);
            let chosen: BTreeSet<u32> = ids[..take].iter().copied().collect();
            train.extend((0..ds.len()).filter(|&i| chosen.contains(&subjects[i])));
        }
    }
    train.sort_unstable();
    let mut in_train = vec![false; ds.len()];
    for &i in &train {
        in_train[i] = true;
    }
    let test = (0..ds.len()).filter(|&i| !in_train[i]).collect();
    let mut seen = vec![false; ds.num_classes()];
    for &i in &train {
        seen[ds.labels[i]] = true;
    }
    for (c, present) in seen.iter().enumerate() {
        if !present {
            log::warn!("class '{}' has no training windows", ds.class_names[c]);
        }
    }
    Ok(Split { train, test })
}
