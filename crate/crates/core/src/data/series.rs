use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labeled multichannel sensor stream, `samples` is `[total_time, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub samples: Tensor<f32>,
    pub sample_rate_hz: f64,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Per-sample subject id, when the source records one.
    pub subjects: Option<Vec<u32>>,
}

impl SensorSeries {
    pub fn new(samples: Tensor<f32>, sample_rate_hz: f64, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let series = SensorSeries {
            samples,
            sample_rate_hz,
            labels,
            class_names,
            subjects: None,
        };
        series.check()?;
        Ok(series)
    }

    pub fn with_subjects(mut self, subjects: Vec<u32>) -> Result<Self> {
        self.subjects = Some(subjects);
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if self.samples.ndim() != 2 {
            return Err(Error::invalid(format!(
                "sensor samples must be [time, channels], got {:?}",
                self.samples.shape()
            )));
        }
        if self.labels.len() != self.total_time() {
            return Err(Error::invalid(format!(
                "{} labels for {} samples",
                self.labels.len(),
                self.total_time()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.class_names.len()
            )));
        }
        if let Some(s) = &self.subjects {
            if s.len() != self.total_time() {
                return Err(Error::invalid(format!(
                    "{} subject ids for {} samples",
                    s.len(),
                    self.total_time()
                )));
            }
        }
        Ok(())
    }

    pub fn total_time(&self) -> usize {
        self.samples.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.samples.dim(1)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Contiguous `[start, end)` runs of constant subject id (the whole
    /// series when no subjects are recorded).
    pub fn subject_runs(&self) -> Vec<(usize, usize)> {
        let Some(subjects) = &self.subjects else {
            return vec![(0, self.total_time())];
        };
        let mut runs = Vec::new();
        let mut start = 0;
        for t in 1..=subjects.len() {
            if t == subjects.len() || subjects[t] != subjects[start] {
                runs.push((start, t));
                start = t;
            }
        }
        runs
    }
}

/// Segmented windows, `windows` is `[num_windows, 1, window_len, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub windows: Tensor<f32>,
    pub labels: Vec<usize>,
    pub window_len: usize,
    pub step: usize,
    pub class_names: Vec<String>,
    /// Subject of each window, when known.
    pub subjects: Option<Vec<u32>>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.windows.dim(3)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn window_size(&self) -> usize {
        self.window_len * self.channels()
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let s = self.window_size();
        &self.windows.data()[i * s..(i + 1) * s]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the windows at `indices` (in that order) into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.window_size();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(self.window(i));
        }
        let x = Tensor::from_vec(&[indices.len(), 1, self.window_len, self.channels()], data).expect("batch shape");
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> WindowedDataset {
        let (windows, labels) = self.batch(indices);
        WindowedDataset {
            windows,
            labels,
            window_len: self.window_len,
            step: self.step,
            class_names: self.class_names.clone(),
            subjects: self
                .subjects
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }
}

pub fn window_count(total_time: usize, window_len: usize, step: usize) -> usize {
    if total_time < window_len || window_len == 0 || step == 0 {
        0
    } else {
        (total_time - window_len) / step + 1
    }
}

/// Majority label of a window. Ties go to the label of the last sample if
/// it is among the tied labels, otherwise to the tied label seen latest.
pub fn majority_label(labels: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    let mut last_seen = vec![0usize; classes];
    for (t, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        last_seen[l] = t;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    (0..classes)
        .filter(|&c| counts[c] == best)
        .max_by_key(|&c| last_seen[c])
        .expect("at least one class")
}

/// Fixed-length windows at offsets `0, step, 2*step, ...`; trailing partial
/// windows are dropped.
pub fn sliding_window(series: &SensorSeries, window_len: usize, step: usize) -> Result<WindowedDataset> {
    if step == 0 {
        return Err(Error::invalid("sliding window step must be at least 1"));
    }
    if window_len == 0 || window_len > series.total_time() {
        return Err(Error::invalid(format!(
            "window length {window_len} exceeds the series length {}",
            series.total_time()
        )));
    }
    window_range(series, 0, series.total_time(), window_len, step)
}

/// Windows each subject's run separately so no window straddles two people.
pub fn sliding_window_by_subject(series: &SensorSeries, window_len: usize, step: usize) -> Result<WindowedDataset> {
    if series.subjects.is_none() {
        return sliding_window(series, window_len, step);
    }
    if step == 0 || window_len == 0 {
        return Err(Error::invalid("window length and step must be at least 1"));
    }
    let mut parts = Vec::new();
    for (start, end) in series.subject_runs() {
        if end - start >= window_len {
            parts.push(window_range(series, start, end, window_len, step)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::invalid(format!(
            "no subject has at least {window_len} samples"
        )));
    }
    Ok(concat(parts))
}

fn window_range(
    series: &SensorSeries,
    start: usize,
    end: usize,
    window_len: usize,
    step: usize,
) -> Result<WindowedDataset> {
    let ch = series.channels();
    let count = window_count(end - start, window_len, step);
    let src = series.samples.data();
    let mut data = Vec::with_capacity(count * window_len * ch);
    let mut labels = Vec::with_capacity(count);
    let mut subjects = series.subjects.as_ref().map(|_| Vec::with_capacity(count));
    for w in 0..count {
        let t0 = start + w * step;
        data.extend_from_slice(&src[t0 * ch..(t0 + window_len) * ch]);
        labels.push(majority_label(&series.labels[t0..t0 + window_len], series.num_classes()));
        if let (Some(out), Some(s)) = (subjects.as_mut(), series.subjects.as_ref()) {
            out.push(s[t0 + window_len - 1]);
        }
    }
    Ok(WindowedDataset {
        windows: Tensor::from_vec(&[count, 1, window_len, ch], data)?,
        labels,
        window_len,
        step,
        class_names: series.class_names.clone(),
        subjects,
    })
}

fn concat(parts: Vec<WindowedDataset>) -> WindowedDataset {
    let first = &parts[0];
    let (window_len, step, ch) = (first.window_len, first.step, first.channels());
    let class_names = first.class_names.clone();
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut data = Vec::with_capacity(total * window_len * ch);
    let mut labels = Vec::with_capacity(total);
    let mut subjects = first.subjects.as_ref().map(|_| Vec::with_capacity(total));
    for p in parts {
        data.extend_from_slice(p.windows.data());
        labels.extend_from_slice(&p.labels);
        if let (Some(out), Some(s)) = (subjects.as_mut(), p.subjects.as_ref()) {
            out.extend_from_slice(s);
        }
    }
    WindowedDataset {
        windows: Tensor::from_vec(&[total, 1, window_len, ch], data).expect("concat shape"),
        labels,
        window_len,
        step,
        class_names,
        subjects,
    }
}

pub const NORM_EPS: f64 = 1e-8;

/// Per-channel statistics used for standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Population statistics over every sample of every window.
    pub fn from_dataset(ds: &WindowedDataset) -> Self {
        let ch = ds.channels();
        let mut sum = vec![0f64; ch];
        let mut sq = vec![0f64; ch];
        let n = (ds.len() * ds.window_len) as f64;
        for row in ds.windows.data().chunks_exact(ch) {
            for (c, &v) in row.iter().enumerate() {
                sum[c] += v as f64;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| if n > 0.0 { s / n } else { 0.0 }).collect();
        for row in ds.windows.data().chunks_exact(ch) {
            for (c, &v) in row.iter().enumerate() {
                let d = v as f64 - mean[c];
                sq[c] += d * d;
            }
        }
        ChannelStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: sq
                .iter()
                .map(|&s| if n > 0.0 { (s / n).sqrt() as f32 } else { 1.0 })
                .collect(),
        }
    }

    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Standardizes `ds` in place with `stats`; channels whose std is below
/// [`NORM_EPS`] are only centered.
pub fn normalize(ds: &mut WindowedDataset, stats: &ChannelStats) -> Result<()> {
    let ch = ds.channels();
    if stats.channels() != ch {
        return Err(Error::invalid(format!(
            "normalization stats have {} channels, dataset has {ch}",
            stats.channels()
        )));
    }
    let scale: Vec<f32> = stats
        .std
        .iter()
        .map(|&s| if (s as f64) < NORM_EPS { 1.0 } else { 1.0 / s })
        .collect();
    for row in ds.windows.data_mut().chunks_exact_mut(ch) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[c]) * scale[c];
        }
    }
    Ok(())
}
