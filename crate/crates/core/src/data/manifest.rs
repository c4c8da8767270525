//! Dataset manifests and the file adapters behind them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cache::{read_cache, write_cache};
use super::series::{sliding_window_by_subject, SensorSeries, WindowedDataset};
use super::synthetic::{generate_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A CSV column, by header name or zero-based index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

impl std::fmt::Display for Column {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Column::Index(i) => write!(f, "#{i}"),
            Column::Name(n) => write!(f, "'{n}'"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Csv,
    WisdmRaw,
    Cache,
    Synthetic,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    pub format: DataFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channel_columns: Vec<Column>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<Column>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_column: Option<Column>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate_hz: Option<f64>,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Raw label strings in class order; defaults to `class_names`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_values: Option<Vec<String>>,
    /// Rows with these raw labels are dropped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ignore_labels: Vec<String>,
    pub window_len: usize,
    pub step: usize,
    /// Single-character field delimiter, `","` by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delimiter: Option<String>,
    #[serde(default = "yes")]
    pub has_header: bool,
    /// Channels whose missing (NaN) samples are filled from the last valid one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forward_fill_columns: Vec<Column>,
    /// Drop rows with a missing sample in any other channel instead of failing.
    #[serde(default)]
    pub drop_nan_rows: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::config("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_json(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("{}: {field}", path.display()), message),
            other => other,
        })?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut m.data_path, &mut m.cache_path].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::config("window_len", "must be at least 1"));
        }
        if self.step == 0 {
            return Err(Error::config("step", "must be at least 1"));
        }
        if let Some(d) = &self.delimiter {
            if d.len() != 1 {
                return Err(Error::config("delimiter", "must be a single ASCII character"));
            }
        }
        match self.format {
            DataFormat::Synthetic => {
                let s = self
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::config("synthetic", "required for the synthetic format"))?;
                if !self.class_names.is_empty() && self.class_names.len() != s.num_classes {
                    return Err(Error::config("class_names", "length must equal synthetic.num_classes"));
                }
            }
            DataFormat::Csv | DataFormat::WisdmRaw => {
                if self.data_path.is_none() {
                    return Err(Error::config("data_path", "required"));
                }
                if self.class_names.len() < 2 {
                    return Err(Error::config("class_names", "need at least two classes"));
                }
                if let Some(v) = &self.label_values {
                    if v.len() != self.class_names.len() {
                        return Err(Error::config("label_values", "length must equal class_names"));
                    }
                }
                if self.format == DataFormat::Csv {
                    if self.channel_columns.is_empty() {
                        return Err(Error::config("channel_columns", "need at least one channel"));
                    }
                    if self.label_column.is_none() {
                        return Err(Error::config("label_column", "required for the csv format"));
                    }
                }
            }
            DataFormat::Cache => {
                if self.data_path.is_none() {
                    return Err(Error::config("data_path", "required"));
                }
            }
        }
        Ok(())
    }

    fn data_path(&self) -> Result<&Path> {
        self.data_path
            .as_deref()
            .ok_or_else(|| Error::config("data_path", "required"))
    }

    /// Raw label strings in class order.
    pub fn label_values(&self) -> &[String] {
        self.label_values.as_deref().unwrap_or(&self.class_names)
    }

    fn read_data_file(&self) -> Result<Vec<u8>> {
        let path = self.data_path()?;
        let bytes = std::fs::read(path).map_err(|e| {
            if let (std::io::ErrorKind::NotFound, Some(url)) = (e.kind(), &self.source_url) {
                Error::invalid(format!(
                    "{} not found; download the dataset from {url} and place the file there",
                    path.display()
                ))
            } else {
                Error::io(path, e)
            }
        })?;
        if let Some(expected) = &self.sha256 {
            let got = hex::encode(Sha256::digest(&bytes));
            if !got.eq_ignore_ascii_case(expected) {
                return Err(Error::invalid(format!(
                    "{}: checksum mismatch, expected sha256 {expected}, got {got}",
                    path.display()
                )));
            }
        }
        Ok(bytes)
    }

    /// Digest of the manifest and its source file, used to key the cache.
    pub fn digest(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.cache_path = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical)?);
        if matches!(self.format, DataFormat::Csv | DataFormat::WisdmRaw) {
            h.update(Sha256::digest(self.read_data_file()?));
        }
        Ok(hex::encode(h.finalize()))
    }

    /// `(channels, classes)` when they follow from the manifest alone; a cache
    /// has to be read to know them.
    pub fn static_shape(&self) -> Option<(usize, usize)> {
        match self.format {
            DataFormat::Csv => Some((self.channel_columns.len(), self.class_names.len())),
            DataFormat::WisdmRaw => Some((3, self.class_names.len())),
            DataFormat::Synthetic => self.synthetic.as_ref().map(|s| (s.channels, s.num_classes)),
            DataFormat::Cache => None,
        }
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate_hz.unwrap_or(0.0)
    }
}

/// Parses the manifest at `manifest_path` and the CSV it points at.
pub fn load_csv(manifest_path: &Path) -> Result<SensorSeries> {
    let m = Manifest::load(manifest_path)?;
    if m.format != DataFormat::Csv {
        return Err(Error::config("format", "expected \"csv\""));
    }
    load_series(&m)
}

pub fn load_series(m: &Manifest) -> Result<SensorSeries> {
    match m.format {
        DataFormat::Csv => parse_csv(m, &m.read_data_file()?),
        DataFormat::WisdmRaw => parse_wisdm(m, &m.read_data_file()?),
        DataFormat::Synthetic => {
            let spec = m.synthetic.as_ref().expect("validated");
            let mut s = generate_synthetic(spec)?;
            if !m.class_names.is_empty() {
                s.class_names = m.class_names.clone();
            }
            Ok(s)
        }
        DataFormat::Cache => Err(Error::config("format", "a cache holds windows, not a raw series")),
    }
}

/// Loads the manifest's windows, through its cache when one is configured.
pub fn load_windowed(m: &Manifest) -> Result<WindowedDataset> {
    if m.format == DataFormat::Cache {
        let ds = read_cache(m.data_path()?, None)?;
        if ds.window_len != m.window_len || ds.step != m.step {
            return Err(Error::invalid(format!(
                "cache holds {}/{} windows, manifest asks for {}/{}",
                ds.window_len, ds.step, m.window_len, m.step
            )));
        }
        return Ok(ds);
    }
    let Some(cache) = &m.cache_path else {
        return sliding_window_by_subject(&load_series(m)?, m.window_len, m.step);
    };
    let digest = m.digest()?;
    if cache.exists() {
        match read_cache(cache, Some(&digest)) {
            Ok(ds) => return Ok(ds),
            Err(e) => log::warn!("rebuilding {}: {e}", cache.display()),
        }
    }
    let ds = sliding_window_by_subject(&load_series(m)?, m.window_len, m.step)?;
    write_cache(cache, &ds, &digest)?;
    Ok(ds)
}

fn column_index(col: &Column, headers: Option<&csv::StringRecord>, what: &str) -> Result<usize> {
    match col {
        Column::Index(i) => Ok(*i),
        Column::Name(name) => {
            let headers = headers.ok_or_else(|| Error::config(what, format!("column {col} needs a header row")))?;
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::config(what, format!("missing column {col}")))
        }
    }
}

/// Maps raw labels to class ids; unknown values are collected for the error.
struct LabelMap<'a> {
    values: &'a [String],
    ignore: &'a [String],
    unknown: BTreeSet<String>,
}

enum Label {
    Class(usize),
    Ignored,
    Unknown,
}

impl<'a> LabelMap<'a> {
    fn new(m: &'a Manifest) -> Self {
        LabelMap {
            values: m.label_values(),
            ignore: &m.ignore_labels,
            unknown: BTreeSet::new(),
        }
    }

    fn get(&mut self, raw: &str) -> Label {
        if let Some(i) = self.values.iter().position(|v| v == raw) {
            Label::Class(i)
        } else if self.ignore.iter().any(|v| v == raw) {
            Label::Ignored
        } else {
            self.unknown.insert(raw.to_string());
            Label::Unknown
        }
    }

    fn finish(self, path: &Path) -> Result<()> {
        if self.unknown.is_empty() {
            return Ok(());
        }
        let list: Vec<_> = self.unknown.iter().take(20).map(String::as_str).collect();
        Err(Error::invalid(format!(
            "{}: unknown label values: {}",
            path.display(),
            list.join(", ")
        )))
    }
}

fn subject_id(raw: &str, ids: &mut Vec<String>) -> u32 {
    match ids.iter().position(|s| s == raw) {
        Some(i) => i as u32,
        None => {
            ids.push(raw.to_string());
            (ids.len() - 1) as u32
        }
    }
}

fn parse_csv(m: &Manifest, bytes: &[u8]) -> Result<SensorSeries> {
    let path = m.data_path()?.to_path_buf();
    let delim = m.delimiter.as_deref().unwrap_or(",").as_bytes()[0];
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(m.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = if m.has_header {
        Some(rdr.headers().map_err(|e| data_err(&path, 1, e.to_string()))?.clone())
    } else {
        None
    };
    let chans: Vec<usize> = m
        .channel_columns
        .iter()
        .map(|c| column_index(c, headers.as_ref(), "channel_columns"))
        .collect::<Result<_>>()?;
    let label_col = column_index(m.label_column.as_ref().expect("validated"), headers.as_ref(), "label_column")?;
    let subject_col = m
        .subject_column
        .as_ref()
        .map(|c| column_index(c, headers.as_ref(), "subject_column"))
        .transpose()?;
    let ffill: Vec<bool> = {
        let idx: Vec<usize> = m
            .forward_fill_columns
            .iter()
            .map(|c| column_index(c, headers.as_ref(), "forward_fill_columns"))
            .collect::<Result<_>>()?;
        chans.iter().map(|c| idx.contains(c)).collect()
    };
    let needed = chans
        .iter()
        .chain(std::iter::once(&label_col))
        .chain(subject_col.iter())
        .copied()
        .max()
        .unwrap_or(0)
        + 1;

    let mut labels = LabelMap::new(m);
    let mut samples: Vec<f32> = Vec::new();
    let mut label_ids = Vec::new();
    let mut subject_names = Vec::new();
    let mut subjects = Vec::new();
    let mut dropped = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            data_err(&path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() < needed {
            return Err(data_err(
                &path,
                line,
                format!("expected at least {needed} fields, found {}", rec.len()),
            ));
        }
        let class = match labels.get(&rec[label_col]) {
            Label::Class(c) => c,
            Label::Ignored | Label::Unknown => continue,
        };
        let mut row = Vec::with_capacity(chans.len());
        let mut missing = false;
        for (k, &c) in chans.iter().enumerate() {
            let cell = &rec[c];
            let v: f32 = cell.parse().map_err(|_| {
                data_err(&path, line, format!("non-numeric value '{cell}' in column {}", m.channel_columns[k]))
            })?;
            if !v.is_finite() && !ffill[k] {
                if m.drop_nan_rows {
                    missing = true;
                } else {
                    return Err(data_err(
                        &path,
                        line,
                        format!("missing value '{cell}' in column {}", m.channel_columns[k]),
                    ));
                }
            }
            row.push(v);
        }
        if missing {
            dropped += 1;
            continue;
        }
        samples.extend_from_slice(&row);
        label_ids.push(class);
        if let Some(sc) = subject_col {
            subjects.push(subject_id(&rec[sc], &mut subject_names));
        }
    }
    labels.finish(&path)?;
    if dropped > 0 {
        log::info!("{}: dropped {dropped} rows with missing samples", path.display());
    }
    if label_ids.is_empty() {
        return Err(data_err(&path, 1, "no data rows".into()));
    }
    forward_fill(&mut samples, chans.len(), &ffill).map_err(|c| {
        Error::invalid(format!(
            "{}: column {} has no valid samples to fill from",
            path.display(),
            m.channel_columns[c]
        ))
    })?;
    let total = label_ids.len();
    let series = SensorSeries::new(
        Tensor::from_vec(&[total, chans.len()], samples)?,
        m.sample_rate(),
        label_ids,
        m.class_names.clone(),
    )?;
    if subject_col.is_some() {
        series.with_subjects(subjects)
    } else {
        Ok(series)
    }
}

/// Fills non-finite samples of flagged channels from the previous valid
/// sample (leading gaps from the first valid one). Returns the channel that
/// has no valid sample at all.
fn forward_fill(samples: &mut [f32], channels: usize, flagged: &[bool]) -> std::result::Result<(), usize> {
    for c in (0..channels).filter(|&c| flagged[c]) {
        let first = samples
            .iter()
            .skip(c)
            .step_by(channels)
            .copied()
            .find(|v| v.is_finite())
            .ok_or(c)?;
        let mut last = first;
        for v in samples.iter_mut().skip(c).step_by(channels) {
            if v.is_finite() {
                last = *v;
            } else {
                *v = last;
            }
        }
    }
    Ok(())
}

fn data_err(path: &Path, line: usize, message: String) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line,
        message,
    }
}

/// WISDM raw format: `user,activity,timestamp,x,y,z;` records, possibly
/// several per line. Malformed records are skipped with a warning because
/// the public file contains a handful of them.
fn parse_wisdm(m: &Manifest, bytes: &[u8]) -> Result<SensorSeries> {
    let path = m.data_path()?.to_path_buf();
    let text = String::from_utf8_lossy(bytes);
    let mut labels = LabelMap::new(m);
    let mut samples = Vec::new();
    let mut label_ids = Vec::new();
    let mut subject_names = Vec::new();
    let mut subjects = Vec::new();
    let mut skipped = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        for record in line.split(';').map(str::trim).filter(|r| !r.is_empty()) {
            let f: Vec<&str> = record.split(',').map(str::trim).collect();
            let xyz: Option<Vec<f32>> = (f.len() == 6)
                .then(|| f[3..].iter().map(|v| v.parse::<f32>().ok().filter(|x| x.is_finite())).collect())
                .flatten();
            let Some(xyz) = xyz else {
                skipped.push(ln + 1);
                continue;
            };
            let class = match labels.get(f[1]) {
                Label::Class(c) => c,
                Label::Ignored | Label::Unknown => continue,
            };
            samples.extend_from_slice(&xyz);
            label_ids.push(class);
            subjects.push(subject_id(f[0], &mut subject_names));
        }
    }
    labels.finish(&path)?;
    if !skipped.is_empty() {
        log::warn!(
            "{}: skipped {} malformed records (first at line {})",
            path.display(),
            skipped.len(),
            skipped[0]
        );
    }
    if label_ids.is_empty() {
        return Err(data_err(&path, 1, "no data rows".into()));
    }
    let total = label_ids.len();
    SensorSeries::new(
        Tensor::from_vec(&[total, 3], samples)?,
        m.sample_rate_hz.unwrap_or(20.0),
        label_ids,
        m.class_names.clone(),
    )?
    .with_subjects(subjects)
}
