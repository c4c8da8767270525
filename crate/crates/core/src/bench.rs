//! Wall-clock comparison of the two Lego execution paths and the (o, m) grid runner.

use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lego::{bank_size, ConvPath, LegoLayer};
use crate::network::Network;
use crate::ops::conv::ConvSpec;
use crate::pipeline::{costs, train_config, PreparedData};
use crate::tensor::Tensor;

/// Wall-clock samples in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub samples_ms: Vec<f64>,
}

impl Timing {
    pub fn median(&self) -> f64 {
        let mut s = self.samples_ms.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => s[n / 2],
            _ => 0.5 * (s[n / 2 - 1] + s[n / 2]),
        }
    }

    /// Sample standard deviation; `None` for fewer than two samples.
    pub fn std(&self) -> Option<f64> {
        let n = self.samples_ms.len();
        if n < 2 {
            return None;
        }
        let mean = self.samples_ms.iter().sum::<f64>() / n as f64;
        let var = self.samples_ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some(var.sqrt())
    }
}

fn time<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<Timing> {
    // one untimed warm-up run
    f()?;
    let mut samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing { samples_ms })
}

/// One Lego layer timed on random input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerBench {
    pub channels: usize,
    pub filters: usize,
    pub o: usize,
    pub m: f64,
    pub kernel: usize,
    pub time: usize,
    pub width: usize,
    pub batch: usize,
}

impl Default for LayerBench {
    fn default() -> Self {
        LayerBench {
            channels: 128,
            filters: 256,
            o: 2,
            m: 0.25,
            kernel: 5,
            time: 128,
            width: 9,
            batch: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTiming {
    pub case: LayerBench,
    pub naive: Timing,
    pub stm: Timing,
    /// `n / k`.
    pub theoretical_speedup: f64,
}

impl LayerTiming {
    pub fn measured_speedup(&self) -> f64 {
        self.naive.median() / self.stm.median()
    }
}

pub fn time_layer(case: &LayerBench, repeats: usize, seed: u64) -> Result<LayerTiming> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::new(case.channels, case.filters, case.kernel).with_padding((case.kernel - 1) / 2);
    let layer = LegoLayer::<f32>::new(spec, case.o, case.m, &mut rng)?;
    let x = Tensor::<f32>::randn(&[case.batch, case.channels, case.time, case.width], 1.0, &mut rng);
    let naive = time(repeats, || layer.forward(&x, ConvPath::Naive).map(drop))?;
    let stm = time(repeats, || layer.forward(&x, ConvPath::SplitTransformMerge).map(drop))?;
    Ok(LayerTiming {
        case: *case,
        naive,
        stm,
        theoretical_speedup: case.filters as f64 / bank_size(case.filters, case.m) as f64,
    })
}

/// Cartesian grid of fragment counts and bank ratios, parsed from `o=2,4;m=0.5,0.25`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub o: Vec<usize>,
    pub m: Vec<f64>,
}

impl Grid {
    pub fn cells(&self) -> Vec<(usize, f64)> {
        self.o.iter().flat_map(|&o| self.m.iter().map(move |&m| (o, m))).collect()
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::config("grid", msg);
        let (mut o, mut m) = (None, None);
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=values, got {part:?}")))?;
            let values: Vec<&str> = values.split(',').map(str::trim).collect();
            match key.trim() {
                "o" if o.is_none() => {
                    let parsed = values
                        .iter()
                        .map(|v| v.parse::<usize>().ok().filter(|&o| o >= 1))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad(format!("o values must be positive integers: {part:?}")))?;
                    o = Some(parsed);
                }
                "m" if m.is_none() => {
                    let parsed = values
                        .iter()
                        .map(|v| v.parse::<f64>().ok().filter(|&m| m > 0.0 && m <= 1.0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad(format!("m values must lie in (0, 1]: {part:?}")))?;
                    m = Some(parsed);
                }
                "o" | "m" => return Err(bad(format!("{} given twice", key.trim()))),
                other => return Err(bad(format!("unknown grid key {other:?}, expected o or m"))),
            }
        }
        match (o, m) {
            (Some(o), Some(m)) => Ok(Grid { o, m }),
            _ => Err(bad(format!("{s:?} must list both o and m"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    /// Mean over seeds.
    pub weighted_f1: f64,
    pub f1_std: Option<f64>,
    pub accuracy: f64,
    pub params: u64,
    pub flops: u64,
    pub ratio: f64,
    pub speedup: f64,
    pub naive: Timing,
    pub stm: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub cell: String,
    pub o: Option<usize>,
    pub m: Option<f64>,
    pub result: std::result::Result<CellResult, String>,
}

impl GridRow {
    pub fn failed(&self) -> bool {
        self.result.is_err()
    }
}

/// Inference time of a trained network on up to 64 test windows, per path.
fn time_network(net: &mut Network<f32>, data: &PreparedData, repeats: usize) -> Result<(Timing, Timing)> {
    let idx: Vec<usize> = (0..data.test.len().min(64)).collect();
    let (x, _) = data.test.batch(&idx);
    net.path = ConvPath::Naive;
    let naive = time(repeats, || net.infer(&x).map(drop))?;
    net.path = ConvPath::SplitTransformMerge;
    let stm = time(repeats, || net.infer(&x).map(drop))?;
    Ok((naive, stm))
}

fn run_cell(cfg: &ModelConfig, data: &PreparedData, seeds: &[u64], repeats: usize) -> Result<CellResult> {
    let report = costs(cfg, data)?;
    let mut f1s = Vec::with_capacity(seeds.len());
    let mut accs = Vec::with_capacity(seeds.len());
    let mut timings = None;
    for &seed in seeds {
        let run = train_config(&ModelConfig { seed, ..cfg.clone() }, data, |_| {})?;
        f1s.push(run.last().test_f1);
        accs.push(run.last().test_accuracy);
        if timings.is_none() {
            let mut net = run.checkpoint.network;
            timings = Some(time_network(&mut net, data, repeats)?);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (naive, stm) = timings.ok_or_else(|| Error::invalid("no seeds given"))?;
    Ok(CellResult {
        weighted_f1: mean(&f1s),
        f1_std: Timing { samples_ms: f1s.clone() }.std(),
        accuracy: mean(&accs),
        params: report.totals.trainable(),
        flops: report.totals.all_flops(),
        ratio: report.ratio,
        speedup: report.speedup,
        naive,
        stm,
    })
}

/// Trains the baseline of `cfg` and one Lego variant per grid cell, each
/// with every seed. A failing cell is recorded and the grid continues.
pub fn run_grid(
    cfg: &ModelConfig,
    data: &PreparedData,
    grid: &Grid,
    seeds: &[u64],
    repeats: usize,
    mut on_row: impl FnMut(&GridRow),
) -> Result<Vec<GridRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is needed"));
    }
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let mut cells = vec![("baseline".to_string(), None, cfg.baseline())];
    for (o, m) in grid.cells() {
        cells.push((format!("o={o},m={m}"), Some((o, m)), cfg.with_lego(o, m)));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (name, om, cell_cfg) in cells {
        let result = cell_cfg
            .validate_static()
            .and_then(|_| run_cell(&cell_cfg, data, seeds, repeats))
            .map_err(|e| e.to_string());
        if let Err(e) = &result {
            log::warn!("grid cell {name} failed: {e}");
        }
        let row = GridRow {
            cell: name,
            o: om.map(|p| p.0),
            m: om.map(|p| p.1),
            result,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Grid results as CSV. Spread columns appear only when there is more than
/// one seed or repeat to compute them from.
pub fn grid_csv(rows: &[GridRow], seeds: usize, repeats: usize) -> String {
    let mut header = vec!["cell", "o", "m", "status", "weighted_f1"];
    if seeds > 1 {
        header.push("f1_std");
    }
    header.extend(["accuracy", "params", "flops", "ratio", "speedup", "naive_ms", "stm_ms"]);
    if repeats > 1 {
        header.extend(["naive_ms_std", "stm_ms_std"]);
    }
    header.extend(["measured_speedup", "error"]);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for row in rows {
        let mut rec = vec![
            row.cell.clone(),
            opt(row.o.map(|o| o.to_string())),
            opt(row.m.map(|m| m.to_string())),
        ];
        match &row.result {
            Ok(r) => {
                rec.push("ok".into());
                rec.push(format!("{:.6}", r.weighted_f1));
                if seeds > 1 {
                    rec.push(opt(r.f1_std.map(|s| format!("{s:.6}"))));
                }
                rec.extend([
                    format!("{:.6}", r.accuracy),
                    r.params.to_string(),
                    r.flops.to_string(),
                    format!("{:.4}", r.ratio),
                    format!("{:.4}", r.speedup),
                    format!("{:.3}", r.naive.median()),
                    format!("{:.3}", r.stm.median()),
                ]);
                if repeats > 1 {
                    rec.push(opt(r.naive.std().map(|s| format!("{s:.3}"))));
                    rec.push(opt(r.stm.std().map(|s| format!("{s:.3}"))));
                }
                rec.push(format!("{:.3}", r.naive.median() / r.stm.median()));
                rec.push(String::new());
            }
            Err(e) => {
                rec.push("failed".into());
                let blanks = header.len() - rec.len() - 1;
                rec.extend(std::iter::repeat_n(String::new(), blanks));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Layer timing as CSV, one row per path.
pub fn layer_timing_csv(t: &LayerTiming) -> String {
    let repeats = t.naive.samples_ms.len();
    let mut out = String::from("path,median_ms");
    if repeats > 1 {
        out.push_str(",std_ms");
    }
    out.push_str(",theoretical_speedup,measured_speedup\n");
    for (name, timing) in [("naive", &t.naive), ("stm", &t.stm)] {
        out.push_str(&format!("{name},{:.3}", timing.median()));
        if let Some(s) = timing.std() {
            out.push_str(&format!(",{s:.3}"));
        }
        out.push_str(&format!(",{:.3},{:.3}\n", t.theoretical_speedup, t.measured_speedup()));
    }
    out
}
