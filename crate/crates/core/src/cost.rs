//! Parameter and FLOP accounting.
//!
//! One multiply-accumulate counts as two FLOPs. Bias and batch-norm work is
//! kept in `aux_flops` and their parameters in separate columns so per-layer
//! ratios compare convolution weights only.

use serde::Serialize;

use crate::config::{Architecture, LayerSpec, ResolvedKind};
use crate::error::{Error, Result};
use crate::lego;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    /// Float weights, excluding bias and batch norm.
    pub params: u64,
    pub bias_params: u64,
    /// Trainable batch-norm scale and shift.
    pub bn_params: u64,
    /// Batch-norm running mean and variance.
    pub bn_running: u64,
    /// Size of the binary selection masks, in bits.
    pub mask_bits: u64,
    pub macs: u64,
    pub flops: u64,
    pub aux_flops: u64,
    pub compressed: bool,
    pub baseline_params: u64,
    pub baseline_macs: u64,
    /// `baseline_params / params`.
    pub ratio: f64,
    /// `baseline_macs / macs`.
    pub speedup: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CostTotals {
    pub params: u64,
    pub bias_params: u64,
    pub bn_params: u64,
    pub bn_running: u64,
    pub mask_bits: u64,
    pub macs: u64,
    pub flops: u64,
    pub aux_flops: u64,
}

impl CostTotals {
    fn of(rows: &[CostRow]) -> Self {
        rows.iter().fold(CostTotals::default(), |t, r| CostTotals {
            params: t.params + r.params,
            bias_params: t.bias_params + r.bias_params,
            bn_params: t.bn_params + r.bn_params,
            bn_running: t.bn_running + r.bn_running,
            mask_bits: t.mask_bits + r.mask_bits,
            macs: t.macs + r.macs,
            flops: t.flops + r.flops,
            aux_flops: t.aux_flops + r.aux_flops,
        })
    }

    /// Every float needed at inference except running statistics.
    pub fn trainable(&self) -> u64 {
        self.params + self.bias_params + self.bn_params
    }

    pub fn all_flops(&self) -> u64 {
        self.flops + self.aux_flops
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub input: [usize; 3],
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
    /// Totals of the same architecture with every Lego layer made conventional.
    pub baseline_totals: CostTotals,
    /// `baseline_totals.trainable() / totals.trainable()`.
    pub ratio: f64,
    /// `baseline_totals.all_flops() / totals.all_flops()`.
    pub speedup: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-layer rows for every conv, Lego and dense layer.
pub fn layer_costs(arch: &Architecture) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for layer in &arch.layers {
        let (tin, win) = (layer.input.time, layer.input.width);
        let out_positions = (layer.output.time * layer.output.width) as u64;
        let row = match &layer.kind {
            ResolvedKind::Conv { spec, batch_norm } => {
                let params = spec.weight_shape().iter().product::<usize>() as u64;
                let macs = spec.macs(tin, win)?;
                let n = spec.out_channels as u64;
                let bn = if *batch_norm { 2 * n } else { 0 };
                CostRow {
                    name: layer.name.clone(),
                    kind: "conv".into(),
                    params,
                    bias_params: n,
                    bn_params: bn,
                    bn_running: bn,
                    mask_bits: 0,
                    macs,
                    flops: 2 * macs,
                    aux_flops: n * out_positions + if *batch_norm { 2 * n * out_positions } else { 0 },
                    compressed: false,
                    baseline_params: params,
                    baseline_macs: macs,
                    ratio: 1.0,
                    speedup: 1.0,
                }
            }
            ResolvedKind::Lego {
                spec,
                batch_norm,
                o,
                k,
                ..
            } => {
                let (o, k) = (*o, *k);
                let baseline_params = spec.weight_shape().iter().product::<usize>() as u64;
                let params = (k * (spec.in_channels / o) * spec.kernel * spec.kernel_width) as u64;
                let baseline_macs = lego::naive_macs(spec, tin, win)?;
                let macs = lego::stm_macs(spec, o, k, tin, win)?;
                let merge = lego::merge_adds(spec, o, tin, win)?;
                let n = spec.out_channels as u64;
                let bn = if *batch_norm { 2 * n } else { 0 };
                CostRow {
                    name: layer.name.clone(),
                    kind: "lego".into(),
                    params,
                    bias_params: n,
                    bn_params: bn,
                    bn_running: bn,
                    mask_bits: n * (o * k) as u64,
                    macs,
                    flops: 2 * macs + merge,
                    aux_flops: n * out_positions + if *batch_norm { 2 * n * out_positions } else { 0 },
                    compressed: true,
                    baseline_params,
                    baseline_macs,
                    ratio: ratio(baseline_params, params),
                    speedup: ratio(baseline_macs, macs),
                }
            }
            ResolvedKind::Dense { inputs, units, .. } => {
                let params = (inputs * units) as u64;
                CostRow {
                    name: layer.name.clone(),
                    kind: "dense".into(),
                    params,
                    bias_params: *units as u64,
                    bn_params: 0,
                    bn_running: 0,
                    mask_bits: 0,
                    macs: params,
                    flops: 2 * params,
                    aux_flops: *units as u64,
                    compressed: false,
                    baseline_params: params,
                    baseline_macs: params,
                    ratio: 1.0,
                    speedup: 1.0,
                }
            }
            ResolvedKind::Pool { .. } => continue,
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Full report of `layers` on `input`, compared against its uncompressed twin.
pub fn cost_report(layers: &[LayerSpec], input: crate::config::InputShape, classes: usize) -> Result<CostReport> {
    let arch = Architecture::resolve(layers, input, classes)?;
    let baseline_layers: Vec<LayerSpec> = layers
        .iter()
        .map(|l| match l {
            LayerSpec::Lego(s) => LayerSpec::Conv(crate::config::ConvLayerSpec {
                n: s.n,
                d: s.d,
                stride: s.stride,
                padding: s.padding,
                batch_norm: s.batch_norm,
            }),
            other => other.clone(),
        })
        .collect();
    let base = Architecture::resolve(&baseline_layers, input, classes)?;
    report_from(&arch, &base)
}

pub fn report_from(arch: &Architecture, baseline: &Architecture) -> Result<CostReport> {
    if arch.input != baseline.input {
        return Err(Error::invalid("baseline architecture has a different input shape"));
    }
    let rows = layer_costs(arch)?;
    let totals = CostTotals::of(&rows);
    let baseline_totals = CostTotals::of(&layer_costs(baseline)?);
    Ok(CostReport {
        input: arch.input.dims(),
        ratio: ratio(baseline_totals.trainable(), totals.trainable()),
        speedup: ratio(baseline_totals.all_flops(), totals.all_flops()),
        rows,
        totals,
        baseline_totals,
    })
}

pub const CSV_COLUMNS: [&str; 12] = [
    "name",
    "kind",
    "params",
    "bias_params",
    "bn_params",
    "mask_bits",
    "macs",
    "flops",
    "aux_flops",
    "compressed",
    "ratio",
    "speedup",
];

impl CostReport {
    /// One row per layer plus a `total` row carrying the model-level ratio and speedup.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(CSV_COLUMNS).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.kind.clone(),
                r.params.to_string(),
                r.bias_params.to_string(),
                r.bn_params.to_string(),
                r.mask_bits.to_string(),
                r.macs.to_string(),
                r.flops.to_string(),
                r.aux_flops.to_string(),
                r.compressed.to_string(),
                format!("{:.6}", r.ratio),
                format!("{:.6}", r.speedup),
            ])
            .map_err(err)?;
        }
        let t = &self.totals;
        w.write_record([
            "total".to_string(),
            "model".to_string(),
            t.params.to_string(),
            t.bias_params.to_string(),
            t.bn_params.to_string(),
            t.mask_bits.to_string(),
            t.macs.to_string(),
            t.flops.to_string(),
            t.aux_flops.to_string(),
            self.rows.iter().any(|r| r.compressed).to_string(),
            format!("{:.6}", self.ratio),
            format!("{:.6}", self.speedup),
        ])
        .map_err(err)?;
        String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable table; parameter counts are in units of one float.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:<6} {:>12} {:>10} {:>14} {:>8} {:>8}\n",
            "layer", "kind", "params", "bias+bn", "flops", "ratio", "speedup"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:<6} {:>12} {:>10} {:>14} {:>7.2}x {:>7.2}x\n",
                r.name,
                r.kind,
                r.params,
                r.bias_params + r.bn_params,
                r.flops,
                r.ratio,
                r.speedup
            ));
        }
        let t = &self.totals;
        s.push_str(&format!(
            "{:<10} {:<6} {:>12} {:>10} {:>14} {:>7.2}x {:>7.2}x\n",
            "total",
            "",
            t.params,
            t.bias_params + t.bn_params,
            t.flops,
            self.ratio,
            self.speedup
        ));
        s.push_str(&format!(
            "trainable floats {} (baseline {}), flops incl. bias/bn {} (baseline {}), mask bits {}\n",
            t.trainable(),
            self.baseline_totals.trainable(),
            t.all_flops(),
            self.baseline_totals.all_flops(),
            t.mask_bits
        ));
        s
    }
}
