use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{DclsError, Result};
use crate::grid::{KernelSpec, PositionTensor};

/// Per-axis position counts at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub epoch: usize,
    /// `edges[axis]` has `bins + 1` entries spanning the axis' clamp box.
    pub edges: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
}

impl HistogramEntry {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Histograms over training epochs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistogramSeries {
    pub entries: Vec<HistogramEntry>,
}

impl HistogramSeries {
    pub fn push(&mut self, entry: HistogramEntry) {
        self.entries.push(entry);
    }

    /// Rows `epoch,axis,bin,lower,upper,count`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,axis,bin,lower,upper,count")?;
        for e in &self.entries {
            write_rows(&mut out, e)?;
        }
        Ok(())
    }
}

fn write_rows<W: Write>(out: &mut W, e: &HistogramEntry) -> std::io::Result<()> {
    for (axis, (counts, edges)) in e.counts.iter().zip(&e.edges).enumerate() {
        for (bin, c) in counts.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch,
                axis,
                bin,
                edges[bin],
                edges[bin + 1],
                c
            )?;
        }
    }
    Ok(())
}

/// Bin every coordinate of `positions` along its axis' clamp box.
pub fn position_histogram(
    positions: &PositionTensor,
    spec: &KernelSpec,
    bins: usize,
    epoch: usize,
) -> Result<HistogramEntry> {
    if bins < 2 {
        return Err(DclsError::Precondition(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    positions.check_shape(spec)?;
    let mut edges = Vec::with_capacity(spec.ndims);
    let mut counts = Vec::with_capacity(spec.ndims);
    for axis in 0..spec.ndims {
        let (lower, upper) = spec.bounds(axis);
        let width = (upper - lower) / bins as f64;
        edges.push((0..=bins).map(|b| lower + b as f64 * width).collect());
        let mut c = vec![0u64; bins];
        for &v in positions.0.index_axis(ndarray::Axis(0), axis) {
            let bin = if width > 0.0 {
                (((v - lower) / width).floor().max(0.0) as usize).min(bins - 1)
            } else {
                bins / 2
            };
            c[bin] += 1;
        }
        counts.push(c);
    }
    Ok(HistogramEntry {
        epoch,
        edges,
        counts,
    })
}
