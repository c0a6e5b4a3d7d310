//! SOC mapping from within-segment capacity and SOC-aligned resampling.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::capacity::cumulative_capacity;
use crate::error::{Error, Result};
use crate::record::{CycleRecord, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Charge,
    Discharge,
}

/// Channel order of a resampled cycle.
pub const CHANNELS: usize = 4;
pub const CH_VOLTAGE: usize = 0;
pub const CH_CURRENT: usize = 1;
pub const CH_CAPACITY: usize = 2;
pub const CH_SOC: usize = 3;

/// Map within-segment capacity to SOC, linearly between the protocol
/// interval endpoints; charge runs start→end, discharge end→start. Values
/// are clamped to `[0, 1]`.
pub fn compute_soc(capacity: &[f64], q_start: f64, q_end: f64, interval: [f64; 2], direction: Direction) -> Result<Vec<f64>> {
    let dq = q_end - q_start;
    if dq == 0.0 {
        return Err(Error::DegenerateSegment(q_start));
    }
    let [lo, hi] = interval;
    let (from, to) = match direction {
        Direction::Charge => (lo, hi),
        Direction::Discharge => (hi, lo),
    };
    Ok(capacity
        .iter()
        .map(|q| (from + (q - q_start) / dq * (to - from)).clamp(0.0, 1.0))
        .collect())
}

/// Evenly spaced `n` points from `a` to `b` inclusive.
pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Linear interpolation of `ys` at `xq` over strictly increasing `xs`,
/// clamped to the end values outside the range.
pub(crate) fn interp(xs: &[f64], ys: &[f64], xq: f64) -> f64 {
    let n = xs.len();
    if xq <= xs[0] {
        return ys[0];
    }
    if xq >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|v| *v <= xq) - 1;
    let t = (xq - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + t * (ys[k + 1] - ys[k])
}

struct Segment {
    soc: Vec<f64>,
    voltage: Vec<f64>,
    current: Vec<f64>,
    capacity: Vec<f64>,
}

fn segment(cycle: &CycleRecord, span: Span, interval: [f64; 2], direction: Direction) -> Result<Segment> {
    if span.len() < 2 || span.end > cycle.len() {
        return Err(Error::InvalidSpan(format!("span {}..{} unusable", span.start, span.end)));
    }
    let q = cumulative_capacity(cycle, span);
    let soc = compute_soc(&q, q[0], q[q.len() - 1], interval, direction)?;
    // ascending SOC order for interpolation
    let mut idx: Vec<usize> = (0..q.len()).collect();
    if direction == Direction::Discharge {
        idx.reverse();
    }
    let mut seg = Segment { soc: vec![], voltage: vec![], current: vec![], capacity: vec![] };
    for i in idx {
        let s = soc[i];
        if let Some(last) = seg.soc.last() {
            if s == *last {
                // rest samples inside a span repeat the SOC; keep the first
                continue;
            }
            if s < *last {
                return Err(Error::ResampleFailure(format!(
                    "{direction:?} SOC not monotone at sample {}",
                    span.start + i
                )));
            }
        }
        seg.soc.push(s);
        seg.voltage.push(cycle.voltage[span.start + i]);
        seg.current.push(cycle.current[span.start + i]);
        seg.capacity.push(q[i]);
    }
    if seg.soc.len() < 2 {
        return Err(Error::ResampleFailure(format!("{direction:?} segment has a single SOC level")));
    }
    Ok(seg)
}

/// Resample one cycle onto the SOC grid: `seq_len / 2` ascending charge points
/// followed by `seq_len / 2` descending discharge points. Rows are grid points,
/// columns are (voltage V, current C-rate, capacity Ah, SOC).
pub fn resample_cycle(cycle: &CycleRecord, interval: [f64; 2], nominal_capacity: f64, seq_len: usize) -> Result<Array2<f64>> {
    if seq_len < 2 || seq_len % 2 != 0 {
        return Err(Error::ResampleFailure(format!("seq_len={seq_len} must be even")));
    }
    let half = seq_len / 2;
    let [lo, hi] = interval;
    let mut out = Array2::zeros((seq_len, CHANNELS));
    let parts = [
        (cycle.charge_span, Direction::Charge, linspace(lo, hi, half)),
        (cycle.discharge_span, Direction::Discharge, linspace(hi, lo, half)),
    ];
    for (p, (span, dir, grid)) in parts.into_iter().enumerate() {
        let seg = segment(cycle, span, interval, dir)?;
        for (k, s) in grid.into_iter().enumerate() {
            let row = p * half + k;
            out[[row, CH_VOLTAGE]] = interp(&seg.soc, &seg.voltage, s);
            out[[row, CH_CURRENT]] = interp(&seg.soc, &seg.current, s) / nominal_capacity;
            out[[row, CH_CAPACITY]] = interp(&seg.soc, &seg.capacity, s);
            out[[row, CH_SOC]] = s;
        }
    }
    Ok(out)
}
