use crate::error::{Error, Result};
use crate::record::{BatteryRecord, CycleRecord, SohTrajectory, Span};

const SECONDS_PER_HOUR: f64 = 3600.0;

/// Trapezoidal integral of `|f(t)|` over `span`, in value·hours.
pub(crate) fn abs_trapezoid(t: &[f64], f: impl Fn(usize) -> f64, span: Span) -> f64 {
    span.range()
        .collect::<Vec<_>>()
        .windows(2)
        .map(|w| 0.5 * (f(w[0]).abs() + f(w[1]).abs()) * (t[w[1]] - t[w[0]]))
        .sum::<f64>()
        / SECONDS_PER_HOUR
}

/// Cumulative `∫|I| dt` in Ah from the first sample of `span`.
pub(crate) fn cumulative_capacity(cycle: &CycleRecord, span: Span) -> Vec<f64> {
    let t = &cycle.timestamps;
    let i = &cycle.current;
    let mut q = Vec::with_capacity(span.len());
    let mut acc = 0.0;
    for k in span.range() {
        if k > span.start {
            acc += 0.5 * (i[k - 1].abs() + i[k].abs()) * (t[k] - t[k - 1]) / SECONDS_PER_HOUR;
        }
        q.push(acc);
    }
    q
}

fn check_span(cycle: &CycleRecord, span: Span) -> Result<()> {
    if span.len() < 2 {
        return Err(Error::InvalidSpan(format!(
            "span {}..{} has fewer than 2 samples",
            span.start, span.end
        )));
    }
    if span.end > cycle.timestamps.len() || span.end > cycle.current.len() {
        return Err(Error::InvalidSpan(format!(
            "span end {} exceeds series length {}",
            span.end,
            cycle.timestamps.len()
        )));
    }
    Ok(())
}

/// Ampere-hour count of `span`: trapezoidal `∫|I(t)| dt` converted to Ah.
pub fn compute_cycle_capacity(cycle: &CycleRecord, span: Span) -> Result<f64> {
    check_span(cycle, span)?;
    Ok(abs_trapezoid(&cycle.timestamps, |k| cycle.current[k], span))
}

fn segment_energy(cycle: &CycleRecord, span: Span) -> f64 {
    match &cycle.energy {
        Some(e) => span.range().map(|k| e[k].abs()).sum(),
        None => abs_trapezoid(&cycle.timestamps, |k| cycle.voltage[k] * cycle.current[k], span),
    }
}

/// Coulombic and energy efficiency of one cycle (discharge over charge).
pub fn compute_cycle_descriptors(cycle: &CycleRecord) -> Result<(f64, f64)> {
    let ch = compute_cycle_capacity(cycle, cycle.charge_span)?;
    let dis = compute_cycle_capacity(cycle, cycle.discharge_span)?;
    if !(ch > 0.0) {
        return Err(Error::InvalidCycle { cycle: 0, reason: "zero charge capacity".into() });
    }
    let ch_e = segment_energy(cycle, cycle.charge_span);
    let dis_e = segment_energy(cycle, cycle.discharge_span);
    if !(ch_e > 0.0) {
        return Err(Error::InvalidCycle { cycle: 0, reason: "zero charge energy".into() });
    }
    Ok((dis / ch, dis_e / ch_e))
}

/// SOH of every cycle: discharge capacity over `cap0 × DoD`.
pub fn compute_soh_series(record: &BatteryRecord) -> Result<SohTrajectory> {
    if !(record.dod > 0.0) {
        return Err(Error::InvalidRecord(format!("dod={} must be > 0", record.dod)));
    }
    if !(record.cap0 > 0.0) {
        return Err(Error::InvalidRecord(format!("cap0={} must be > 0", record.cap0)));
    }
    let denom = record.cap0 * record.dod;
    let soh = record
        .cycles
        .iter()
        .enumerate()
        .map(|(i, c)| {
            compute_cycle_capacity(c, c.discharge_span)
                .map(|cap| cap / denom)
                .map_err(|e| Error::InvalidCycle { cycle: i + 1, reason: e.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SohTrajectory::measured(soh))
}
