//! SOH trajectory cleaning: spike clipping, artifact onset detection,
//! recovery search, PCHIP smoothing, battery filtering and EOL extrapolation.
//!
//! Series here are plain slices where element `i` holds cycle `i + 1`; all
//! cycle indices taking part in the public API are 1-based.

use serde::{Deserialize, Serialize};

use super::pchip::Pchip;
use crate::error::{Error, Result};
use crate::record::SohTrajectory;

/// How artifact onsets are located for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetMethod {
    Rpt,
    TimeGap,
    Percentile,
}

pub const DEFAULT_GAMMA_GAP_SECONDS: f64 = 48.0 * 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingParams {
    pub spike_drop_threshold: f64,
    /// absolute SOH band within which the cycle after a drop must return
    pub spike_recovery_band: f64,
    pub filter_margin: f64,
    pub extrap_window: usize,
    pub onset_method: OnsetMethod,
    /// seconds; 48 h when absent
    pub gamma_gap: Option<f64>,
    /// explicit percentile thresholds; derived from training deltas when absent
    pub gamma_plus: Option<f64>,
    pub gamma_minus: Option<f64>,
    pub epsilon: f64,
    pub window: usize,
    pub anchors: usize,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams {
            spike_drop_threshold: 0.03,
            spike_recovery_band: 0.01,
            filter_margin: 0.025,
            extrap_window: 20,
            onset_method: OnsetMethod::TimeGap,
            gamma_gap: None,
            gamma_plus: None,
            gamma_minus: None,
            epsilon: 0.005,
            window: 5,
            anchors: 5,
        }
    }
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.spike_drop_threshold,
            self.spike_recovery_band,
            self.filter_margin,
            self.epsilon,
            self.gamma_gap.unwrap_or(1.0),
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("smoothing thresholds must be > 0".into()));
        }
        if self.window < 1 || self.anchors < 2 || self.extrap_window < 2 {
            return Err(Error::Config("need window >= 1, anchors >= 2, extrap_window >= 2".into()));
        }
        Ok(())
    }
}

/// Upper/lower relative-change thresholds for the percentile onset rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileThresholds {
    pub upper: f64,
    pub lower: f64,
}

impl PercentileThresholds {
    /// 99th and 1st percentiles of `deltas`.
    pub fn from_deltas(deltas: &[f64]) -> Option<Self> {
        if deltas.is_empty() {
            return None;
        }
        let mut sorted = deltas.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(PercentileThresholds {
            upper: percentile_sorted(&sorted, 99.0),
            lower: percentile_sorted(&sorted, 1.0),
        })
    }
}

/// Linear interpolation between closest ranks.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Relative SOH change `δ_k` for `k = 2..=n`, aligned so `out[k - 2]` is `δ_k`.
pub fn relative_deltas(soh: &[f64]) -> Vec<f64> {
    soh.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect()
}

/// Clip isolated single-cycle drops larger than the threshold to the previous
/// cycle's value. A drop is isolated when the following cycle returns to
/// within `spike_recovery_band` of the pre-drop value.
pub fn clip_spikes(soh: &[f64], params: &SmoothingParams) -> Vec<f64> {
    let mut out = soh.to_vec();
    for k in 1..out.len().saturating_sub(1) {
        let prev = out[k - 1];
        let drop = (out[k] - prev) / prev;
        if drop < -params.spike_drop_threshold && out[k + 1] >= prev - params.spike_recovery_band {
            out[k] = prev;
        }
    }
    out
}

/// Inputs an onset rule may draw on.
#[derive(Debug, Clone, Copy, Default)]
pub struct OnsetInputs<'a> {
    /// start time (seconds) of every cycle
    pub cycle_times: Option<&'a [f64]>,
    /// 1-based cycles where a reference performance test starts
    pub rpt_cycles: Option<&'a [usize]>,
    pub thresholds: Option<PercentileThresholds>,
}

/// 1-based onset cycles, ascending and deduplicated.
pub fn detect_artifact_onsets(
    soh: &[f64],
    inputs: OnsetInputs<'_>,
    params: &SmoothingParams,
) -> Result<Vec<usize>> {
    let n = soh.len();
    let mut onsets: Vec<usize> = match params.onset_method {
        OnsetMethod::Rpt => inputs
            .rpt_cycles
            .unwrap_or(&[])
            .iter()
            // last normal cycle before the test
            .filter_map(|r| r.checked_sub(1))
            .filter(|k| *k >= 2 && *k <= n)
            .collect(),
        OnsetMethod::TimeGap => {
            let gap = params.gamma_gap.unwrap_or(DEFAULT_GAMMA_GAP_SECONDS);
            let times = inputs.cycle_times.unwrap_or(&[]);
            (2..=times.len().min(n)).filter(|&k| times[k - 1] - times[k - 2] > gap).collect()
        }
        OnsetMethod::Percentile => {
            let th = match (params.gamma_plus, params.gamma_minus, inputs.thresholds) {
                (Some(upper), Some(lower), _) => PercentileThresholds { upper, lower },
                (_, _, Some(t)) => t,
                _ => return Err(Error::MissingThresholdSource),
            };
            relative_deltas(soh)
                .iter()
                .enumerate()
                .filter(|(_, d)| **d > th.upper || **d < th.lower)
                .map(|(i, _)| i + 2)
                .collect()
        }
    };
    onsets.sort_unstable();
    onsets.dedup();
    Ok(onsets)
}

/// Earliest `k_e >= k_s` such that every cycle in `[k_e, k_e + W - 1]` is
/// within `epsilon` of the pre-onset level `soh[k_s - 1]`. `None` when the
/// series never recovers.
pub fn find_recovery_point(soh: &[f64], k_s: usize, epsilon: f64, window: usize) -> Option<usize> {
    assert!(k_s >= 2, "onset must have a preceding cycle");
    let n = soh.len();
    let level = soh[k_s - 2];
    let ok = |j: usize| (soh[j - 1] - level).abs() <= epsilon;
    (k_s..=n.checked_sub(window.max(1))? + 1).find(|&k_e| (k_e..k_e + window).all(ok))
}

/// Replace cycles `k_s..=k_e` by a PCHIP interpolant through up to `anchors`
/// cycles on each side of the region.
pub fn smooth_region_pchip(soh: &[f64], k_s: usize, k_e: usize, anchors: usize) -> Result<Vec<f64>> {
    let n = soh.len();
    if k_s < 1 || k_e < k_s || k_e > n {
        return Err(Error::CannotSmooth(format!("region [{k_s}, {k_e}] outside 1..={n}")));
    }
    let before: Vec<usize> = (k_s.saturating_sub(anchors).max(1)..k_s).collect();
    let after: Vec<usize> = (k_e + 1..=(k_e + anchors).min(n)).collect();
    if before.is_empty() || after.is_empty() {
        return Err(Error::CannotSmooth(format!(
            "region [{k_s}, {k_e}] needs anchors on both sides of a {n}-cycle series"
        )));
    }
    let xs: Vec<usize> = before.into_iter().chain(after).collect();
    let p = Pchip::new(
        xs.iter().map(|&k| k as f64).collect(),
        xs.iter().map(|&k| soh[k - 1]).collect(),
    );
    let mut out = soh.to_vec();
    for k in k_s..=k_e {
        out[k - 1] = p.eval(k as f64);
    }
    Ok(out)
}

/// First cycle whose SOH is strictly below `tau`.
pub fn compute_eol(soh: &[f64], tau: f64) -> Result<usize> {
    soh.iter().position(|v| *v < tau).map(|i| i + 1).ok_or(Error::NoEol { tau })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    /// SOH never came within the margin of `tau`
    Excluded { min_soh: f64 },
    Kept(SohTrajectory),
}

// guards the extrapolated crossing against round-off in the line fit
const CROSSING_GUARD: f64 = 1e-10;
const MAX_EXTRAPOLATION: usize = 100_000;

/// Apply the degradation filter; attach `t_eol`, extrapolating the tail
/// linearly when the battery stopped between `tau` and `tau + margin`.
pub fn filter_and_extrapolate(soh: &[f64], tau: f64, params: &SmoothingParams) -> Result<FilterOutcome> {
    let min_soh = soh.iter().copied().fold(f64::INFINITY, f64::min);
    if soh.is_empty() || min_soh > tau + params.filter_margin {
        return Ok(FilterOutcome::Excluded { min_soh });
    }
    if min_soh < tau {
        let t_eol = compute_eol(soh, tau)?;
        return Ok(FilterOutcome::Kept(SohTrajectory {
            soh: soh.to_vec(),
            t_eol: Some(t_eol),
            extrapolated_from: None,
        }));
    }
    let n = soh.len();
    let w = params.extrap_window.min(n);
    if w < 2 {
        return Err(Error::NonDegradingTail { slope: 0.0 });
    }
    let (slope, intercept) = least_squares_line((n - w + 1..=n).map(|k| (k as f64, soh[k - 1])));
    if !(slope < 0.0) {
        return Err(Error::NonDegradingTail { slope });
    }
    let mut out = soh.to_vec();
    for k in n + 1..=n + MAX_EXTRAPOLATION {
        let v = intercept + slope * k as f64;
        out.push(v);
        if v < tau - CROSSING_GUARD {
            return Ok(FilterOutcome::Kept(SohTrajectory {
                soh: out,
                t_eol: Some(k),
                extrapolated_from: Some(n + 1),
            }));
        }
    }
    Err(Error::NonDegradingTail { slope })
}

fn least_squares_line(points: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = points.collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
