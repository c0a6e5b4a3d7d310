//! Per-battery preprocessing: raw record → cleaned trajectory → model input
//! and target.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::capacity::compute_soh_series;
use super::cleaning::{
    clip_spikes, detect_artifact_onsets, filter_and_extrapolate, find_recovery_point, relative_deltas,
    smooth_region_pchip, FilterOutcome, OnsetInputs, PercentileThresholds, SmoothingParams,
};
use super::inputs::{build_model_input, build_target, ModelInput, Target};
use crate::config::ModelConfig;
use crate::parallel::{map_collect, Exec};
use crate::error::{Error, Result};
use crate::record::{validate_record, AgingCondition, BatteryRecord, SohTrajectory};

/// What the cleaning stage did to a trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub clipped_spikes: Vec<usize>,
    pub onsets: Vec<usize>,
    /// inclusive `[k_s, k_e]` regions replaced by the interpolant
    pub smoothed: Vec<(usize, usize)>,
    /// onsets left as measured, with the reason
    pub unsmoothed: Vec<(usize, String)>,
    pub extrapolated_from: Option<usize>,
}

/// One preprocessed battery, ready for training or scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedSample {
    pub battery_id: String,
    pub condition: AgingCondition,
    pub input: ModelInput,
    pub target: Target,
    pub trajectory: SohTrajectory,
    pub provenance: Provenance,
}

impl ProcessedSample {
    pub fn tau(&self) -> f64 {
        self.target.tau
    }

    /// Input and target for a smaller early-cycle window.
    pub fn with_early_cycles(&self, s: usize) -> Result<ProcessedSample> {
        let input = self.input.truncated(s);
        let target = build_target(&self.trajectory, input.s, self.target.tau, self.target.t_max())?;
        Ok(ProcessedSample { input, target, ..self.clone() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("sample serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Kept(Box<ProcessedSample>),
    Excluded { battery_id: String, reason: String },
}

/// Spike-clipped SOH series, the input to percentile threshold estimation.
pub fn clipped_soh(record: &BatteryRecord, params: &SmoothingParams) -> Result<Vec<f64>> {
    Ok(clip_spikes(&compute_soh_series(record)?.soh, params))
}

/// Relative SOH changes pooled over `records` (the training split).
pub fn training_deltas(records: &[&BatteryRecord], params: &SmoothingParams) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(relative_deltas(&clipped_soh(r, params)?));
    }
    Ok(out)
}

/// Clip, locate and smooth artifacts. Returns the cleaned series and what
/// was done.
pub fn clean_trajectory(
    record: &BatteryRecord,
    params: &SmoothingParams,
    thresholds: Option<PercentileThresholds>,
) -> Result<(Vec<f64>, Provenance)> {
    let raw = compute_soh_series(record)?.soh;
    let mut soh = clip_spikes(&raw, params);
    let mut prov = Provenance {
        clipped_spikes: raw
            .iter()
            .zip(&soh)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i + 1)
            .collect(),
        ..Provenance::default()
    };
    let times = record.cycle_start_times();
    let inputs = OnsetInputs {
        cycle_times: Some(&times),
        rpt_cycles: Some(&record.rpt_cycles),
        thresholds,
    };
    prov.onsets = detect_artifact_onsets(&soh, inputs, params)?;
    let mut covered_until = 0;
    for &k_s in &prov.onsets {
        if k_s <= covered_until {
            continue;
        }
        let Some(k_e) = find_recovery_point(&soh, k_s, params.epsilon, params.window) else {
            prov.unsmoothed.push((k_s, "no recovery".into()));
            continue;
        };
        match smooth_region_pchip(&soh, k_s, k_e, params.anchors) {
            Ok(out) => {
                soh = out;
                prov.smoothed.push((k_s, k_e));
                covered_until = k_e;
            }
            Err(Error::CannotSmooth(reason)) => prov.unsmoothed.push((k_s, reason)),
            Err(e) => return Err(e),
        }
    }
    Ok((soh, prov))
}

pub fn preprocess_battery(
    record: &BatteryRecord,
    config: &ModelConfig,
    params: &SmoothingParams,
    thresholds: Option<PercentileThresholds>,
) -> Result<Outcome> {
    let violations = validate_record(record);
    if !violations.is_empty() {
        return Err(Error::InvalidRecord(format!("{}: {}", record.battery_id, violations.join("; "))));
    }
    let excluded = |reason: String| Outcome::Excluded { battery_id: record.battery_id.clone(), reason };
    let (soh, mut prov) = clean_trajectory(record, params, thresholds)?;
    let trajectory = match filter_and_extrapolate(&soh, record.tau, params) {
        Ok(FilterOutcome::Kept(t)) => t,
        Ok(FilterOutcome::Excluded { min_soh }) => {
            return Ok(excluded(format!(
                "insufficient degradation: min SOH {min_soh:.4} above tau + {}",
                params.filter_margin
            )))
        }
        Err(e @ Error::NonDegradingTail { .. }) => return Ok(excluded(e.to_string())),
        Err(e) => return Err(e),
    };
    prov.extrapolated_from = trajectory.extrapolated_from;
    let s = config.s_cycles.min(record.n_cycles());
    let target = match build_target(&trajectory, s, record.tau, config.t_max) {
        Ok(t) => t,
        Err(e @ Error::NothingToPredict { .. }) => return Ok(excluded(e.to_string())),
        Err(e) => return Err(e),
    };
    let input = build_model_input(record, s, config)?;
    Ok(Outcome::Kept(Box::new(ProcessedSample {
        battery_id: record.battery_id.clone(),
        condition: record.condition.clone(),
        input,
        target,
        trajectory,
        provenance: prov,
    })))
}

/// Results of preprocessing many records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutcome {
    pub kept: Vec<ProcessedSample>,
    /// `(battery_id, reason)`
    pub excluded: Vec<(String, String)>,
    /// `(battery_id, error)`
    pub failed: Vec<(String, String)>,
}

/// Run [`preprocess_battery`] over every record. Failures are collected
/// per battery; output order follows input order.
pub fn preprocess_records(
    records: &[BatteryRecord],
    config: &ModelConfig,
    params: &SmoothingParams,
    thresholds: Option<PercentileThresholds>,
    exec: Exec,
) -> BatchOutcome {
    let results = map_collect(exec, records, |r| preprocess_battery(r, config, params, thresholds));
    let mut out = BatchOutcome::default();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(Outcome::Kept(s)) => out.kept.push(*s),
            Ok(Outcome::Excluded { battery_id, reason }) => out.excluded.push((battery_id, reason)),
            Err(e) => out.failed.push((r.battery_id.clone(), e.to_string())),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::cleaning::OnsetMethod;
    use crate::record::tests::record;

    fn fade(r: &mut BatteryRecord, soh: &[f64]) {
        // scale the discharge current so each cycle delivers soh × cap0
        for (c, v) in r.cycles.iter_mut().zip(soh) {
            for k in c.discharge_span.range() {
                c.current[k] = -2.0 * v;
            }
        }
    }

    #[test]
    fn rpt_dip_is_smoothed() {
        let n = 60;
        let mut r = record(n);
        let trend: Vec<f64> = (1..=n).map(|k| 1.0 - 2e-4 * k as f64).collect();
        let mut soh = trend.clone();
        for v in &mut soh[29..33] {
            *v -= 0.05;
        }
        fade(&mut r, &soh);
        r.rpt_cycles = vec![30];
        let params = SmoothingParams { onset_method: OnsetMethod::Rpt, ..Default::default() };
        let raw = compute_soh_series(&r).unwrap().soh;
        let (clean, prov) = clean_trajectory(&r, &params, None).unwrap();
        assert_eq!(prov.onsets, vec![29]);
        // cycles 34..=38 sit within 0.005 of cycle 28
        assert_eq!(prov.smoothed, vec![(29, 34)]);
        for k in 29..=34 {
            assert!((clean[k - 1] - trend[k - 1]).abs() < 1e-9, "cycle {k}");
        }
        for k in (1..24).chain(40..=n) {
            assert_eq!(clean[k - 1].to_bits(), raw[k - 1].to_bits());
        }
    }

    #[test]
    fn flat_battery_is_excluded() {
        let r = record(30);
        let cfg = ModelConfig { s_max: 4, s_cycles: 4, seq_len: 8, patch: 2, t_max: 50, ..ModelConfig::desk() };
        match preprocess_battery(&r, &cfg, &SmoothingParams::default(), None).unwrap() {
            Outcome::Excluded { reason, .. } => assert!(reason.contains("insufficient")),
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn degrading_battery_is_kept() {
        let n = 60;
        let mut r = record(n);
        let soh: Vec<f64> = (1..=n).map(|k| 1.0 - 0.004 * k as f64).collect();
        fade(&mut r, &soh);
        let cfg = ModelConfig { s_max: 4, s_cycles: 4, seq_len: 8, patch: 2, t_max: 80, ..ModelConfig::desk() };
        let Outcome::Kept(s) = preprocess_battery(&r, &cfg, &SmoothingParams::default(), None).unwrap() else {
            panic!()
        };
        // 1 - 0.004 k < 0.8 first at k = 51
        assert_eq!(s.trajectory.t_eol, Some(51));
        assert_eq!(s.target.observed(), 47);
        let s2 = s.with_early_cycles(2).unwrap();
        assert_eq!(s2.target.observed(), 49);
        assert_eq!(s2.input.s, 2);
    }
}
