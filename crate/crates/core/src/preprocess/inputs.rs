//! Fixed-shape model inputs and normalized, masked targets.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::capacity::compute_cycle_descriptors;
use super::soc::{resample_cycle, CHANNELS};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::record::{BatteryRecord, SohTrajectory};

/// Encoder input for one battery. Rows past `s` are exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    /// `[s_max, seq_len, 4]`, channels (V, C-rate, Ah, SOC)
    pub x: Array3<f64>,
    /// `[s_max, 2]`, columns (coulombic efficiency, energy efficiency)
    pub xf: Array2<f64>,
    pub cycle_mask: Vec<bool>,
    pub condition_key: String,
    /// usable early cycles
    pub s: usize,
}

impl ModelInput {
    pub fn s_max(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.x.shape()[1]
    }

    /// The same input restricted to the first `s` cycles.
    pub fn truncated(&self, s: usize) -> ModelInput {
        let s = s.min(self.s);
        let mut out = self.clone();
        out.x.slice_mut(s![s.., .., ..]).fill(0.0);
        out.xf.slice_mut(s![s.., ..]).fill(0.0);
        for (i, m) in out.cycle_mask.iter_mut().enumerate() {
            *m = i < s;
        }
        out.s = s;
        out
    }
}

pub fn build_model_input(record: &BatteryRecord, s: usize, config: &ModelConfig) -> Result<ModelInput> {
    let s_max = config.s_max;
    if s == 0 || s > s_max {
        return Err(Error::Config(format!("S={s} must be in 1..={s_max}")));
    }
    if record.n_cycles() < s {
        return Err(Error::InvalidRecord(format!(
            "{} has {} cycles, need {s}",
            record.battery_id,
            record.n_cycles()
        )));
    }
    let l = config.seq_len;
    let mut x = Array3::zeros((s_max, l, CHANNELS));
    let mut xf = Array2::zeros((s_max, 2));
    for i in 0..s {
        let cyc = &record.cycles[i];
        let wrap = |e: Error| Error::InvalidCycle { cycle: i + 1, reason: e.to_string() };
        let rs = resample_cycle(cyc, record.soc_interval, record.condition.nominal_capacity, l).map_err(wrap)?;
        let (ce, ee) = compute_cycle_descriptors(cyc).map_err(wrap)?;
        x.slice_mut(s![i, .., ..]).assign(&rs);
        xf[[i, 0]] = ce;
        xf[[i, 1]] = ee;
    }
    Ok(ModelInput {
        x,
        xf,
        cycle_mask: (0..s_max).map(|i| i < s).collect(),
        condition_key: record.condition.key(),
        s,
    })
}

/// `(y - tau) / (1 - tau)`
pub fn normalize_soh(y: f64, tau: f64) -> f64 {
    (y - tau) / (1.0 - tau)
}

pub fn denormalize_soh(y: f64, tau: f64) -> f64 {
    y * (1.0 - tau) + tau
}

/// Normalized trajectory over the prediction region `(S, t_eol]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub y_norm: Vec<f64>,
    pub mask: Vec<bool>,
    pub tau: f64,
}

impl Target {
    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn t_max(&self) -> usize {
        self.y_norm.len()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect()
    }
}

/// Cycles beyond `t_max` are dropped from the target.
pub fn build_target(trajectory: &SohTrajectory, s: usize, tau: f64, t_max: usize) -> Result<Target> {
    let t_eol = trajectory.t_eol.ok_or(Error::NoEol { tau })?;
    if t_eol <= s {
        return Err(Error::NothingToPredict { t_eol, s });
    }
    let mut y_norm = vec![0.0; t_max];
    let mut mask = vec![false; t_max];
    for j in s + 1..=t_eol.min(t_max) {
        if let Some(y) = trajectory.at(j) {
            y_norm[j - 1] = normalize_soh(y, tau);
            mask[j - 1] = true;
        }
    }
    Ok(Target { y_norm, mask, tau })
}
