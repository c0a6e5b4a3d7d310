//! Battery records as they arrive from ingestion: aging condition, per-cycle
//! raw series and the protocol metadata needed to turn them into SOH.

use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ten aging factors that identify a degradation regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgingCondition {
    pub positive_electrode: String,
    pub negative_electrode: String,
    pub electrolyte: String,
    pub package_structure: String,
    /// Ah
    pub nominal_capacity: f64,
    pub manufacturer: String,
    pub formation_protocol: String,
    pub charge_protocol: String,
    pub discharge_protocol: String,
    /// °C
    pub operating_temperature: f64,
}

impl AgingCondition {
    /// Factor names and values in canonical order.
    pub fn factors(&self) -> [(&'static str, String); 10] {
        [
            ("positive electrode", self.positive_electrode.clone()),
            ("negative electrode", self.negative_electrode.clone()),
            ("electrolyte", self.electrolyte.clone()),
            ("package structure", self.package_structure.clone()),
            ("nominal capacity", format!("{} Ah", self.nominal_capacity)),
            ("manufacturer", self.manufacturer.clone()),
            ("formation protocol", self.formation_protocol.clone()),
            ("charge protocol", self.charge_protocol.clone()),
            ("discharge protocol", self.discharge_protocol.clone()),
            ("operating temperature", format!("{} °C", self.operating_temperature)),
        ]
    }

    /// Stable identifier; two conditions share a key iff they are equal.
    pub fn key(&self) -> String {
        let mut out = String::new();
        for (i, (_, v)) in self.factors().iter().enumerate() {
            if i > 0 {
                out.push('|');
            }
            // escape the separator so distinct tuples cannot collide
            let _ = write!(out, "{}", v.replace('\\', "\\\\").replace('|', "\\|"));
        }
        out
    }
}

impl PartialEq for AgingCondition {
    fn eq(&self, other: &Self) -> bool {
        self.positive_electrode == other.positive_electrode
            && self.negative_electrode == other.negative_electrode
            && self.electrolyte == other.electrolyte
            && self.package_structure == other.package_structure
            && self.nominal_capacity.to_bits() == other.nominal_capacity.to_bits()
            && self.manufacturer == other.manufacturer
            && self.formation_protocol == other.formation_protocol
            && self.charge_protocol == other.charge_protocol
            && self.discharge_protocol == other.discharge_protocol
            && self.operating_temperature.to_bits() == other.operating_temperature.to_bits()
    }
}

impl Eq for AgingCondition {}

impl Hash for AgingCondition {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.positive_electrode.hash(state);
        self.negative_electrode.hash(state);
        self.electrolyte.hash(state);
        self.package_structure.hash(state);
        self.nominal_capacity.to_bits().hash(state);
        self.manufacturer.hash(state);
        self.formation_protocol.hash(state);
        self.charge_protocol.hash(state);
        self.discharge_protocol.hash(state);
        self.operating_temperature.to_bits().hash(state);
    }
}

/// Half-open sample index range `[start, end)` into a cycle's arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Raw measurements of one cycle. Current is signed, charge positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleRecord {
    /// seconds, strictly increasing
    pub timestamps: Vec<f64>,
    pub voltage: Vec<f64>,
    pub current: Vec<f64>,
    /// Wh per sample, when the cycler logs it
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<Vec<f64>>,
    pub charge_span: Span,
    pub discharge_span: Span,
}

impl CycleRecord {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.timestamps.first().copied().unwrap_or(0.0)
    }
}

/// How the reference capacity `cap0` is chosen for a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Cap0Rule {
    #[default]
    Nominal,
    FirstCycleDischarge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryRecord {
    pub battery_id: String,
    pub condition: AgingCondition,
    /// depth of discharge, fraction in (0, 1]
    pub dod: f64,
    /// protocol SOC interval `[start, end]` of the charge segment
    pub soc_interval: [f64; 2],
    /// cycle `i` (1-based) is `cycles[i - 1]`
    pub cycles: Vec<CycleRecord>,
    /// Ah
    pub cap0: f64,
    /// EOL threshold as a fraction of cap0
    pub tau: f64,
    /// cycle indices at which reference performance tests start
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rpt_cycles: Vec<usize>,
}

impl BatteryRecord {
    /// 1-based cycle accessor.
    pub fn cycle(&self, index: usize) -> Option<&CycleRecord> {
        index.checked_sub(1).and_then(|i| self.cycles.get(i))
    }

    pub fn n_cycles(&self) -> usize {
        self.cycles.len()
    }

    /// Start time of every cycle, indexed like `cycles`.
    pub fn cycle_start_times(&self) -> Vec<f64> {
        self.cycles.iter().map(CycleRecord::start_time).collect()
    }

    /// Reference capacity under `rule`. The first-cycle rule integrates the
    /// discharge of cycle 1.
    pub fn reference_capacity(&self, rule: Cap0Rule) -> Result<f64> {
        match rule {
            Cap0Rule::Nominal => Ok(self.condition.nominal_capacity),
            Cap0Rule::FirstCycleDischarge => {
                let c = self
                    .cycle(1)
                    .ok_or_else(|| Error::InvalidRecord("record has no cycles".into()))?;
                crate::preprocess::compute_cycle_capacity(c, c.discharge_span)
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("record serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-cycle SOH series with the end-of-life bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SohTrajectory {
    /// `soh[i - 1]` is the SOH of cycle `i`
    pub soh: Vec<f64>,
    pub t_eol: Option<usize>,
    /// first cycle whose value was extrapolated rather than measured
    pub extrapolated_from: Option<usize>,
}

impl SohTrajectory {
    pub fn measured(soh: Vec<f64>) -> Self {
        SohTrajectory { soh, t_eol: None, extrapolated_from: None }
    }

    /// 1-based accessor.
    pub fn at(&self, cycle: usize) -> Option<f64> {
        cycle.checked_sub(1).and_then(|i| self.soh.get(i)).copied()
    }

    pub fn len(&self) -> usize {
        self.soh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soh.is_empty()
    }

    /// Violations of the trajectory invariants against threshold `tau`.
    pub fn violations(&self, tau: f64) -> Vec<String> {
        let mut out = Vec::new();
        if let Some((i, v)) = self.soh.iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v < 1.5)) {
            out.push(format!("soh[{}]={v} outside (0, 1.5)", i + 1));
        }
        if let Some(t) = self.t_eol {
            match self.at(t) {
                Some(v) if v < tau => {}
                _ => out.push(format!("soh at t_eol={t} must be < tau")),
            }
            if self.soh.iter().take(t.saturating_sub(1)).any(|v| *v < tau) {
                out.push("soh must stay >= tau before t_eol".into());
            }
        }
        out
    }
}

/// Every broken invariant of `record`, each naming field and rule. Never fails.
pub fn validate_record(record: &BatteryRecord) -> Vec<String> {
    let mut v = Vec::new();
    let c = &record.condition;
    if !(c.nominal_capacity > 0.0) {
        v.push("condition.nominal_capacity must be > 0".to_string());
    }
    if !c.operating_temperature.is_finite() {
        v.push("condition.operating_temperature must be finite".to_string());
    }
    if !(record.cap0 > 0.0) {
        v.push("cap0 must be > 0".to_string());
    }
    if !(record.tau > 0.0 && record.tau < 1.0) {
        v.push("tau must be in (0, 1)".to_string());
    }
    if !(record.dod > 0.0 && record.dod <= 1.0) {
        v.push("dod must be in (0, 1]".to_string());
    }
    let [lo, hi] = record.soc_interval;
    if !(lo < hi) {
        v.push("soc_interval start must be < end".to_string());
    }
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        v.push("soc_interval must lie in [0, 1]".to_string());
    }
    if record.cycles.is_empty() {
        v.push("cycles must be nonempty".to_string());
    }
    for (i, cyc) in record.cycles.iter().enumerate() {
        let idx = i + 1;
        let n = cyc.timestamps.len();
        let lens_ok = cyc.voltage.len() == n
            && cyc.current.len() == n
            && cyc.energy.as_ref().is_none_or(|e| e.len() == n);
        if !lens_ok {
            v.push(format!("cycles[{idx}]: series lengths must match"));
        }
        if n < 2 {
            v.push(format!("cycles[{idx}]: series length must be >= 2"));
        }
        if cyc.timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            v.push(format!("cycles[{idx}]: timestamps must be strictly increasing"));
        }
        let (ch, dis) = (cyc.charge_span, cyc.discharge_span);
        if ch.is_empty() || dis.is_empty() {
            v.push(format!("cycles[{idx}]: spans must be nonempty"));
        }
        if ch.end > n || dis.end > n {
            v.push(format!("cycles[{idx}]: span exceeds series length"));
        }
        if !ch.is_empty() && !dis.is_empty() && ch.end > dis.start {
            if dis.end <= ch.start {
                v.push("charge_span must precede discharge_span".to_string());
            } else {
                v.push(format!("cycles[{idx}]: spans must be disjoint"));
            }
        }
    }
    if let Some(first_bad) = record
        .cycles
        .windows(2)
        .position(|w| w[1].start_time() <= w[0].start_time())
    {
        v.push(format!("cycles[{}]: cycles must be ordered in time", first_bad + 2));
    }
    v
}
