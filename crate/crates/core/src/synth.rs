//! Deterministic synthetic cycling data with known degradation curves.
//!
//! Each battery follows `SOH(n) = 1 - a n - b n^p` plus optional early
//! capacity rise, regeneration bumps after long rests, and Gaussian noise.
//! Cycles are constant-current charge/discharge with a sigmoid OCV curve and
//! a series resistance that grows with fade.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{map_collect, Exec};
use crate::record::{AgingCondition, BatteryRecord, CycleRecord, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Superlinear,
    Linear,
    Sublinear,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Superlinear, ShapeFamily::Linear, ShapeFamily::Sublinear];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_conditions: usize,
    pub batteries_per_condition: usize,
    /// per-condition family; cycles through all three when shorter than
    /// `n_conditions`
    pub shape_family: Vec<ShapeFamily>,
    /// cycles to reach the EOL threshold, `[lo, hi]`
    pub life_range: [usize; 2],
    pub noise_sd: f64,
    pub capacity_rise: bool,
    pub regeneration_events: usize,
    pub samples_per_segment: usize,
    pub tau: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            n_conditions: 16,
            batteries_per_condition: 4,
            shape_family: Vec::new(),
            life_range: [150, 450],
            noise_sd: 0.002,
            capacity_rise: true,
            regeneration_events: 1,
            samples_per_segment: 24,
            tau: 0.8,
        }
    }
}

const REST_SECONDS: f64 = 1200.0;
const REGEN_REST_SECONDS: f64 = 72.0 * 3600.0;
const COULOMBIC_EFFICIENCY: f64 = 0.998;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.life_range;
        let bad = |m: String| Err(Error::Config(m));
        if !(102 <= lo && lo <= hi && hi <= 5000) {
            return bad(format!("life_range [{lo}, {hi}] must lie within [102, 5000]"));
        }
        if !(self.noise_sd >= 0.0) {
            return bad(format!("noise_sd={} must be >= 0", self.noise_sd));
        }
        if self.n_conditions == 0 || self.batteries_per_condition == 0 {
            return bad("n_conditions and batteries_per_condition must be >= 1".into());
        }
        if self.samples_per_segment < 2 {
            return bad("samples_per_segment must be >= 2".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau={} must be in (0, 1)", self.tau));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn family(&self, index: usize) -> ShapeFamily {
        self.shape_family.get(index).copied().unwrap_or(ShapeFamily::ALL[index % 3])
    }
}

/// Independent stream per `(seed, a, b)`.
fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 32) | b);
    rng
}

/// Noiseless degradation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SohCurve {
    pub a: f64,
    pub b: f64,
    pub p: f64,
    /// peak height of the early rise
    pub rise: f64,
    pub rise_peak: f64,
    /// `(cycle, height)` of each regeneration bump
    pub regen: Vec<(usize, f64)>,
}

impl SohCurve {
    pub fn power_law(a: f64, b: f64, p: f64) -> Self {
        SohCurve { a, b, p, rise: 0.0, rise_peak: 1.0, regen: Vec::new() }
    }

    /// Fade only, without rise or regeneration.
    pub fn trend(&self, n: usize) -> f64 {
        let n = n as f64;
        1.0 - self.a * n - self.b * n.powf(self.p)
    }

    pub fn eval(&self, n: usize) -> f64 {
        let mut v = self.trend(n);
        if self.rise > 0.0 {
            let x = n as f64 / self.rise_peak;
            v += self.rise * x * (1.0 - x).exp();
        }
        for &(c, h) in &self.regen {
            if n >= c {
                v += h * (-((n - c) as f64) / 3.0).exp();
            }
        }
        v
    }
}

/// Open-circuit voltage `V0 + k soc + s sigmoid((soc - center) / width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ocv {
    pub v0: f64,
    pub k: f64,
    pub s: f64,
    pub center: f64,
    pub width: f64,
}

impl Ocv {
    pub fn eval(&self, soc: f64) -> f64 {
        self.v0 + self.k * soc + self.s / (1.0 + (-(soc - self.center) / self.width).exp())
    }

    pub fn slope(&self, soc: f64) -> f64 {
        let e = (-(soc - self.center) / self.width).exp();
        self.k + self.s * e / ((1.0 + e) * (1.0 + e) * self.width)
    }
}

/// A generated condition together with the hidden parameters its batteries
/// share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCondition {
    pub index: usize,
    pub condition: AgingCondition,
    pub family: ShapeFamily,
    pub life: f64,
    pub p: f64,
    /// fraction of the fade at EOL carried by the linear term
    pub linear_share: f64,
    pub ocv: Ocv,
    pub r0: f64,
    pub charge_c_rate: f64,
    pub discharge_c_rate: f64,
}

const POSITIVE: [&str; 3] = ["NCA", "LFP", "NMC"];
const NEGATIVE: [&str; 3] = ["graphite", "graphite-SiO", "hard-carbon"];
const PACKAGES: [&str; 3] = ["cylindrical", "pouch", "prismatic"];
const MAKERS: [&str; 5] = ["maker-a", "maker-b", "maker-c", "maker-d", "maker-e"];
const CAPACITIES: [f64; 4] = [1.1, 2.0, 2.5, 3.0];
const TEMPERATURES: [f64; 4] = [25.0, 35.0, 15.0, 45.0];
// relative life at each temperature above
const TEMPERATURE_LIFE: [f64; 4] = [1.0, 0.7, 0.6, 0.3];
const CHARGE_RATES: [f64; 3] = [0.5, 1.0, 2.0];

pub fn generate_condition_profile(spec: &SynthSpec, index: usize) -> SynthCondition {
    assert!(index < spec.n_conditions, "condition index {index} out of range");
    let mut rng = stream(spec.seed, 1, index as u64);
    let family = spec.family(index);
    let ti = (index / 3) % 4;
    let ci = (index / 2) % 3;
    let charge_c_rate = CHARGE_RATES[ci];
    let condition = AgingCondition {
        positive_electrode: POSITIVE[index % 3].into(),
        negative_electrode: NEGATIVE[(index / 4) % 3].into(),
        electrolyte: "LiPF6 EC/DMC".into(),
        package_structure: PACKAGES[(index / 2) % 3].into(),
        nominal_capacity: CAPACITIES[(index / 5) % 4],
        manufacturer: MAKERS[rng.random_range(0..MAKERS.len())].into(),
        formation_protocol: format!("formation-{index:03}"),
        charge_protocol: format!("CC {charge_c_rate}C"),
        discharge_protocol: "CC 1C".into(),
        operating_temperature: TEMPERATURES[ti],
    };
    let [lo, hi] = spec.life_range.map(|v| v as f64);
    let u = 0.5 * TEMPERATURE_LIFE[ti] + 0.5 * rng.random::<f64>();
    let life = lo + (hi - lo) * u;
    let p = match family {
        ShapeFamily::Superlinear => rng.random_range(1.8..2.5),
        ShapeFamily::Linear => 1.0,
        ShapeFamily::Sublinear => rng.random_range(0.4..0.6),
    };
    let ocv = Ocv {
        v0: rng.random_range(3.0..3.3),
        k: rng.random_range(0.3..0.6),
        s: rng.random_range(0.1..0.25),
        center: rng.random_range(0.35..0.65),
        width: rng.random_range(0.03..0.08),
    };
    SynthCondition {
        index,
        condition,
        family,
        life,
        p,
        linear_share: rng.random_range(0.1..0.3),
        ocv,
        r0: rng.random_range(0.02..0.06),
        charge_c_rate,
        discharge_c_rate: 1.0,
    }
}

/// The public condition tuple for `index`.
pub fn generate_condition(spec: &SynthSpec, index: usize) -> AgingCondition {
    generate_condition_profile(spec, index).condition
}

/// What generated a battery, for test oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub battery_id: String,
    pub condition_key: String,
    pub family: ShapeFamily,
    pub life: f64,
    pub curve: SohCurve,
    pub noise_sd: f64,
    /// the SOH each cycle was synthesized to deliver
    pub soh: Vec<f64>,
}

pub fn battery_id(condition: usize, battery: usize) -> String {
    format!("c{condition:03}-b{battery:02}")
}

pub fn generate_battery(spec: &SynthSpec, cond: &SynthCondition, battery: usize) -> (BatteryRecord, SynthTruth) {
    let mut rng = stream(spec.seed, 2 + cond.index as u64, battery as u64);
    let tau = spec.tau;
    let fade = 1.0 - tau;
    let life = (cond.life * rng.random_range(0.92..1.08)).max(spec.life_range[0] as f64);
    let p = if cond.family == ShapeFamily::Linear { 1.0 } else { cond.p * rng.random_range(0.97..1.03) };
    let (a, b) = if cond.family == ShapeFamily::Linear {
        (fade / life, 0.0)
    } else {
        let share = cond.linear_share;
        (share * fade / life, (1.0 - share) * fade / life.powf(p))
    };
    let mut curve = SohCurve::power_law(a, b, p);
    if spec.capacity_rise {
        curve.rise = rng.random_range(0.003..0.012);
        curve.rise_peak = rng.random_range(10.0..30.0);
    }
    let first_regen = (life * 0.3) as usize;
    for _ in 0..spec.regeneration_events {
        let c = rng.random_range(first_regen.max(2)..(life * 0.85) as usize);
        curve.regen.push((c, rng.random_range(0.005..0.015)));
    }
    curve.regen.sort_by_key(|r| r.0);

    // run past the crossing so the measured series reaches below tau
    let horizon = (life * 1.6) as usize + 50;
    let crossing = (1..=horizon).find(|&n| curve.eval(n) < tau).unwrap_or(horizon);
    let below = (crossing..=horizon).find(|&n| curve.eval(n) < tau - 0.01).unwrap_or(horizon);
    let n_cycles = (crossing + 5).max(below);

    let noise = Normal::new(0.0, spec.noise_sd).expect("noise_sd validated");
    let soh: Vec<f64> = (1..=n_cycles)
        .map(|n| (curve.eval(n) + noise.sample(&mut rng)).clamp(0.05, 1.45))
        .collect();

    let cap0 = cond.condition.nominal_capacity;
    let mut t = 0.0;
    let mut cycles = Vec::with_capacity(n_cycles);
    for (i, &y) in soh.iter().enumerate() {
        if curve.regen.iter().any(|r| r.0 == i + 1) {
            t += REGEN_REST_SECONDS;
        }
        let cycle = synth_cycle(cond, cap0, y, 1.0 - curve.trend(i + 1), spec.samples_per_segment, t);
        t = cycle.timestamps[cycle.len() - 1] + REST_SECONDS;
        cycles.push(cycle);
    }
    let id = battery_id(cond.index, battery);
    let record = BatteryRecord {
        battery_id: id.clone(),
        condition: cond.condition.clone(),
        dod: 1.0,
        soc_interval: [0.0, 1.0],
        cycles,
        cap0,
        tau,
        rpt_cycles: Vec::new(),
    };
    let truth = SynthTruth {
        battery_id: id,
        condition_key: cond.condition.key(),
        family: cond.family,
        life,
        curve,
        noise_sd: spec.noise_sd,
        soh,
    };
    (record, truth)
}

/// One CC charge then CC discharge delivering `soh * cap0` Ah.
fn synth_cycle(cond: &SynthCondition, cap0: f64, soh: f64, faded: f64, n: usize, t0: f64) -> CycleRecord {
    let r = cond.r0 * (1.0 + 4.0 * faded.max(0.0));
    let q_dis = soh * cap0;
    let q_ch = q_dis / COULOMBIC_EFFICIENCY;
    let mut out = CycleRecord {
        timestamps: Vec::with_capacity(2 * n),
        voltage: Vec::with_capacity(2 * n),
        current: Vec::with_capacity(2 * n),
        energy: Some(Vec::with_capacity(2 * n)),
        charge_span: Span::new(0, n),
        discharge_span: Span::new(n, 2 * n),
    };
    let mut t = t0;
    for (q, rate, sign) in [(q_ch, cond.charge_c_rate, 1.0), (q_dis, cond.discharge_c_rate, -1.0)] {
        let current = sign * rate * cap0;
        let dt = q / current.abs() * 3600.0 / (n - 1) as f64;
        for k in 0..n {
            let frac = k as f64 / (n - 1) as f64;
            let soc = if sign > 0.0 { frac } else { 1.0 - frac };
            let v = cond.ocv.eval(soc) + current * r;
            let e = if k == 0 { 0.0 } else { v * current * dt / 3600.0 };
            out.timestamps.push(t + k as f64 * dt);
            out.voltage.push(v);
            out.current.push(current);
            out.energy.as_mut().unwrap().push(e);
        }
        t += (n - 1) as f64 * dt + 600.0;
    }
    out
}

/// Every record of a spec, condition-major, with its truth.
pub fn generate_all(spec: &SynthSpec, exec: Exec) -> Vec<(BatteryRecord, SynthTruth)> {
    let jobs: Vec<(SynthCondition, usize)> = (0..spec.n_conditions)
        .flat_map(|c| {
            let cond = generate_condition_profile(spec, c);
            (0..spec.batteries_per_condition).map(move |b| (cond.clone(), b))
        })
        .collect();
    map_collect(exec, &jobs, |(cond, b)| generate_battery(spec, cond, *b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub conditions: Vec<SynthCondition>,
    pub batteries: Vec<SynthTruth>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("ground truth serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
    }
}
