//! Metrics on the original SOH scale, condition-exclusive splits, ablation
//! and early-cycle experiments, and interpretability exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::embedder::{prompt_embedding_file, EmbeddingFile, Vocab};
use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::model::{EmbedderSource, Model, Prepared};
use crate::parallel::{map_collect, Exec};
use crate::preprocess::{denormalize_soh, normalize_soh, ProcessedSample, Target, CH_CAPACITY, CH_SOC, CH_VOLTAGE};
use crate::train::{fit, FitOptions, FitReport};

/// Scores of one forecast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// percent
    pub mape: f64,
    pub mae: f64,
    pub observed: usize,
}

/// MAE and MAPE (%) over masked-in cycles after denormalizing both series.
pub fn compute_metrics(y_hat_norm: &[f64], target: &Target) -> Result<Metrics> {
    if y_hat_norm.len() != target.t_max() {
        return Err(Error::DimensionMismatch { expected: target.t_max(), found: y_hat_norm.len() });
    }
    let (mut ae, mut ape, mut n) = (0.0, 0.0, 0usize);
    for ((p, t), m) in y_hat_norm.iter().zip(&target.y_norm).zip(&target.mask) {
        if !m {
            continue;
        }
        let y = denormalize_soh(*t, target.tau);
        let e = (y - denormalize_soh(*p, target.tau)).abs();
        ae += e;
        ape += e / y.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::NothingToScore);
    }
    Ok(Metrics { mape: 100.0 * ape / n as f64, mae: ae / n as f64, observed: n })
}

/// Last observed SOH repeated over the horizon, normalized.
pub fn persistence_forecast(sample: &ProcessedSample) -> Vec<f64> {
    let s = sample.input.s;
    let last = sample.trajectory.at(s).unwrap_or(sample.tau());
    vec![normalize_soh(last, sample.tau()); sample.target.t_max()]
}

/// Model metrics of prepared samples, in order.
pub fn score_prepared(model: &Model, preps: &[Prepared], exec: Exec) -> Result<Vec<Metrics>> {
    map_collect(exec, preps, |p| {
        let t = p.target.as_ref().ok_or(Error::NothingToScore)?;
        let pred = model.predict(p)?;
        compute_metrics(&pred.y_norm, &t.target)
    })
    .into_iter()
    .collect()
}

/// Macro means `(MAPE, MAE)`.
pub fn macro_mean(scores: &[Metrics]) -> (f64, f64) {
    let n = scores.len() as f64;
    (scores.iter().map(|m| m.mape).sum::<f64>() / n, scores.iter().map(|m| m.mae).sum::<f64>() / n)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Random,
    LeaveOneOut { fold: usize },
}

/// Assignment of whole aging conditions to splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub assignment: BTreeMap<String, Part>,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub mode: SplitMode,
}

fn shuffled_keys<'a>(keys: impl IntoIterator<Item = &'a str>, seed: u64) -> Vec<String> {
    let set: BTreeSet<&str> = keys.into_iter().collect();
    let mut v: Vec<String> = set.into_iter().map(String::from).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Largest-remainder apportionment of `n` items; every part with a
/// positive ratio gets at least one item.
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let quota: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quota) {
        *s = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (quota[b] - quota[b].floor()).total_cmp(&(quota[a] - quota[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).expect("three parts");
            if sizes[donor] > 1 {
                sizes[donor] -= 1;
                sizes[i] += 1;
            }
        }
    }
    sizes
}

/// Shuffle condition keys by `seed` and cut them by cumulative ratio
/// (train, val, test).
pub fn split_by_condition<'a>(keys: impl IntoIterator<Item = &'a str>, ratios: [f64; 3], seed: u64) -> Result<SplitPlan> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || !(ratios.iter().sum::<f64>() > 0.0) {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let keys = shuffled_keys(keys, seed);
    let needed = ratios.iter().filter(|r| **r > 0.0).count();
    if keys.len() < needed.max(3) {
        return Err(Error::InsufficientConditions { needed: needed.max(3), found: keys.len() });
    }
    let [n_train, n_val, _] = apportion(keys.len(), ratios);
    let assignment = keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let part = if i < n_train {
                Part::Train
            } else if i < n_train + n_val {
                Part::Val
            } else {
                Part::Test
            };
            (k, part)
        })
        .collect();
    Ok(SplitPlan { assignment, seed, ratios, mode: SplitMode::Random })
}

/// Hold out one condition (fold index into the shuffled keys) for test and
/// `ceil(25%)` of the rest for validation.
pub fn leave_one_out<'a>(keys: impl IntoIterator<Item = &'a str>, fold: usize, seed: u64) -> Result<SplitPlan> {
    let mut keys = shuffled_keys(keys, seed);
    let n = keys.len();
    if n < 3 {
        return Err(Error::InsufficientConditions { needed: 3, found: n });
    }
    let test = keys.remove(fold % n);
    let n_val = (keys.len() as f64 * 0.25).ceil() as usize;
    let mut assignment: BTreeMap<String, Part> = keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| (k, if i < n_val { Part::Val } else { Part::Train }))
        .collect();
    assignment.insert(test, Part::Test);
    let r = n_val as f64 / (n - 1) as f64;
    Ok(SplitPlan { assignment, seed, ratios: [1.0 - r, r, 0.0], mode: SplitMode::LeaveOneOut { fold: fold % n } })
}

impl SplitPlan {
    pub fn part(&self, key: &str) -> Option<Part> {
        self.assignment.get(key).copied()
    }

    pub fn keys(&self, part: Part) -> Vec<&str> {
        self.assignment.iter().filter(|(_, p)| **p == part).map(|(k, _)| k.as_str()).collect()
    }

    /// `(train, val, test)` condition counts.
    pub fn sizes(&self) -> [usize; 3] {
        [Part::Train, Part::Val, Part::Test].map(|p| self.keys(p).len())
    }

    /// Route samples by condition key; a key outside the plan is an error.
    pub fn apply(&self, samples: Vec<ProcessedSample>) -> Result<DatasetSplit> {
        let mut out = DatasetSplit::default();
        for s in samples {
            let key = s.condition.key();
            match self.part(&key) {
                Some(Part::Train) => out.train.push(s),
                Some(Part::Val) => out.val.push(s),
                Some(Part::Test) => out.test.push(s),
                None => {
                    return Err(Error::Integrity(format!("{} has condition {key:?} outside the split plan", s.battery_id)))
                }
            }
        }
        out.check_exclusivity()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ProcessedSample>,
    pub val: Vec<ProcessedSample>,
    pub test: Vec<ProcessedSample>,
}

impl DatasetSplit {
    /// No condition key may appear in two splits.
    pub fn check_exclusivity(&self) -> Result<()> {
        let keys = |v: &[ProcessedSample]| v.iter().map(|s| s.condition.key()).collect::<BTreeSet<_>>();
        let (tr, va, te) = (keys(&self.train), keys(&self.val), keys(&self.test));
        for (a, b, what) in [(&te, &tr, "test/train"), (&te, &va, "test/val"), (&va, &tr, "val/train")] {
            if let Some(k) = a.intersection(b).next() {
                return Err(Error::Integrity(format!("condition {k:?} appears in {what}")));
            }
        }
        Ok(())
    }

    pub fn conditions(&self) -> Vec<&crate::record::AgingCondition> {
        self.train.iter().chain(&self.val).chain(&self.test).map(|s| &s.condition).collect()
    }
}

/// Keep `ceil(fraction·n)` training batteries chosen uniformly by `seed`,
/// in their original order. Validation and test are untouched.
pub fn subsample_training(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction={fraction} must be in (0, 1]")));
    }
    let n = split.train.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    Ok(DatasetSplit {
        train: chosen.into_iter().map(|i| split.train[i].clone()).collect(),
        val: split.val.clone(),
        test: split.test.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub socview: bool,
    pub mdpm: bool,
    pub acdecoder: bool,
    pub acattention: bool,
    pub acquery: bool,
    pub llm_embedder: bool,
}

impl From<&ModelConfig> for Flags {
    fn from(c: &ModelConfig) -> Self {
        Flags {
            socview: c.socview,
            mdpm: c.mdpm,
            acdecoder: c.acdecoder,
            acattention: c.acattention,
            acquery: c.acquery,
            llm_embedder: c.llm_embedder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryScore {
    pub battery_id: String,
    pub condition_key: String,
    pub mape: f64,
    pub mae: f64,
    pub persistence_mape: f64,
    pub persistence_mae: f64,
    pub observed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub s_cycles: usize,
    pub config_hash: String,
    pub flags: Flags,
    pub batteries: Vec<BatteryScore>,
    pub mape_mean: f64,
    pub mape_sd: f64,
    pub mae_mean: f64,
    pub mae_sd: f64,
    pub persistence_mape_mean: f64,
    pub persistence_mae_mean: f64,
}

impl MetricReport {
    fn from_scores(label: &str, s_cycles: usize, config: &ModelConfig, batteries: Vec<BatteryScore>) -> Result<Self> {
        if batteries.is_empty() {
            return Err(Error::NothingToScore);
        }
        let col = |f: fn(&BatteryScore) -> f64| batteries.iter().map(f).collect::<Vec<_>>();
        let (mape_mean, mape_sd) = mean_sd(&col(|b| b.mape));
        let (mae_mean, mae_sd) = mean_sd(&col(|b| b.mae));
        let (persistence_mape_mean, _) = mean_sd(&col(|b| b.persistence_mape));
        let (persistence_mae_mean, _) = mean_sd(&col(|b| b.persistence_mae));
        Ok(MetricReport {
            label: label.into(),
            s_cycles,
            config_hash: config.hash(),
            flags: config.into(),
            batteries,
            mape_mean,
            mape_sd,
            mae_mean,
            mae_sd,
            persistence_mape_mean,
            persistence_mae_mean,
        })
    }

    /// Relative MAPE improvement over persistence, `1 − model/persistence`.
    pub fn gain_over_persistence(&self) -> f64 {
        1.0 - self.mape_mean / self.persistence_mape_mean
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("battery_id,condition_key,mape,mae,persistence_mape,persistence_mae,observed\n");
        for b in &self.batteries {
            writeln!(
                s,
                "{},{:?},{},{},{},{},{}",
                b.battery_id, b.condition_key, b.mape, b.mae, b.persistence_mape, b.persistence_mae, b.observed
            )
            .expect("string write");
        }
        s
    }
}

/// Mean and standard deviation of report means across splits or folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mape_mean: f64,
    pub mape_sd: f64,
    pub mae_mean: f64,
    pub mae_sd: f64,
}

pub fn aggregate(reports: &[MetricReport]) -> Aggregate {
    let (mape_mean, mape_sd) = mean_sd(&reports.iter().map(|r| r.mape_mean).collect::<Vec<_>>());
    let (mae_mean, mae_sd) = mean_sd(&reports.iter().map(|r| r.mae_mean).collect::<Vec<_>>());
    Aggregate { runs: reports.len(), mape_mean, mape_sd, mae_mean, mae_sd }
}

/// Score every sample with the model and with the persistence baseline.
pub fn evaluate(model: &Model, samples: &[ProcessedSample], label: &str, exec: Exec) -> Result<MetricReport> {
    let scores = map_collect(exec, samples, |s| -> Result<BatteryScore> {
        let prep = model.prepare(s)?;
        let m = compute_metrics(&model.predict(&prep)?.y_norm, &s.target)?;
        let b = compute_metrics(&persistence_forecast(s), &s.target)?;
        Ok(BatteryScore {
            battery_id: s.battery_id.clone(),
            condition_key: s.condition.key(),
            mape: m.mape,
            mae: m.mae,
            persistence_mape: b.mape,
            persistence_mae: b.mae,
            observed: m.observed,
        })
    });
    let batteries = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let s_cycles = samples.iter().map(|s| s.input.s).max().unwrap_or(0);
    MetricReport::from_scores(label, s_cycles, &model.config, batteries)
}

/// Embedder source for `config`: factor vocabularies from the training
/// split, or the external file. Without a file the built-in prompt
/// embedding of every condition in the split is used.
pub fn embedder_source(config: &ModelConfig, split: &DatasetSplit, embeddings: Option<&EmbeddingFile>) -> EmbedderSource {
    if config.llm_embedder {
        EmbedderSource::External(match embeddings {
            Some(f) => f.clone(),
            None => prompt_embedding_file(split.conditions(), config.d_enc),
        })
    } else {
        EmbedderSource::Lookup(Vocab::build(split.train.iter().map(|s| &s.condition)))
    }
}

/// A trained model with its fit and test reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub init_checksum: String,
    pub checksum: String,
    pub fit: FitReport,
    pub report: MetricReport,
}

/// Fit on train/val and evaluate on test. Exclusivity is checked first.
pub fn train_and_evaluate(
    config: &ModelConfig,
    split: &DatasetSplit,
    embeddings: Option<&EmbeddingFile>,
    label: &str,
    opts: &FitOptions,
) -> Result<RunOutcome> {
    split.check_exclusivity()?;
    if split.test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let model = Model::new(config.clone(), embedder_source(config, split, embeddings))?;
    let init_checksum = model.params.checksum();
    let (model, fit) = fit(model, &split.train, &split.val, opts)?;
    let report = evaluate(&model, &split.test, label, opts.exec)?;
    let checksum = model.params.checksum();
    Ok(RunOutcome { model, init_checksum, checksum, fit, report })
}

/// Train and score one ablation variant of `base`.
pub fn run_ablation(
    variant: Variant,
    base: &ModelConfig,
    split: &DatasetSplit,
    embeddings: Option<&EmbeddingFile>,
    opts: &FitOptions,
) -> Result<RunOutcome> {
    train_and_evaluate(&base.with_variant(variant), split, embeddings, variant.name(), opts)
}

/// Re-score `samples` with inputs rebuilt from the first `S` cycles for each
/// requested `S`. Batteries whose end of life falls within `S` cycles are
/// left out of that report.
pub fn sweep_early_cycles(model: &Model, samples: &[ProcessedSample], s_values: &[usize], exec: Exec) -> Result<Vec<MetricReport>> {
    let s_max = model.config.s_max;
    s_values
        .iter()
        .map(|&s| {
            if s == 0 || s > s_max {
                return Err(Error::Config(format!("S={s} must be in 1..={s_max}")));
            }
            let mut rebuilt = Vec::new();
            for x in samples {
                match x.with_early_cycles(s) {
                    Ok(r) => rebuilt.push(r),
                    Err(Error::NothingToPredict { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            let mut r = evaluate(model, &rebuilt, &format!("S={s}"), exec)?;
            r.s_cycles = s;
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dva {
    pub soc: Vec<f64>,
    pub dv_dq: Vec<f64>,
}

/// `dV/dQ` by central differences (one-sided at the ends), smoothed by a
/// centered 5-point moving average that shrinks at the edges. Capacity must
/// be strictly monotone.
pub fn compute_dva(voltage: &[f64], capacity: &[f64]) -> Result<Dva> {
    let n = capacity.len();
    if voltage.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: voltage.len() });
    }
    if n < 2 {
        return Err(Error::InvalidSegment("need at least two points".into()));
    }
    let inc = capacity.windows(2).all(|w| w[1] > w[0]);
    let dec = capacity.windows(2).all(|w| w[1] < w[0]);
    if !inc && !dec {
        return Err(Error::InvalidSegment("capacity is not strictly monotone".into()));
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (voltage[b] - voltage[a]) / (capacity[b] - capacity[a])
        })
        .collect();
    let dv_dq = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(2), (i + 2).min(n - 1));
            raw[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    let (q0, q1) = (capacity[0], capacity[n - 1]);
    let soc = capacity.iter().map(|q| (q - q0) / (q1 - q0)).collect();
    Ok(Dva { soc, dv_dq })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCurve {
    pub slot: usize,
    pub alpha: f64,
    /// decoded curve on the SOH scale, length `T_max`
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocToken {
    pub token: usize,
    pub weight: f64,
    pub soc_range: [f64; 2],
    /// mean smoothed `dV/dQ` inside `soc_range`
    pub dva_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    /// final-layer cross-attention averaged over heads and queries
    pub token_weights: Vec<f64>,
    pub n_temporal: usize,
    pub temporal_mass: f64,
    pub soc_mass: f64,
    /// cumulative mass of the tokens sorted by weight, descending
    pub cumulative: Vec<f64>,
    pub top_soc_tokens: Vec<SocToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub battery_id: String,
    pub condition_key: String,
    pub s_cycles: usize,
    pub t_eol: Option<usize>,
    pub forecast: Vec<f64>,
    pub truth: Vec<f64>,
    pub mask: Vec<bool>,
    pub metrics: Option<Metrics>,
    pub prototypes: Vec<PrototypeCurve>,
    pub beta_mean: Option<f64>,
    pub attention: AttentionSummary,
    /// charge half of the last observed cycle
    pub dva: Option<Dva>,
}

/// Number of top tokens reported, `ceil(25%·m)`.
pub fn top_quarter(m: usize) -> usize {
    (m as f64 * 0.25).ceil() as usize
}

fn mean_attention(maps: &[Mat], n_tokens: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_tokens];
    let rows: usize = maps.iter().map(|m| m.nrows()).sum();
    for m in maps {
        for row in m.rows() {
            for (acc, x) in w.iter_mut().zip(row) {
                *acc += x;
            }
        }
    }
    w.iter_mut().for_each(|x| *x /= rows as f64);
    w
}

/// Forecast, retrieved prototypes, attention split and SOC-token ranking
/// for one battery.
pub fn export_case_study(model: &Model, sample: &ProcessedSample) -> Result<CaseStudy> {
    let cfg = &model.config;
    let tau = sample.tau();
    let prep = model.prepare(sample)?;
    let pred = model.predict(&prep)?;
    let denorm = |v: &[f64]| v.iter().map(|y| denormalize_soh(*y, tau)).collect::<Vec<_>>();
    let prototypes = match &pred.retrieval {
        Some(r) => r
            .indices
            .iter()
            .zip(r.alpha)
            .map(|(&slot, alpha)| PrototypeCurve {
                slot,
                alpha,
                curve: denorm(&model.prototype(slot).expect("memory enabled")),
            })
            .collect(),
        None => Vec::new(),
    };

    let n_tokens = cfg.n_tokens();
    let token_weights = mean_attention(&pred.cross_attention, n_tokens);
    let n_temporal = cfg.s_max;
    let temporal_mass: f64 = token_weights[..n_temporal].iter().sum();
    let soc_mass: f64 = token_weights[n_temporal..].iter().sum();
    let mut sorted = token_weights.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cumulative = sorted
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();

    let s = sample.input.s;
    let last = sample.input.x.index_axis(ndarray::Axis(0), s - 1);
    let half = cfg.seq_len / 2;
    let v: Vec<f64> = (0..half).map(|r| last[[r, CH_VOLTAGE]]).collect();
    let q: Vec<f64> = (0..half).map(|r| last[[r, CH_CAPACITY]]).collect();
    let dva = compute_dva(&v, &q).ok();

    let m = n_tokens - n_temporal;
    let mut ranking: Vec<usize> = (0..m).collect();
    ranking.sort_by(|&a, &b| token_weights[n_temporal + b].total_cmp(&token_weights[n_temporal + a]).then(a.cmp(&b)));
    let top_soc_tokens = ranking
        .into_iter()
        .take(top_quarter(m))
        .map(|t| {
            let socs: Vec<f64> = (t * cfg.patch..(t + 1) * cfg.patch).map(|r| last[[r, CH_SOC]]).collect();
            let lo = socs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = socs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dva_mean = dva.as_ref().and_then(|d| {
                let grid: Vec<f64> = (0..half).map(|r| last[[r, CH_SOC]]).collect();
                let inside: Vec<f64> =
                    grid.iter().zip(&d.dv_dq).filter(|(s, _)| **s >= lo && **s <= hi).map(|(_, x)| *x).collect();
                (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64)
            });
            SocToken { token: t, weight: token_weights[n_temporal + t], soc_range: [lo, hi], dva_mean }
        })
        .collect();

    Ok(CaseStudy {
        battery_id: sample.battery_id.clone(),
        condition_key: sample.condition.key(),
        s_cycles: s,
        t_eol: sample.trajectory.t_eol,
        forecast: denorm(&pred.y_norm),
        truth: denorm(&sample.target.y_norm),
        mask: sample.target.mask.clone(),
        metrics: compute_metrics(&pred.y_norm, &sample.target).ok(),
        prototypes,
        beta_mean: pred.beta.as_ref().map(|b| b.iter().sum::<f64>() / b.len() as f64),
        attention: AttentionSummary { token_weights, n_temporal, temporal_mass, soc_mass, cumulative, top_soc_tokens },
        dva,
    })
}

impl CaseStudy {
    /// `cycle,forecast,truth,mask,proto_<slot>...`
    pub fn forecast_csv(&self) -> String {
        let mut s = String::from("cycle,forecast,truth,mask");
        for p in &self.prototypes {
            write!(s, ",proto_{}", p.slot).expect("string write");
        }
        s.push('\n');
        for j in 0..self.forecast.len() {
            write!(s, "{},{},{},{}", j + 1, self.forecast[j], self.truth[j], self.mask[j] as u8).expect("string write");
            for p in &self.prototypes {
                write!(s, ",{}", p.curve[j]).expect("string write");
            }
            s.push('\n');
        }
        s
    }

    /// `token,view,weight`
    pub fn attention_csv(&self) -> String {
        let mut s = String::from("token,view,weight\n");
        for (i, w) in self.attention.token_weights.iter().enumerate() {
            let (view, idx) = if i < self.attention.n_temporal { ("temporal", i) } else { ("soc", i - self.attention.n_temporal) };
            writeln!(s, "{idx},{view},{w}").expect("string write");
        }
        s
    }
}
