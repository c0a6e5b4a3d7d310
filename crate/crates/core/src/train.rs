//! Training objective, optimizer loop with early stopping, finite-difference
//! gradient checks and random hyperparameter search.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{Graph, Mat, ParamStore, Var};
use crate::model::{EmbedderSource, Model, Prepared, SampleLoss};
use crate::nn::Dropout;
use crate::optim::Adam;
use crate::parallel::{map_collect, Exec};
use crate::preprocess::ProcessedSample;

pub const FD_STEP: f64 = 1e-5;
/// Gradient norms below this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `Σ mask·(target−pred)² / O`, `None` when nothing is observed.
pub fn masked_mse(pred: &[f64], target: &[f64], mask: &[f64]) -> Option<f64> {
    let observed: f64 = mask.iter().sum();
    if observed == 0.0 {
        return None;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, m)| **m != 0.0)
        .map(|((p, t), m)| m * (t - p) * (t - p))
        .sum();
    Some(s / observed)
}

/// Mean of per-sample masked MSE over samples with observations, and the
/// number of samples skipped.
pub fn batch_masked_mse(preds: &[Vec<f64>], targets: &[Vec<f64>], masks: &[Vec<f64>]) -> Result<(f64, usize)> {
    let per: Vec<Option<f64>> = preds
        .iter()
        .zip(targets)
        .zip(masks)
        .map(|((p, t), m)| masked_mse(p, t, m))
        .collect();
    let used: Vec<f64> = per.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok((used.iter().sum::<f64>() / used.len() as f64, per.len() - used.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    /// absent when the memory is disabled
    pub align: Option<f64>,
    pub recover: Option<f64>,
    pub total: f64,
    /// samples with an empty mask
    pub skipped_samples: usize,
    /// samples left out of the alignment mean for a zero-norm vector
    pub align_skipped: usize,
}

impl LossBreakdown {
    pub fn new(pred: f64, align: Option<f64>, recover: Option<f64>, lambda_align: f64, lambda_recover: f64) -> Self {
        LossBreakdown {
            pred,
            align,
            recover,
            total: total_loss(pred, align, recover, lambda_align, lambda_recover),
            skipped_samples: 0,
            align_skipped: 0,
        }
    }

    /// Component-wise mean of several batches.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = items.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(LossBreakdown {
            pred: items.iter().map(|b| b.pred).sum::<f64>() / n,
            align: avg(&|b| b.align),
            recover: avg(&|b| b.recover),
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
            skipped_samples: items.iter().map(|b| b.skipped_samples).sum(),
            align_skipped: items.iter().map(|b| b.align_skipped).sum(),
        })
    }
}

pub fn total_loss(pred: f64, align: Option<f64>, recover: Option<f64>, lambda_align: f64, lambda_recover: f64) -> f64 {
    pred + align.map_or(0.0, |a| lambda_align * a) + recover.map_or(0.0, |r| lambda_recover * r)
}

/// Dropout stream of one sample in one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

fn dropout(model: &Model, key: Option<NoiseKey>, idx: usize) -> Dropout {
    match key {
        Some(k) if model.config.dropout > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(k.seed);
            rng.set_stream((k.epoch << 44) | ((k.step & 0xf_ffff) << 24) | (idx as u64 & 0xff_ffff));
            Dropout::train(model.config.dropout, rng)
        }
        _ => Dropout::off(),
    }
}

struct Sampled<'p> {
    g: Graph<'p>,
    loss: SampleLoss,
    selection: Option<[usize; 2]>,
}

fn forward_all<'p>(model: &'p Model, batch: &[&'p Prepared], exec: Exec, key: Option<NoiseKey>) -> Result<Vec<Sampled<'p>>> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    map_collect(exec, &idx, |&i| {
        let prep = batch[i];
        let mut drop = dropout(model, key, i);
        let mut g = Graph::new(&model.params);
        let f = model.forward(&mut g, prep, &mut drop)?;
        let loss = model.sample_loss(&mut g, prep, &f, &mut drop);
        let selection = f.retrieval.as_ref().map(|r| r.result.indices);
        Ok(Sampled { g, loss, selection })
    })
    .into_iter()
    .collect()
}

/// Batch means with per-sample seed weights for the backward pass.
fn combine(model: &Model, sampled: &[Sampled]) -> Result<(LossBreakdown, Vec<Vec<(Var, f64)>>)> {
    let c = &model.config;
    let n_pred = sampled.iter().filter(|s| s.loss.pred.is_some()).count();
    if n_pred == 0 {
        return Err(Error::EmptyBatch);
    }
    let n_align = sampled.iter().filter(|s| s.loss.align.is_some()).count();
    let value = |s: &Sampled, v: Option<Var>| v.map(|v| s.g.scalar(v));
    let pred = sampled.iter().filter_map(|s| value(s, s.loss.pred)).sum::<f64>() / n_pred as f64;
    let (align, recover) = if model.memory.is_some() {
        let a = sampled.iter().filter_map(|s| value(s, s.loss.align)).sum::<f64>();
        let r = sampled.iter().filter_map(|s| value(s, s.loss.recover)).sum::<f64>();
        (Some(if n_align > 0 { a / n_align as f64 } else { 0.0 }), Some(r / n_pred as f64))
    } else {
        (None, None)
    };
    let mut out = LossBreakdown::new(pred, align, recover, c.lambda_align, c.lambda_recover);
    out.skipped_samples = sampled.len() - n_pred;
    out.align_skipped = if model.memory.is_some() { n_pred - n_align } else { 0 };
    let seeds = sampled
        .iter()
        .map(|s| {
            let mut v = Vec::new();
            if let Some(p) = s.loss.pred {
                v.push((p, 1.0 / n_pred as f64));
            }
            if let Some(a) = s.loss.align {
                v.push((a, c.lambda_align / n_align as f64));
            }
            if let Some(r) = s.loss.recover {
                v.push((r, c.lambda_recover / n_pred as f64));
            }
            v
        })
        .collect();
    Ok((out, seeds))
}

/// Loss of a batch with dropout off.
pub fn batch_loss(model: &Model, batch: &[&Prepared], exec: Exec) -> Result<LossBreakdown> {
    let sampled = forward_all(model, batch, exec, None)?;
    Ok(combine(model, &sampled)?.0)
}

/// Loss and gradients (store order) of a batch. Per-sample backward passes
/// run in parallel; their gradients are summed in sample order.
pub fn batch_gradients(model: &Model, batch: &[&Prepared], exec: Exec, key: Option<NoiseKey>) -> Result<(LossBreakdown, Vec<Mat>)> {
    let sampled = forward_all(model, batch, exec, key)?;
    let (loss, seeds) = combine(model, &sampled)?;
    let pairs: Vec<(&Sampled, &Vec<(Var, f64)>)> = sampled.iter().zip(&seeds).collect();
    let parts = map_collect(exec, &pairs, |(s, seeds)| s.g.backward(seeds));
    let mut grads = model.params.zeros_like();
    for part in parts {
        for (g, p) in grads.iter_mut().zip(part) {
            *g += &p;
        }
    }
    Ok((loss, grads))
}

fn all_finite(grads: &[Mat]) -> bool {
    grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
}

/// One model, its optimizer state and the step counter.
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub exec: Exec,
    pub steps: usize,
    repair: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, exec: Exec) -> Self {
        let opt = Adam::new(&model.params, model.config.lr);
        let mut repair = ChaCha8Rng::seed_from_u64(model.config.seed);
        repair.set_stream(u64::MAX);
        Trainer { model, opt, exec, steps: 0, repair }
    }

    /// One optimizer step. Parameters are left untouched when the loss or a
    /// gradient is not finite.
    pub fn step(&mut self, batch: &[&Prepared], epoch: usize) -> Result<LossBreakdown> {
        let key = NoiseKey { seed: self.model.config.seed, epoch: epoch as u64, step: self.steps as u64 };
        let (loss, grads) = batch_gradients(&self.model, batch, self.exec, Some(key))?;
        if !loss.total.is_finite() || !all_finite(&grads) {
            return Err(Error::Diverged(format!(
                "non-finite loss or gradient at step {} (epoch {epoch}): total={}",
                self.steps + 1,
                loss.total
            )));
        }
        self.opt.step(&mut self.model.params, &grads);
        if !self.model.params.all_finite() {
            return Err(Error::Diverged(format!("parameters overflowed at step {}", self.steps + 1)));
        }
        if let Some(mem) = &self.model.memory {
            mem.repair_slots(&mut self.model.params, &mut self.repair);
        }
        self.steps += 1;
        Ok(loss)
    }
}

/// Stops after `patience` epochs without strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: None, since_best: 0 }
    }

    /// Record an epoch's validation score; returns whether it improved.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train: LossBreakdown,
    pub val_mape: f64,
    pub val_mae: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxSteps,
    Diverged(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub best_epoch: Option<usize>,
    pub best_val_mape: f64,
    pub epochs_run: usize,
    pub steps: usize,
    pub stop: StopReason,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub exec: Exec,
    /// JSON-lines training log, truncated at start
    pub log: Option<PathBuf>,
    /// stop after this many optimizer steps
    pub max_steps: Option<usize>,
}

/// Epoch order of training indices.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn prepare_all(model: &Model, samples: &[ProcessedSample], exec: Exec) -> Result<Vec<Prepared>> {
    map_collect(exec, samples, |s| model.prepare(s)).into_iter().collect()
}

/// Adam with per-epoch validation MAPE and early stopping. Returns the model
/// holding the best-validation parameters. On divergence the best
/// checkpoint so far is returned, or the last finite parameters when no
/// epoch finished, and the diagnostic is recorded in the report.
pub fn fit(model: Model, train: &[ProcessedSample], val: &[ProcessedSample], opts: &FitOptions) -> Result<(Model, FitReport)> {
    if train.is_empty() {
        return Err(Error::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let cfg = model.config.clone();
    let train_prep = prepare_all(&model, train, opts.exec)?;
    let val_prep = prepare_all(&model, val, opts.exec)?;
    let mut log = match &opts.log {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut trainer = Trainer::new(model, opts.exec);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<ParamStore> = None;
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(train_prep.len(), cfg.seed, epoch);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_prep[i]).collect();
            match trainer.step(&batch, epoch) {
                Ok(l) => losses.push(l),
                Err(Error::EmptyBatch) => continue,
                Err(Error::Diverged(msg)) => {
                    stop = StopReason::Diverged(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            if opts.max_steps.is_some_and(|m| trainer.steps >= m) {
                stop = StopReason::MaxSteps;
                break;
            }
        }
        let Some(train_loss) = LossBreakdown::mean(&losses) else {
            return Err(Error::EmptyBatch);
        };
        let scores = eval::score_prepared(&trainer.model, &val_prep, opts.exec)?;
        let (val_mape, val_mae) = eval::macro_mean(&scores);
        if !val_mape.is_finite() {
            stop = StopReason::Diverged(format!("non-finite validation MAPE at epoch {epoch}"));
            break;
        }
        let improved = stopper.observe(epoch, val_mape);
        if improved {
            best = Some(trainer.model.params.clone());
        }
        let rec = EpochRecord { epoch, steps: trainer.steps, train: train_loss, val_mape, val_mae, improved };
        if let (Some(w), Some(p)) = (log.as_mut(), &opts.log) {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(p, e))?;
        }
        history.push(rec);
        if stop == StopReason::MaxSteps {
            break;
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
    }
    if let (Some(w), Some(p)) = (log.as_mut(), &opts.log) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let mut model = trainer.model;
    if let Some(b) = best {
        model.params = b;
    }
    let report = FitReport {
        best_epoch: stopper.best_epoch,
        best_val_mape: stopper.best,
        epochs_run: history.len(),
        steps: trainer.steps,
        stop,
        history,
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub rel_error: f64,
    pub checked: usize,
    /// elements whose perturbation changed a discrete selection
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central differences of `f` against `analytic`, per parameter tensor.
/// `f` returns `None` to skip a perturbation. Relative error per group is
/// `‖a−n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)`.
pub fn check_gradients<F>(params: &ParamStore, analytic: &[Mat], step: f64, tolerance: f64, exec: Exec, f: F) -> GradCheckReport
where
    F: Fn(&ParamStore) -> Option<f64> + Sync,
{
    let ids: Vec<usize> = (0..params.len()).collect();
    let groups = map_collect(exec, &ids, |&gi| {
        let mut p = params.clone();
        let n = p.values()[gi].len();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        let (mut checked, mut skipped) = (0, 0);
        for k in 0..n {
            let orig = p.values()[gi].as_slice().expect("standard layout")[k];
            let at = |v: f64, p: &mut ParamStore| {
                p.values_mut()[gi].as_slice_mut().expect("standard layout")[k] = v;
                f(p)
            };
            let plus = at(orig + step, &mut p);
            let minus = at(orig - step, &mut p);
            p.values_mut()[gi].as_slice_mut().expect("standard layout")[k] = orig;
            let (Some(lp), Some(lm)) = (plus, minus) else {
                skipped += 1;
                continue;
            };
            let num = (lp - lm) / (2.0 * step);
            let a = analytic[gi].as_slice().expect("standard layout")[k];
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
            checked += 1;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(GRAD_FLOOR);
        GroupError { name: params.names()[gi].clone(), rel_error: rel, checked, skipped }
    });
    let max_rel_error = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    GradCheckReport { groups, max_rel_error, tolerance, passed: max_rel_error < tolerance }
}

/// Finite-difference check of the full training loss on `batch`. Dropout is
/// off. Perturbations that change any sample's top-2 memory selection are
/// skipped.
pub fn gradient_check(model: &Model, batch: &[Prepared], tolerance: f64, exec: Exec) -> Result<GradCheckReport> {
    let refs: Vec<&Prepared> = batch.iter().collect();
    let (_, analytic) = batch_gradients(model, &refs, Exec::Sequential, None)?;
    let base: Vec<Option<[usize; 2]>> =
        forward_all(model, &refs, Exec::Sequential, None)?.iter().map(|s| s.selection).collect();
    Ok(check_gradients(&model.params, &analytic, FD_STEP, tolerance, exec, |p| {
        let mut m = model.clone();
        m.params = p.clone();
        let sampled = forward_all(&m, &refs, Exec::Sequential, None).ok()?;
        if sampled.iter().map(|s| s.selection).ne(base.iter().copied()) {
            return None;
        }
        Some(combine(&m, &sampled).ok()?.0.total)
    }))
}

/// The hyperparameter space searched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    /// inclusive, sampled uniformly
    pub lr: [f64; 2],
    pub batch_size: Vec<usize>,
    pub dropout: [f64; 2],
    pub d: Vec<usize>,
    pub d_ff: Vec<usize>,
    pub d_ffs: Vec<usize>,
    pub intra_layers: Vec<usize>,
    pub decoder_layers: Vec<usize>,
    pub n_queries: Vec<usize>,
    pub n_mem: Vec<usize>,
    pub patch: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: [2e-5, 2e-4],
            batch_size: vec![64, 128],
            dropout: [0.05, 0.5],
            d: vec![64, 128, 256],
            d_ff: vec![32, 64, 128],
            d_ffs: vec![32, 64, 128, 256],
            intra_layers: vec![2, 4],
            decoder_layers: vec![2, 4, 6, 8],
            n_queries: vec![4, 8, 10, 12, 20, 50],
            n_mem: vec![64, 96],
            patch: vec![10, 16, 20, 30],
        }
    }
}

impl SearchSpace {
    /// Draw one configuration; fields outside the space come from `base`.
    /// Heads shrink to the largest divisor of `d` not above `base.heads`.
    pub fn sample<R: Rng>(&self, base: &ModelConfig, rng: &mut R) -> ModelConfig {
        let pick = |v: &Vec<usize>, rng: &mut R, dflt: usize| *v.choose(rng).unwrap_or(&dflt);
        let mut c = base.clone();
        c.lr = rng.random_range(self.lr[0]..=self.lr[1]);
        c.batch_size = pick(&self.batch_size, rng, base.batch_size);
        c.dropout = rng.random_range(self.dropout[0]..=self.dropout[1]);
        c.d = pick(&self.d, rng, base.d);
        c.d_ff = pick(&self.d_ff, rng, base.d_ff);
        c.d_ffs = pick(&self.d_ffs, rng, base.d_ffs);
        c.intra_layers = pick(&self.intra_layers, rng, base.intra_layers);
        c.decoder_layers = pick(&self.decoder_layers, rng, base.decoder_layers);
        c.n_queries = pick(&self.n_queries, rng, base.n_queries);
        c.n_mem = pick(&self.n_mem, rng, base.n_mem);
        c.patch = pick(&self.patch, rng, base.patch).min(base.seq_len);
        c.heads = (1..=base.heads.max(1)).rev().find(|h| c.d % h == 0).unwrap_or(1);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: ModelConfig,
    pub val_mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: usize,
    pub trials: Vec<Trial>,
}

impl SearchResult {
    pub fn best_config(&self) -> &ModelConfig {
        &self.trials[self.best].config
    }
}

/// Sample `budget` configurations and score each with `evaluate` (lower is
/// better). Ties and non-finite scores resolve to the lowest index. Trial
/// `i` trains with seed `base.seed + i`.
pub fn random_search<F>(space: &SearchSpace, base: &ModelConfig, budget: usize, seed: u64, mut evaluate: F) -> Result<SearchResult>
where
    F: FnMut(usize, &ModelConfig) -> Result<f64>,
{
    if budget == 0 {
        return Err(Error::Config("search budget must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials: Vec<Trial> = Vec::with_capacity(budget);
    let mut best = 0;
    for index in 0..budget {
        let mut config = space.sample(base, &mut rng);
        config.seed = base.seed.wrapping_add(index as u64);
        let val_mape = evaluate(index, &config)?;
        let score = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
        if index > 0 && score(val_mape) < score(trials[best].val_mape) {
            best = index;
        }
        trials.push(Trial { index, config, val_mape });
    }
    Ok(SearchResult { best, trials })
}

/// Random search where each trial is a full [`fit`].
pub fn search_fit<S>(
    space: &SearchSpace,
    base: &ModelConfig,
    budget: usize,
    seed: u64,
    train: &[ProcessedSample],
    val: &[ProcessedSample],
    source: S,
    opts: &FitOptions,
) -> Result<SearchResult>
where
    S: Fn(&ModelConfig) -> Result<EmbedderSource>,
{
    random_search(space, base, budget, seed, |_, cfg| {
        let model = Model::new(cfg.clone(), source(cfg)?)?;
        let (_, report) = fit(model, train, val, &FitOptions { log: None, ..opts.clone() })?;
        Ok(report.best_val_mape)
    })
}
