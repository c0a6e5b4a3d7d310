use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::json;
use soh_core::checkpoint::Checkpoint;
use soh_core::embedder::EmbeddingFile;
use soh_core::eval::{
    self, export_case_study, leave_one_out, run_ablation, split_by_condition, subsample_training, sweep_early_cycles,
    train_and_evaluate, DatasetSplit, MetricReport, Part, SplitPlan,
};
use soh_core::parallel::Exec;
use soh_core::preprocess::{
    clipped_soh, preprocess_records, relative_deltas, OnsetMethod, PercentileThresholds, ProcessedSample,
    SmoothingParams,
};
use soh_core::synth::{generate_all, generate_condition_profile, GroundTruth, SynthSpec};
use soh_core::train::FitOptions;
use soh_core::{Error, ModelConfig, Variant};

use crate::data::{file_stem, load_records, load_samples, RECORDS, SAMPLES};
use crate::error::{CliError, Result};
use crate::manifest::{hash_of, Run, RunManifest};
use crate::{AblateArgs, EvaluateArgs, InspectArgs, PartArg, PreprocessArgs, SplitArgs, SplitKind, SynthArgs, TrainArgs};

fn read(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(CliError::Missing { what: "file", path: path.into() });
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn model_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => Ok(ModelConfig::from_toml_str(&read(p)?)?),
        None => Ok(ModelConfig::desk()),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Missing { what: "checkpoint", path: path.into() });
    }
    Ok(Checkpoint::load(path)?)
}

fn compact<T: serde::Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("output serializes")
}

pub fn synth(args: &SynthArgs, exec: Exec) -> Result<RunManifest> {
    let mut spec = match &args.config {
        Some(p) => SynthSpec::from_toml_str(&read(p)?)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let mut run = Run::start("synth", &args.out)?;
    if let Some(p) = &args.config {
        run.input(p);
    }
    run.config(hash_of(&spec), Some(spec.seed));

    let generated = generate_all(&spec, exec);
    for (record, _) in &generated {
        run.write(&format!("{RECORDS}/{}.json", file_stem(&record.battery_id)), &compact(record))?;
    }
    let truth = GroundTruth {
        spec: spec.clone(),
        conditions: (0..spec.n_conditions).map(|c| generate_condition_profile(&spec, c)).collect(),
        batteries: generated.into_iter().map(|(_, t)| t).collect(),
    };
    run.write_json("ground_truth.json", &truth)?;
    run.write("spec.toml", toml::to_string(&spec).expect("spec serializes").as_bytes())?;
    run.finish(json!({ "batteries": truth.batteries.len(), "conditions": spec.n_conditions }))
}

/// Percentile thresholds pooled over the given records, for the percentile
/// onset rule when none are configured.
fn derived_thresholds(records: &[soh_core::record::BatteryRecord], params: &SmoothingParams) -> Option<PercentileThresholds> {
    if params.onset_method != OnsetMethod::Percentile || (params.gamma_plus.is_some() && params.gamma_minus.is_some()) {
        return None;
    }
    let deltas: Vec<f64> =
        records.iter().filter_map(|r| clipped_soh(r, params).ok()).flat_map(|s| relative_deltas(&s)).collect();
    PercentileThresholds::from_deltas(&deltas)
}

pub fn preprocess(args: &PreprocessArgs, exec: Exec) -> Result<RunManifest> {
    let mut cfg = model_config(args.config.as_deref())?;
    if let Some(s) = args.s_cycles {
        cfg.s_cycles = s;
    }
    cfg.validate()?;
    let params: SmoothingParams = match &args.smoothing {
        Some(p) => toml::from_str(&read(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => SmoothingParams::default(),
    };
    params.validate()?;
    let (records, unreadable) = load_records(&args.input)?;
    if records.is_empty() && unreadable.is_empty() {
        return Err(CliError::Missing { what: "battery records", path: args.input.clone() });
    }
    let mut run = Run::start("preprocess", &args.out)?;
    run.input(&args.input);
    run.config(hash_of(&(&cfg, &params)), None);

    let thresholds = derived_thresholds(&records, &params);
    let out = preprocess_records(&records, &cfg, &params, thresholds, exec);
    for s in &out.kept {
        run.write(&format!("{SAMPLES}/{}.json", file_stem(&s.battery_id)), &compact(s))?;
    }
    let failed: Vec<_> = unreadable.iter().chain(&out.failed).collect();
    for (id, err) in &failed {
        eprintln!("warning: {id}: {err}");
    }
    let listing = |v: &[&(String, String)], what: &str| {
        v.iter().map(|(id, r)| json!({ "battery_id": id, what: r })).collect::<Vec<_>>()
    };
    run.write_json(
        "exclusions.json",
        &json!({
            "excluded": listing(&out.excluded.iter().collect::<Vec<_>>(), "reason"),
            "failed": listing(&failed, "error"),
            "thresholds": thresholds,
        }),
    )?;
    run.write("config.toml", cfg.to_toml_string().as_bytes())?;
    if out.kept.is_empty() && out.excluded.is_empty() {
        return Err(CliError::AllFailed);
    }
    run.finish(json!({ "kept": out.kept.len(), "excluded": out.excluded.len(), "failed": failed.len() }))
}

fn plan_split(samples: Vec<ProcessedSample>, args: &SplitArgs) -> Result<(SplitPlan, DatasetSplit)> {
    let keys: Vec<String> = samples.iter().map(|s| s.condition.key()).collect();
    let plan = match args.split {
        SplitKind::Random => {
            let r = [args.ratios[0], args.ratios[1], args.ratios[2]];
            split_by_condition(keys.iter().map(String::as_str), r, args.seed)?
        }
        SplitKind::LeaveOneOut => leave_one_out(keys.iter().map(String::as_str), args.fold, args.seed)?,
    };
    let mut split = plan.apply(samples)?;
    split.check_exclusivity()?;
    if args.fraction < 1.0 {
        split = subsample_training(&split, args.fraction, args.seed)?;
    } else if args.fraction != 1.0 {
        return Err(CliError::Usage(format!("--fraction {} must be in (0, 1]", args.fraction)));
    }
    Ok((plan, split))
}

fn load_embeddings(path: Option<&Path>) -> Result<Option<EmbeddingFile>> {
    path.map(|p| {
        if !p.is_file() {
            return Err(CliError::Missing { what: "embedding file", path: p.into() });
        }
        Ok(EmbeddingFile::load(p)?)
    })
    .transpose()
}

fn write_report(run: &mut Run, dir: &str, report: &MetricReport) -> Result<()> {
    run.write_json(&format!("{dir}report.json"), report)?;
    run.write(&format!("{dir}report.csv"), report.to_csv().as_bytes())?;
    Ok(())
}

pub fn train(args: &TrainArgs, exec: Exec) -> Result<RunManifest> {
    let mut cfg = model_config(args.config.as_deref())?;
    if let Some(v) = args.variant {
        cfg = cfg.with_variant(v);
    }
    let samples = load_samples(&args.data)?;
    let (plan, split) = plan_split(samples, &args.split)?;
    let embeddings = load_embeddings(args.embeddings.as_deref())?;
    let mut run = Run::start("train", &args.out)?;
    run.input(&args.data);
    run.config(cfg.hash(), Some(args.split.seed));

    let opts = FitOptions { exec, log: Some(run.out().join("train_log.jsonl")), max_steps: args.max_steps };
    let label = args.variant.map_or("model", Variant::name);
    let r = train_and_evaluate(&cfg, &split, embeddings.as_ref(), label, &opts)?;
    run.adopt("train_log.jsonl")?;
    run.write("checkpoint.json", &compact(&Checkpoint::new(&r.model, Some(r.fit.clone()), Some(plan.clone()))))?;
    run.write_json("split.json", &plan)?;
    run.write_json("fit.json", &r.fit)?;
    write_report(&mut run, "", &r.report)?;
    run.write("config.toml", cfg.to_toml_string().as_bytes())?;
    run.finish(json!({
        "train": split.train.len(),
        "val": split.val.len(),
        "test": split.test.len(),
        "epochs": r.fit.epochs_run,
        "best_val_mape": r.fit.best_val_mape,
        "test_mape": r.report.mape_mean,
        "test_mae": r.report.mae_mean,
        "persistence_mape": r.report.persistence_mape_mean,
        "checksum": r.checksum,
    }))
}

/// Samples of the requested part of the checkpoint's split. Conditions the
/// split has never seen count as test.
fn select(samples: Vec<ProcessedSample>, plan: Option<&SplitPlan>, part: PartArg) -> Result<Vec<ProcessedSample>> {
    let Some(plan) = plan else { return Ok(samples) };
    let of = |s: &ProcessedSample| plan.part(&s.condition.key()).unwrap_or(Part::Test);
    match part {
        PartArg::Test => Ok(samples.into_iter().filter(|s| of(s) == Part::Test).collect()),
        PartArg::Val => Ok(samples.into_iter().filter(|s| of(s) == Part::Val).collect()),
        PartArg::All => {
            let seen: BTreeSet<String> =
                samples.iter().filter(|s| of(s) != Part::Test).map(|s| s.condition.key()).collect();
            match seen.into_iter().next() {
                Some(k) => Err(Error::Integrity(format!("condition {k:?} was used for training or validation")).into()),
                None => Ok(samples),
            }
        }
    }
}

fn sweep_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("s_cycles,batteries,mape_mean,mape_sd,mae_mean,mae_sd,persistence_mape_mean\n");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.s_cycles,
            r.batteries.len(),
            r.mape_mean,
            r.mape_sd,
            r.mae_mean,
            r.mae_sd,
            r.persistence_mape_mean
        )
        .expect("string write");
    }
    s
}

pub fn evaluate(args: &EvaluateArgs, exec: Exec) -> Result<RunManifest> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model()?;
    let samples = select(load_samples(&args.data)?, ckpt.split.as_ref(), args.part)?;
    if samples.is_empty() {
        return Err(CliError::Usage("no samples in the requested part".into()));
    }
    let mut run = Run::start("evaluate", &args.out)?;
    run.input(&args.checkpoint);
    run.input(&args.data);
    run.config(ckpt.config.hash(), ckpt.split.as_ref().map(|p| p.seed));

    let report = eval::evaluate(&model, &samples, "evaluate", exec)?;
    write_report(&mut run, "", &report)?;
    let mut summary = json!({
        "batteries": report.batteries.len(),
        "mape": report.mape_mean,
        "mae": report.mae_mean,
        "persistence_mape": report.persistence_mape_mean,
    });
    if !args.s_cycles.is_empty() {
        let sweep = sweep_early_cycles(&model, &samples, &args.s_cycles, exec)?;
        run.write_json("sweep.json", &sweep)?;
        run.write("sweep.csv", sweep_csv(&sweep).as_bytes())?;
        summary["sweep"] = sweep.iter().map(|r| json!({ "s": r.s_cycles, "mape": r.mape_mean })).collect();
    }
    run.finish(summary)
}

pub fn ablate(args: &AblateArgs, exec: Exec) -> Result<RunManifest> {
    let base = model_config(args.config.as_deref())?;
    let variants = if args.variant.is_empty() { Variant::ALL.to_vec() } else { args.variant.clone() };
    let samples = load_samples(&args.data)?;
    let (plan, split) = plan_split(samples, &args.split)?;
    let embeddings = load_embeddings(args.embeddings.as_deref())?;
    let mut run = Run::start("ablate", &args.out)?;
    run.input(&args.data);
    run.config(base.hash(), Some(args.split.seed));
    run.write_json("split.json", &plan)?;

    let mut rows = Vec::new();
    let mut csv = String::from("variant,mape_mean,mape_sd,mae_mean,mae_sd,persistence_mape_mean,epochs,checksum\n");
    for v in variants {
        let dir = format!("{}/", v.name());
        let opts = FitOptions {
            exec,
            log: Some(run.out().join(format!("{dir}train_log.jsonl"))),
            max_steps: args.max_steps,
        };
        std::fs::create_dir_all(run.out().join(&dir)).map_err(|e| Error::io(run.out().join(&dir), e))?;
        let r = run_ablation(v, &base, &split, embeddings.as_ref(), &opts)?;
        run.adopt(&format!("{dir}train_log.jsonl"))?;
        run.write(&format!("{dir}checkpoint.json"), &compact(&Checkpoint::new(&r.model, Some(r.fit.clone()), Some(plan.clone()))))?;
        write_report(&mut run, &dir, &r.report)?;
        let m = &r.report;
        writeln!(
            csv,
            "{v},{},{},{},{},{},{},{}",
            m.mape_mean, m.mape_sd, m.mae_mean, m.mae_sd, m.persistence_mape_mean, r.fit.epochs_run, r.checksum
        )
        .expect("string write");
        rows.push(json!({
            "variant": v.name(),
            "mape_mean": m.mape_mean,
            "mape_sd": m.mape_sd,
            "mae_mean": m.mae_mean,
            "mae_sd": m.mae_sd,
            "persistence_mape_mean": m.persistence_mape_mean,
            "epochs": r.fit.epochs_run,
            "checksum": r.checksum,
        }));
    }
    run.write_json("ablation.json", &rows)?;
    run.write("ablation.csv", csv.as_bytes())?;
    run.finish(json!({ "variants": rows.len() }))
}

pub fn inspect(args: &InspectArgs) -> Result<RunManifest> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model()?;
    let sample = load_samples(&args.data)?
        .into_iter()
        .find(|s| s.battery_id == args.battery)
        .ok_or_else(|| CliError::Missing { what: "battery", path: args.battery.clone().into() })?;
    let mut run = Run::start("inspect", &args.out)?;
    run.input(&args.checkpoint);
    run.input(&args.data);
    run.config(ckpt.config.hash(), None);

    let case = export_case_study(&model, &sample)?;
    let stem = file_stem(&sample.battery_id);
    run.write_json(&format!("{stem}.case_study.json"), &case)?;
    run.write(&format!("{stem}.forecast.csv"), case.forecast_csv().as_bytes())?;
    run.write(&format!("{stem}.attention.csv"), case.attention_csv().as_bytes())?;
    let mut tokens = String::from("token,weight,soc_lo,soc_hi,dva_mean\n");
    for t in &case.attention.top_soc_tokens {
        let dva = t.dva_mean.map(|v| v.to_string()).unwrap_or_default();
        writeln!(tokens, "{},{},{},{},{dva}", t.token, t.weight, t.soc_range[0], t.soc_range[1]).expect("string write");
    }
    run.write(&format!("{stem}.soc_tokens.csv"), tokens.as_bytes())?;
    if let Some(d) = &case.dva {
        let mut s = String::from("soc,dv_dq\n");
        for (x, y) in d.soc.iter().zip(&d.dv_dq) {
            writeln!(s, "{x},{y}").expect("string write");
        }
        run.write(&format!("{stem}.dva.csv"), s.as_bytes())?;
    }
    run.finish(json!({
        "battery_id": case.battery_id,
        "prototypes": case.prototypes.iter().map(|p| json!({ "slot": p.slot, "alpha": p.alpha })).collect::<Vec<_>>(),
        "temporal_mass": case.attention.temporal_mass,
        "soc_mass": case.attention.soc_mass,
        "mape": case.metrics.map(|m| m.mape),
    }))
}
