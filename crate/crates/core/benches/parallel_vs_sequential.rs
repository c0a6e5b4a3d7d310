use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use soh_core::eval::{embedder_source, evaluate, DatasetSplit};
use soh_core::model::Model;
use soh_core::parallel::Exec;
use soh_core::preprocess::{preprocess_records, SmoothingParams};
use soh_core::synth::{generate_all, SynthSpec};
use soh_core::train::batch_gradients;
use soh_core::ModelConfig;

const PATHS: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn fixture(batteries: usize) -> (Model, Vec<soh_core::preprocess::ProcessedSample>) {
    let cfg = ModelConfig::desk();
    let spec = SynthSpec { n_conditions: batteries, batteries_per_condition: 1, ..Default::default() };
    let records: Vec<_> = generate_all(&spec, Exec::Parallel).into_iter().map(|(r, _)| r).collect();
    let kept = preprocess_records(&records, &cfg, &SmoothingParams::default(), None, Exec::Parallel).kept;
    let split = DatasetSplit { train: kept.clone(), ..Default::default() };
    (Model::new(cfg.clone(), embedder_source(&cfg, &split, None)).unwrap(), kept)
}

fn gradients(c: &mut Criterion) {
    let (model, samples) = fixture(16);
    let preps: Vec<_> = samples.iter().map(|s| model.prepare(s).unwrap()).collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for n in [4, 16] {
        let batch: Vec<_> = preps.iter().take(n).collect();
        for (name, exec) in PATHS {
            group.bench_with_input(BenchmarkId::new(name, n), &batch, |b, batch| {
                b.iter(|| black_box(batch_gradients(&model, batch, exec, None).unwrap()))
            });
        }
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let (model, samples) = fixture(16);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in PATHS {
        group.bench_function(name, |b| b.iter(|| black_box(evaluate(&model, &samples, "bench", exec).unwrap())));
    }
    group.finish();
}

fn synthesis(c: &mut Criterion) {
    let spec = SynthSpec::default();
    let mut group = c.benchmark_group("synth_generate_all");
    group.sample_size(10);
    for (name, exec) in PATHS {
        group.bench_function(name, |b| b.iter(|| black_box(generate_all(&spec, exec))));
    }
    group.finish();
}

criterion_group!(benches, gradients, scoring, synthesis);
criterion_main!(benches);
