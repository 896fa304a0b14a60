use std::ops::ControlFlow;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use icestack::covsync::{sync_covariates, GriddedField};
use icestack::datasyn::{generate, SynthConfig};
use icestack::model::{FeatureSet, GraphTransformer, InputSpec, ModelConfig, Standardizer};
use icestack::objective::LossConfig;
use icestack::optim::{fit, Objective, TrainConfig};
use icestack::pipeline::completion_example;
use icestack::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn training_epoch(c: &mut Criterion) {
    let cfg = SynthConfig {
        n_nodes: 64,
        n_layers: 10,
        n_samples: 16,
        ..Default::default()
    };
    let samples: Vec<_> = generate(&cfg, Execution::Parallel)
        .unwrap()
        .into_iter()
        .map(|s| s.observed)
        .collect();
    let spec = InputSpec::Completion {
        features: FeatureSet::Physical,
    };
    let refs: Vec<_> = samples.iter().collect();
    let stats = Standardizer::fit(&spec, &refs).unwrap();
    let ex: Vec<_> = samples
        .iter()
        .map(|s| completion_example(&spec, &stats, s).unwrap())
        .collect();
    let model = GraphTransformer::new(ModelConfig {
        d_s: 16,
        d_t: 16,
        heads: 4,
        encoder_layers: 2,
        ..Default::default()
    })
    .unwrap();
    let train = TrainConfig {
        total_epochs: 2,
        warmup_epochs: 1,
        ..Default::default()
    };
    let mut group = c.benchmark_group("training_epoch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                fit(
                    &model,
                    model.init_params(0),
                    &ex,
                    &[],
                    Objective::masked_huber(&LossConfig::default()),
                    &train,
                    exec,
                    &mut |_, _| Ok(ControlFlow::Break(())),
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn covariate_sync(c: &mut Criterion) {
    let grid: Vec<[f64; 2]> = (0..30)
        .flat_map(|i| (0..30).map(move |j| [i as f64 * 0.1, j as f64 * 0.1]))
        .collect();
    let fields: Vec<GriddedField> = (0..5)
        .map(|f| {
            let values = grid
                .iter()
                .map(|p| (p[0] * (f + 1) as f64).sin() + p[1])
                .collect();
            GriddedField::new(format!("f{f}"), grid.clone(), values).unwrap()
        })
        .collect();
    let nodes: Vec<(f64, f64)> = (0..2000)
        .map(|i| (0.1 + 2.7 * (i as f64 / 2000.0), 1.4))
        .collect();
    let mut group = c.benchmark_group("covariate_sync");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| sync_covariates(&fields, &nodes, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, training_epoch, covariate_sync);
criterion_main!(benches);
