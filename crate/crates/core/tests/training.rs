use std::ops::ControlFlow;

use icestack::datasyn::{generate, SynthConfig};
use icestack::model::{FeatureSet, GraphTransformer, InputSpec, ModelConfig, Standardizer};
use icestack::objective::LossConfig;
use icestack::optim::{fit, lr_at, metrics_csv, Example, Objective, TrainConfig};
use icestack::pipeline::{completion_example, observed_mean};
use icestack::{Error, Execution, LayerStackSample};

fn model() -> GraphTransformer {
    GraphTransformer::new(ModelConfig {
        d_s: 8,
        d_t: 8,
        heads: 2,
        encoder_layers: 1,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn data(n: usize) -> (Vec<LayerStackSample>, Vec<Example>) {
    let cfg = SynthConfig {
        n_nodes: 32,
        n_layers: 5,
        n_samples: n,
        seed: 9,
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
    let ex = samples
        .iter()
        .map(|s| completion_example(&spec, &stats, s).unwrap())
        .collect();
    (samples, ex)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        base_lr: 1e-2,
        total_epochs: epochs,
        warmup_epochs: 2,
        seed: 4,
        ..Default::default()
    }
}

fn no_callback() -> impl FnMut(
    &icestack::optim::EpochRecord,
    &icestack::model::ModelParams,
) -> icestack::Result<ControlFlow<()>> {
    |_, _| Ok(ControlFlow::Continue(()))
}

#[test]
fn single_sample_overfits() {
    let (samples, ex) = data(1);
    let m = model();
    let mut init = m.init_params(1);
    init.set_output_bias(observed_mean(&[&samples[0]]));
    let obj = Objective::masked_huber(&LossConfig::default());
    let out = fit(
        &m,
        init,
        &ex,
        &[],
        obj,
        &cfg(50),
        Execution::Parallel,
        &mut no_callback(),
    )
    .unwrap();
    let (first, last) = (out.log[0].train_loss, out.log[49].train_loss);
    assert!(last <= 0.1 * first, "{first} -> {last}");
}

#[test]
fn same_seed_same_log_in_both_modes() {
    let (_, ex) = data(5);
    let m = model();
    let obj = Objective::masked_huber(&LossConfig::default());
    let run = |exec| {
        let out = fit(
            &m,
            m.init_params(2),
            &ex[..4],
            &ex[4..],
            obj,
            &TrainConfig {
                batch_size: 2,
                ..cfg(4)
            },
            exec,
            &mut no_callback(),
        )
        .unwrap();
        (metrics_csv(&out.log), out.params)
    };
    let (a, pa) = run(Execution::Parallel);
    let (b, pb) = run(Execution::Parallel);
    let (c, pc) = run(Execution::Sequential);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(pa, pb);
    assert_eq!(pa, pc);
    assert_eq!(a.lines().count(), 5);
    assert!(a.lines().nth(1).unwrap().split(',').all(|f| !f.is_empty()));
}

#[test]
fn full_batch_takes_one_step_per_epoch() {
    let (_, ex) = data(3);
    let m = model();
    let obj = Objective::squared();
    for batch_size in [3, 50] {
        let out = fit(
            &m,
            m.init_params(0),
            &ex,
            &[],
            obj,
            &TrainConfig {
                batch_size,
                ..cfg(5)
            },
            Execution::Parallel,
            &mut no_callback(),
        )
        .unwrap();
        assert_eq!(out.steps, 5);
    }
    let out = fit(
        &m,
        m.init_params(0),
        &ex,
        &[],
        obj,
        &TrainConfig {
            batch_size: 2,
            ..cfg(5)
        },
        Execution::Parallel,
        &mut no_callback(),
    )
    .unwrap();
    assert_eq!(out.steps, 10);
}

#[test]
fn logged_lr_follows_schedule() {
    let (_, ex) = data(2);
    let m = model();
    let c = TrainConfig {
        total_epochs: 12,
        warmup_epochs: 4,
        ..cfg(12)
    };
    let out = fit(
        &m,
        m.init_params(0),
        &ex,
        &[],
        Objective::squared(),
        &c,
        Execution::Parallel,
        &mut no_callback(),
    )
    .unwrap();
    for r in &out.log {
        assert_eq!(r.lr, lr_at((r.epoch - 1) as f64, &c).unwrap());
    }
    let lrs: Vec<f64> = out.log.iter().map(|r| r.lr).collect();
    assert!(lrs[..5].windows(2).all(|w| w[0] <= w[1]));
    assert!(lrs[4..].windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn nan_loss_names_epoch_and_batch() {
    let (_, mut ex) = data(4);
    let k = ex[2].mask.iter().position(|&m| m == 1.0).unwrap();
    ex[2].target[k] = f64::NAN;
    let m = model();
    let err = fit(
        &m,
        m.init_params(0),
        &ex,
        &[],
        Objective::squared(),
        &TrainConfig {
            batch_size: 1,
            ..cfg(3)
        },
        Execution::Parallel,
        &mut no_callback(),
    )
    .err()
    .unwrap();
    match err {
        Error::NonFiniteLoss { epoch, .. } => assert_eq!(epoch, 0),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err_text(&ex, &m).contains("epoch 0"));
}

fn err_text(ex: &[Example], m: &GraphTransformer) -> String {
    fit(
        m,
        m.init_params(0),
        ex,
        &[],
        Objective::squared(),
        &cfg(3),
        Execution::Parallel,
        &mut no_callback(),
    )
    .err()
    .unwrap()
    .to_string()
}

#[test]
fn callback_can_stop_early() {
    let (_, ex) = data(2);
    let m = model();
    let out = fit(
        &m,
        m.init_params(0),
        &ex,
        &[],
        Objective::squared(),
        &cfg(10),
        Execution::Parallel,
        &mut |r, _| {
            Ok(if r.epoch == 3 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            })
        },
    )
    .unwrap();
    assert_eq!(out.log.len(), 3);
}
