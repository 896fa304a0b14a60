use icestack::datasyn::{generate, MissingRegimes, SynthConfig};
use icestack::downstream::{deep_rmse, predict_deep, pretrain_then_finetune, DownstreamConfig};
use icestack::model::{Checkpoint, InputSpec, ModelConfig, Standardizer};
use icestack::optim::TrainConfig;
use icestack::pipeline::{train_completion, CompletionConfig};
use icestack::{Execution, LayerStackSample};

fn tiny_model(f_in: usize) -> ModelConfig {
    ModelConfig {
        f_in,
        d_s: 8,
        d_t: 8,
        heads: 2,
        encoder_layers: 1,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

fn pools() -> (Vec<LayerStackSample>, Vec<LayerStackSample>) {
    let base = SynthConfig {
        n_nodes: 32,
        n_layers: 6,
        n_samples: 12,
        seed: 31,
        ..Default::default()
    };
    let incomplete = generate(&base, Execution::Parallel)
        .unwrap()
        .into_iter()
        .map(|s| s.observed)
        .collect();
    let full = SynthConfig {
        n_samples: 6,
        seed: 32,
        missing: MissingRegimes::none(),
        ..base
    };
    let complete = generate(&full, Execution::Parallel)
        .unwrap()
        .into_iter()
        .map(|s| s.truth)
        .collect();
    (incomplete, complete)
}

fn predictor(samples: &[LayerStackSample], k: usize, seed: u64) -> Checkpoint {
    let spec = InputSpec::DeepLayer { shallow_count: k };
    let refs: Vec<&LayerStackSample> = samples.iter().collect();
    let model = icestack::model::GraphTransformer::new(tiny_model(8)).unwrap();
    Checkpoint {
        model: tiny_model(8),
        input: spec,
        standardizer: Standardizer::fit(&spec, &refs).unwrap(),
        seed,
        epoch: 0,
        params: model.init_params(seed),
    }
}

#[test]
fn predict_deep_examples() {
    let (incomplete, complete) = pools();
    let mut ck = predictor(&complete, 2, 4);
    let a = predict_deep(&ck, &complete[0]).unwrap();
    assert_eq!(a.len(), 32 * 4);
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, predict_deep(&ck, &complete[0]).unwrap());

    ck.params = ck.params.zeros_like();
    ck.params.set_output_bias(6.5);
    assert!(predict_deep(&ck, &complete[0])
        .unwrap()
        .iter()
        .all(|&v| v == 6.5));
    assert!((deep_rmse(&ck, &complete[..1], Execution::Sequential).unwrap() > 0.0));

    // a sample with a shallow gap is rejected
    let gappy = incomplete
        .iter()
        .find(|s| (0..32).any(|n| s.thickness[s.idx(n, 0)].is_none()));
    if let Some(s) = gappy {
        assert!(matches!(
            predict_deep(&ck, s),
            Err(icestack::Error::Input(_))
        ));
    }
    let mut holed = complete[0].thickness.clone();
    holed[1] = None;
    let holed = complete[0].with_thickness(holed).unwrap();
    assert!(matches!(
        predict_deep(&ck, &holed),
        Err(icestack::Error::Input(_))
    ));
}

#[test]
fn workflow_reports_both_arms() {
    let (incomplete, complete) = pools();
    let ccfg = CompletionConfig {
        model: tiny_model(7),
        train: TrainConfig {
            total_epochs: 4,
            warmup_epochs: 1,
            base_lr: 3e-3,
            ..Default::default()
        },
        val_fraction: 0.0,
        ..Default::default()
    };
    let completion = train_completion(&incomplete, &ccfg, Execution::Parallel, &mut |_| Ok(()))
        .unwrap()
        .checkpoint;
    let train = TrainConfig {
        total_epochs: 6,
        warmup_epochs: 1,
        base_lr: 3e-3,
        batch_size: 4,
        seed: 5,
        ..Default::default()
    };
    let cfg = DownstreamConfig {
        shallow_count: 2,
        model: tiny_model(8),
        pretrain: train.clone(),
        finetune: TrainConfig {
            base_lr: 2e-3,
            ..train
        },
        checkpoint_epoch: 3,
        test_fraction: 0.34,
    };
    let out = pretrain_then_finetune(
        &incomplete,
        &complete,
        &completion,
        &cfg,
        Execution::Parallel,
    )
    .unwrap();
    let r = &out.report;
    assert_eq!(out.pretrain_log.len(), 3);
    assert_eq!(out.finetune_log.len(), 6);
    assert_eq!(out.scratch_log.len(), 6);
    assert!(r.pretrain_finetune_rmse.is_finite() && r.scratch_rmse.is_finite());
    assert!((r.rmse_ratio - r.pretrain_finetune_rmse / r.scratch_rmse).abs() < 1e-15);
    assert_eq!((r.finetune_samples, r.test_samples), (4, 2));
    let json = serde_json::to_value(r).unwrap();
    for key in [
        "pretrain_finetune_rmse",
        "scratch_rmse",
        "improvement_pct",
        "seeds",
        "configs",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }

    let again = pretrain_then_finetune(
        &incomplete,
        &complete,
        &completion,
        &cfg,
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(again.report, out.report);

    let bad = DownstreamConfig {
        checkpoint_epoch: 9,
        ..cfg
    };
    assert!(pretrain_then_finetune(
        &incomplete,
        &complete,
        &completion,
        &bad,
        Execution::Parallel
    )
    .is_err());
}
