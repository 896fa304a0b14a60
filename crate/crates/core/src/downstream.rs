//! Deep-layer thickness prediction and the pretrain / fine-tune comparison.
//!
//! The predictor is the completion architecture with an eighth input
//! feature: the layer's own thickness on the shallow layers, zero below.
//! Loss and RMSE cover the deep layers only.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::graph::{LayerStackSample, NODE_FEATURES};
use crate::model::{
    build_input, Checkpoint, GraphTransformer, InputSpec, ModelConfig, ModelParams, Standardizer,
};
use crate::optim::{fit, EpochRecord, Example, Objective, TrainConfig};
use crate::pipeline::{complete_samples, split_indices};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DownstreamConfig {
    /// Number of shallow layers given as input.
    pub shallow_count: usize,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Pretraining epoch whose weights seed the fine-tune.
    pub checkpoint_epoch: usize,
    /// Share of the complete pool kept for scoring.
    pub test_fraction: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            shallow_count: 5,
            model: ModelConfig {
                f_in: NODE_FEATURES + 1,
                ..ModelConfig::default()
            },
            pretrain: TrainConfig {
                total_epochs: 450,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                base_lr: 7e-4,
                total_epochs: 450,
                ..TrainConfig::default()
            },
            checkpoint_epoch: 100,
            test_fraction: 0.2,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.model.f_in != NODE_FEATURES + 1 {
            return Err(Error::Config(format!(
                "predictor takes {} input features, model.f_in is {}",
                NODE_FEATURES + 1,
                self.model.f_in
            )));
        }
        if self.shallow_count == 0 {
            return Err(Error::Config("shallow_count must be at least 1".into()));
        }
        if self.checkpoint_epoch == 0 || self.checkpoint_epoch > self.pretrain.total_epochs {
            return Err(Error::Config(format!(
                "checkpoint_epoch {} outside 1..={}",
                self.checkpoint_epoch, self.pretrain.total_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(Error::Config(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }

    fn spec(&self) -> InputSpec {
        InputSpec::DeepLayer {
            shallow_count: self.shallow_count,
        }
    }
}

fn deep_mask(s: &LayerStackSample, k: usize) -> Vec<f64> {
    (0..s.n_nodes() * s.n_layers())
        .map(|i| if i % s.n_layers() >= k { 1.0 } else { 0.0 })
        .collect()
}

fn check_task(s: &LayerStackSample, k: usize) -> Result<()> {
    if k >= s.n_layers() {
        return Err(Error::Input(format!(
            "sample {} has {} layers, needs more than shallow_count = {k}",
            s.sample_id,
            s.n_layers()
        )));
    }
    Ok(())
}

/// Training example with targets on every deep layer. The sample must be
/// fully observed.
pub fn deep_example(
    spec: &InputSpec,
    stats: &Standardizer,
    s: &LayerStackSample,
) -> Result<Example> {
    let InputSpec::DeepLayer { shallow_count } = *spec else {
        return Err(Error::Config("not a deep-layer input spec".into()));
    };
    check_task(s, shallow_count)?;
    if !s.is_fully_observed() {
        return Err(Error::Input(format!(
            "sample {} has missing entries",
            s.sample_id
        )));
    }
    Ok(Example {
        input: build_input(spec, stats, s)?,
        target: s.thickness_filled(0.0),
        mask: deep_mask(s, shallow_count),
    })
}

/// Deep-layer predictions, node-major `N × (T − K)`. Only the shallow
/// layers of `sample` are read; they must be observed.
pub fn predict_deep(ck: &Checkpoint, sample: &LayerStackSample) -> Result<Vec<f64>> {
    let InputSpec::DeepLayer { shallow_count: k } = ck.input else {
        return Err(Error::Config(
            "checkpoint is not a deep-layer predictor".into(),
        ));
    };
    check_task(sample, k)?;
    let model = ck.architecture()?;
    let input = build_input(&ck.input, &ck.standardizer, sample)?;
    let y = model.predict(&ck.params, &input)?;
    let t = sample.n_layers();
    Ok(y.data()
        .chunks(t)
        .flat_map(|row| row[k..].iter().copied())
        .collect())
}

/// RMSE over every deep-layer entry of `samples` (which hold the truth).
pub fn deep_rmse(ck: &Checkpoint, samples: &[LayerStackSample], exec: Execution) -> Result<f64> {
    let InputSpec::DeepLayer { shallow_count: k } = ck.input else {
        return Err(Error::Config(
            "checkpoint is not a deep-layer predictor".into(),
        ));
    };
    let parts = map_ordered(exec, samples, |_, s| -> Result<(f64, usize)> {
        let pred = predict_deep(ck, s)?;
        let t = s.n_layers();
        let mut sq = 0.0;
        for n in 0..s.n_nodes() {
            for l in k..t {
                let truth = s.thickness[s.idx(n, l)].ok_or_else(|| {
                    Error::Input(format!("sample {} lacks deep truth", s.sample_id))
                })?;
                let r = pred[n * (t - k) + l - k] - truth;
                sq += r * r;
            }
        }
        Ok((sq, s.n_nodes() * (t - k)))
    });
    let (mut sq, mut n) = (0.0, 0usize);
    for p in parts {
        let (a, b) = p?;
        sq += a;
        n += b;
    }
    Ok(if n > 0 { (sq / n as f64).sqrt() } else { 0.0 })
}

fn deep_mean(samples: &[LayerStackSample], k: usize) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for x in samples {
        for n in 0..x.n_nodes() {
            for l in k..x.n_layers() {
                if let Some(v) = x.thickness[x.idx(n, l)] {
                    s += v;
                    c += 1;
                }
            }
        }
    }
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

fn train_arm(
    model: &GraphTransformer,
    init: ModelParams,
    examples: &[Example],
    cfg: &TrainConfig,
    stop_after: Option<usize>,
    exec: Execution,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    let out = fit(
        model,
        init,
        examples,
        &[],
        Objective::squared(),
        cfg,
        exec,
        &mut |rec, _| {
            Ok(match stop_after {
                Some(e) if rec.epoch >= e => ControlFlow::Break(()),
                _ => ControlFlow::Continue(()),
            })
        },
    )?;
    Ok((out.params, out.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSeeds {
    pub pretrain: u64,
    pub finetune: u64,
    pub split: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub pretrain_finetune_rmse: f64,
    pub scratch_rmse: f64,
    /// `100 · (scratch − pretrained) / scratch`.
    pub improvement_pct: f64,
    /// `pretrained / scratch`.
    pub rmse_ratio: f64,
    pub finetune_first_epoch_loss: f64,
    pub scratch_first_epoch_loss: f64,
    pub completed_samples: usize,
    pub finetune_samples: usize,
    pub test_samples: usize,
    pub seeds: WorkflowSeeds,
    pub configs: DownstreamConfig,
}

pub struct WorkflowOutput {
    pub pretrained: Checkpoint,
    pub finetuned: Checkpoint,
    pub scratch: Checkpoint,
    pub pretrain_log: Vec<EpochRecord>,
    pub finetune_log: Vec<EpochRecord>,
    pub scratch_log: Vec<EpochRecord>,
    pub report: WorkflowReport,
}

/// Complete the incomplete pool, pretrain on the completions, fine-tune on
/// the complete pool and compare against training from scratch.
pub fn pretrain_then_finetune(
    incomplete: &[LayerStackSample],
    complete: &[LayerStackSample],
    completion: &Checkpoint,
    cfg: &DownstreamConfig,
    exec: Execution,
) -> Result<WorkflowOutput> {
    cfg.validate()?;
    if incomplete.is_empty() || complete.len() < 2 {
        return Err(Error::Input(
            "need a non-empty incomplete pool and at least two complete stacks".into(),
        ));
    }
    let k = cfg.shallow_count;
    let spec = cfg.spec();
    let model = GraphTransformer::new(cfg.model)?;

    let completed = complete_samples(completion, incomplete, exec)?;
    let completed_refs: Vec<&LayerStackSample> = completed.iter().collect();
    let pre_stats = Standardizer::fit(&spec, &completed_refs)?;
    let pre_ex: Vec<Example> = completed
        .iter()
        .map(|s| deep_example(&spec, &pre_stats, s))
        .collect::<Result<_>>()?;
    let mut init = model.init_params(cfg.pretrain.seed);
    init.set_output_bias(deep_mean(&completed, k));
    let (pre_params, pretrain_log) = train_arm(
        &model,
        init,
        &pre_ex,
        &cfg.pretrain,
        Some(cfg.checkpoint_epoch),
        exec,
    )?;
    let pretrained = Checkpoint {
        model: cfg.model,
        input: spec,
        standardizer: pre_stats.clone(),
        seed: cfg.pretrain.seed,
        epoch: pretrain_log.len(),
        params: pre_params,
    };

    let (fine_ids, test_ids) = split_indices(complete.len(), cfg.test_fraction, cfg.finetune.seed);
    let fine: Vec<LayerStackSample> = fine_ids.iter().map(|&i| complete[i].clone()).collect();
    let test: Vec<LayerStackSample> = test_ids.iter().map(|&i| complete[i].clone()).collect();

    // fine-tune keeps the pretrained feature scaling
    let fine_ex: Vec<Example> = fine
        .iter()
        .map(|s| deep_example(&spec, &pre_stats, s))
        .collect::<Result<_>>()?;
    let (ft_params, finetune_log) = train_arm(
        &model,
        pretrained.params.clone(),
        &fine_ex,
        &cfg.finetune,
        None,
        exec,
    )?;
    let finetuned = Checkpoint {
        params: ft_params,
        seed: cfg.finetune.seed,
        epoch: finetune_log.len(),
        ..pretrained.clone()
    };

    let fine_refs: Vec<&LayerStackSample> = fine.iter().collect();
    let scratch_stats = Standardizer::fit(&spec, &fine_refs)?;
    let scratch_ex: Vec<Example> = fine
        .iter()
        .map(|s| deep_example(&spec, &scratch_stats, s))
        .collect::<Result<_>>()?;
    let mut scratch_init = model.init_params(cfg.finetune.seed);
    scratch_init.set_output_bias(deep_mean(&fine, k));
    let (sc_params, scratch_log) =
        train_arm(&model, scratch_init, &scratch_ex, &cfg.finetune, None, exec)?;
    let scratch = Checkpoint {
        model: cfg.model,
        input: spec,
        standardizer: scratch_stats,
        seed: cfg.finetune.seed,
        epoch: scratch_log.len(),
        params: sc_params,
    };

    let pf = deep_rmse(&finetuned, &test, exec)?;
    let sc = deep_rmse(&scratch, &test, exec)?;
    let report = WorkflowReport {
        pretrain_finetune_rmse: pf,
        scratch_rmse: sc,
        improvement_pct: 100.0 * (sc - pf) / sc,
        rmse_ratio: pf / sc,
        finetune_first_epoch_loss: finetune_log[0].train_loss,
        scratch_first_epoch_loss: scratch_log[0].train_loss,
        completed_samples: completed.len(),
        finetune_samples: fine.len(),
        test_samples: test.len(),
        seeds: WorkflowSeeds {
            pretrain: cfg.pretrain.seed,
            finetune: cfg.finetune.seed,
            split: cfg.finetune.seed,
        },
        configs: cfg.clone(),
    };
    log::info!(
        "workflow: pretrain+finetune RMSE {pf:.4}, scratch RMSE {sc:.4} ({:+.2}%)",
        report.improvement_pct
    );
    Ok(WorkflowOutput {
        pretrained,
        finetuned,
        scratch,
        pretrain_log,
        finetune_log,
        scratch_log,
        report,
    })
}
