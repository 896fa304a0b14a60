//! Completion training, completion and scoring on whole datasets.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::graph::LayerStackSample;
use crate::model::{
    build_input, complete_sample, Checkpoint, FeatureSet, GraphTransformer, InputSpec, ModelConfig,
    Standardizer,
};
use crate::objective::LossConfig;
use crate::optim::{fit, EpochRecord, Example, Objective, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub features: FeatureSet,
    /// Share of samples held out for validation.
    pub val_fraction: f64,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        CompletionConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            features: FeatureSet::Physical,
            val_fraction: 0.1,
            checkpoint_every: 0,
        }
    }
}

impl CompletionConfig {
    /// Copy with `model.f_in` taken from the feature set.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.f_in = self.features.columns().len();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.model.f_in != self.features.columns().len() {
            return Err(Error::Config(format!(
                "model.f_in = {} but the {:?} feature set has {} columns",
                self.model.f_in,
                self.features,
                self.features.columns().len()
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle of `0..n` split into (train, validation).
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

pub fn completion_example(
    spec: &InputSpec,
    stats: &Standardizer,
    s: &LayerStackSample,
) -> Result<Example> {
    Ok(Example {
        input: build_input(spec, stats, s)?,
        target: s.thickness_filled(0.0),
        mask: s.mask_f64(),
    })
}

/// Mean of every observed thickness value.
pub fn observed_mean(samples: &[&LayerStackSample]) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for x in samples.iter().flat_map(|s| s.thickness.iter().flatten()) {
        s += x;
        c += 1;
    }
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Fit a completion model. `on_checkpoint` receives periodic snapshots.
pub fn train_completion(
    samples: &[LayerStackSample],
    cfg: &CompletionConfig,
    exec: Execution,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_ids, val_ids) = split_indices(samples.len(), cfg.val_fraction, cfg.train.seed);
    let train: Vec<&LayerStackSample> = train_ids.iter().map(|&i| &samples[i]).collect();
    let val: Vec<&LayerStackSample> = val_ids.iter().map(|&i| &samples[i]).collect();
    if train.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let spec = InputSpec::Completion {
        features: cfg.features,
    };
    let stats = Standardizer::fit(&spec, &train)?;
    let to_examples = |set: &[&LayerStackSample]| -> Result<Vec<Example>> {
        set.iter()
            .map(|s| completion_example(&spec, &stats, s))
            .collect()
    };
    let (train_ex, val_ex) = (to_examples(&train)?, to_examples(&val)?);

    let model = GraphTransformer::new(cfg.model)?;
    let mut params = model.init_params(cfg.train.seed);
    params.set_output_bias(observed_mean(&train));

    let snapshot = |params: &crate::model::ModelParams, epoch: usize| Checkpoint {
        model: cfg.model,
        input: spec,
        standardizer: stats.clone(),
        seed: cfg.train.seed,
        epoch,
        params: params.clone(),
    };
    let out = fit(
        &model,
        params,
        &train_ex,
        &val_ex,
        Objective::masked_huber(&cfg.loss),
        &cfg.train,
        exec,
        &mut |rec, p| {
            if cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0 {
                on_checkpoint(&snapshot(p, rec.epoch))?;
            }
            Ok(ControlFlow::Continue(()))
        },
    )?;
    let epochs = out.log.len();
    Ok(TrainOutcome {
        checkpoint: snapshot(&out.params, epochs),
        log: out.log,
        train_ids,
        val_ids,
    })
}

/// Copy-through completion of every sample.
pub fn complete_samples(
    ck: &Checkpoint,
    samples: &[LayerStackSample],
    exec: Execution,
) -> Result<Vec<LayerStackSample>> {
    if !matches!(ck.input, InputSpec::Completion { .. }) {
        return Err(Error::Config("checkpoint is not a completion model".into()));
    }
    let model = ck.architecture()?;
    map_ordered(exec, samples, |_, s| {
        let input = build_input(&ck.input, &ck.standardizer, s)?;
        let pred = model.predict(&ck.params, &input)?;
        complete_sample(s, pred.data())
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub observed_entries: usize,
    pub unobserved_entries: usize,
    /// Completed vs original at observed entries; zero under copy-through.
    pub observed_mae: f64,
    /// Completed vs truth at originally unobserved entries.
    pub unobserved_mae: f64,
    pub unobserved_rmse: f64,
    pub completed_has_missing: bool,
}

fn check_aligned(a: &LayerStackSample, b: &LayerStackSample) -> Result<()> {
    if a.sample_id != b.sample_id || a.n_nodes() != b.n_nodes() || a.n_layers() != b.n_layers() {
        return Err(Error::Input(format!(
            "sample {} ({}x{}) does not line up with {} ({}x{})",
            a.sample_id,
            a.n_nodes(),
            a.n_layers(),
            b.sample_id,
            b.n_nodes(),
            b.n_layers()
        )));
    }
    Ok(())
}

/// Score `completed` against the `original` observations and hidden `truth`.
pub fn evaluate(
    completed: &[LayerStackSample],
    original: &[LayerStackSample],
    truth: &[LayerStackSample],
) -> Result<EvalReport> {
    if completed.len() != original.len() || completed.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} completed, {} original and {} truth samples",
            completed.len(),
            original.len(),
            truth.len()
        )));
    }
    let (mut obs_abs, mut obs_n) = (0.0, 0usize);
    let (mut un_abs, mut un_sq, mut un_n) = (0.0, 0.0, 0usize);
    let mut has_missing = false;
    for ((c, o), t) in completed.iter().zip(original).zip(truth) {
        check_aligned(c, o)?;
        check_aligned(c, t)?;
        for k in 0..c.thickness.len() {
            let Some(v) = c.thickness[k] else {
                has_missing = true;
                continue;
            };
            if let Some(ov) = o.thickness[k] {
                obs_abs += (v - ov).abs();
                obs_n += 1;
            } else if let Some(tv) = t.thickness[k] {
                un_abs += (v - tv).abs();
                un_sq += (v - tv) * (v - tv);
                un_n += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    Ok(EvalReport {
        samples: completed.len(),
        observed_entries: obs_n,
        unobserved_entries: un_n,
        observed_mae: mean(obs_abs, obs_n),
        unobserved_mae: mean(un_abs, un_n),
        unobserved_rmse: mean(un_sq, un_n).sqrt(),
        completed_has_missing: has_missing,
    })
}

/// MAE at unobserved entries of a predictor that always outputs `constant`.
pub fn constant_predictor_mae(
    constant: f64,
    original: &[LayerStackSample],
    truth: &[LayerStackSample],
) -> Result<f64> {
    let filled: Vec<LayerStackSample> = original
        .iter()
        .map(|o| {
            o.with_thickness(
                o.thickness
                    .iter()
                    .map(|v| Some(v.unwrap_or(constant)))
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(evaluate(&filled, original, truth)?.unobserved_mae)
}
