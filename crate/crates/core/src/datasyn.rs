//! Seeded synthetic layer stacks with hidden ground truth.
//!
//! Each sample draws a smooth latent accumulation field `a(n)` along its
//! track. The covariates are noisy smooth functions of `a`, and thickness is
//! `base_t · u_t · exp(0.4 a(n))` with `base_t = 12 exp(-0.04 t)` and a
//! per-layer jitter `u_t ~ U(0.95, 1.05)`. Coordinates carry no information
//! about `a`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::graph::{AdjacencySpec, LayerStackSample, COVARIATES, NODE_FEATURES};
use crate::io::write_jsonl;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MissingRegimes {
    /// Chance a surviving layer gets 1 to 3 contiguous gaps.
    pub p_partial_gap: f64,
    /// Inclusive gap length range in nodes.
    pub gap_len: (usize, usize),
    /// Chance a layer is absent altogether.
    pub p_full_missing: f64,
    /// Tilts both probabilities toward deep layers, in [0, 1].
    pub depth_bias: f64,
    /// Layers removed in every sample.
    pub forced_missing_layers: Vec<usize>,
}

impl Default for MissingRegimes {
    fn default() -> Self {
        MissingRegimes {
            p_partial_gap: 0.4,
            gap_len: (4, 24),
            p_full_missing: 0.1,
            depth_bias: 0.5,
            forced_missing_layers: Vec::new(),
        }
    }
}

impl MissingRegimes {
    pub fn none() -> Self {
        MissingRegimes {
            p_partial_gap: 0.0,
            p_full_missing: 0.0,
            depth_bias: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        for (name, p) in [
            ("p_partial_gap", self.p_partial_gap),
            ("p_full_missing", self.p_full_missing),
            ("depth_bias", self.depth_bias),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.gap_len;
        if lo == 0 || lo > hi || hi >= n_nodes {
            return Err(Error::Config(format!(
                "gap_len ({lo}, {hi}) must satisfy 1 <= min <= max < n_nodes = {n_nodes}"
            )));
        }
        Ok(())
    }

    /// `1 - (1 - p)^w` with `w` running linearly from `1 - bias` at the top
    /// layer to `1 + bias` at the bottom.
    pub fn layer_probability(&self, p: f64, layer: usize, n_layers: usize) -> f64 {
        let depth = if n_layers > 1 {
            2.0 * layer as f64 / (n_layers - 1) as f64 - 1.0
        } else {
            0.0
        };
        let w = 1.0 + self.depth_bias * depth;
        (1.0 - (1.0 - p).powf(w)).clamp(0.0, 1.0)
    }

    /// Observation mask for one sample, node-major.
    pub fn draw_mask(&self, n_nodes: usize, n_layers: usize, rng: &mut impl Rng) -> Vec<bool> {
        let mut mask = vec![true; n_nodes * n_layers];
        for t in 0..n_layers {
            let full = self.layer_probability(self.p_full_missing, t, n_layers);
            let partial = self.layer_probability(self.p_partial_gap, t, n_layers);
            // draws happen unconditionally so layers do not shift each other's stream
            let u_full: f64 = rng.random();
            let u_partial: f64 = rng.random();
            let runs = rng.random_range(1..=3usize);
            let gaps: Vec<(usize, usize)> = (0..3)
                .map(|_| {
                    let len = rng.random_range(self.gap_len.0..=self.gap_len.1);
                    (rng.random_range(0..n_nodes), len)
                })
                .collect();
            if u_full < full || self.forced_missing_layers.contains(&t) {
                for n in 0..n_nodes {
                    mask[n * n_layers + t] = false;
                }
            } else if u_partial < partial {
                for &(start, len) in &gaps[..runs] {
                    for n in start..(start + len).min(n_nodes) {
                        mask[n * n_layers + t] = false;
                    }
                }
            }
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub n_layers: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Shortest wavelength of the latent field, in nodes.
    pub smoothness: f64,
    /// Covariate noise as a fraction of each covariate's signal scale.
    pub covariate_noise: f64,
    pub adjacency: AdjacencySpec,
    pub missing: MissingRegimes,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_nodes: 256,
            n_layers: 20,
            n_samples: 100,
            seed: 0,
            smoothness: 48.0,
            covariate_noise: 0.1,
            adjacency: AdjacencySpec::default(),
            missing: MissingRegimes::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::Config("n_nodes must be at least 1".into()));
        }
        if self.n_layers < 2 {
            return Err(Error::Config(format!(
                "n_layers must be at least 2, got {}",
                self.n_layers
            )));
        }
        if !(self.smoothness > 0.0) || !(self.covariate_noise >= 0.0) {
            return Err(Error::Config(
                "smoothness > 0 and covariate_noise >= 0 required".into(),
            ));
        }
        self.missing.validate(self.n_nodes)
    }
}

/// Observed sample plus its fully observed truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub observed: LayerStackSample,
    pub truth: LayerStackSample,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn base_thickness(layer: usize) -> f64 {
    12.0 * (-0.04 * layer as f64).exp()
}

/// Covariates as functions of the latent value, before noise.
pub fn covariate_signal(a: f64) -> [f64; COVARIATES] {
    [
        350.0 + 120.0 * a,
        -22.0 - 2.5 * a,
        18.0 * (0.3 * a).exp(),
        -0.4 + 0.25 * (0.8 * a).tanh(),
        1.5 + 0.6 * a,
    ]
}

const COVARIATE_SCALE: [f64; COVARIATES] = [120.0, 2.5, 5.4, 0.2, 0.6];

pub fn generate_sample(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    id: impl Into<String>,
) -> Result<SyntheticSample> {
    let (n, t) = (cfg.n_nodes, cfg.n_layers);
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let offset = 0.6 * std.sample(rng);
    let comps: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let lambda = cfg.smoothness * rng.random_range(1.0..4.0);
            (
                lambda,
                rng.random_range(0.0..std::f64::consts::TAU),
                0.4 + 0.3 * rng.random::<f64>(),
            )
        })
        .collect();
    let latent: Vec<f64> = (0..n)
        .map(|i| {
            offset
                + comps
                    .iter()
                    .map(|&(lambda, phase, amp)| {
                        amp * (std::f64::consts::TAU * i as f64 / lambda + phase).sin()
                    })
                    .sum::<f64>()
        })
        .collect();

    let lat0 = rng.random_range(62.0..80.0);
    let lon0 = rng.random_range(-55.0..-25.0);
    let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let step = 0.004;
    let mut feats = Vec::with_capacity(n * NODE_FEATURES);
    for (i, &a) in latent.iter().enumerate() {
        feats.push(lat0 + step * i as f64 * heading.sin());
        feats.push(lon0 + step * i as f64 * heading.cos());
        let signal = covariate_signal(a);
        for c in 0..COVARIATES {
            feats.push(signal[c] + cfg.covariate_noise * COVARIATE_SCALE[c] * std.sample(rng));
        }
    }

    let jitter: Vec<f64> = (0..t).map(|_| rng.random_range(0.95..1.05)).collect();
    let truth_vals: Vec<Option<f64>> = (0..n * t)
        .map(|k| {
            let (i, l) = (k / t, k % t);
            Some(base_thickness(l) * jitter[l] * (0.4 * latent[i]).exp())
        })
        .collect();
    let mask = cfg.missing.draw_mask(n, t, rng);
    let observed_vals = truth_vals
        .iter()
        .zip(&mask)
        .map(|(v, &m)| if m { *v } else { None })
        .collect();

    let id = id.into();
    let truth = LayerStackSample::new(id.clone(), n, t, feats.clone(), truth_vals, cfg.adjacency)?;
    let observed = LayerStackSample::new(id, n, t, feats, observed_vals, cfg.adjacency)?;
    Ok(SyntheticSample { observed, truth })
}

pub fn generate(cfg: &SynthConfig, exec: Execution) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let ids: Vec<usize> = (0..cfg.n_samples).collect();
    map_ordered(exec, &ids, |_, &i| {
        let mut rng = sample_rng(cfg.seed, i as u64);
        generate_sample(cfg, &mut rng, format!("synth-{:05}", i))
    })
    .into_iter()
    .collect()
}

/// Write the observed dataset and its hidden truth as two JSONL files.
pub fn generate_dataset(
    cfg: &SynthConfig,
    dataset: &Path,
    truth: &Path,
    exec: Execution,
) -> Result<Vec<SyntheticSample>> {
    let samples = generate(cfg, exec)?;
    let observed: Vec<_> = samples.iter().map(|s| s.observed.clone()).collect();
    let truths: Vec<_> = samples.iter().map(|s| s.truth.clone()).collect();
    write_jsonl(dataset, &observed)?;
    write_jsonl(truth, &truths)?;
    Ok(samples)
}

/// Mask out entries of fully observed stacks. Values that stay observed are
/// copied unchanged; the inputs become the truth.
pub fn corrupt_full_stacks(
    samples: &[LayerStackSample],
    regimes: &MissingRegimes,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if !s.is_fully_observed() {
                return Err(Error::Input(format!(
                    "sample {} is not fully observed",
                    s.sample_id
                )));
            }
            regimes.validate(s.n_nodes())?;
            let mut rng = sample_rng(seed, i as u64);
            let mask = regimes.draw_mask(s.n_nodes(), s.n_layers(), &mut rng);
            let thick = s
                .thickness
                .iter()
                .zip(&mask)
                .map(|(v, &m)| if m { *v } else { None })
                .collect();
            Ok(SyntheticSample {
                observed: s.with_thickness(thick)?,
                truth: s.clone(),
            })
        })
        .collect()
}
