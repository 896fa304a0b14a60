//! Central finite-difference check of every model parameter gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{build_adjacency, AdjacencySpec};
use crate::model::{GraphTransformer, ModelConfig, ModelInput, ModelParams};
use crate::objective::{masked_huber_on_tape, LossConfig};
use crate::tensor::{DropoutKey, Tape, Tensor};
use std::sync::Arc;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub n_nodes: usize,
    pub n_layers: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Smallest denominator in the relative error.
    pub rel_floor: f64,
    /// Run with dropout active under a fixed key.
    pub dropout: bool,
    pub loss: LossConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                d_s: 8,
                d_t: 8,
                heads: 2,
                encoder_layers: 2,
                ..ModelConfig::default()
            },
            n_nodes: 4,
            n_layers: 3,
            seed: 7,
            step: 1e-6,
            tolerance: 1e-5,
            rel_floor: 1e-3,
            dropout: true,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<ParamCheck>,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn entries(&self) -> usize {
        self.checks.iter().map(|c| c.entries).sum()
    }

    /// Fixed-width table, one row per parameter tensor.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>7} {:>12} {:>12}  status\n",
            "parameter", "entries", "max_abs", "max_rel"
        );
        for c in &self.checks {
            s.push_str(&format!(
                "{:<24} {:>7} {:>12.3e} {:>12.3e}  {}\n",
                c.name,
                c.entries,
                c.max_abs_err,
                c.max_rel_err,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

struct Problem {
    model: GraphTransformer,
    input: ModelInput,
    target: Vec<f64>,
    mask: Vec<f64>,
}

impl Problem {
    fn new(cfg: &GradcheckConfig) -> Result<(Self, ModelParams)> {
        let model = GraphTransformer::new(cfg.model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (n, t, f) = (cfg.n_nodes, cfg.n_layers, cfg.model.f_in);
        let node: Vec<f64> = (0..n * f).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut feats = Vec::with_capacity(t * n * f);
        for _ in 0..t {
            feats.extend_from_slice(&node);
        }
        let neighbors = Arc::new(build_adjacency(n, AdjacencySpec::Chain { k: 1 })?);
        let input = ModelInput {
            features: Tensor::new(vec![t, n, f], feats)?,
            neighbors,
        };
        let target: Vec<f64> = (0..n * t).map(|_| rng.random_range(0.5..3.0)).collect();
        let mut mask: Vec<f64> = (0..n * t)
            .map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 })
            .collect();
        mask[0] = 1.0;
        let mut params = model.init_params(cfg.seed ^ 0x5eed);
        // Centre predictions on the targets so both Huber branches are hit.
        let mean = target.iter().sum::<f64>() / target.len() as f64;
        params.set_output_bias(mean);
        Ok((
            Problem {
                model,
                input,
                target,
                mask,
            },
            params,
        ))
    }

    fn tape(&self, cfg: &GradcheckConfig) -> Tape {
        if cfg.dropout {
            Tape::training(DropoutKey::new(cfg.seed, 0, 0, 0))
        } else {
            Tape::new()
        }
    }

    fn loss(&self, cfg: &GradcheckConfig, params: &ModelParams) -> Result<f64> {
        let mut tape = self.tape(cfg);
        let p = self.model.bind(&mut tape, params);
        let y = self
            .model
            .forward(&mut tape, &p, &self.input, cfg.dropout)?;
        let l = masked_huber_on_tape(&mut tape, y, &self.target, &self.mask, &cfg.loss)?;
        tape.value(l).item()
    }

    fn gradients(&self, cfg: &GradcheckConfig, params: &ModelParams) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = self.tape(cfg);
        let p = self.model.bind(&mut tape, params);
        let y = self
            .model
            .forward(&mut tape, &p, &self.input, cfg.dropout)?;
        let l = masked_huber_on_tape(&mut tape, y, &self.target, &self.mask, &cfg.loss)?;
        let g = tape.backward(l)?;
        Ok((
            tape.value(l).item()?,
            p.iter().map(|&v| g.tensor(v)).collect(),
        ))
    }
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (problem, params) = Problem::new(cfg)?;
    let (loss, grads) = problem.gradients(cfg, &params)?;
    let mut work = params.clone();
    let mut checks = Vec::with_capacity(params.tensors.len());
    for (i, g) in grads.iter().enumerate() {
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for j in 0..g.len() {
            let orig = params.tensors[i].data()[j];
            work.tensors[i].data_mut()[j] = orig + cfg.step;
            let up = problem.loss(cfg, &work)?;
            work.tensors[i].data_mut()[j] = orig - cfg.step;
            let down = problem.loss(cfg, &work)?;
            work.tensors[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let analytic = g.data()[j];
            let abs = (numeric - analytic).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / numeric.abs().max(analytic.abs()).max(cfg.rel_floor));
        }
        checks.push(ParamCheck {
            name: params.names[i].clone(),
            entries: g.len(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            passed: max_rel <= cfg.tolerance,
        });
    }
    Ok(GradcheckReport { checks, loss })
}
