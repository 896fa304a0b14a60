//! Physics-conditioned graph transformer.
//!
//! ```text
//! features [T,N,F] ─ SAGE ×L ─ [T,N,d_s] ─ permute ─ proj ─ +PE ─ LN ─ encoder ×E ─ head ─ [N,T]
//! ```
//!
//! Weights are kept in one flat, named list ([`ModelParams`]); [`Layout`]
//! records where each block's tensors live in it.

mod checkpoint;
mod input;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use input::{build_input, FeatureSet, InputSpec, ModelInput, Standardizer};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerStackSample, Neighbors};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub f_in: usize,
    pub d_s: usize,
    pub sage_layers: usize,
    pub d_t: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub dropout_p: f64,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            f_in: 7,
            d_s: 128,
            sage_layers: 2,
            d_t: 256,
            heads: 8,
            encoder_layers: 4,
            dropout_p: 0.05,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("f_in", self.f_in),
            ("d_s", self.d_s),
            ("sage_layers", self.sage_layers),
            ("d_t", self.d_t),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_t % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_t = {} is not divisible by heads = {}",
                self.d_t, self.heads
            )));
        }
        if self.d_t % 2 != 0 {
            return Err(Error::Config(format!(
                "sinusoidal encoding needs an even d_t, got {}",
                self.d_t
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_t / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SageIdx {
    pub w_self: usize,
    pub w_neigh: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderIdx {
    pub norm_attn: NormIdx,
    pub q: AffineIdx,
    pub k: AffineIdx,
    pub v: AffineIdx,
    pub out: AffineIdx,
    pub norm_ffn: NormIdx,
    pub ffn_in: AffineIdx,
    pub ffn_out: AffineIdx,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub sage: Vec<SageIdx>,
    pub proj: AffineIdx,
    pub pe_norm: NormIdx,
    pub encoders: Vec<EncoderIdx>,
    pub head: AffineIdx,
    entries: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut entries = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            entries.push((name, shape, init));
            entries.len() - 1
        };
        let affine = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                      name: &str,
                      i: usize,
                      o: usize| AffineIdx {
            w: push(
                format!("{name}.weight"),
                vec![i, o],
                Init::Uniform { fan_in: i },
            ),
            b: push(format!("{name}.bias"), vec![o], Init::Zeros),
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                    name: &str,
                    d: usize| NormIdx {
            gain: push(format!("{name}.gain"), vec![d], Init::Ones),
            bias: push(format!("{name}.bias"), vec![d], Init::Zeros),
        };

        let mut sage = Vec::new();
        let mut d_in = cfg.f_in;
        for l in 0..cfg.sage_layers {
            sage.push(SageIdx {
                w_self: push(
                    format!("sage{l}.w_self"),
                    vec![d_in, cfg.d_s],
                    Init::Uniform { fan_in: d_in },
                ),
                w_neigh: push(
                    format!("sage{l}.w_neigh"),
                    vec![d_in, cfg.d_s],
                    Init::Uniform { fan_in: d_in },
                ),
                bias: push(format!("sage{l}.bias"), vec![cfg.d_s], Init::Zeros),
            });
            d_in = cfg.d_s;
        }
        let proj = affine(&mut push, "proj", cfg.d_s, cfg.d_t);
        let pe_norm = norm(&mut push, "pe_norm", cfg.d_t);
        let d = cfg.d_t;
        let hidden = cfg.ffn_mult * d;
        let encoders = (0..cfg.encoder_layers)
            .map(|l| EncoderIdx {
                norm_attn: norm(&mut push, &format!("enc{l}.norm_attn"), d),
                q: affine(&mut push, &format!("enc{l}.q"), d, d),
                k: affine(&mut push, &format!("enc{l}.k"), d, d),
                v: affine(&mut push, &format!("enc{l}.v"), d, d),
                out: affine(&mut push, &format!("enc{l}.out"), d, d),
                norm_ffn: norm(&mut push, &format!("enc{l}.norm_ffn"), d),
                ffn_in: affine(&mut push, &format!("enc{l}.ffn_in"), d, hidden),
                ffn_out: affine(&mut push, &format!("enc{l}.ffn_out"), hidden, d),
            })
            .collect();
        let head = affine(&mut push, "head", d, 1);
        Layout {
            sage,
            proj,
            pe_norm,
            encoders,
            head,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.entries[i].1
    }
}

/// All learnable tensors in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// Set the scalar head bias, i.e. the prediction of an all-zero model.
    pub fn set_output_bias(&mut self, value: f64) {
        if let Some(b) = self.get_mut("head.bias") {
            b.data_mut()[0] = value;
        }
    }
}

/// Model architecture: configuration plus parameter layout.
#[derive(Clone, Debug)]
pub struct GraphTransformer {
    pub config: ModelConfig,
    pub layout: Layout,
}

impl GraphTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(GraphTransformer {
            layout: Layout::new(&config),
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout
            .entries
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Uniform(±1/√fan_in) weights, zero biases, unit norm gains.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = self
            .layout
            .entries
            .iter()
            .map(|(name, shape, init)| {
                let t = match *init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::ones(shape),
                    Init::Uniform { fan_in } => {
                        let a = 1.0 / (fan_in as f64).sqrt();
                        let n = shape.iter().product();
                        Tensor::new(
                            shape.clone(),
                            (0..n).map(|_| rng.random_range(-a..=a)).collect(),
                        )
                        .expect("layout shape")
                    }
                };
                (name.clone(), t)
            })
            .unzip();
        ModelParams { names, tensors }
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.tensors.len() != self.layout.len() {
            return Err(Error::shape(
                "ModelParams",
                format!(
                    "{} tensors, layout has {}",
                    params.tensors.len(),
                    self.layout.len()
                ),
            ));
        }
        for (i, t) in params.tensors.iter().enumerate() {
            if t.shape() != self.layout.shape(i) || params.names[i] != self.layout.name(i) {
                return Err(Error::shape(
                    "ModelParams",
                    format!(
                        "{} {:?} does not match layout {} {:?}",
                        params.names[i],
                        t.shape(),
                        self.layout.name(i),
                        self.layout.shape(i)
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Register every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape, params: &ModelParams) -> Vec<Var> {
        params
            .tensors
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect()
    }

    /// Spatial embeddings `H`, shape `[N, T, d_s]`.
    pub fn spatial_encode(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &ModelInput,
        training: bool,
    ) -> Result<Var> {
        let mut x = tape.constant(input.features.clone());
        let last = self.layout.sage.len() - 1;
        for (l, s) in self.layout.sage.iter().enumerate() {
            x = sage_layer(
                tape,
                x,
                &input.neighbors,
                p[s.w_self],
                p[s.w_neigh],
                p[s.bias],
                l < last,
            )?;
            x = tape.dropout(x, self.config.dropout_p, training)?;
        }
        tape.permute(x, &[1, 0, 2])
    }

    /// Pre-norm encoder stack over the layer axis of `z: [N, T, d_t]`.
    pub fn temporal_encode(
        &self,
        tape: &mut Tape,
        p: &[Var],
        z: Var,
        training: bool,
    ) -> Result<Var> {
        let mut z = z;
        for enc in &self.layout.encoders {
            z = encoder_layer(tape, p, enc, &self.config, z, training)?.0;
        }
        Ok(z)
    }

    /// Thickness predictions, shape `[N, T]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &ModelInput,
        training: bool,
    ) -> Result<Var> {
        let (n, t) = (input.n_nodes(), input.n_layers());
        let h = self.spatial_encode(tape, p, input, training)?;
        let z = tape.linear(h, p[self.layout.proj.w], Some(p[self.layout.proj.b]))?;
        let pe = tape.constant(positional_encoding(t, self.config.d_t)?);
        let z = tape.add(z, pe)?;
        let z = tape.layer_norm(
            z,
            p[self.layout.pe_norm.gain],
            p[self.layout.pe_norm.bias],
            LAYER_NORM_EPS,
        )?;
        let z = self.temporal_encode(tape, p, z, training)?;
        let y = tape.linear(z, p[self.layout.head.w], Some(p[self.layout.head.b]))?;
        tape.reshape(y, &[n, t])
    }

    /// Eval-mode predictions, `[N, T]`.
    pub fn predict(&self, params: &ModelParams, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, params);
        let y = self.forward(&mut tape, &p, input, false)?;
        Ok(tape.value(y).clone())
    }
}

/// `x'_i = W_self x_i + W_neigh · mean_{j∈N(i)} x_j + b`, optionally ReLU'd.
///
/// `x` is `[.., N, d]`; leading axes are independent graphs over the same
/// neighbour lists.
pub fn sage_layer(
    tape: &mut Tape,
    x: Var,
    neighbors: &Neighbors,
    w_self: Var,
    w_neigh: Var,
    bias: Var,
    relu: bool,
) -> Result<Var> {
    let own = tape.linear(x, w_self, Some(bias))?;
    let agg = tape.scatter_mean_rows(x, neighbors.clone())?;
    let nb = tape.linear(agg, w_neigh, None)?;
    let out = tape.add(own, nb)?;
    Ok(if relu { tape.relu(out) } else { out })
}

/// Sinusoidal encoding: `PE[pos, 2i] = sin(pos / 10000^{2i/d})`,
/// `PE[pos, 2i+1] = cos(..)`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs even width, got {d}"
        )));
    }
    let mut pe = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set(&[pos, 2 * i], angle.sin());
            pe.set(&[pos, 2 * i + 1], angle.cos());
        }
    }
    Ok(pe)
}

/// Multi-head self-attention over the layer axis of `h: [N, T, d]`.
/// Returns the projected output and the attention weights `[N, heads, T, T]`.
pub fn self_attention(
    tape: &mut Tape,
    p: &[Var],
    enc: &EncoderIdx,
    cfg: &ModelConfig,
    h: Var,
) -> Result<(Var, Var)> {
    let (n, t) = (tape.shape(h)[0], tape.shape(h)[1]);
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let split = |tape: &mut Tape, a: AffineIdx| -> Result<Var> {
        let y = tape.linear(h, p[a.w], Some(p[a.b]))?;
        let y = tape.reshape(y, &[n, t, heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, enc.q)?;
    let k = split(tape, enc.k)?;
    let v = split(tape, enc.v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = tape.softmax_lastdim(scores)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, t, cfg.d_t])?;
    let out = tape.linear(ctx, p[enc.out.w], Some(p[enc.out.b]))?;
    Ok((out, weights))
}

/// `u = z + Drop(MHA(LN(z)))`, `out = u + Drop(FFN(LN(u)))`.
/// Also returns the attention weights.
pub fn encoder_layer(
    tape: &mut Tape,
    p: &[Var],
    enc: &EncoderIdx,
    cfg: &ModelConfig,
    z: Var,
    training: bool,
) -> Result<(Var, Var)> {
    let h = tape.layer_norm(
        z,
        p[enc.norm_attn.gain],
        p[enc.norm_attn.bias],
        LAYER_NORM_EPS,
    )?;
    let (att, weights) = self_attention(tape, p, enc, cfg, h)?;
    let att = tape.dropout(att, cfg.dropout_p, training)?;
    let u = tape.add(z, att)?;
    let h = tape.layer_norm(
        u,
        p[enc.norm_ffn.gain],
        p[enc.norm_ffn.bias],
        LAYER_NORM_EPS,
    )?;
    let f = tape.linear(h, p[enc.ffn_in.w], Some(p[enc.ffn_in.b]))?;
    let f = tape.relu(f);
    let f = tape.linear(f, p[enc.ffn_out.w], Some(p[enc.ffn_out.b]))?;
    let f = tape.dropout(f, cfg.dropout_p, training)?;
    Ok((tape.add(u, f)?, weights))
}

/// Copy-through completion: observed entries verbatim, predictions elsewhere.
/// `predictions` is node-major `N × T`.
pub fn complete(sample: &LayerStackSample, predictions: &[f64]) -> Result<Vec<f64>> {
    if predictions.len() != sample.thickness.len() {
        return Err(Error::shape(
            "complete",
            format!(
                "{} predictions for {} entries",
                predictions.len(),
                sample.thickness.len()
            ),
        ));
    }
    if predictions.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("predictions must be finite".into()));
    }
    Ok(sample
        .thickness
        .iter()
        .zip(&sample.mask)
        .zip(predictions)
        .map(|((obs, &m), &pred)| match (m, obs) {
            (true, Some(v)) => *v,
            _ => pred,
        })
        .collect())
}

/// [`complete`] packaged as a fully observed sample.
pub fn complete_sample(sample: &LayerStackSample, predictions: &[f64]) -> Result<LayerStackSample> {
    let filled = complete(sample, predictions)?;
    sample.with_thickness(filled.into_iter().map(Some).collect())
}
