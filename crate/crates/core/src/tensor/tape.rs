//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value plus whatever
//! it needs for the backward pass. [`Tape::backward`] walks the nodes in
//! reverse recording order, so each op is visited exactly once.

use std::sync::Arc;

use super::dropout::DropoutKey;
use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{strides, Tensor};
use crate::error::{Error, Result};
use crate::exec::{for_each_chunk_mut, Execution};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise penalty applied to residuals `pred - target`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    /// `0.5 r²` inside `|r| ≤ delta`, `delta (|r| - delta/2)` outside.
    Huber { delta: f64 },
    /// `r²`
    Squared,
}

impl Penalty {
    pub fn value(self, r: f64) -> f64 {
        match self {
            Penalty::Huber { delta } => {
                let a = r.abs();
                if a <= delta {
                    0.5 * r * r
                } else {
                    delta * (a - 0.5 * delta)
                }
            }
            Penalty::Squared => r * r,
        }
    }

    pub fn derivative(self, r: f64) -> f64 {
        match self {
            Penalty::Huber { delta } => r.clamp(-delta, delta),
            Penalty::Squared => 2.0 * r,
        }
    }
}

enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        plan: BatchPlan,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Mean {
        a: Var,
        axes: Vec<usize>,
    },
    Sum {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        a: Var,
        factors: Vec<f64>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    NeighborMean {
        a: Var,
        neighbors: Arc<Vec<Vec<usize>>>,
    },
    PenaltySum {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        penalty: Penalty,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch bookkeeping for a broadcast matmul.
struct BatchPlan {
    m: usize,
    k: usize,
    n: usize,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

/// Gradient buffers for the leaves of a tape after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any flowed there.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when nothing flowed.
    pub fn tensor(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match self.get(var) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, var: Var) -> Vec<f64> {
        let n: usize = self.shapes[var.0].iter().product();
        self.grads[var.0].take().unwrap_or_else(|| vec![0.0; n])
    }
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    exec: Execution,
    dropout: Option<DropoutKey>,
    dropout_site: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape without a dropout stream; `dropout(.., training = true)` fails on it.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            exec: Execution::Sequential,
            dropout: None,
            dropout_site: 0,
        }
    }

    pub fn training(key: DropoutKey) -> Self {
        Tape {
            dropout: Some(key),
            ..Tape::new()
        }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded non-leaf operations.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----- elementwise -------------------------------------------------

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                op,
                format!("{:?} does not broadcast onto {:?}", sb, sa),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let bd = self.data(b);
        let nb = bd.len();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Tensor::new(self.shape(a).to_vec(), out).expect("binary shape")
    }

    /// `a + b`; `b` may be any trailing-suffix shape of `a` (scalars included).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let v = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("sub", a, b)?;
        let v = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let v = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|x| x * c).collect(),
        )
        .expect("scale shape");
        let rg = self.rg(a);
        self.push(v, Op::Scale { a, c }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = Tensor::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&x| x.max(0.0)).collect(),
        )
        .expect("relu shape");
        let rg = self.rg(a);
        self.push(v, Op::Relu { a }, rg)
    }

    // ----- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over the leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::shape("matmul", format!("cannot multiply {:?} by {:?}", sa, sb));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch());
            }
            batch.push(x.max(y));
        }
        let nbatch: usize = batch.iter().product();
        let (sta, stb, sto) = (strides(&pa), strides(&pb), strides(&batch));
        let mut a_batch = Vec::with_capacity(nbatch);
        let mut b_batch = Vec::with_capacity(nbatch);
        for flat in 0..nbatch {
            let (mut oa, mut ob) = (0, 0);
            for d in 0..rank {
                let i = (flat / sto[d]) % batch[d];
                if pa[d] != 1 {
                    oa += i * sta[d];
                }
                if pb[d] != 1 {
                    ob += i * stb[d];
                }
            }
            a_batch.push(oa);
            b_batch.push(ob);
        }
        let plan = BatchPlan {
            m,
            k,
            n,
            a_batch,
            b_batch,
        };
        let mut out = vec![0.0; nbatch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            let plan = &plan;
            for_each_chunk_mut(self.exec, &mut out, m * n, |bi, c| {
                let ao = plan.a_batch[bi] * m * k;
                let bo = plan.b_batch[bi] * k * n;
                matmul_nn(&ad[ao..ao + m * k], &bd[bo..bo + k * n], c, m, k, n);
            });
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, plan }, rg))
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sx.is_empty() || sw[0] != fan_in {
            return Err(Error::shape(
                "linear",
                format!("input {:?} against weight {:?}", sx, sw),
            ));
        }
        let fan_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for output width {}", self.shape(b), fan_out),
                ));
            }
        }
        let rows = self.value(x).len() / fan_in.max(1);
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bd);
            }
        }
        {
            let (xd, wd) = (self.data(x), self.data(w));
            let block = 64;
            for_each_chunk_mut(self.exec, &mut out, block * fan_out, |ci, c| {
                let r0 = ci * block;
                let r = c.len() / fan_out;
                matmul_nn(
                    &xd[r0 * fan_in..(r0 + r) * fan_in],
                    wd,
                    c,
                    r,
                    fan_in,
                    fan_out,
                );
            });
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = fan_out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    // ----- shape ops ---------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape).map_err(|_| {
            Error::shape("reshape", format!("{:?} into {:?}", self.shape(a), shape))
        })?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape { a }, rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation of rank {}", perm, shape.len()),
            ));
        }
        let (out_shape, out) = permute_data(self.data(a), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_lastdim", "no inputs"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if self.shape(first).is_empty() {
            return Err(Error::shape("concat_lastdim", "scalar input"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(Error::shape(
                    "concat_lastdim",
                    format!("{:?} vs leading {:?}", s, lead),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `idx` of the leading axis.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::shape("gather_rows", "scalar input"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {} out of range for {:?}", bad, shape),
            ));
        }
        let width: usize = shape[1..].iter().product();
        let d = self.data(a);
        let out: Vec<f64> = idx
            .iter()
            .flat_map(|&i| d[i * width..(i + 1) * width].iter().copied())
            .collect();
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean over `axes` (dropped from the output shape).
    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axes.iter().any(|&x| x >= shape.len()) {
            return Err(Error::shape(
                "reduce_mean",
                format!("axes {:?} for shape {:?}", axes, shape),
            ));
        }
        let (out_shape, map, count) = reduce_map(&shape, axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &x) in map.iter().zip(self.data(a)) {
            out[o] += x;
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(a);
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Mean { a, axes }, rg))
    }

    // ----- normalisation & attention helpers ---------------------------

    /// Softmax over the last axis, computed after subtracting the slice max.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let w = self.value(a).last_dim();
        if w == 0 {
            return Err(Error::shape("softmax_lastdim", "empty last axis"));
        }
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(w) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(self.shape(a).to_vec(), out)?,
            Op::Softmax { a },
            rg,
        ))
    }

    /// Layer normalisation over the last axis with the biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {}",
                    self.shape(gain),
                    self.shape(bias),
                    w
                ),
            ));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xd.len() / w;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (row[j] - mean) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let key = self.dropout.ok_or_else(|| {
            Error::Contract("training-mode dropout on a tape without a dropout key".into())
        })?;
        let site = self.dropout_site;
        self.dropout_site += 1;
        let factors = key.mask(site, self.value(a).len(), p);
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(&factors)
            .map(|(x, f)| x * f)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(self.shape(a).to_vec(), out)?,
            Op::Dropout { a, factors },
            rg,
        ))
    }

    /// Mean of neighbour rows along the second-to-last axis.
    ///
    /// `a` has shape `[.., N, d]`; every leading block of `N` rows is
    /// aggregated with the same neighbour lists. Empty neighbourhoods give
    /// the zero vector.
    pub fn scatter_mean_rows(&mut self, a: Var, neighbors: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[shape.len() - 2] != neighbors.len() {
            return Err(Error::shape(
                "scatter_mean_rows",
                format!("{:?} against {} neighbour lists", shape, neighbors.len()),
            ));
        }
        let n = neighbors.len();
        if let Some(bad) = neighbors.iter().flatten().find(|&&j| j >= n) {
            return Err(Error::shape(
                "scatter_mean_rows",
                format!("neighbour index {} out of range for {} nodes", bad, n),
            ));
        }
        let d = shape[shape.len() - 1];
        let xd = self.data(a);
        let mut out = vec![0.0; xd.len()];
        for (blk_in, blk_out) in xd.chunks(n * d).zip(out.chunks_mut(n * d)) {
            for (i, nb) in neighbors.iter().enumerate() {
                if nb.is_empty() {
                    continue;
                }
                let dst = &mut blk_out[i * d..(i + 1) * d];
                for &j in nb {
                    for (o, &v) in dst.iter_mut().zip(&blk_in[j * d..(j + 1) * d]) {
                        *o += v;
                    }
                }
                let inv = 1.0 / nb.len() as f64;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::NeighborMean { a, neighbors },
            rg,
        ))
    }

    /// `Σ mask · penalty(pred − target)` as a scalar.
    ///
    /// `target` and `mask` are constants; entries with `mask == 0` never
    /// touch the value or the gradient, whatever `target` holds there.
    pub fn penalty_sum(
        &mut self,
        pred: Var,
        target: &[f64],
        mask: &[f64],
        penalty: Penalty,
    ) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || mask.len() != n {
            return Err(Error::shape(
                "penalty_sum",
                format!(
                    "pred has {} entries, target {}, mask {}",
                    n,
                    target.len(),
                    mask.len()
                ),
            ));
        }
        let pd = self.data(pred);
        let mut s = 0.0;
        for i in 0..n {
            if mask[i] != 0.0 {
                s += mask[i] * penalty.value(pd[i] - target[i]);
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(s),
            Op::PenaltySum {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                penalty,
            },
            rg,
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(node, &g, &mut grads);
        }
        // only leaves keep their buffers
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_op(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let nb = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += sign * y;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let nb = bd.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * bd[i % nb];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += y * ad[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Relu { a } => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::MatMul { a, b, plan } => {
                let BatchPlan { m, k, n, .. } = *plan;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for (bi, &ao) in plan.a_batch.iter().enumerate() {
                        let bo = plan.b_batch[bi] * k * n;
                        let go = bi * m * n;
                        matmul_nt(
                            &g[go..go + m * n],
                            &bd[bo..bo + k * n],
                            &mut ga[ao * m * k..(ao + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (bi, &bo) in plan.b_batch.iter().enumerate() {
                        let ao = plan.a_batch[bi] * m * k;
                        let go = bi * m * n;
                        matmul_tn(
                            &ad[ao..ao + m * k],
                            &g[go..go + m * n],
                            &mut gb[bo * k * n..(bo + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (fi, fo) = (sw[0], sw[1]);
                let rows = g.len() / fo.max(1);
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gx) = self.acc(grads, *x) {
                    matmul_nt(g, wd, gx, rows, fo, fi);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    matmul_tn(xd, g, gw, rows, fi, fo);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in g.chunks(fo) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inv);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
                }
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { a, idx } => {
                let width = node.value.len() / idx.len().max(1);
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        ga[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean { a, axes } => {
                let (_, map, count) = reduce_map(self.shape(*a), axes);
                let inv = 1.0 / count as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &o) in ga.iter_mut().zip(&map) {
                        *x += g[o] * inv;
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), out) in g.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..w {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let w = node.value.last_dim();
                let gd = self.data(*gain);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxh = vec![0.0; w];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let xr = &xhat[r * w..(r + 1) * w];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..w {
                            dxh[j] = gr[j] * gd[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xr[j];
                        }
                        m1 /= w as f64;
                        m2 /= w as f64;
                        for j in 0..w {
                            gx[r * w + j] += is * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, xr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(w) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Dropout { a, factors } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * factors[i];
                    }
                }
            }
            Op::NeighborMean { a, neighbors } => {
                let n = neighbors.len();
                let d = node.value.last_dim();
                if let Some(ga) = self.acc(grads, *a) {
                    for (gblk, ablk) in g.chunks(n * d).zip(ga.chunks_mut(n * d)) {
                        for (i, nb) in neighbors.iter().enumerate() {
                            if nb.is_empty() {
                                continue;
                            }
                            let inv = 1.0 / nb.len() as f64;
                            let src = &gblk[i * d..(i + 1) * d];
                            for &j in nb {
                                for (x, y) in ablk[j * d..(j + 1) * d].iter_mut().zip(src) {
                                    *x += y * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::PenaltySum {
                pred,
                target,
                mask,
                penalty,
            } => {
                let pd = self.data(*pred);
                if let Some(gp) = self.acc(grads, *pred) {
                    for i in 0..gp.len() {
                        if mask[i] != 0.0 {
                            gp[i] += g[0] * mask[i] * penalty.derivative(pd[i] - target[i]);
                        }
                    }
                }
            }
        }
    }
}

/// Permute row-major `data` of `shape` so output axis `i` is input axis `perm[i]`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    if rank == 0 || data.is_empty() {
        return (out_shape, data.to_vec());
    }
    let mut out = Vec::with_capacity(data.len());
    let (inner, inner_stride) = (out_shape[rank - 1], src_strides[rank - 1]);
    // odometer over the outer axes, tracking the source offset incrementally
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..data.len() / inner {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Output shape, per-input-element output index, and reduction count.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&d| shape[d]).collect();
    let out_strides = strides(&out_shape);
    let in_strides = strides(shape);
    let numel: usize = shape.iter().product();
    let count = axes
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .iter()
        .map(|&d| shape[d])
        .product::<usize>()
        .max(1);
    let map = (0..numel)
        .map(|flat| {
            keep.iter()
                .zip(&out_strides)
                .map(|(&d, &os)| ((flat / in_strides[d]) % shape[d]) * os)
                .sum()
        })
        .collect();
    (out_shape, map, count)
}
