//! Turning samples into standardized `[T, N, F]` feature tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerStackSample, Neighbors, NODE_FEATURES};
use crate::tensor::Tensor;

/// Which node columns feed the spatial encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// lat, lon and the five covariates.
    #[default]
    Physical,
    /// lat and lon only.
    Coordinates,
}

impl FeatureSet {
    pub fn columns(self) -> &'static [usize] {
        match self {
            FeatureSet::Physical => &[0, 1, 2, 3, 4, 5, 6],
            FeatureSet::Coordinates => &[0, 1],
        }
    }
}

/// What the model sees per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// Shared node features on every layer.
    Completion { features: FeatureSet },
    /// All seven node features plus the layer's thickness for the first
    /// `shallow_count` layers (zero, i.e. the standardized mean, below).
    DeepLayer { shallow_count: usize },
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec::Completion {
            features: FeatureSet::Physical,
        }
    }
}

impl InputSpec {
    pub fn width(&self) -> usize {
        match self {
            InputSpec::Completion { features } => features.columns().len(),
            InputSpec::DeepLayer { .. } => NODE_FEATURES + 1,
        }
    }

    fn raw_row(&self, s: &LayerStackSample, node: usize) -> Vec<f64> {
        let row = &s.node_features[node * NODE_FEATURES..(node + 1) * NODE_FEATURES];
        match self {
            InputSpec::Completion { features } => {
                features.columns().iter().map(|&c| row[c]).collect()
            }
            InputSpec::DeepLayer { .. } => row.to_vec(),
        }
    }
}

/// Per-feature z-scoring fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Standardizer {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Population statistics; constant columns get unit scale.
    pub fn fit(spec: &InputSpec, samples: &[&LayerStackSample]) -> Result<Self> {
        let width = spec.width();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); width];
        for s in samples {
            for i in 0..s.n_nodes() {
                for (c, v) in spec.raw_row(s, i).into_iter().enumerate() {
                    columns[c].push(v);
                }
            }
            if let InputSpec::DeepLayer { shallow_count } = spec {
                for i in 0..s.n_nodes() {
                    for t in 0..(*shallow_count).min(s.n_layers()) {
                        if let Some(v) = s.thickness[s.idx(i, t)] {
                            columns[NODE_FEATURES].push(v);
                        }
                    }
                }
            }
        }
        if columns.iter().any(Vec::is_empty) {
            return Err(Error::Input(
                "cannot fit feature statistics on empty data".into(),
            ));
        }
        let (mean, std) = columns
            .iter()
            .map(|col| {
                let n = col.len() as f64;
                let m = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                let sd = var.sqrt();
                (m, if sd > 1e-12 { sd } else { 1.0 })
            })
            .unzip();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, c: usize, v: f64) -> f64 {
        (v - self.mean[c]) / self.std[c]
    }
}

/// Standardized features `[T, N, F]` plus the graph.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub features: Tensor,
    pub neighbors: Neighbors,
}

impl ModelInput {
    pub fn n_layers(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.features.shape()[1]
    }
}

pub fn build_input(
    spec: &InputSpec,
    stats: &Standardizer,
    s: &LayerStackSample,
) -> Result<ModelInput> {
    let width = spec.width();
    if stats.mean.len() != width || stats.std.len() != width {
        return Err(Error::shape(
            "build_input",
            format!("{} statistics for {} features", stats.mean.len(), width),
        ));
    }
    let (n, t) = (s.n_nodes(), s.n_layers());
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            spec.raw_row(s, i)
                .into_iter()
                .enumerate()
                .map(|(c, v)| stats.apply(c, v))
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(t * n * width);
    for l in 0..t {
        for (i, row) in rows.iter().enumerate() {
            data.extend_from_slice(row);
            if let InputSpec::DeepLayer { shallow_count } = spec {
                if l < *shallow_count {
                    let v = s.thickness[s.idx(i, l)].ok_or_else(|| {
                        Error::Input(format!(
                            "sample {}: shallow layer {} missing at node {}",
                            s.sample_id, l, i
                        ))
                    })?;
                    data.push(stats.apply(NODE_FEATURES, v));
                } else {
                    data.push(0.0);
                }
            }
        }
    }
    Ok(ModelInput {
        features: Tensor::new(vec![t, n, width], data)?,
        neighbors: s.adjacency.clone(),
    })
}
