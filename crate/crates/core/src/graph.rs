//! One radargram as a stack of per-layer spatial graphs.
//!
//! All `T` layers share the same `N` along-track nodes and the same chain
//! adjacency. Thickness is stored node-major (`n * T + t`); missing entries
//! are `None` and must be paired with a zero mask bit.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of node features: latitude, longitude and five covariates.
pub const NODE_FEATURES: usize = 7;
/// Number of physical covariates per node.
pub const COVARIATES: usize = 5;

/// Covariate order used in every file format.
pub const COVARIATE_NAMES: [&str; COVARIATES] = [
    "snow_mass_balance",
    "near_surface_temperature",
    "meltwater_refreezing",
    "melt_height_change",
    "snowpack_height",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum AdjacencySpec {
    /// Node `i` links to `i±1 ..= i±k`, clipped to the track.
    Chain { k: usize },
}

impl Default for AdjacencySpec {
    fn default() -> Self {
        AdjacencySpec::Chain { k: 2 }
    }
}

/// Neighbour lists, shared cheaply between samples and tapes.
pub type Neighbors = Arc<Vec<Vec<usize>>>;

pub fn build_adjacency(n_nodes: usize, spec: AdjacencySpec) -> Result<Vec<Vec<usize>>> {
    if n_nodes == 0 {
        return Err(Error::EmptyGraph);
    }
    let AdjacencySpec::Chain { k } = spec;
    if k == 0 {
        return Err(Error::Config("chain adjacency needs k >= 1".into()));
    }
    Ok((0..n_nodes)
        .map(|i| {
            let lo = i.saturating_sub(k);
            let hi = (i + k).min(n_nodes - 1);
            (lo..=hi).filter(|&j| j != i).collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStackSample {
    pub sample_id: String,
    n_nodes: usize,
    n_layers: usize,
    /// `N × 7`, row-major: lat, lon, covariates in [`COVARIATE_NAMES`] order.
    pub node_features: Vec<f64>,
    /// `N × T`, node-major.
    pub thickness: Vec<Option<f64>>,
    /// `N × T`, node-major.
    pub mask: Vec<bool>,
    pub adjacency_spec: AdjacencySpec,
    pub adjacency: Neighbors,
}

impl LayerStackSample {
    /// Assemble a sample; the mask is derived from which entries are present.
    pub fn new(
        sample_id: impl Into<String>,
        n_nodes: usize,
        n_layers: usize,
        node_features: Vec<f64>,
        thickness: Vec<Option<f64>>,
        adjacency_spec: AdjacencySpec,
    ) -> Result<Self> {
        if node_features.len() != n_nodes * NODE_FEATURES {
            return Err(Error::shape(
                "LayerStackSample",
                format!(
                    "{} node features for {} nodes",
                    node_features.len(),
                    n_nodes
                ),
            ));
        }
        if thickness.len() != n_nodes * n_layers {
            return Err(Error::shape(
                "LayerStackSample",
                format!(
                    "{} thickness entries for {}×{}",
                    thickness.len(),
                    n_nodes,
                    n_layers
                ),
            ));
        }
        let adjacency = Arc::new(build_adjacency(n_nodes, adjacency_spec)?);
        let mask = thickness.iter().map(Option::is_some).collect();
        Ok(LayerStackSample {
            sample_id: sample_id.into(),
            n_nodes,
            n_layers,
            node_features,
            thickness,
            mask,
            adjacency_spec,
            adjacency,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn idx(&self, node: usize, layer: usize) -> usize {
        node * self.n_layers + layer
    }

    pub fn lat(&self, node: usize) -> f64 {
        self.node_features[node * NODE_FEATURES]
    }

    pub fn lon(&self, node: usize) -> f64 {
        self.node_features[node * NODE_FEATURES + 1]
    }

    pub fn covariate(&self, node: usize, j: usize) -> f64 {
        self.node_features[node * NODE_FEATURES + 2 + j]
    }

    /// Mask as `0.0 / 1.0` floats, node-major.
    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect()
    }

    /// Thickness with missing entries replaced by `fill`. Only meaningful
    /// together with [`Self::mask_f64`].
    pub fn thickness_filled(&self, fill: f64) -> Vec<f64> {
        self.thickness.iter().map(|t| t.unwrap_or(fill)).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Same sample with a new thickness matrix (mask re-derived).
    pub fn with_thickness(&self, thickness: Vec<Option<f64>>) -> Result<Self> {
        if thickness.len() != self.thickness.len() {
            return Err(Error::shape(
                "with_thickness",
                format!(
                    "{} entries, expected {}",
                    thickness.len(),
                    self.thickness.len()
                ),
            ));
        }
        let mut s = self.clone();
        s.mask = thickness.iter().map(Option::is_some).collect();
        s.thickness = thickness;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    MaskWithoutValue {
        node: usize,
        layer: usize,
    },
    ValueWithoutMask {
        node: usize,
        layer: usize,
    },
    NonPositiveThickness {
        node: usize,
        layer: usize,
        value: f64,
    },
    NonFiniteFeature {
        node: usize,
        feature: usize,
    },
    AsymmetricEdge {
        from: usize,
        to: usize,
    },
    SelfLoop {
        node: usize,
    },
    NeighborOutOfRange {
        node: usize,
        neighbor: usize,
    },
    ShapeMismatch(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_sample(s: &LayerStackSample) -> ValidationReport {
    let mut v = Vec::new();
    let (n, t) = (s.n_nodes, s.n_layers);
    if s.node_features.len() != n * NODE_FEATURES
        || s.thickness.len() != n * t
        || s.mask.len() != n * t
        || s.adjacency.len() != n
    {
        v.push(Violation::ShapeMismatch(format!(
            "features {}, thickness {}, mask {}, adjacency {} for N={n}, T={t}",
            s.node_features.len(),
            s.thickness.len(),
            s.mask.len(),
            s.adjacency.len()
        )));
        return ValidationReport { violations: v };
    }
    for node in 0..n {
        for f in 0..NODE_FEATURES {
            if !s.node_features[node * NODE_FEATURES + f].is_finite() {
                v.push(Violation::NonFiniteFeature { node, feature: f });
            }
        }
        for layer in 0..t {
            let i = s.idx(node, layer);
            match (s.mask[i], s.thickness[i]) {
                (true, None) => v.push(Violation::MaskWithoutValue { node, layer }),
                (false, Some(_)) => v.push(Violation::ValueWithoutMask { node, layer }),
                (true, Some(x)) if !(x.is_finite() && x > 0.0) => {
                    v.push(Violation::NonPositiveThickness {
                        node,
                        layer,
                        value: x,
                    })
                }
                _ => {}
            }
        }
    }
    for (i, nb) in s.adjacency.iter().enumerate() {
        for &j in nb {
            if j >= n {
                v.push(Violation::NeighborOutOfRange {
                    node: i,
                    neighbor: j,
                });
            } else if j == i {
                v.push(Violation::SelfLoop { node: i });
            } else if !s.adjacency[j].contains(&i) {
                v.push(Violation::AsymmetricEdge { from: i, to: j });
            }
        }
    }
    ValidationReport { violations: v }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub observed: usize,
    pub missing: usize,
    pub fully_missing: bool,
}

pub fn layer_observation_summary(s: &LayerStackSample) -> Vec<LayerSummary> {
    (0..s.n_layers)
        .map(|t| {
            let observed = (0..s.n_nodes).filter(|&n| s.mask[s.idx(n, t)]).count();
            LayerSummary {
                observed,
                missing: s.n_nodes - observed,
                fully_missing: observed == 0,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, t: usize) -> LayerStackSample {
        let feats = (0..n * NODE_FEATURES).map(|i| i as f64 * 0.1).collect();
        let thick = (0..n * t).map(|i| Some(1.0 + i as f64)).collect();
        LayerStackSample::new("s", n, t, feats, thick, AdjacencySpec::Chain { k: 1 }).unwrap()
    }

    #[test]
    fn chain_adjacency_examples() {
        let a = build_adjacency(3, AdjacencySpec::Chain { k: 1 }).unwrap();
        assert_eq!(a, vec![vec![1], vec![0, 2], vec![1]]);
        assert_eq!(
            build_adjacency(1, AdjacencySpec::Chain { k: 1 }).unwrap(),
            vec![Vec::<usize>::new()]
        );
        let a = build_adjacency(5, AdjacencySpec::Chain { k: 2 }).unwrap();
        assert_eq!(a[2], vec![0, 1, 3, 4]);
        assert!(matches!(
            build_adjacency(0, AdjacencySpec::Chain { k: 1 }),
            Err(Error::EmptyGraph)
        ));
    }

    #[test]
    fn degrees_interior_and_endpoints() {
        let a = build_adjacency(10, AdjacencySpec::Chain { k: 3 }).unwrap();
        assert_eq!(a[0].len(), 3);
        assert_eq!(a[9].len(), 3);
        assert_eq!(a[5].len(), 6);
    }

    #[test]
    fn consistent_sample_validates() {
        assert!(validate_sample(&sample(4, 3)).is_ok());
    }

    #[test]
    fn mask_on_missing_value_is_reported() {
        let mut s = sample(4, 3);
        let i = s.idx(2, 1);
        s.thickness[i] = None;
        let r = validate_sample(&s);
        assert_eq!(
            r.violations,
            vec![Violation::MaskWithoutValue { node: 2, layer: 1 }]
        );
    }

    #[test]
    fn asymmetric_adjacency_is_reported() {
        let mut s = sample(3, 2);
        let mut adj = (*s.adjacency).clone();
        adj[0].push(2);
        s.adjacency = Arc::new(adj);
        let r = validate_sample(&s);
        assert_eq!(
            r.violations,
            vec![Violation::AsymmetricEdge { from: 0, to: 2 }]
        );
    }

    #[test]
    fn non_finite_covariate_is_reported() {
        let mut s = sample(3, 2);
        s.node_features[NODE_FEATURES + 4] = f64::NAN;
        assert_eq!(
            validate_sample(&s).violations,
            vec![Violation::NonFiniteFeature {
                node: 1,
                feature: 4
            }]
        );
    }

    #[test]
    fn summary_counts() {
        let s = sample(4, 2);
        let mut thick = s.thickness.clone();
        for n in 0..4 {
            thick[s.idx(n, 1)] = None;
        }
        thick[s.idx(1, 0)] = None;
        thick[s.idx(2, 0)] = None;
        let s = s.with_thickness(thick).unwrap();
        let sum = layer_observation_summary(&s);
        assert_eq!(
            sum[0],
            LayerSummary {
                observed: 2,
                missing: 2,
                fully_missing: false
            }
        );
        assert!(sum[1].fully_missing);
        assert!(layer_observation_summary(&sample(4, 2))
            .iter()
            .all(|l| l.observed == 4 && !l.fully_missing));
    }
}
