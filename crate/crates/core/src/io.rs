//! JSON-lines dataset files.
//!
//! One radargram per line:
//! `{"id", "lat", "lon", "phys": [5][N], "thickness": [T][N] (null = missing),
//! "adjacency": {"scheme": "chain", "k"}}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AdjacencySpec, LayerStackSample, COVARIATES, NODE_FEATURES};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    lat: Vec<f64>,
    lon: Vec<f64>,
    phys: Vec<Vec<f64>>,
    thickness: Vec<Vec<Option<f64>>>,
    adjacency: AdjacencySpec,
}

impl Record {
    fn from_sample(s: &LayerStackSample) -> Self {
        let (n, t) = (s.n_nodes(), s.n_layers());
        Record {
            id: s.sample_id.clone(),
            lat: (0..n).map(|i| s.lat(i)).collect(),
            lon: (0..n).map(|i| s.lon(i)).collect(),
            phys: (0..COVARIATES)
                .map(|j| (0..n).map(|i| s.covariate(i, j)).collect())
                .collect(),
            thickness: (0..t)
                .map(|l| (0..n).map(|i| s.thickness[s.idx(i, l)]).collect())
                .collect(),
            adjacency: s.adjacency_spec,
        }
    }

    fn into_sample(self) -> std::result::Result<LayerStackSample, String> {
        let n = self.lat.len();
        if self.lon.len() != n {
            return Err(format!("lon has {} entries, lat has {}", self.lon.len(), n));
        }
        if self.phys.len() != COVARIATES {
            return Err(format!(
                "phys has {} fields, expected {}",
                self.phys.len(),
                COVARIATES
            ));
        }
        if let Some(p) = self.phys.iter().find(|p| p.len() != n) {
            return Err(format!(
                "phys field has {} entries, expected {}",
                p.len(),
                n
            ));
        }
        let t = self.thickness.len();
        if let Some(l) = self.thickness.iter().find(|l| l.len() != n) {
            return Err(format!(
                "thickness layer has {} entries, expected {}",
                l.len(),
                n
            ));
        }
        let mut feats = Vec::with_capacity(n * NODE_FEATURES);
        for i in 0..n {
            feats.push(self.lat[i]);
            feats.push(self.lon[i]);
            feats.extend(self.phys.iter().map(|p| p[i]));
        }
        let mut thick = vec![None; n * t];
        for (l, layer) in self.thickness.iter().enumerate() {
            for (i, v) in layer.iter().enumerate() {
                thick[i * t + l] = *v;
            }
        }
        LayerStackSample::new(self.id, n, t, feats, thick, self.adjacency)
            .map_err(|e| e.to_string())
    }
}

pub fn sample_to_json_line(s: &LayerStackSample) -> Result<String> {
    Ok(serde_json::to_string(&Record::from_sample(s))?)
}

pub fn sample_from_json_line(line: &str) -> std::result::Result<LayerStackSample, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.into_sample()
}

pub fn write_jsonl(path: &Path, samples: &[LayerStackSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", sample_to_json_line(s)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a dataset; parse failures name the 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<LayerStackSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = sample_from_json_line(&line).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Write `contents` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_thickness_round_trips() {
        let feats = (0..3 * NODE_FEATURES).map(|i| i as f64 / 3.0).collect();
        let thick = vec![Some(1.5), None, Some(2.25), Some(0.1), None, Some(7.0)];
        let s =
            LayerStackSample::new("a", 3, 2, feats, thick, AdjacencySpec::Chain { k: 1 }).unwrap();
        let line = sample_to_json_line(&s).unwrap();
        assert!(line.contains("null"));
        assert_eq!(sample_from_json_line(&line).unwrap(), s);
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"id\":\"x\"}\n").unwrap();
        match read_jsonl(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
