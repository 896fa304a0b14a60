//! Layer boundary curves from a completed stack, as CSV and SVG.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use icestack::LayerStackSample;

pub const COMPLETED_COLOR: &str = "#ff7f0e";
pub const OBSERVED_COLOR: &str = "#1f3b73";

/// Lower boundary of every layer: cumulative thickness from the top, `T × N`.
pub struct Traces {
    pub n_nodes: usize,
    pub n_layers: usize,
    pub depth: Vec<f64>,
    pub observed: Vec<bool>,
}

impl Traces {
    pub fn new(completed: &LayerStackSample, original: Option<&LayerStackSample>) -> Result<Self> {
        let (n, t) = (completed.n_nodes(), completed.n_layers());
        if !completed.is_fully_observed() {
            bail!(crate::UsageError(format!(
                "sample {} is not completed",
                completed.sample_id
            )));
        }
        if let Some(o) = original {
            if o.n_nodes() != n || o.n_layers() != t {
                bail!(crate::UsageError(format!(
                    "original sample {} has a different shape",
                    o.sample_id
                )));
            }
        }
        let mut depth = vec![0.0; t * n];
        let mut observed = vec![false; t * n];
        for i in 0..n {
            let mut acc = 0.0;
            for l in 0..t {
                acc += completed.thickness[completed.idx(i, l)].unwrap_or(0.0);
                depth[l * n + i] = acc;
                observed[l * n + i] = original.is_some_and(|o| o.mask[o.idx(i, l)]);
            }
        }
        Ok(Traces {
            n_nodes: n,
            n_layers: t,
            depth,
            observed,
        })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("layer,node,depth,observed\n");
        for l in 0..self.n_layers {
            for i in 0..self.n_nodes {
                let k = l * self.n_nodes + i;
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    l, i, self.depth[k], self.observed[k] as u8
                );
            }
        }
        s
    }

    /// One orange polyline per layer plus dark paths over observed runs.
    pub fn svg(&self, width: f64, height: f64) -> String {
        let margin = 48.0;
        let max_depth = self.depth.iter().cloned().fold(0.0, f64::max).max(1e-9);
        let xs = |i: usize| {
            let span = (self.n_nodes.max(2) - 1) as f64;
            margin + (width - 2.0 * margin) * i as f64 / span
        };
        let ys = |d: f64| margin + (height - 2.0 * margin) * d / max_depth;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let (x0, x1, y0, y1) = (margin, width - margin, margin, height - margin);
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">along-track node</text>"#,
            (x0 + x1) / 2.0,
            height - 12.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">depth (px)</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">0</text>"#,
            x0 - 4.0,
            y0 + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.0}</text>"#,
            x0 - 4.0,
            y1 + 4.0,
            max_depth
        );

        for l in 0..self.n_layers {
            let row = &self.depth[l * self.n_nodes..(l + 1) * self.n_nodes];
            let pts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, &d)| format!("{:.2},{:.2}", xs(i), ys(d)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline data-layer="{l}" fill="none" stroke="{COMPLETED_COLOR}" stroke-width="1.2" points="{}"/>"#,
                pts.join(" ")
            );
        }
        for l in 0..self.n_layers {
            let base = l * self.n_nodes;
            let mut d = String::new();
            let mut open = false;
            for i in 0..self.n_nodes {
                if self.observed[base + i] {
                    let cmd = if open { 'L' } else { 'M' };
                    let _ = write!(d, "{cmd}{:.2},{:.2} ", xs(i), ys(self.depth[base + i]));
                    open = true;
                } else {
                    open = false;
                }
            }
            if !d.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<path data-layer="{l}" fill="none" stroke="{OBSERVED_COLOR}" stroke-width="2" d="{}"/>"#,
                    d.trim_end()
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}
