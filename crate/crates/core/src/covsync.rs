//! Gridded covariates → radar nodes.
//!
//! Each gridded field is triangulated (Bowyer–Watson with a super-triangle)
//! and sampled at node locations with barycentric weights. Queries outside
//! the convex hull fall back to the nearest grid point and are flagged.
//! Coordinates are planar: `x` is longitude, `y` latitude.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::graph::COVARIATES;

pub type Point = [f64; 2];

/// Guard on the in-circle determinant, in normalised coordinates.
const INCIRCLE_TOL: f64 = 1e-12;
/// Barycentric weights above `-BARY_TOL` count as inside a triangle.
const BARY_TOL: f64 = 1e-12;
const SUPER_SCALE: f64 = 1e3;

/// Twice the signed area of `(a, b, c)`; positive when counter-clockwise.
pub fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// In-circle determinant; positive when `d` is strictly inside the
/// circumcircle of the counter-clockwise triangle `(a, b, c)`.
pub fn in_circle(a: Point, b: Point, c: Point, d: Point) -> f64 {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx)
}

#[derive(Clone, Debug)]
pub struct Triangulation {
    points: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    /// `neighbors[t][e]` is the triangle across the edge opposite vertex `e`.
    neighbors: Vec<[Option<usize>; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interpolated {
    pub value: f64,
    pub extrapolated: bool,
}

impl Triangulation {
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn neighbors(&self) -> &[[Option<usize>; 3]] {
        &self.neighbors
    }

    /// Triangle containing `q` and its barycentric weights.
    pub fn locate(&self, q: Point) -> Option<(usize, [f64; 3])> {
        self.triangles
            .iter()
            .enumerate()
            .find_map(|(i, &[a, b, c])| {
                let (pa, pb, pc) = (self.points[a], self.points[b], self.points[c]);
                let area = orient(pa, pb, pc);
                let wa = orient(q, pb, pc) / area;
                let wb = orient(pa, q, pc) / area;
                let wc = 1.0 - wa - wb;
                (wa >= -BARY_TOL && wb >= -BARY_TOL && wc >= -BARY_TOL).then_some((i, [wa, wb, wc]))
            })
    }

    fn nearest(&self, q: Point) -> usize {
        let d2 = |p: &Point| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        (0..self.points.len())
            .min_by(|&i, &j| d2(&self.points[i]).total_cmp(&d2(&self.points[j])))
            .expect("triangulation has points")
    }

    /// Piecewise-linear interpolation of per-point `values` at `q`.
    pub fn interpolate(&self, values: &[f64], q: Point) -> Interpolated {
        match self.locate(q) {
            Some((t, w)) => {
                let [a, b, c] = self.triangles[t];
                Interpolated {
                    value: w[0] * values[a] + w[1] * values[b] + w[2] * values[c],
                    extrapolated: false,
                }
            }
            None => Interpolated {
                value: values[self.nearest(q)],
                extrapolated: true,
            },
        }
    }
}

pub fn delaunay(points: &[Point]) -> Result<Triangulation> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Geometry(format!("need at least 3 points, got {n}")));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Geometry("non-finite coordinate".into()));
    }
    // normalise into the unit box
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if extent == 0.0 {
        return Err(Error::Geometry("all points coincide".into()));
    }
    let mut pts: Vec<Point> = points
        .iter()
        .map(|p| [(p[0] - lo[0]) / extent, (p[1] - lo[1]) / extent])
        .collect();

    let mut sorted: Vec<usize> = (0..n).collect();
    sorted.sort_by(|&i, &j| {
        pts[i][0]
            .total_cmp(&pts[j][0])
            .then(pts[i][1].total_cmp(&pts[j][1]))
    });
    for w in sorted.windows(2) {
        if pts[w[0]] == pts[w[1]] {
            return Err(Error::Geometry(format!(
                "duplicate points {} and {}",
                w[0], w[1]
            )));
        }
    }
    let far = (1..n)
        .max_by(|&i, &j| {
            let d = |k: usize| (pts[k][0] - pts[0][0]).powi(2) + (pts[k][1] - pts[0][1]).powi(2);
            d(i).total_cmp(&d(j))
        })
        .unwrap();
    if (0..n).all(|k| orient(pts[0], pts[far], pts[k]).abs() <= INCIRCLE_TOL) {
        return Err(Error::Geometry("all points are collinear".into()));
    }

    // super-triangle enclosing the unit box
    let s = SUPER_SCALE;
    pts.push([-s, -s]);
    pts.push([s + 0.5, -s]);
    pts.push([0.5, s]);
    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];

    for p in 0..n {
        let q = pts[p];
        let (bad, keep): (Vec<[usize; 3]>, Vec<[usize; 3]>) = tris
            .into_iter()
            .partition(|&[a, b, c]| in_circle(pts[a], pts[b], pts[c], q) > INCIRCLE_TOL);
        // cavity boundary: edges of bad triangles not shared with another bad one
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for &[a, b, c] in &bad {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                *edges.entry((u.min(v), u.max(v))).or_default() += 1;
            }
        }
        tris = keep;
        for &[a, b, c] in &bad {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                if edges[&(u.min(v), u.max(v))] == 1 {
                    let t = if orient(pts[u], pts[v], q) > 0.0 {
                        [u, v, p]
                    } else {
                        [v, u, p]
                    };
                    tris.push(t);
                }
            }
        }
    }
    tris.retain(|t| t.iter().all(|&v| v < n));
    tris.sort_unstable();

    let mut edge_owner: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
    for (ti, t) in tris.iter().enumerate() {
        for e in 0..3 {
            let (u, v) = (t[(e + 1) % 3], t[(e + 2) % 3]);
            edge_owner
                .entry((u.min(v), u.max(v)))
                .or_default()
                .push((ti, e));
        }
    }
    let mut neighbors = vec![[None; 3]; tris.len()];
    for owners in edge_owner.values() {
        if let [(t1, e1), (t2, e2)] = owners[..] {
            neighbors[t1][e1] = Some(t2);
            neighbors[t2][e2] = Some(t1);
        }
    }
    Ok(Triangulation {
        points: points.to_vec(),
        triangles: tris,
        neighbors,
    })
}

/// One covariate sampled on scattered grid points.
#[derive(Clone, Debug)]
pub struct GriddedField {
    pub name: String,
    pub points: Vec<Point>,
    pub values: Vec<f64>,
}

impl GriddedField {
    pub fn new(name: impl Into<String>, points: Vec<Point>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::Input(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("field values must be finite".into()));
        }
        Ok(GriddedField {
            name: name.into(),
            points,
            values,
        })
    }

    /// Parse `x,y,value` CSV text (header required).
    pub fn from_csv_str(name: &str, text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or_default();
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["x", "y", "value"] {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header x,y,value, got {header:?}"),
            });
        }
        let (mut points, mut values) = (Vec::new(), Vec::new());
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let parts: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(e.to_string()))?;
            let [x, y, v] = parts[..] else {
                return Err(parse_err(format!(
                    "expected 3 columns, got {}",
                    parts.len()
                )));
            };
            points.push([x, y]);
            values.push(v);
        }
        GriddedField::new(name, points, values)
    }
}

/// Covariates at every node plus per-entry extrapolation flags, both `N × 5`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncedCovariates {
    pub values: Vec<f64>,
    pub extrapolated: Vec<bool>,
}

impl SyncedCovariates {
    pub fn any_extrapolated(&self) -> bool {
        self.extrapolated.iter().any(|&e| e)
    }
}

/// Sample five fields at node `(lat, lon)` positions.
pub fn sync_covariates(
    fields: &[GriddedField],
    nodes: &[(f64, f64)],
    exec: Execution,
) -> Result<SyncedCovariates> {
    if fields.len() != COVARIATES {
        return Err(Error::Config(format!(
            "expected exactly {} covariate fields, got {}",
            COVARIATES,
            fields.len()
        )));
    }
    let tris = fields
        .iter()
        .map(|f| delaunay(&f.points))
        .collect::<Result<Vec<_>>>()?;
    let rows = map_ordered(exec, nodes, |_, &(lat, lon)| {
        fields
            .iter()
            .zip(&tris)
            .map(|(f, t)| t.interpolate(&f.values, [lon, lat]))
            .collect::<Vec<_>>()
    });
    let mut values = Vec::with_capacity(nodes.len() * COVARIATES);
    let mut extrapolated = Vec::with_capacity(nodes.len() * COVARIATES);
    for r in rows {
        for i in r {
            values.push(i.value);
            extrapolated.push(i.extrapolated);
        }
    }
    Ok(SyncedCovariates {
        values,
        extrapolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_points_one_triangle() {
        let t = delaunay(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(t.triangles().len(), 1);
        let [a, b, c] = t.triangles()[0];
        assert!(orient(t.points()[a], t.points()[b], t.points()[c]) > 0.0);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(matches!(
            delaunay(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]),
            Err(Error::Geometry(_))
        ));
        assert!(matches!(
            delaunay(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]),
            Err(Error::Geometry(_))
        ));
        assert!(delaunay(&[[0.0, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn unit_square_two_triangles_share_diagonal() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let t = delaunay(&pts).unwrap();
        assert_eq!(t.triangles().len(), 2);
        let shared: Vec<usize> = t.triangles()[0]
            .iter()
            .copied()
            .filter(|v| t.triangles()[1].contains(v))
            .collect();
        assert_eq!(shared.len(), 2);
        let diag = (shared[0].min(shared[1]), shared[0].max(shared[1]));
        assert!(diag == (0, 2) || diag == (1, 3));
        for tri in t.triangles() {
            for (k, &p) in pts.iter().enumerate() {
                if tri.contains(&k) {
                    continue;
                }
                let d = in_circle(pts[tri[0]], pts[tri[1]], pts[tri[2]], p);
                assert!(d <= 1e-9, "cocircular point strictly inside: {d}");
            }
        }
        assert!(t
            .neighbors()
            .iter()
            .all(|n| n.iter().filter(|x| x.is_some()).count() == 1));
    }

    #[test]
    fn interpolation_at_vertex_and_outside() {
        let pts = vec![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]];
        let vals = vec![1.0, 2.0, 3.0, 4.0];
        let t = delaunay(&pts).unwrap();
        for (p, v) in pts.iter().zip(&vals) {
            let r = t.interpolate(&vals, *p);
            assert!((r.value - v).abs() < 1e-15 && !r.extrapolated);
        }
        let r = t.interpolate(&vals, [5.0, 5.5]);
        assert_eq!(
            r,
            Interpolated {
                value: 4.0,
                extrapolated: true
            }
        );
    }

    #[test]
    fn sync_needs_five_fields() {
        let f =
            GriddedField::new("a", vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![0.0; 3]).unwrap();
        let err = sync_covariates(&vec![f; 4], &[(0.1, 0.1)], Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn csv_parsing() {
        let p = Path::new("f.csv");
        let f = GriddedField::from_csv_str("smb", "x,y,value\n0,0,1\n1,0,2\n0,1,3\n", p).unwrap();
        assert_eq!(f.values, vec![1.0, 2.0, 3.0]);
        match GriddedField::from_csv_str("smb", "x,y,value\n0,0,1\n1,zero,2\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
