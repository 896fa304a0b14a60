//! Triangulation properties checked by brute force.

use icestack::covsync::{delaunay, in_circle, orient, sync_covariates, GriddedField, Point};
use icestack::Execution;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(seed: u64, n: usize) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect()
}

/// Hull vertices: points that are an endpoint of some edge with every other
/// point strictly on one side.
fn brute_force_hull_size(pts: &[Point]) -> usize {
    let n = pts.len();
    let mut on_hull = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if (0..n)
                .filter(|&k| k != i && k != j)
                .all(|k| orient(pts[i], pts[j], pts[k]) > 0.0)
            {
                on_hull[i] = true;
                on_hull[j] = true;
            }
        }
    }
    on_hull.iter().filter(|&&h| h).count()
}

#[test]
fn empty_circumcircle_on_random_sets() {
    for seed in 0..20 {
        let pts = random_points(seed, 50);
        let t = delaunay(&pts).unwrap();
        for tri in t.triangles() {
            let [a, b, c] = *tri;
            assert!(orient(pts[a], pts[b], pts[c]) > 0.0, "triangle not ccw");
            for (k, &p) in pts.iter().enumerate() {
                if tri.contains(&k) {
                    continue;
                }
                let d = in_circle(pts[a], pts[b], pts[c], p);
                assert!(
                    d <= 1e-9,
                    "seed {seed}: point {k} inside circumcircle of {tri:?} ({d})"
                );
            }
        }
    }
}

#[test]
fn euler_triangle_count() {
    for seed in 100..110 {
        let pts = random_points(seed, 50);
        let t = delaunay(&pts).unwrap();
        let h = brute_force_hull_size(&pts);
        assert_eq!(t.triangles().len(), 2 * 50 - 2 - h, "seed {seed}");
    }
}

#[test]
fn triangle_adjacency_is_mutual() {
    let pts = random_points(5, 40);
    let t = delaunay(&pts).unwrap();
    for (i, nb) in t.neighbors().iter().enumerate() {
        for j in nb.iter().flatten() {
            assert!(t.neighbors()[*j].contains(&Some(i)));
        }
    }
}

#[test]
fn affine_field_reproduced_in_hull() {
    let f = |p: Point| 2.0 * p[0] + 3.0 * p[1] + 1.0;
    for seed in 0..20 {
        let pts = random_points(seed, 50);
        let vals: Vec<f64> = pts.iter().map(|&p| f(p)).collect();
        let t = delaunay(&pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let mut inside = 0;
        for _ in 0..200 {
            let q = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let r = t.interpolate(&vals, q);
            if !r.extrapolated {
                inside += 1;
                assert!((r.value - f(q)).abs() <= 1e-10);
            }
        }
        assert!(inside > 100);
    }
}

#[test]
fn continuous_across_shared_edges() {
    let pts = random_points(42, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let vals: Vec<f64> = pts.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
    let t = delaunay(&pts).unwrap();
    for (ti, nb) in t.neighbors().iter().enumerate() {
        for (e, other) in nb.iter().enumerate() {
            if other.is_none() {
                continue;
            }
            let tri = t.triangles()[ti];
            let (u, v) = (pts[tri[(e + 1) % 3]], pts[tri[(e + 2) % 3]]);
            let mid = [(u[0] + v[0]) / 2.0, (u[1] + v[1]) / 2.0];
            let len = ((v[0] - u[0]).powi(2) + (v[1] - u[1]).powi(2)).sqrt();
            let normal = [-(v[1] - u[1]) / len, (v[0] - u[0]) / len];
            let h = 5e-10;
            let q1 = [mid[0] + h * normal[0], mid[1] + h * normal[1]];
            let q2 = [mid[0] - h * normal[0], mid[1] - h * normal[1]];
            let (a, b) = (t.interpolate(&vals, q1), t.interpolate(&vals, q2));
            assert!((a.value - b.value).abs() <= 1e-6);
        }
    }
}

#[test]
fn sync_reproduces_linear_covariate_and_grid_values() {
    let mut grid = Vec::new();
    for i in 0..12 {
        for j in 0..10 {
            grid.push([-50.0 + i as f64 * 2.0, 65.0 + j as f64 * 1.5]);
        }
    }
    let lin = |p: Point| 0.3 * p[0] - 1.2 * p[1] + 7.0;
    let fields: Vec<GriddedField> = (0..5)
        .map(|k| {
            let vals = grid
                .iter()
                .map(|&p| {
                    if k == 2 {
                        lin(p)
                    } else {
                        (p[0] * 0.1 + k as f64).sin() + p[1]
                    }
                })
                .collect();
            GriddedField::new(format!("f{k}"), grid.clone(), vals).unwrap()
        })
        .collect();

    // nodes on grid points: exact values
    let nodes: Vec<(f64, f64)> = grid.iter().step_by(7).map(|p| (p[1], p[0])).collect();
    let out = sync_covariates(&fields, &nodes, Execution::Parallel).unwrap();
    assert!(!out.any_extrapolated());
    for (n, &(lat, lon)) in nodes.iter().enumerate() {
        let gi = grid.iter().position(|p| *p == [lon, lat]).unwrap();
        for k in 0..5 {
            assert!((out.values[n * 5 + k] - fields[k].values[gi]).abs() < 1e-12);
        }
    }

    // nodes off-grid inside the hull: linear field reproduced
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let nodes: Vec<(f64, f64)> = (0..100)
        .map(|_| (rng.random_range(66.0..78.0), rng.random_range(-49.0..-29.0)))
        .collect();
    let out = sync_covariates(&fields, &nodes, Execution::Sequential).unwrap();
    assert!(!out.any_extrapolated());
    for (n, &(lat, lon)) in nodes.iter().enumerate() {
        assert!((out.values[n * 5 + 2] - lin([lon, lat])).abs() <= 1e-10);
    }
}

proptest! {
    #[test]
    fn linear_reproduction_any_affine(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, seed in 0u64..1000) {
        let pts = random_points(seed, 25);
        let vals: Vec<f64> = pts.iter().map(|p| a * p[0] + b * p[1] + c).collect();
        let t = delaunay(&pts).unwrap();
        let centroid = [0.5, 0.5];
        let r = t.interpolate(&vals, centroid);
        if !r.extrapolated {
            prop_assert!((r.value - (a * 0.5 + b * 0.5 + c)).abs() <= 1e-10);
        }
    }
}
