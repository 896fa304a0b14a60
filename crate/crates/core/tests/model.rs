use std::sync::Arc;

use icestack::gradcheck::{run_gradcheck, GradcheckConfig};
use icestack::graph::{build_adjacency, AdjacencySpec};
use icestack::model::{
    encoder_layer, positional_encoding, sage_layer, GraphTransformer, ModelConfig, ModelInput,
    ModelParams,
};
use icestack::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Frozen from an independent count over the default layer shapes.
const DEFAULT_PARAM_COUNT: usize = 3_227_649;

fn small() -> ModelConfig {
    ModelConfig {
        d_s: 6,
        d_t: 8,
        heads: 2,
        encoder_layers: 2,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let deg = rng.random_range(0..5usize);
            (0..deg)
                .map(|_| rng.random_range(0..n))
                .filter(|&j| j != i)
                .collect()
        })
        .collect()
}

fn input(rng: &mut ChaCha8Rng, n: usize, t: usize, f: usize, graph: Vec<Vec<usize>>) -> ModelInput {
    let node = random_tensor(rng, &[n, f]);
    let mut data = Vec::new();
    for _ in 0..t {
        data.extend_from_slice(node.data());
    }
    ModelInput {
        features: Tensor::new(vec![t, n, f], data).unwrap(),
        neighbors: Arc::new(graph),
    }
}

/// Per-node loop: W1·x_i + W2·mean(x_j) + b.
fn brute_sage(
    x: &[Vec<f64>],
    graph: &[Vec<usize>],
    w1: &Tensor,
    w2: &Tensor,
    b: &Tensor,
    relu: bool,
) -> Vec<Vec<f64>> {
    let (d_in, d_out) = (w1.shape()[0], w1.shape()[1]);
    x.iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut mean = vec![0.0; d_in];
            for &j in &graph[i] {
                for c in 0..d_in {
                    mean[c] += x[j][c];
                }
            }
            if !graph[i].is_empty() {
                for v in &mut mean {
                    *v /= graph[i].len() as f64;
                }
            }
            (0..d_out)
                .map(|o| {
                    let mut s = b.data()[o];
                    for c in 0..d_in {
                        s += w1.get(&[c, o]) * xi[c] + w2.get(&[c, o]) * mean[c];
                    }
                    if relu {
                        s.max(0.0)
                    } else {
                        s
                    }
                })
                .collect()
        })
        .collect()
}

fn run_sage(
    x: &Tensor,
    graph: &[Vec<usize>],
    w1: &Tensor,
    w2: &Tensor,
    b: &Tensor,
    relu: bool,
) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (a, bb, c) = (
        tape.param(w1.clone()),
        tape.param(w2.clone()),
        tape.param(b.clone()),
    );
    let y = sage_layer(&mut tape, xv, &Arc::new(graph.to_vec()), a, bb, c, relu).unwrap();
    tape.value(y).clone()
}

#[test]
fn sage_examples() {
    let eye = Tensor::eye(2);
    let zero2 = Tensor::zeros(&[2, 2]);
    let b = Tensor::zeros(&[2]);
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
    let g = vec![vec![1, 2], vec![], vec![]];
    assert_eq!(run_sage(&x, &g, &eye, &zero2, &b, false), x);
    let y = run_sage(&x, &g, &eye, &eye, &b, false);
    assert_eq!(&y.data()[..2], &[4.0, 6.0]);
    // isolated node: empty mean contributes nothing
    let w2 = Tensor::from_rows(&[vec![9.0, -3.0], vec![7.0, 5.0]]).unwrap();
    let b = Tensor::vector(vec![0.5, -0.5]);
    let y = run_sage(&x, &g, &eye, &w2, &b, false);
    assert_eq!(&y.data()[2..4], &[2.5, 2.5]);
}

#[test]
fn sage_matches_brute_force_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &n in &[1usize, 2, 5, 17, 64] {
        let g = random_graph(&mut rng, n);
        let x = random_tensor(&mut rng, &[n, 5]);
        let w1 = random_tensor(&mut rng, &[5, 3]);
        let w2 = random_tensor(&mut rng, &[5, 3]);
        let b = random_tensor(&mut rng, &[3]);
        for relu in [false, true] {
            let got = run_sage(&x, &g, &w1, &w2, &b, relu);
            let rows: Vec<Vec<f64>> = x.data().chunks(5).map(<[f64]>::to_vec).collect();
            let want: Vec<f64> = brute_sage(&rows, &g, &w1, &w2, &b, relu).concat();
            let diff = got
                .data()
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12, "n={n}: {diff}");
        }
    }
}

fn spatial(model: &GraphTransformer, params: &ModelParams, inp: &ModelInput) -> Tensor {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, params);
    let h = model.spatial_encode(&mut tape, &p, inp, false).unwrap();
    tape.value(h).clone()
}

#[test]
fn spatial_encode_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = GraphTransformer::new(small()).unwrap();
    let params = model.init_params(1);

    let one = input(&mut rng, 1, 2, 7, vec![vec![]]);
    let h = spatial(&model, &params, &one);
    assert_eq!(h.shape(), &[1, 2, 6]);
    assert_eq!(&h.data()[..6], &h.data()[6..]);

    let chain = build_adjacency(4, AdjacencySpec::Chain { k: 1 }).unwrap();
    let inp = input(&mut rng, 4, 3, 7, chain.clone());
    let zero = params.zeros_like();
    assert!(spatial(&model, &zero, &inp)
        .data()
        .iter()
        .all(|&v| v == 0.0));

    // two-step message passing by hand
    let h = spatial(&model, &params, &inp);
    let rows: Vec<Vec<f64>> = inp.features.data()[..4 * 7]
        .chunks(7)
        .map(<[f64]>::to_vec)
        .collect();
    let get = |n: &str| params.get(n).unwrap();
    let h1 = brute_sage(
        &rows,
        &chain,
        get("sage0.w_self"),
        get("sage0.w_neigh"),
        get("sage0.bias"),
        true,
    );
    let h2 = brute_sage(
        &h1,
        &chain,
        get("sage1.w_self"),
        get("sage1.w_neigh"),
        get("sage1.bias"),
        false,
    );
    for n in 0..4 {
        for t in 0..3 {
            for c in 0..6 {
                assert!((h.get(&[n, t, c]) - h2[n][c]).abs() <= 1e-12);
            }
        }
    }
}

fn temporal(model: &GraphTransformer, params: &ModelParams, z: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, params);
    let zv = tape.constant(z.clone());
    let y = model.temporal_encode(&mut tape, &p, zv, false).unwrap();
    tape.value(y).clone()
}

#[test]
fn temporal_residual_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = GraphTransformer::new(small()).unwrap();
    let mut params = model.init_params(9);
    for l in 0..2 {
        for name in [
            format!("enc{l}.out.weight"),
            format!("enc{l}.ffn_out.weight"),
        ] {
            let t = params.get_mut(&name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }
    let z = random_tensor(&mut rng, &[3, 5, 8]);
    assert_eq!(temporal(&model, &params, &z), z);
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = small();
    let model = GraphTransformer::new(cfg).unwrap();
    let params = model.init_params(3);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, &params);
    let z = tape.constant(random_tensor(&mut rng, &[3, 5, 8]));
    let (_, w) = encoder_layer(&mut tape, &p, &model.layout.encoders[0], &cfg, z, false).unwrap();
    let w = tape.value(w);
    assert_eq!(w.shape(), &[3, 2, 5, 5]);
    for row in w.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn temporal_encode_is_per_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = GraphTransformer::new(small()).unwrap();
    let params = model.init_params(4);
    let z = random_tensor(&mut rng, &[4, 5, 8]);
    let out = temporal(&model, &params, &z);
    let row = 5 * 8;

    // zero every other node
    let mut masked = z.clone();
    for n in [0, 2, 3] {
        masked.data_mut()[n * row..(n + 1) * row].fill(0.0);
    }
    let out_masked = temporal(&model, &params, &masked);
    assert_eq!(&out.data()[row..2 * row], &out_masked.data()[row..2 * row]);

    // permute nodes
    let perm = [2, 0, 3, 1];
    let mut zp = Vec::new();
    for &n in &perm {
        zp.extend_from_slice(&z.data()[n * row..(n + 1) * row]);
    }
    let outp = temporal(&model, &params, &Tensor::new(vec![4, 5, 8], zp).unwrap());
    for (k, &n) in perm.iter().enumerate() {
        assert_eq!(
            &outp.data()[k * row..(k + 1) * row],
            &out.data()[n * row..(n + 1) * row]
        );
    }
}

#[test]
fn forward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = GraphTransformer::new(small()).unwrap();
    let chain = build_adjacency(6, AdjacencySpec::Chain { k: 2 }).unwrap();
    let inp = input(&mut rng, 6, 4, 7, chain);

    let mut zero = model.init_params(0).zeros_like();
    zero.set_output_bias(3.25);
    let y = model.predict(&zero, &inp).unwrap();
    assert_eq!(y.shape(), &[6, 4]);
    assert!(y.data().iter().all(|&v| v == 3.25));

    let params = model.init_params(21);
    let a = model.predict(&params, &inp).unwrap();
    let b = model.predict(&params, &inp).unwrap();
    assert_eq!(a.data(), b.data());
    assert!(a.is_finite());
}

#[test]
fn forward_is_equivariant_to_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = GraphTransformer::new(small()).unwrap();
    let params = model.init_params(5);
    let (n, t, f) = (7, 3, 7);
    let graph = random_graph(&mut rng, n);
    let inp = input(&mut rng, n, t, f, graph.clone());
    // new label k holds old node perm[k]
    let perm = [4, 6, 0, 2, 1, 5, 3];
    let mut inv = [0; 7];
    for (k, &o) in perm.iter().enumerate() {
        inv[o] = k;
    }
    let graph_p: Vec<Vec<usize>> = perm
        .iter()
        .map(|&o| graph[o].iter().map(|&j| inv[j]).collect())
        .collect();
    let mut feats = Vec::new();
    for l in 0..t {
        for &o in &perm {
            let s = (l * n + o) * f;
            feats.extend_from_slice(&inp.features.data()[s..s + f]);
        }
    }
    let inp_p = ModelInput {
        features: Tensor::new(vec![t, n, f], feats).unwrap(),
        neighbors: Arc::new(graph_p),
    };
    let y = model.predict(&params, &inp).unwrap();
    let yp = model.predict(&params, &inp_p).unwrap();
    for (k, &o) in perm.iter().enumerate() {
        assert_eq!(
            &yp.data()[k * t..(k + 1) * t],
            &y.data()[o * t..(o + 1) * t]
        );
    }
}

#[test]
fn default_parameter_count_is_frozen() {
    let model = GraphTransformer::new(ModelConfig::default()).unwrap();
    assert_eq!(model.param_count(), DEFAULT_PARAM_COUNT);
    assert_eq!(model.init_params(0).count(), DEFAULT_PARAM_COUNT);
}

#[test]
fn positional_encoding_rejects_odd_width() {
    assert!(positional_encoding(4, 7).is_err());
    assert!(GraphTransformer::new(ModelConfig {
        d_t: 9,
        heads: 3,
        ..small()
    })
    .is_err());
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
    assert!(report.passed(), "\n{}", report.table());
    let model = GraphTransformer::new(GradcheckConfig::default().model).unwrap();
    assert_eq!(report.entries(), model.param_count());
}

#[test]
fn checkpoint_round_trips_exactly() {
    use icestack::model::{Checkpoint, FeatureSet, InputSpec, Standardizer};
    let model = GraphTransformer::new(small()).unwrap();
    let ck = Checkpoint {
        model: small(),
        input: InputSpec::Completion {
            features: FeatureSet::Physical,
        },
        standardizer: Standardizer {
            mean: (0..7).map(|i| 0.1 * i as f64 + 1e-17).collect(),
            std: (1..8).map(|i| 1.0 / i as f64).collect(),
        },
        seed: 99,
        epoch: 12,
        params: model.init_params(77),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    let text = ck
        .to_json()
        .unwrap()
        .replacen("\"version\":1", "\"version\":2", 1);
    assert!(matches!(
        Checkpoint::from_json(&text),
        Err(icestack::Error::Version { found: 2, .. })
    ));
}
