mod common;

use common::{normal_matrix, randomize};
use hiergnn_core::linalg::Matrix;
use hiergnn_core::metrics;
use hiergnn_core::mtc::{self, LatentGraph, ScoreSet, SentenceStates};
use hiergnn_core::params::ParamStore;
use hiergnn_core::reasoning::{
    fuse_layers, gated_merge, init_block, init_params, node_update, stack_forward, BlockParams, Mode, NodeStates,
    Phi, StackConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 4;

fn block(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    init_block(&mut s, "b", D, &mut rng);
    randomize(&mut s, 0.5, &mut rng);
    s
}

fn set(store: &mut ParamStore, name: &str, value: Matrix) {
    *store.get_mut(name).unwrap() = value;
}

fn random_graph(m: usize, rng: &mut ChaCha8Rng) -> LatentGraph {
    let f = Matrix::from_fn(m, m, |i, j| if i == j { 0.0 } else { rng.gen_range(0.1..2.0) });
    let r = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
    mtc::marginalize(&ScoreSet::new(f, r, mtc::DEFAULT_EPSILON).unwrap()).unwrap()
}

/// `x·W + b` row by row.
fn affine_row(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|c| b[(0, c)] + x.iter().enumerate().map(|(k, v)| v * w[(k, c)]).sum::<f64>())
        .collect()
}

#[test]
fn self_update_when_not_a_root() {
    let s = block(1);
    let p = BlockParams::new(&s, "b", D, Phi::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = normal_matrix(3, D, &mut rng);
    let mut adj = Matrix::zeros(3, 3);
    adj[(0, 1)] = 0.7;
    adj[(2, 0)] = 0.4;
    let g = LatentGraph::from_raw(adj, vec![0.0; 3], 0.0).unwrap();
    let u = node_update(&h, &g, &p).unwrap();
    for i in 0..3 {
        let want = affine_row(h.row(i), s.get("b.f_r.w").unwrap(), s.get("b.f_r.b").unwrap());
        for c in 0..D {
            assert!((u[(i, c)] - want[c]).abs() < 1e-14);
        }
    }
}

#[test]
fn full_root_takes_its_one_child() {
    let s = block(3);
    let p = BlockParams::new(&s, "b", D, Phi::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = normal_matrix(3, D, &mut rng);
    let mut adj = Matrix::zeros(3, 3);
    adj[(0, 2)] = 1.0;
    let g = LatentGraph::from_raw(adj, vec![1.0, 0.0, 0.0], 0.0).unwrap();
    let u = node_update(&h, &g, &p).unwrap();
    let want = affine_row(h.row(2), s.get("b.f_n.w").unwrap(), s.get("b.f_n.b").unwrap());
    for c in 0..D {
        assert!((u[(0, c)] - want[c]).abs() < 1e-14);
    }
}

#[test]
fn node_update_matches_loop() {
    let s = block(5);
    let p = BlockParams::new(&s, "b", D, Phi::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = normal_matrix(3, D, &mut rng);
    let g = random_graph(3, &mut rng);
    let u = node_update(&h, &g, &p).unwrap();
    let (wr, br) = (s.get("b.f_r.w").unwrap(), s.get("b.f_r.b").unwrap());
    let (wn, bn) = (s.get("b.f_n.w").unwrap(), s.get("b.f_n.b").unwrap());
    for i in 0..3 {
        let own = affine_row(h.row(i), wr, br);
        for c in 0..D {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += g.adj[(i, k)] * affine_row(h.row(k), wn, bn)[c];
            }
            let want = (1.0 - g.root[i]) * own[c] + g.root[i] * acc;
            assert!((u[(i, c)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_maps_rescale_a_constant_state() {
    let mut s = block(7);
    set(&mut s, "b.f_r.w", Matrix::identity(D));
    set(&mut s, "b.f_n.w", Matrix::identity(D));
    set(&mut s, "b.f_r.b", Matrix::zeros(1, D));
    set(&mut s, "b.f_n.b", Matrix::zeros(1, D));
    let p = BlockParams::new(&s, "b", D, Phi::Tanh).unwrap();
    let v = [0.5, -1.25, 2.0, 0.75];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for m in 2..=5 {
        let h = Matrix::from_fn(m, D, |_, c| v[c]);
        let g = random_graph(m, &mut rng);
        let u = node_update(&h, &g, &p).unwrap();
        for i in 0..m {
            let row_mass: f64 = (0..m).map(|k| g.adj[(i, k)]).sum();
            let factor = (1.0 - g.root[i]) + g.root[i] * row_mass;
            for c in 0..D {
                assert!((u[(i, c)] - factor * v[c]).abs() < 1e-12);
            }
        }
    }
}

fn layer_norm_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        for (c, v) in row.iter().enumerate() {
            out[(r, c)] = (v - mean) / (var + 1e-5).sqrt();
        }
    }
    out
}

#[test]
fn zero_gate_logits_average_update_and_state() {
    let mut s = block(9);
    set(&mut s, "b.f_g.w", Matrix::zeros(2 * D, D));
    set(&mut s, "b.f_g.b", Matrix::zeros(1, D));
    set(&mut s, "b.ln.gain", Matrix::filled(1, D, 1.0));
    set(&mut s, "b.ln.bias", Matrix::zeros(1, D));
    let p = BlockParams::new(&s, "b", D, Phi::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (u, h) = (normal_matrix(3, D, &mut rng), normal_matrix(3, D, &mut rng));
    let out = gated_merge(&u, &h, &p).unwrap();
    let mix = u.zip_map(&h, |a, b| 0.5 * a.tanh() + 0.5 * b).unwrap();
    assert!(out.max_abs_diff(&layer_norm_rows(&mix)) < 1e-12);
}

#[test]
fn equal_inputs_normalize_regardless_of_gate() {
    let mut s = block(11);
    set(&mut s, "b.ln.gain", Matrix::filled(1, D, 1.0));
    set(&mut s, "b.ln.bias", Matrix::zeros(1, D));
    let p = BlockParams::new(&s, "b", D, Phi::Identity).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = normal_matrix(4, D, &mut rng);
    let out = gated_merge(&h, &h, &p).unwrap();
    assert!(out.max_abs_diff(&layer_norm_rows(&h)) < 1e-12);
}

#[test]
fn gated_merge_matches_recomputation() {
    let s = block(13);
    let p = BlockParams::new(&s, "b", D, Phi::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (u, h) = (normal_matrix(3, D, &mut rng), normal_matrix(3, D, &mut rng));
    let out = gated_merge(&u, &h, &p).unwrap();
    let (wg, bg) = (s.get("b.f_g.w").unwrap(), s.get("b.f_g.b").unwrap());
    let (gain, bias) = (s.get("b.ln.gain").unwrap(), s.get("b.ln.bias").unwrap());
    let mut mix = Matrix::zeros(3, D);
    for i in 0..3 {
        let uh: Vec<f64> = u.row(i).iter().chain(h.row(i)).copied().collect();
        let pre = affine_row(&uh, wg, bg);
        for c in 0..D {
            let gate = 1.0 / (1.0 + (-pre[c]).exp());
            mix[(i, c)] = gate * u[(i, c)].tanh() + (1.0 - gate) * h[(i, c)];
        }
    }
    let normed = layer_norm_rows(&mix);
    let want = Matrix::from_fn(3, D, |r, c| normed[(r, c)] * gain[(0, c)] + bias[(0, c)]);
    assert!(out.max_abs_diff(&want) < 1e-12);
}

fn stack_store(cfg: &StackConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    init_params(&mut s, cfg, &mut rng);
    randomize(&mut s, 0.5, &mut rng);
    s
}

#[test]
fn one_layer_modes_coincide() {
    let lsr = StackConfig::new(1, Mode::Lsr, D);
    let lir = StackConfig::new(1, Mode::Lir, D);
    let s = stack_store(&lsr, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let h0 = SentenceStates::new(normal_matrix(5, D, &mut rng)).unwrap();
    let a = stack_forward(&h0, &lsr, &s).unwrap();
    let b = stack_forward(&h0, &lir, &s).unwrap();
    assert_eq!(a, b);
}

#[test]
fn graph_counts_follow_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h0 = SentenceStates::new(normal_matrix(5, D, &mut rng)).unwrap();
    let lsr = StackConfig::new(3, Mode::Lsr, D);
    let out = stack_forward(&h0, &lsr, &stack_store(&lsr, 18)).unwrap();
    assert_eq!((out.graphs.len(), out.per_layer.len()), (1, 3));

    let lir = StackConfig::new(3, Mode::Lir, D);
    let out = stack_forward(&h0, &lir, &stack_store(&lir, 19)).unwrap();
    assert_eq!((out.graphs.len(), out.per_layer.len()), (3, 3));
    let (js_root, js_edge) = metrics::inter_layer_diversity(&out.graphs).unwrap();
    assert!(js_root > 0.0 && js_edge > 0.0);
}

#[test]
fn permutations_fixing_the_first_sentence_commute() {
    for mode in [Mode::Lsr, Mode::Lir] {
        let cfg = StackConfig::new(2, mode, D);
        let s = stack_store(&cfg, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = normal_matrix(5, D, &mut rng);
        let perm = [0, 3, 1, 4, 2];
        let hp = Matrix::from_fn(5, D, |r, c| h[(perm[r], c)]);
        let a = stack_forward(&SentenceStates::new(h).unwrap(), &cfg, &s).unwrap();
        let b = stack_forward(&SentenceStates::new(hp).unwrap(), &cfg, &s).unwrap();
        for r in 0..5 {
            for c in 0..D {
                assert!((b.fused[(r, c)] - a.fused[(perm[r], c)]).abs() < 1e-10, "{mode:?}");
            }
            assert!((b.graphs[0].root[r] - a.graphs[0].root[perm[r]]).abs() < 1e-10);
        }
    }
}

fn states(per_layer: Vec<Matrix>) -> NodeStates {
    let m = per_layer[0].rows();
    NodeStates {
        fused: Matrix::zeros(m, D),
        per_layer,
        graphs: Vec::new(),
    }
}

#[test]
fn fusion_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h0 = normal_matrix(3, D, &mut rng);
    let h1 = normal_matrix(3, D, &mut rng);
    let mut s = ParamStore::new();
    s.insert("fuse.w", Matrix::zeros(D, D));
    s.insert("fuse.b", Matrix::zeros(1, D));
    assert_eq!(fuse_layers(&states(vec![h1.clone()]), &h0, &s).unwrap(), h0);

    s.insert("fuse.w", Matrix::identity(D));
    let out = fuse_layers(&states(vec![h1.clone()]), &h0, &s).unwrap();
    let want = h1.zip_map(&h0, |a, b| a + b).unwrap();
    assert!(out.max_abs_diff(&want) < 1e-15);
}

#[test]
fn two_layer_fusion_matches_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let h0 = normal_matrix(3, D, &mut rng);
    let layers = vec![normal_matrix(3, D, &mut rng), normal_matrix(3, D, &mut rng)];
    let mut s = ParamStore::new();
    s.insert("fuse.w", normal_matrix(2 * D, D, &mut rng));
    s.insert("fuse.b", normal_matrix(1, D, &mut rng));
    let out = fuse_layers(&states(layers.clone()), &h0, &s).unwrap();
    for i in 0..3 {
        let cat: Vec<f64> = layers[0].row(i).iter().chain(layers[1].row(i)).copied().collect();
        let mixed = affine_row(&cat, s.get("fuse.w").unwrap(), s.get("fuse.b").unwrap());
        for c in 0..D {
            assert!((out[(i, c)] - mixed[c] - h0[(i, c)]).abs() < 1e-12);
        }
    }
}
