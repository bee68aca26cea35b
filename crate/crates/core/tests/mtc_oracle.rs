use hiergnn_core::diff::{finite_diff_check, CompGraph};
use hiergnn_core::linalg::{self, Matrix};
use hiergnn_core::mtc::{
    self, brute_force_marginals, marginalize, root_replaced_laplacian, LatentGraph, MtcError, MtcParams,
    ScoreSet, SentenceStates, DEFAULT_EPSILON,
};
use hiergnn_core::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = DEFAULT_EPSILON;

fn random_scores(m: usize, rng: &mut ChaCha8Rng) -> ScoreSet {
    let f = Matrix::from_fn(m, m, |i, j| if i == j { 0.0 } else { rng.gen_range(EPS..=2.0) });
    let r = (0..m).map(|_| rng.gen_range(EPS..=2.0)).collect();
    ScoreSet::new(f, r, EPS).unwrap()
}

fn max_diff(a: &LatentGraph, b: &LatentGraph) -> f64 {
    let roots = a.root.iter().zip(&b.root).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    roots.max(a.adj.max_abs_diff(&b.adj))
}

#[test]
fn matches_enumeration_for_small_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in 2..=6 {
        for _ in 0..100 {
            let s = random_scores(m, &mut rng);
            let fast = marginalize(&s).unwrap();
            let slow = brute_force_marginals(&s).unwrap();
            let diff = max_diff(&fast, &slow);
            assert!(diff < 1e-8, "M={m}: {diff:e}");
            let rel = (fast.log_z - slow.log_z).abs() / slow.log_z.abs().max(1.0);
            assert!(rel < 1e-8);
        }
    }
}

#[test]
fn partition_matches_determinant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = random_scores(4, &mut rng);
    let z_det = linalg::determinant(&linalg::lu_decompose(&root_replaced_laplacian(&s)).unwrap());
    let z_enum = brute_force_marginals(&s).unwrap().log_z.exp();
    assert!(((z_det - z_enum) / z_enum).abs() < 1e-8);
}

#[test]
fn parents_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in 0..1000 {
        let m = 2 + k % 9;
        let g = marginalize(&random_scores(m, &mut rng)).unwrap();
        let total: f64 = g.root.iter().sum();
        assert!((total - 1.0).abs() < 1e-8);
        for mass in g.parent_mass() {
            assert!((mass - 1.0).abs() < 1e-8, "{mass}");
        }
        for i in 0..m {
            assert_eq!(g.adj[(i, i)], 0.0);
            assert!((0.0..=1.0).contains(&g.root[i]));
            for j in 0..m {
                assert!((0.0..=1.0).contains(&g.adj[(i, j)]));
            }
        }
    }
}

#[test]
fn raising_an_edge_never_lowers_its_marginal() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let s = random_scores(4, &mut rng);
        let base = marginalize(&s).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let mut f = s.f_edge.clone();
                f.as_mut_slice()[i * 4 + j] *= 2.0;
                let bumped = marginalize(&ScoreSet::new(f, s.f_root.clone(), EPS).unwrap()).unwrap();
                assert!(bumped.adj[(i, j)] >= base.adj[(i, j)] - 1e-12);
            }
        }
    }
}

#[test]
fn uniform_rescaling_only_shifts_log_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for m in 2..=6 {
        let s = random_scores(m, &mut rng);
        let c = rng.gen_range(0.1..10.0);
        let a = marginalize(&s).unwrap();
        let b = marginalize(&s.scaled(c)).unwrap();
        assert!(max_diff(&a, &b) < 1e-9);
        assert!((b.log_z - a.log_z - m as f64 * c.ln()).abs() < 1e-9);
    }
}

#[test]
fn dominant_edge_takes_almost_all_mass() {
    // node 0 is the only plausible root and 0→1, 0→2 dominate
    let mut f = Matrix::filled(3, 3, EPS);
    f.as_mut_slice()[1] = 1.0;
    f.as_mut_slice()[2] = 1.0;
    let s = ScoreSet::new(f, vec![1.0, EPS, EPS], EPS).unwrap();
    let g = marginalize(&s).unwrap();
    let oracle = brute_force_marginals(&s).unwrap();
    assert!(max_diff(&g, &oracle) < 1e-12);
    assert!(g.adj[(0, 1)] > 1.0 - 1e-3 && g.adj[(0, 2)] > 1.0 - 1e-3);
    for (i, j) in [(1, 0), (1, 2), (2, 0), (2, 1)] {
        assert!(g.adj[(i, j)] < 1e-3 && oracle.adj[(i, j)] < 1e-3);
    }
}

#[test]
fn all_negative_preactivations_give_uniform_structure() {
    let d = 3;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    mtc::init_params(&mut store, "s", d, &mut rng);
    // sp = ReLU(-1) = 0 everywhere, so every bilinear and root score is 0
    *store.get_mut("s.b_p").unwrap() = Matrix::filled(1, d, -1.0);
    *store.get_mut("s.w_p").unwrap() = Matrix::zeros(d, d);
    let h = SentenceStates::new(Matrix::from_fn(4, d, |i, k| (i + k) as f64 * 0.3)).unwrap();
    let p = MtcParams::from_store(&store, "s").unwrap();
    let views = mtc::project_parent_child(&h, &p).unwrap();
    let s = mtc::score(&views, &p, EPS).unwrap();
    assert!(s.f_root.iter().all(|&r| r == EPS));
    let g = marginalize(&s).unwrap();
    let oracle = brute_force_marginals(&s).unwrap();
    assert!(max_diff(&g, &oracle) < 1e-8);
    for &r in &g.root {
        assert!((r - 0.25).abs() < 1e-9);
    }
}

#[test]
fn negative_bilinear_score_is_exactly_epsilon() {
    let mut store = ParamStore::new();
    store.insert("s.w_p", Matrix::identity(2));
    store.insert("s.b_p", Matrix::zeros(1, 2));
    store.insert("s.w_c", Matrix::identity(2));
    store.insert("s.b_c", Matrix::zeros(1, 2));
    store.insert("s.w_r", Matrix::new(2, 1, vec![1.0, 0.0]).unwrap());
    store.insert("s.b_r", Matrix::scalar(0.0));
    store.insert("s.w_bi", Matrix::new(2, 2, vec![-5.0, 0.0, 0.0, 0.0]).unwrap());
    let h = SentenceStates::new(Matrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
    let p = MtcParams::from_store(&store, "s").unwrap();
    let s = mtc::score(&mtc::project_parent_child(&h, &p).unwrap(), &p, EPS).unwrap();
    assert_eq!(s.f_edge[(0, 1)], 1e-6);
    assert_eq!(s.f_edge[(1, 0)], 1e-6);
    assert_eq!(s.f_edge[(0, 0)], 0.0);
    assert_eq!(s.f_root[0], 1.0 + 1e-6);

    *store.get_mut("s.w_bi").unwrap() = Matrix::new(2, 2, vec![0.3, 0.0, 0.0, 0.0]).unwrap();
    let p = MtcParams::from_store(&store, "s").unwrap();
    let s = mtc::score(&mtc::project_parent_child(&h, &p).unwrap(), &p, EPS).unwrap();
    assert_eq!(s.f_edge[(0, 1)], 0.3 + 1e-6);
}

#[test]
fn projections_follow_affine_relu() {
    let mut store = ParamStore::new();
    store.insert("s.w_p", Matrix::identity(2));
    store.insert("s.b_p", Matrix::zeros(1, 2));
    store.insert("s.w_c", Matrix::zeros(2, 2));
    store.insert("s.b_c", Matrix::zeros(1, 2));
    store.insert("s.w_r", Matrix::zeros(2, 1));
    store.insert("s.b_r", Matrix::scalar(0.0));
    store.insert("s.w_bi", Matrix::zeros(2, 2));
    let h = SentenceStates::new(Matrix::row_vector(&[1.0, -2.0])).unwrap();
    let p = MtcParams::from_store(&store, "s").unwrap();
    let v = mtc::project_parent_child(&h, &p).unwrap();
    assert_eq!(v.sp.as_slice(), &[1.0, 0.0]);
    assert_eq!(v.sc.as_slice(), &[0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    mtc::init_params(&mut store, "r", 4, &mut rng);
    let h = SentenceStates::new(Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
    let p = MtcParams::from_store(&store, "r").unwrap();
    let v = mtc::project_parent_child(&h, &p).unwrap();
    let (w, b) = (store.get("r.w_p").unwrap(), store.get("r.b_p").unwrap());
    for i in 0..3 {
        for k in 0..4 {
            let pre: f64 = (0..4).map(|t| h.h0()[(i, t)] * w[(t, k)]).sum::<f64>() + b[(0, k)];
            assert!((v.sp[(i, k)] - pre.max(0.0)).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_parameters_give_uniform_roots() {
    let mut store = ParamStore::new();
    for (n, r, c) in [("w_p", 3, 3), ("b_p", 1, 3), ("w_c", 3, 3), ("b_c", 1, 3), ("w_r", 3, 1), ("b_r", 1, 1), ("w_bi", 3, 3)] {
        store.init_zeros(&format!("z.{n}"), r, c);
    }
    let h = SentenceStates::new(Matrix::from_fn(5, 3, |i, k| (i * 3 + k) as f64 - 4.0)).unwrap();
    let g = mtc::induce(&h, &MtcParams::from_store(&store, "z").unwrap(), EPS).unwrap();
    for &r in &g.root {
        assert!((r - 0.2).abs() < 1e-9);
    }
}

#[test]
fn log_partition_gradient_is_marginal_over_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let s = random_scores(3, &mut rng);
    let graph = marginalize(&s).unwrap();
    let mut g = CompGraph::new();
    let f = g.param("f", &s.f_edge);
    let r = g.param("r", &Matrix::col_vector(&s.f_root));
    let nodes = mtc::record_marginalize(&mut g, f, r).unwrap();
    let grads = g.backward(nodes.log_z, &Matrix::scalar(1.0)).unwrap();
    let gf = grads.get("f").unwrap();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let expected = graph.adj[(i, j)] / s.f_edge[(i, j)];
                assert!((gf[(i, j)] - expected).abs() < 1e-9 * expected.abs().max(1.0));
            }
        }
    }
    let gr = grads.get("r").unwrap();
    for j in 0..3 {
        assert!((gr[(j, 0)] - graph.root[j] / s.f_root[j]).abs() < 1e-9);
    }
}

#[test]
fn log_partition_passes_finite_differences_at_four_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..5 {
        let s = random_scores(4, &mut rng);
        let mut g = CompGraph::new();
        let f = g.param("f", &s.f_edge);
        let r = g.param("r", &Matrix::col_vector(&s.f_root));
        let nodes = mtc::record_marginalize(&mut g, f, r).unwrap();
        // the diagonal is structurally zero; perturbing it is still a valid check
        assert!(finite_diff_check(&mut g, nodes.log_z, "f", 1e-5).unwrap() < 1e-4);
        assert!(finite_diff_check(&mut g, nodes.log_z, "r", 1e-5).unwrap() < 1e-4);
    }
}

#[test]
fn recorded_route_matches_plain_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut store = ParamStore::new();
    mtc::init_params(&mut store, "p", 5, &mut rng);
    let h = Matrix::from_fn(6, 5, |_, _| rng.gen_range(-2.0..2.0));
    let plain = mtc::induce(&SentenceStates::new(h.clone()).unwrap(), &MtcParams::from_store(&store, "p").unwrap(), EPS)
        .unwrap();
    let mut g = CompGraph::new();
    let hn = g.input("h", h);
    let nodes = mtc::record_induce(&mut g, &store, "p", hn, EPS).unwrap();
    let recorded = nodes.latent_graph(&g).unwrap();
    assert!(max_diff(&plain, &recorded) < 1e-10);
    for mass in recorded.parent_mass() {
        assert!((mass - 1.0).abs() < 1e-8);
    }
}

#[test]
fn enumeration_refuses_large_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    assert!(matches!(brute_force_marginals(&random_scores(8, &mut rng)), Err(MtcError::TooLarge(8))));
}

#[test]
fn invalid_scores_are_rejected() {
    let f = Matrix::filled(2, 2, 0.5);
    assert!(ScoreSet::new(f.clone(), vec![0.0, 1.0], EPS).is_err());
    assert!(ScoreSet::new(Matrix::zeros(2, 2), vec![1.0, 1.0], EPS).is_err());
    let ok = ScoreSet::new(f, vec![1.0, 1.0], EPS).unwrap();
    assert_eq!(ok.f_edge[(0, 0)], 0.0);
}
