//! Acceptance run. Prints one PASS/FAIL line per criterion. Failures are
//! reported, not raised, unless `ACCEPTANCE_STRICT=1`.

use std::time::Instant;

use hiergnn::analyze::{self, PairRecord};
use hiergnn::core::corpus::{generate_synthetic, Example, SynthSpec};
use hiergnn::core::linalg::Matrix;
use hiergnn::core::metrics::{fusion_sources, inter_layer_diversity};
use hiergnn::core::model::{encode_document, greedy_decode, mean_nll, ContextFusion, GsaSource, Model, ModelConfig, Optimizer};
use hiergnn::core::reasoning::Mode;
use hiergnn::data::sentence_tokens;
use hiergnn::train;
use hiergnn::verify::{self, Check};

const CONNECTOR_MASS_MIN: f64 = 0.5;
const CONNECTOR_CPU_SECS: f64 = 600.0;
const CONNECTOR_SEEDS: [u64; 3] = [1, 2, 3];
const CONNECTOR_STEPS: usize = 6000;
const MEMORIZE_DOCS: usize = 64;
const MEMORIZE_STEPS: usize = 500;
const MEMORIZE_DROP: f64 = 0.5;

fn cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime failed");
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

fn oracle() -> Check {
    verify::oracle_equivalence()
}

fn invariants() -> Check {
    verify::probability_invariants()
}

fn gradients() -> Check {
    let parts = [verify::log_partition_gradient(), verify::reasoning_gradients(), verify::pipeline_gradients()];
    let detail = parts
        .iter()
        .map(|c| format!("{} {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail))
        .collect::<Vec<_>>()
        .join("; ");
    Check::new("finite_difference_gradients", parts.iter().all(|c| c.passed), detail)
}

fn epsilon() -> Check {
    verify::epsilon_semantics()
}

/// Mean over documents of the root mass on connector sentences, each
/// document averaged over its induced graphs.
fn connector_mass(model: &Model, docs: &[Example]) -> f64 {
    let mut total = 0.0;
    for ex in docs {
        let enc = encode_document(model, &ex.sentences).expect("encodes");
        let conn = ex.connector_indices().expect("synthetic docs carry trees");
        let per_graph: f64 = enc.graphs.iter().map(|g| conn.iter().map(|&i| g.root[i]).sum::<f64>()).sum();
        total += per_graph / enc.graphs.len() as f64;
    }
    total / docs.len() as f64
}

fn connector_recovery() -> Check {
    let spec = SynthSpec::default();
    let train_docs = generate_synthetic(&spec, 2048).expect("valid spec");
    let held = generate_synthetic(&SynthSpec { seed: 99, ..spec.clone() }, 32).expect("valid spec");
    let opt = Optimizer { lr: 1.0, clip: 2.0 };
    let mut masses = Vec::new();
    let mut notes = Vec::new();
    let mut within_budget = true;
    for seed in CONNECTOR_SEEDS {
        let mut cfg = ModelConfig::new(32, 2, Mode::Lsr, spec.vocab_size);
        cfg.gsa_source = GsaSource::Fused;
        let mut model = Model::new(cfg, seed).expect("valid config");
        let t0 = cpu_seconds();
        train::train(&mut model, &train_docs, CONNECTOR_STEPS, 16, &opt, |_| {}).expect("training runs");
        let cpu = cpu_seconds() - t0;
        within_budget &= cpu <= CONNECTOR_CPU_SECS;
        let mass = connector_mass(&model, &held);
        notes.push(format!("seed {seed}: {mass:.3} in {cpu:.0} CPU-s"));
        masses.push(mass);
    }
    let mean = masses.iter().sum::<f64>() / masses.len() as f64;
    Check::new(
        "connector_root_mass",
        mean >= CONNECTOR_MASS_MIN && within_budget,
        format!(
            "mean held-out connector root mass {mean:.3} (>= {CONNECTOR_MASS_MIN}), {} steps each, budget {CONNECTOR_CPU_SECS} CPU-s per seed [{}]",
            CONNECTOR_STEPS,
            notes.join(", ")
        ),
    )
}

fn memorization() -> Check {
    let docs = generate_synthetic(&SynthSpec::default(), MEMORIZE_DOCS).expect("valid spec");
    let cfg = ModelConfig::new(32, 2, Mode::Lsr, SynthSpec::default().vocab_size);
    let opt = Optimizer { lr: 1.0, clip: 2.0 };
    let run = |steps: usize| {
        let mut m = Model::new(cfg.clone(), 0).expect("valid config");
        let mut losses = Vec::new();
        let start = mean_nll(&m, &docs).expect("scores");
        let mut reached = None;
        for s in 0..steps {
            let r = train::train(&mut m, &docs, 1, MEMORIZE_DOCS, &opt, |_| {}).expect("step runs");
            losses.push(r[0].loss.to_bits());
            if reached.is_none() && mean_nll(&m, &docs).expect("scores") <= (1.0 - MEMORIZE_DROP) * start {
                reached = Some(s + 1);
                break;
            }
        }
        (start, reached, losses, m)
    };
    let (start, reached, losses, model) = run(MEMORIZE_STEPS);
    let (_, _, prefix, _) = run(3);
    let repeatable = losses[..prefix.len().min(losses.len())] == prefix[..prefix.len().min(losses.len())];
    let end = mean_nll(&model, &docs).expect("scores");
    Check::new(
        "memorization",
        reached.is_some() && repeatable,
        format!(
            "{MEMORIZE_DOCS} docs, d=32, L=2: mean NLL {start:.3} -> {end:.3} after {} steps (needs a {:.0}% drop within {MEMORIZE_STEPS}), repeat run bit-identical: {repeatable}",
            reached.map_or(MEMORIZE_STEPS.to_string(), |s| s.to_string()),
            MEMORIZE_DROP * 100.0
        ),
    )
}

fn metrics() -> Check {
    let pairs: Vec<PairRecord> = include_str!("fixtures/pairs.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).expect("fixture parses"))
        .collect();
    let expected: [(f64, f64, &[usize]); 10] = [
        (100.0 / 3.0, 4.0, &[1]),
        (200.0 / 3.0, 7.0 / 4.0, &[2]),
        (0.0, 0.0, &[0]),
        (0.0, 0.0, &[]),
        (100.0, 6.0, &[1, 1]),
        (75.0, 11.0 / 6.0, &[3]),
        (100.0, 2.0, &[4]),
        (50.0, 5.0, &[1]),
        (0.0, 1.0, &[0]),
        (100.0, 6.0, &[1, 2]),
    ];
    let mut mismatches = Vec::new();
    for (p, (cov, copy, sources)) in pairs.iter().zip(expected) {
        let m = analyze::analyze_pair(p, None);
        let article = sentence_tokens(&p.article);
        let got: Vec<usize> = sentence_tokens(&p.summary).iter().map(|s| fusion_sources(&article, s)).collect();
        if m.coverage != cov || m.copy_length != copy || got != sources {
            mismatches.push(p.doc_id.clone());
        }
    }
    let uniform = [0.25; 4];
    let js_same = hiergnn::core::metrics::js_divergence(&uniform, &uniform);
    let js_apart = hiergnn::core::metrics::js_divergence(&[1.0, 0.0], &[0.0, 1.0]);
    let js_ok = js_same == 0.0 && (js_apart - 1.0).abs() < 1e-12;
    Check::new(
        "metrics_fixture",
        pairs.len() == 10 && mismatches.is_empty() && js_ok,
        format!("10 hand-counted pairs, mismatches {mismatches:?}; JS(p,p)={js_same}, JS(disjoint)={js_apart}"),
    )
}

fn graph_counts() -> Check {
    let docs = generate_synthetic(&SynthSpec::default(), 3).expect("valid spec");
    let mut counts = Vec::new();
    let mut ok = true;
    for (mode, layers) in [(Mode::Lsr, 1), (Mode::Lsr, 3), (Mode::Lir, 1), (Mode::Lir, 3)] {
        let m = Model::new(ModelConfig::new(8, layers, mode, 200), 4).expect("valid config");
        for ex in &docs {
            let enc = encode_document(&m, &ex.sentences).expect("encodes");
            let want = if mode == Mode::Lir { layers } else { 1 };
            ok &= enc.graphs.len() == want;
            if mode == Mode::Lir && layers > 1 {
                ok &= inter_layer_diversity(&enc.graphs).is_ok_and(|(r, _)| r > 0.0);
            }
        }
        counts.push(format!("{mode:?} L={layers}: {}", encode_document(&m, &docs[0].sentences).unwrap().graphs.len()));
    }
    Check::new("graph_counts", ok, counts.join(", "))
}

fn ablation() -> Check {
    let ex = generate_synthetic(&SynthSpec::default(), 1).expect("valid spec").remove(0);
    let mut ok = true;
    for mode in [Mode::Lsr, Mode::Lir] {
        let mut full = Model::new(ModelConfig::new(8, 2, mode, 200), 21).expect("valid config");
        // Non-zero output weights so the comparison is not trivially uniform.
        let shape = full.params.get("out.w").unwrap().shape();
        let mut k = 0.0;
        *full.params.get_mut("out.w").unwrap() = Matrix::from_fn(shape.0, shape.1, |i, j| {
            k += 1.0;
            0.01 * (k + (i * 7 + j) as f64).sin()
        });
        *full.params.get_mut("tok.w3").unwrap() = Matrix::zeros(8, 8);
        full.config.context = ContextFusion::TokenOnly;
        let mut plain = full.clone();
        plain.config.use_hiergnn = false;
        let (a, b) = (greedy_decode(&full, &ex.sentences, 8).unwrap(), greedy_decode(&plain, &ex.sentences, 8).unwrap());
        ok &= a.tokens == b.tokens;
        ok &= a.steps.iter().zip(&b.steps).all(|(x, y)| x.vocab_dist == y.vocab_dist);
        let batch = [ex.clone()];
        ok &= mean_nll(&full, &batch).unwrap().to_bits() == mean_nll(&plain, &batch).unwrap().to_bits();
    }
    Check::new(
        "ablation_and_scope",
        ok,
        format!(
            "structure-free configuration bitwise equal to the plain baseline: {ok}; \
             news-benchmark ROUGE scores are not reproduced (no trained news model or corpus ships here)"
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("C1", oracle),
        ("C2", invariants),
        ("C3", gradients),
        ("C4", epsilon),
        ("C5", connector_recovery),
        ("C6", memorization),
        ("C7", metrics),
        ("C8", graph_counts),
        ("C9", ablation),
    ];
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = Vec::new();
    for (id, f) in criteria {
        if only.as_deref().is_some_and(|o| !o.split(',').any(|x| x == id)) {
            continue;
        }
        let t = Instant::now();
        let c = f();
        println!(
            "{} {id} {} ({:.1}s): {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            t.elapsed().as_secs_f64(),
            c.detail
        );
        if !c.passed {
            failed.push(id);
        }
    }
    if std::env::var("ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        assert!(failed.is_empty(), "failed criteria: {failed:?}");
    }
}
