//! Analysis metrics: structure diversity and sparsity of induced graphs,
//! plus overlap statistics between an article and its summary.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mtc::{LatentGraph, ScoreSet};

/// Newline-separated, sorted English stopword list.
pub const STOPWORDS: &str = include_str!("../fixtures/stopwords.txt");

/// Gain below which fusion stops adding sources.
pub const FUSION_MIN_GAIN: usize = 2;
/// Cap on contributing sources per summary sentence.
pub const FUSION_MAX_SOURCES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("graphs over different sentence counts: {0} vs {1}")]
    MismatchedM(usize, usize),
    #[error("need at least two graphs, got {0}")]
    TooFewGraphs(usize),
}

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.lines().any(|s| s == word)
}

/// Range of the root and off-diagonal edge marginals.
pub fn intra_layer_diversity(g: &LatentGraph) -> (f64, f64) {
    let m = g.m();
    let off = (0..m).flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)));
    (range(g.root.iter().copied()), range(off.map(|(i, j)| g.adj[(i, j)])))
}

fn range(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

fn xlog2_ratio(a: f64, m: f64) -> f64 {
    if a > 0.0 {
        a * libm::log2(a / m)
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in bits, clamped to `[0, 1]`.
///
/// Each element pair contributes a term that is symmetric in its
/// arguments, so swapping `p` and `q` gives the same bits.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions of different length");
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            xlog2_ratio(a, m) + xlog2_ratio(b, m)
        })
        .sum();
    (0.5 * total).clamp(0.0, 1.0)
}

/// Off-diagonal edge marginals in row-major order, renormalized to sum 1.
pub fn edge_distribution(g: &LatentGraph) -> Vec<f64> {
    let m = g.m();
    let mut v: Vec<f64> = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| g.adj[(i, j)])
        .collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
    v
}

/// Mean JS divergence over unordered pairs of graphs, for roots and edges.
pub fn inter_layer_diversity(graphs: &[LatentGraph]) -> Result<(f64, f64), MetricsError> {
    if graphs.len() < 2 {
        return Err(MetricsError::TooFewGraphs(graphs.len()));
    }
    let m = graphs[0].m();
    if let Some(g) = graphs.iter().find(|g| g.m() != m) {
        return Err(MetricsError::MismatchedM(m, g.m()));
    }
    let edges: Vec<Vec<f64>> = graphs.iter().map(edge_distribution).collect();
    let (mut root_sum, mut edge_sum, mut pairs) = (0.0, 0.0, 0usize);
    for a in 0..graphs.len() {
        for b in a + 1..graphs.len() {
            root_sum += js_divergence(&graphs[a].root, &graphs[b].root);
            edge_sum += js_divergence(&edges[a], &edges[b]);
            pairs += 1;
        }
    }
    Ok((root_sum / pairs as f64, edge_sum / pairs as f64))
}

/// Fractions of off-diagonal edge weights and of root weights that sit
/// exactly at the ε floor.
pub fn sparsity(s: &ScoreSet) -> (f64, f64) {
    let m = s.m();
    let mut edge_hits = 0usize;
    for i in 0..m {
        for j in 0..m {
            if i != j && s.f_edge[(i, j)] == s.epsilon {
                edge_hits += 1;
            }
        }
    }
    let off = m * (m - 1);
    let edge = if off == 0 { 0.0 } else { edge_hits as f64 / off as f64 };
    let root = s.f_root.iter().filter(|&&f| f == s.epsilon).count() as f64 / m.max(1) as f64;
    (edge, root)
}

/// Per-layer and cross-layer structure statistics for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// `(root_range, edge_range)` per induced graph.
    pub intra: Vec<(f64, f64)>,
    /// `(js_root_avg, js_edge_avg)` when there are two or more graphs.
    pub inter: Option<(f64, f64)>,
    /// `(edge_eps_fraction, root_eps_fraction)` per induced graph.
    pub sparsity: Vec<(f64, f64)>,
}

pub fn diversity_report(graphs: &[LatentGraph], scores: &[ScoreSet]) -> Result<DiversityReport, MetricsError> {
    let inter = match inter_layer_diversity(graphs) {
        Ok(v) => Some(v),
        Err(MetricsError::TooFewGraphs(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(DiversityReport {
        intra: graphs.iter().map(intra_layer_diversity).collect(),
        inter,
        sparsity: scores.iter().map(sparsity).collect(),
    })
}

fn content_bigrams<S: AsRef<str>>(tokens: &[S]) -> BTreeSet<(&str, &str)> {
    tokens
        .windows(2)
        .map(|w| (w[0].as_ref(), w[1].as_ref()))
        .filter(|(a, b)| !is_stopword(a) || !is_stopword(b))
        .collect()
}

/// Percent of article sentences sharing at least one bigram with the
/// summary, ignoring bigrams made only of stopwords.
pub fn coverage_rate<S: AsRef<str>>(article_sentences: &[Vec<S>], summary: &[S]) -> f64 {
    if article_sentences.is_empty() {
        return 0.0;
    }
    let summary_bigrams = content_bigrams(summary);
    let covered = article_sentences
        .iter()
        .filter(|s| content_bigrams(s).iter().any(|b| summary_bigrams.contains(b)))
        .count();
    100.0 * covered as f64 / article_sentences.len() as f64
}

/// Mean length of the verbatim spans found by longest-match-first greedy
/// segmentation of the summary; unmatched tokens are skipped.
pub fn avg_copy_length<S: AsRef<str>>(article: &[S], summary: &[S]) -> f64 {
    let article: Vec<&str> = article.iter().map(AsRef::as_ref).collect();
    let summary: Vec<&str> = summary.iter().map(AsRef::as_ref).collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < summary.len() {
        let mut best = 0;
        for start in 0..article.len() {
            let len = article[start..]
                .iter()
                .zip(&summary[i..])
                .take_while(|(a, b)| a == b)
                .count();
            best = best.max(len);
        }
        if best == 0 {
            i += 1;
        } else {
            spans.push(best);
            i += best;
        }
    }
    if spans.is_empty() {
        0.0
    } else {
        spans.iter().sum::<usize>() as f64 / spans.len() as f64
    }
}

/// Number of article sentences the greedy rule credits for one summary
/// sentence.
pub fn fusion_sources<S: AsRef<str>>(article_sentences: &[Vec<S>], summary_sentence: &[S]) -> usize {
    let content = |toks: &[S]| -> BTreeSet<String> {
        toks.iter()
            .map(|t| t.as_ref())
            .filter(|t| !is_stopword(t))
            .map(Into::into)
            .collect()
    };
    let mut remaining = content(summary_sentence);
    let sources: Vec<BTreeSet<String>> = article_sentences.iter().map(|s| content(s)).collect();
    let mut used = BTreeSet::new();
    while used.len() < FUSION_MAX_SOURCES {
        let mut best: Option<(usize, usize)> = None;
        for (k, src) in sources.iter().enumerate() {
            if used.contains(&k) {
                continue;
            }
            let gain = remaining.intersection(src).count();
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((k, gain));
            }
        }
        match best {
            Some((k, gain)) if gain >= FUSION_MIN_GAIN => {
                remaining.retain(|w| !sources[k].contains(w));
                used.insert(k);
            }
            _ => break,
        }
    }
    used.len()
}

/// Share of summary sentences by number of contributing sources, in
/// percent of the sentences that have at least one source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FusionProfile {
    pub compression: f64,
    pub hop2: f64,
    pub hop3: f64,
    pub hop4_plus: f64,
    pub classified: usize,
    pub unclassified: usize,
}

pub fn fusion_profile<S: AsRef<str>>(article_sentences: &[Vec<S>], summary_sentences: &[Vec<S>]) -> FusionProfile {
    let mut counts = [0usize; 4];
    let mut unclassified = 0;
    for s in summary_sentences {
        match fusion_sources(article_sentences, s) {
            0 => unclassified += 1,
            k => counts[k.min(4) - 1] += 1,
        }
    }
    let classified: usize = counts.iter().sum();
    let pct = |c: usize| {
        if classified == 0 {
            0.0
        } else {
            100.0 * c as f64 / classified as f64
        }
    };
    FusionProfile {
        compression: pct(counts[0]),
        hop2: pct(counts[1]),
        hop3: pct(counts[2]),
        hop4_plus: pct(counts[3]),
        classified,
        unclassified,
    }
}
