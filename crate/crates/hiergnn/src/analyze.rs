//! Per-document and corpus-level summary statistics.

use hiergnn_core::corpus::Vocabulary;
use hiergnn_core::metrics::{self, DiversityReport, FusionProfile};
use hiergnn_core::model::{encode_document, Model};
use serde::{Deserialize, Serialize};

use crate::data::sentence_tokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    #[serde(default)]
    pub doc_id: String,
    pub article: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocMetrics {
    pub doc_id: String,
    /// Percent of article sentences sharing a content bigram with the summary.
    pub coverage: f64,
    pub copy_length: f64,
    pub fusion: FusionProfile,
    /// Structure statistics of the model's induced graphs; sparsity counts
    /// scores at the ε floor, not marginals.
    pub diversity: Option<DiversityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateDiversity {
    pub root_range: f64,
    pub edge_range: f64,
    pub js_root: Option<f64>,
    pub js_edge: Option<f64>,
    pub edge_eps_fraction: f64,
    pub root_eps_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub aggregate: bool,
    pub n_docs: usize,
    pub coverage: f64,
    pub copy_length: f64,
    /// Fusion buckets over every summary sentence of the corpus.
    pub fusion: FusionProfile,
    pub diversity: Option<AggregateDiversity>,
}

/// Optional model used to add structure statistics.
pub struct Structure<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
}

pub fn analyze_pair(pair: &PairRecord, structure: Option<&Structure<'_>>) -> DocMetrics {
    let article = sentence_tokens(&pair.article);
    let summary = sentence_tokens(&pair.summary);
    let article_flat = article.concat();
    let summary_flat = summary.concat();
    let diversity = structure.and_then(|s| {
        let ids: Vec<Vec<usize>> = article.iter().map(|t| s.vocab.encode(t)).collect();
        let doc = encode_document(s.model, &ids)
            .map_err(|e| log::warn!("document {}: {e}", pair.doc_id))
            .ok()?;
        metrics::diversity_report(&doc.graphs, &doc.scores).ok()
    });
    DocMetrics {
        doc_id: pair.doc_id.clone(),
        coverage: metrics::coverage_rate(&article, &summary_flat),
        copy_length: metrics::avg_copy_length(&article_flat, &summary_flat),
        fusion: metrics::fusion_profile(&article, &summary),
        diversity,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(pairs: &[PairRecord], docs: &[DocMetrics]) -> Aggregate {
    let article_summary: Vec<(Vec<Vec<String>>, Vec<Vec<String>>)> = pairs
        .iter()
        .map(|p| (sentence_tokens(&p.article), sentence_tokens(&p.summary)))
        .collect();
    let mut counts = [0usize; 4];
    let mut unclassified = 0;
    for (article, summary) in &article_summary {
        for s in summary {
            match metrics::fusion_sources(article, s) {
                0 => unclassified += 1,
                k => counts[k.min(4) - 1] += 1,
            }
        }
    }
    let classified: usize = counts.iter().sum();
    let pct = |c: usize| if classified == 0 { 0.0 } else { 100.0 * c as f64 / classified as f64 };

    let reports: Vec<&DiversityReport> = docs.iter().filter_map(|d| d.diversity.as_ref()).collect();
    let diversity = (!reports.is_empty()).then(|| {
        let intra = || reports.iter().flat_map(|r| r.intra.iter());
        let sparse = || reports.iter().flat_map(|r| r.sparsity.iter());
        let inter = || reports.iter().filter_map(|r| r.inter);
        AggregateDiversity {
            root_range: mean(intra().map(|x| x.0)).unwrap_or(0.0),
            edge_range: mean(intra().map(|x| x.1)).unwrap_or(0.0),
            js_root: mean(inter().map(|x| x.0)),
            js_edge: mean(inter().map(|x| x.1)),
            edge_eps_fraction: mean(sparse().map(|x| x.0)).unwrap_or(0.0),
            root_eps_fraction: mean(sparse().map(|x| x.1)).unwrap_or(0.0),
        }
    });
    Aggregate {
        aggregate: true,
        n_docs: docs.len(),
        coverage: mean(docs.iter().map(|d| d.coverage)).unwrap_or(0.0),
        copy_length: mean(docs.iter().map(|d| d.copy_length)).unwrap_or(0.0),
        fusion: FusionProfile {
            compression: pct(counts[0]),
            hop2: pct(counts[1]),
            hop3: pct(counts[2]),
            hop4_plus: pct(counts[3]),
            classified,
            unclassified,
        },
        diversity,
    }
}
