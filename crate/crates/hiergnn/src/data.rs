//! JSONL records, text ↔ example conversion and graph export.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hiergnn_core::corpus::{example_from_text, split_sentences, synthetic_word, tokenize, Example, Vocabulary, EOS};
use hiergnn_core::mtc::LatentGraph;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Empty(String),
}

/// One article/summary pair; synthetic corpora also carry the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub doc_id: String,
    pub article: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_tree: Option<Vec<Option<usize>>>,
}

/// Parsed lines of a JSONL file plus the malformed ones.
#[derive(Debug)]
pub struct Lines<T> {
    pub records: Vec<T>,
    pub malformed: Vec<DataError>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Lines<T>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Lines {
        records: Vec::new(),
        malformed: Vec::new(),
    };
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.records.push(r),
            Err(e) => out.malformed.push(DataError::Malformed {
                path: path.to_path_buf(),
                line: k + 1,
                msg: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Reads every line or fails on the first malformed one.
pub fn read_jsonl_strict<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let mut lines = read_jsonl(path)?;
    match lines.malformed.is_empty() {
        true => Ok(lines.records),
        false => Err(lines.malformed.remove(0)),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn capitalized_sentence(ids: &[usize]) -> String {
    let mut s = ids.iter().map(|&i| synthetic_word(i)).collect::<Vec<_>>().join(" ");
    if let Some(first) = s.get(0..1) {
        let upper = first.to_uppercase();
        s.replace_range(0..1, &upper);
    }
    s.push('.');
    s
}

/// Text form of a synthetic example: each sentence starts with a capital
/// so the splitter recovers the original sentence boundaries.
pub fn render_synthetic(ex: &Example) -> TextRecord {
    let body: Vec<usize> = ex.summary.iter().copied().filter(|&t| t != EOS).collect();
    TextRecord {
        doc_id: ex.doc_id.clone(),
        article: ex.sentences.iter().map(|s| capitalized_sentence(s)).collect::<Vec<_>>().join(" "),
        summary: if body.is_empty() { String::new() } else { capitalized_sentence(&body) },
        true_tree: ex.true_tree.clone(),
    }
}

/// Most frequent words over articles and summaries.
pub fn build_vocab(records: &[TextRecord], max_size: usize) -> Vocabulary {
    let texts: Vec<Vec<String>> = records
        .iter()
        .flat_map(|r| [tokenize(&r.article), tokenize(&r.summary)])
        .collect();
    Vocabulary::build(texts.iter().map(Vec::as_slice), max_size)
}

/// Converts records to id examples. Documents without any tokens are
/// dropped with a warning. A tree is kept only when the split sentence
/// count matches it.
pub fn to_examples(records: &[TextRecord], vocab: &Vocabulary) -> Vec<Example> {
    records
        .iter()
        .filter_map(|r| {
            let mut ex = example_from_text(&r.doc_id, &r.article, &r.summary, vocab);
            if ex.sentences.is_empty() {
                log::warn!("document {} has no tokens; skipped", r.doc_id);
                return None;
            }
            ex.true_tree = r.true_tree.clone().filter(|t| t.len() == ex.sentences.len());
            Some(ex)
        })
        .collect()
}

/// Tokenized sentences of a text, as the metrics read them.
pub fn sentence_tokens(text: &str) -> Vec<Vec<String>> {
    split_sentences(text).iter().map(|s| tokenize(s)).filter(|s| !s.is_empty()).collect()
}

/// JSON view of one induced structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub doc_id: String,
    pub layer: usize,
    pub m: usize,
    pub root: Vec<f64>,
    /// `adj[i][j]`: probability that sentence `i` is the parent of `j`.
    pub adj: Vec<Vec<f64>>,
    pub log_z: f64,
}

impl GraphRecord {
    pub fn new(doc_id: &str, layer: usize, g: &LatentGraph) -> Self {
        GraphRecord {
            doc_id: doc_id.to_string(),
            layer,
            m: g.m(),
            root: g.root.clone(),
            adj: (0..g.m()).map(|i| g.adj.row(i).to_vec()).collect(),
            log_z: g.log_z,
        }
    }
}

/// DOT rendering with a virtual `ROOT` node; edges below `threshold` are
/// left out.
pub fn to_dot(g: &GraphRecord, threshold: f64, labels: Option<&[String]>) -> String {
    let mut s = String::new();
    let name = g.doc_id.replace('"', "'");
    let _ = writeln!(s, "digraph \"{name}.L{}\" {{", g.layer);
    let _ = writeln!(s, "  ROOT [shape=box];");
    for i in 0..g.m {
        let label = labels
            .and_then(|l| l.get(i))
            .map(|t| t.replace('"', "'"))
            .unwrap_or_else(|| format!("s{i}"));
        let _ = writeln!(s, "  s{i} [label=\"{label}\"];");
    }
    for (i, &p) in g.root.iter().enumerate() {
        if p >= threshold {
            let _ = writeln!(s, "  ROOT -> s{i} [label=\"{p:.3}\"];");
        }
    }
    for (i, row) in g.adj.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if i != j && p >= threshold {
                let _ = writeln!(s, "  s{i} -> s{j} [label=\"{p:.3}\"];");
            }
        }
    }
    s.push_str("}\n");
    s
}

/// File-name-safe form of a document id.
pub fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
