//! Subcommands and exit codes: 0 success, 1 failed checks, 2 usage,
//! 3 training failure, 4 data errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hiergnn_core::corpus::{generate_synthetic, SynthSpec, BOS, EOS};
use hiergnn_core::model::{encode_document, greedy_decode, Model, ModelError};
use serde::Serialize;

use crate::analyze::{self, PairRecord, Structure};
use crate::config::RunConfig;
use crate::data::{self, GraphRecord, TextRecord};
use crate::store::{self, Checkpoint, StoreError};
use crate::train;
use crate::verify::{self, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECKS_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hiergnn", version, about = "Latent sentence-structure summarization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with reference trees as JSONL.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a per-step loss log.
    Train(TrainArgs),
    /// Export induced structures as JSON lines and DOT files.
    Induce(InduceArgs),
    /// Coverage, copy length, fusion and (with a checkpoint) structure statistics.
    Analyze(AnalyzeArgs),
    /// Run the built-in oracle and gradient checks.
    Verify(VerifyArgs),
    /// Greedy decoding with graph-attention traces.
    Decode(DecodeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n_docs: usize,
    #[arg(long, default_value_t = 2)]
    pub connectors: usize,
    /// Total detail sentences per document, spread over the connectors.
    #[arg(long, default_value_t = 2)]
    pub children: usize,
    #[arg(long, default_value_t = 4)]
    pub fillers: usize,
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 7)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2)]
    pub topics: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint stem: writes `<out>.manifest.json` and `<out>.bin`.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log; defaults to `<out>.loss.jsonl`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct InduceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `graphs.jsonl` and `dot/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub dot_threshold: f64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Adds structure diversity and sparsity from this model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn fail(code: i32, message: impl std::fmt::Display) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

impl From<data::DataError> for Failure {
    fn from(e: data::DataError) -> Self {
        fail(EXIT_DATA, e)
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        fail(EXIT_DATA, e)
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    match path.is_file() {
        true => Ok(()),
        false => Err(fail(EXIT_USAGE, format!("{what} {} does not exist", path.display()))),
    }
}

fn require_checkpoint(stem: &Path) -> Result<(), Failure> {
    require_file(&store::manifest_path(stem), "checkpoint manifest")
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn run(cmd: Command) -> Result<i32, Failure> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Induce(a) => induce(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Decode(a) => decode(a),
    }
}

fn synth(a: SynthArgs) -> Result<i32, Failure> {
    let spec = SynthSpec {
        connectors: a.connectors,
        children: a.children,
        filler_sentences: a.fillers,
        vocab_size: a.vocab_size,
        sentence_len: (a.min_len, a.max_len),
        topics_per_connector: a.topics,
        seed: a.seed,
    };
    let docs = generate_synthetic(&spec, a.n_docs).map_err(|e| fail(EXIT_USAGE, e))?;
    let records: Vec<TextRecord> = docs.iter().map(data::render_synthetic).collect();
    data::write_jsonl(&a.out, &records)?;
    let mut meta = a.out.clone().into_os_string();
    meta.push(".meta.json");
    let meta = PathBuf::from(meta);
    let body = serde_json::json!({ "n_docs": a.n_docs, "spec": spec });
    std::fs::write(&meta, serde_json::to_vec_pretty(&body).expect("meta serializes"))
        .map_err(|e| fail(EXIT_DATA, format!("{}: {e}", meta.display())))?;
    log::info!("wrote {} documents to {}", records.len(), a.out.display());
    Ok(EXIT_OK)
}

fn load_records(path: &Path) -> Result<Vec<TextRecord>, Failure> {
    require_file(path, "data file")?;
    let records: Vec<TextRecord> = data::read_jsonl_strict(path)?;
    if records.is_empty() {
        return Err(fail(EXIT_DATA, format!("{} holds no documents", path.display())));
    }
    Ok(records)
}

fn train_cmd(a: TrainArgs) -> Result<i32, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            RunConfig::from_file(p).map_err(|e| fail(EXIT_USAGE, e))?
        }
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&a.overrides).map_err(|e| fail(EXIT_USAGE, e))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate().map_err(|e| fail(EXIT_USAGE, e))?;

    let records = load_records(&a.data)?;
    let vocab = data::build_vocab(&records, cfg.vocab_size);
    let examples = data::to_examples(&records, &vocab);
    if examples.is_empty() {
        return Err(fail(EXIT_DATA, "no usable documents"));
    }
    let mut model = Model::new(cfg.model_config(vocab.len()), cfg.seed).map_err(|e| fail(EXIT_USAGE, e))?;
    let log_path = a.loss_log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".loss.jsonl");
        PathBuf::from(s)
    });
    log::info!(
        "training d={} L={} mode={:?} on {} documents, vocabulary {}",
        cfg.d,
        cfg.layers,
        cfg.mode,
        examples.len(),
        vocab.len()
    );
    let every = cfg.log_every.max(1);
    let result = train::train(&mut model, &examples, cfg.steps, cfg.batch_size, &cfg.optimizer(), |r| {
        if r.step % every == 0 {
            log::info!("step {} loss {:.4} grad_norm {:.3}", r.step, r.loss, r.grad_norm);
        }
    });
    let rows = match result {
        Ok(rows) => rows,
        Err(e @ ModelError::NonFiniteLoss(_)) => return Err(fail(EXIT_TRAINING, e)),
        Err(e) => return Err(fail(EXIT_DATA, e)),
    };
    data::write_jsonl(&log_path, &rows)?;
    let ck = Checkpoint {
        model,
        seed: cfg.seed,
        step: rows.len() as u64,
        vocab: Some(vocab),
    };
    store::save_checkpoint(&ck, &a.out).map_err(|e| fail(EXIT_TRAINING, e))?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!("steps {} loss {:.4} -> {:.4}", rows.len(), first.loss, last.loss);
    }
    Ok(EXIT_OK)
}

fn load_model_and_examples(
    checkpoint: &Path,
    data_path: &Path,
) -> Result<(Checkpoint, Vec<hiergnn_core::Example>, Vec<TextRecord>), Failure> {
    require_checkpoint(checkpoint)?;
    let records = load_records(data_path)?;
    let ck = store::load_checkpoint(checkpoint)?;
    let vocab = ck
        .vocab
        .clone()
        .ok_or_else(|| fail(EXIT_DATA, "checkpoint carries no vocabulary"))?;
    let examples = data::to_examples(&records, &vocab);
    Ok((ck, examples, records))
}

fn induce(a: InduceArgs) -> Result<i32, Failure> {
    let (ck, examples, _) = load_model_and_examples(&a.checkpoint, &a.data)?;
    let dot_dir = a.out.join("dot");
    std::fs::create_dir_all(&dot_dir).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", dot_dir.display())))?;
    let mut rows = Vec::new();
    for ex in &examples {
        let doc = encode_document(&ck.model, &ex.sentences).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", ex.doc_id)))?;
        for (layer, g) in doc.graphs.iter().enumerate() {
            let rec = GraphRecord::new(&ex.doc_id, layer, g);
            let dot = data::to_dot(&rec, a.dot_threshold, None);
            let path = dot_dir.join(format!("{}.L{layer}.dot", data::safe_name(&ex.doc_id)));
            std::fs::write(&path, dot).map_err(|e| fail(EXIT_DATA, format!("{}: {e}", path.display())))?;
            rows.push(rec);
        }
    }
    data::write_jsonl(&a.out.join("graphs.jsonl"), &rows)?;
    println!("{} graphs for {} documents", rows.len(), examples.len());
    Ok(EXIT_OK)
}

#[derive(Serialize)]
#[serde(untagged)]
enum AnalyzeRow {
    Doc(analyze::DocMetrics),
    Total(analyze::Aggregate),
}

fn analyze_cmd(a: AnalyzeArgs) -> Result<i32, Failure> {
    require_file(&a.pairs, "pairs file")?;
    let lines = data::read_jsonl::<PairRecord>(&a.pairs)?;
    for bad in &lines.malformed {
        log::warn!("skipping {bad}");
    }
    let ck = match &a.checkpoint {
        Some(p) => {
            require_checkpoint(p)?;
            Some(store::load_checkpoint(p)?)
        }
        None => None,
    };
    let structure = match &ck {
        Some(Checkpoint { model, vocab: Some(v), .. }) => Some(Structure { model, vocab: v }),
        Some(_) => return Err(fail(EXIT_DATA, "checkpoint carries no vocabulary")),
        None => None,
    };
    let docs: Vec<analyze::DocMetrics> = lines.records.iter().map(|p| analyze::analyze_pair(p, structure.as_ref())).collect();
    let total = analyze::aggregate(&lines.records, &docs);
    let mut rows: Vec<AnalyzeRow> = docs.into_iter().map(AnalyzeRow::Doc).collect();
    rows.push(AnalyzeRow::Total(total));
    data::write_jsonl(&a.out, &rows)?;
    if lines.malformed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: {} malformed line(s) skipped", lines.malformed.len());
        Ok(EXIT_DATA)
    }
}

fn verify_cmd(a: VerifyArgs) -> Result<i32, Failure> {
    let suite: Suite = a.suite.parse().map_err(|e| fail(EXIT_USAGE, e))?;
    let checks = verify::run(suite);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if checks.iter().all(|c| c.passed) { EXIT_OK } else { EXIT_CHECKS_FAILED })
}

#[derive(Serialize)]
struct DecodeRow {
    doc_id: String,
    summary_tokens: Vec<String>,
    graph: Option<GraphRecord>,
    /// Every induced structure when there is more than one.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    layer_graphs: Vec<GraphRecord>,
    graph_attention_trace: Vec<Vec<f64>>,
}

fn decode(a: DecodeArgs) -> Result<i32, Failure> {
    let (ck, examples, _) = load_model_and_examples(&a.checkpoint, &a.data)?;
    let vocab = ck.vocab.as_ref().expect("checked on load");
    let mut rows = Vec::with_capacity(examples.len());
    for ex in &examples {
        let out = greedy_decode(&ck.model, &ex.sentences, a.max_len)
            .map_err(|e| fail(EXIT_DATA, format!("{}: {e}", ex.doc_id)))?;
        let graphs: Vec<GraphRecord> =
            out.encoded.graphs.iter().enumerate().map(|(l, g)| GraphRecord::new(&ex.doc_id, l, g)).collect();
        rows.push(DecodeRow {
            doc_id: ex.doc_id.clone(),
            summary_tokens: out
                .tokens
                .iter()
                .filter(|&&t| t != BOS && t != EOS)
                .map(|&t| vocab.word(t).to_string())
                .collect(),
            graph: graphs.first().cloned(),
            layer_graphs: if graphs.len() > 1 { graphs } else { Vec::new() },
            graph_attention_trace: out.steps.iter().map(|s| s.a_graph.clone()).collect(),
        });
    }
    data::write_jsonl(&a.out, &rows)?;
    Ok(EXIT_OK)
}
