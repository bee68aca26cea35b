//! Desk-scale sequence-to-sequence summarizer hosting the reasoning stack.
//!
//! Tokens are embedded with a sinusoidal position signal and mixed by one
//! bidirectional recurrent layer. Sentence states are affine maps of the
//! mean token state in each sentence and feed the reasoning stack. The
//! decoder is a single tanh recurrent cell; at each step it attends over
//! sentence nodes first (graph selection), uses that graph context as an
//! extra input to token attention, and fuses both contexts before the
//! output projection.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, BOS, EOS};
use crate::diff::{CompGraph, DiffError, GradStore, NodeId};
use crate::linalg::Matrix;
use crate::mtc::{self, LatentGraph, MtcError, SentenceStates};
use crate::params::ParamStore;
use crate::reasoning::{self, Mode, Phi, StackConfig};

/// Half-width of the uniform embedding initializer.
pub const EMBED_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("empty input document")]
    EmptyInput,
    #[error("sentence {0} has no tokens")]
    EmptySpan(usize),
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    UnknownToken { id: usize, vocab_size: usize },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mtc(#[from] MtcError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Which node states graph-selection attention reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GsaSource {
    /// Output of the last reasoning block.
    #[default]
    Last,
    /// Fused output with the residual.
    Fused,
}

/// How the decoder context is formed from graph and token contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextFusion {
    /// `tanh(W_f·[c_G; c_T] + b_f)`.
    #[default]
    Fused,
    /// The token context alone.
    TokenOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub mode: Mode,
    pub epsilon: f64,
    pub vocab_size: usize,
    #[serde(default)]
    pub phi: Phi,
    #[serde(default)]
    pub lir_shared_scorer: bool,
    #[serde(default)]
    pub gsa_source: GsaSource,
    #[serde(default)]
    pub context: ContextFusion,
    /// Without the reasoning stack the decoder uses plain token attention.
    #[serde(default = "default_true")]
    pub use_hiergnn: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(d: usize, layers: usize, mode: Mode, vocab_size: usize) -> Self {
        ModelConfig {
            d,
            layers,
            mode,
            epsilon: mtc::DEFAULT_EPSILON,
            vocab_size,
            phi: Phi::Tanh,
            lir_shared_scorer: false,
            gsa_source: GsaSource::Last,
            context: ContextFusion::Fused,
            use_hiergnn: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.layers == 0 {
            return bad("L must be at least 1".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        Ok(())
    }

    pub fn stack_config(&self) -> StackConfig {
        StackConfig {
            layers: self.layers,
            mode: self.mode,
            d: self.d,
            epsilon: self.epsilon,
            phi: self.phi,
            lir_shared_scorer: self.lir_shared_scorer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters from `seed`. Embeddings are uniform in
    /// ±[`EMBED_SCALE`], encoder, attention and decoder weights are
    /// Glorot-uniform, structure and reasoning weights are uniform in
    /// ±0.08. Biases start at zero, layer-norm gains at one, and the
    /// output projection at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.d, config.vocab_size);
        let mut p = ParamStore::new();
        p.init_uniform_scaled("enc.embed", v, d, EMBED_SCALE, &mut rng);
        for dir in ["enc.fwd", "enc.bwd"] {
            p.init_glorot(&format!("{dir}.w"), d, d, &mut rng);
            p.init_glorot(&format!("{dir}.u"), d, d, &mut rng);
            p.init_zeros(&format!("{dir}.b"), 1, d);
        }
        p.init_glorot("enc.mix.w", 2 * d, d, &mut rng);
        p.init_zeros("enc.mix.b", 1, d);
        p.init_glorot("pool.w", d, d, &mut rng);
        p.init_zeros("pool.b", 1, d);

        reasoning::init_params(&mut p, &config.stack_config(), &mut rng);

        p.init_glorot("gsa.w1", d, d, &mut rng);
        p.init_glorot("gsa.w2", d, d, &mut rng);
        p.init_glorot("gsa.v", d, 1, &mut rng);
        p.init_glorot("tok.w1", d, d, &mut rng);
        p.init_glorot("tok.w2", d, d, &mut rng);
        p.init_glorot("tok.w3", d, d, &mut rng);
        p.init_glorot("tok.v", d, 1, &mut rng);
        p.init_glorot("ctx.w", 2 * d, d, &mut rng);
        p.init_zeros("ctx.b", 1, d);

        p.init_uniform_scaled("dec.embed", v, d, EMBED_SCALE, &mut rng);
        p.init_glorot("dec.w_in", d, d, &mut rng);
        p.init_glorot("dec.u", d, d, &mut rng);
        p.init_glorot("dec.w_ctx", d, d, &mut rng);
        p.init_zeros("dec.b", 1, d);
        p.init_glorot("dec.init.w", d, d, &mut rng);
        p.init_zeros("dec.init.b", 1, d);
        p.init_zeros("out.w", 2 * d, v);
        Ok(Model { config, params: p })
    }

    /// Tensor names and shapes this configuration requires.
    pub fn expected_shapes(config: &ModelConfig) -> Result<Vec<(String, (usize, usize))>, ModelError> {
        let m = Model::new(config.clone(), 0)?;
        Ok(m.params.iter().map(|(n, t)| (n.clone(), t.shape())).collect())
    }

    fn check_tokens(&self, ids: impl IntoIterator<Item = usize>) -> Result<(), ModelError> {
        let vocab_size = self.config.vocab_size;
        match ids.into_iter().find(|&id| id >= vocab_size) {
            Some(id) => Err(ModelError::UnknownToken { id, vocab_size }),
            None => Ok(()),
        }
    }

    fn p(&self, g: &mut CompGraph, name: &str) -> Result<NodeId, ModelError> {
        Ok(g.param_from(&self.params, name)?)
    }
}

/// Sinusoidal position signal, N×d.
pub fn position_signal(n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |t, k| {
        let freq = libm::pow(10_000.0, -((k / 2 * 2) as f64) / d as f64);
        let angle = t as f64 * freq;
        if k % 2 == 0 {
            libm::sin(angle)
        } else {
            libm::cos(angle)
        }
    })
}

/// Contextual token encodings with sentence spans.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates {
    pub henc: Matrix,
    /// Half-open `[start, end)` token range of each sentence.
    pub sent_spans: Vec<(usize, usize)>,
}

impl TokenStates {
    pub fn n(&self) -> usize {
        self.henc.rows()
    }
}

fn spans_of(sentences: &[Vec<usize>]) -> Result<Vec<(usize, usize)>, ModelError> {
    if sentences.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let mut spans = Vec::with_capacity(sentences.len());
    let mut at = 0;
    for (i, s) in sentences.iter().enumerate() {
        if s.is_empty() {
            return Err(ModelError::EmptySpan(i));
        }
        spans.push((at, at + s.len()));
        at += s.len();
    }
    Ok(spans)
}

/// Records the bidirectional recurrent encoder; returns the N×d states.
pub fn record_encode(g: &mut CompGraph, model: &Model, tokens: &[usize]) -> Result<NodeId, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    model.check_tokens(tokens.iter().copied())?;
    let n = tokens.len();
    let d = model.config.d;
    let embed = model.p(g, "enc.embed")?;
    let emb = g.gather_rows(embed, tokens)?;
    let pos = g.constant(position_signal(n, d));
    let x = g.add(emb, pos)?;

    let run = |g: &mut CompGraph, dir: &str, order: &mut dyn Iterator<Item = usize>| {
        let w = model.p(g, &format!("{dir}.w"))?;
        let u = model.p(g, &format!("{dir}.u"))?;
        let b = model.p(g, &format!("{dir}.b"))?;
        let xw = g.affine(x, w, b)?;
        let mut states: Vec<Option<NodeId>> = vec![None; n];
        let mut prev: Option<NodeId> = None;
        for t in order {
            let xt = g.slice_rows(xw, t, t + 1)?;
            let pre = match prev {
                Some(h) => {
                    let hu = g.matmul(h, u)?;
                    g.add(xt, hu)?
                }
                None => xt,
            };
            let h = g.tanh(pre)?;
            states[t] = Some(h);
            prev = Some(h);
        }
        let rows: Vec<NodeId> = states.into_iter().map(|s| s.expect("every step visited")).collect();
        Ok::<NodeId, ModelError>(g.concat_rows(&rows)?)
    };
    let fwd = run(g, "enc.fwd", &mut (0..n))?;
    let bwd = run(g, "enc.bwd", &mut (0..n).rev())?;
    let both = g.concat_cols(&[fwd, bwd])?;
    let mw = model.p(g, "enc.mix.w")?;
    let mb = model.p(g, "enc.mix.b")?;
    let mixed = g.affine(both, mw, mb)?;
    Ok(g.tanh(mixed)?)
}

/// Records `s_i = mean(henc[span_i])·W + b`; returns M×d.
pub fn record_pool(
    g: &mut CompGraph,
    model: &Model,
    henc: NodeId,
    spans: &[(usize, usize)],
) -> Result<NodeId, ModelError> {
    let n = g.shape(henc).0;
    if let Some(i) = spans.iter().position(|&(s, e)| s >= e || e > n) {
        return Err(ModelError::EmptySpan(i));
    }
    let pool = g.constant(Matrix::from_fn(spans.len(), n, |i, t| {
        let (s, e) = spans[i];
        if (s..e).contains(&t) {
            1.0 / (e - s) as f64
        } else {
            0.0
        }
    }));
    let means = g.matmul(pool, henc)?;
    let w = model.p(g, "pool.w")?;
    let b = model.p(g, "pool.b")?;
    Ok(g.affine(means, w, b)?)
}

/// Everything the decoder reads from an encoded document.
#[derive(Debug, Clone)]
pub struct EncodedNodes {
    pub henc: NodeId,
    pub h0: NodeId,
    pub stack: Option<reasoning::StackNodes>,
    pub fused: Option<NodeId>,
    /// Node states graph-selection attention reads.
    pub attend: Option<NodeId>,
}

pub fn record_document(
    g: &mut CompGraph,
    model: &Model,
    sentences: &[Vec<usize>],
) -> Result<EncodedNodes, ModelError> {
    let spans = spans_of(sentences)?;
    let tokens: Vec<usize> = sentences.iter().flatten().copied().collect();
    let henc = record_encode(g, model, &tokens)?;
    let h0 = record_pool(g, model, henc, &spans)?;
    if !model.config.use_hiergnn {
        return Ok(EncodedNodes {
            henc,
            h0,
            stack: None,
            fused: None,
            attend: None,
        });
    }
    let stack = reasoning::record_stack(g, &model.params, &model.config.stack_config(), h0)?;
    let fused = reasoning::record_fuse(g, &model.params, &stack.per_layer, h0)?;
    let attend = match model.config.gsa_source {
        GsaSource::Last => *stack.per_layer.last().expect("at least one layer"),
        GsaSource::Fused => fused,
    };
    Ok(EncodedNodes {
        henc,
        h0,
        stack: Some(stack),
        fused: Some(fused),
        attend: Some(attend),
    })
}

/// Additive attention `softmax(vᵀ tanh(K·W₁ + q))` over the rows of `keys`,
/// where `keys_w1 = K·W₁` is precomputed and `query` is a 1×d row already
/// projected. Returns the 1×rows weights and the 1×d context.
fn record_additive_attention(
    g: &mut CompGraph,
    keys: NodeId,
    keys_w1: NodeId,
    query: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId), ModelError> {
    let pre = g.add_row(keys_w1, query)?;
    let act = g.tanh(pre)?;
    let scores = g.matmul(act, v)?;
    let row = g.transpose(scores)?;
    let weights = g.softmax_rows(row)?;
    let context = g.matmul(weights, keys)?;
    Ok((weights, context))
}

/// Graph-selection attention: `e_i = vᵀ tanh(W₁ h_i + W₂ z)`.
pub fn record_graph_attention(
    g: &mut CompGraph,
    model: &Model,
    nodes: NodeId,
    nodes_w1: NodeId,
    z: NodeId,
) -> Result<(NodeId, NodeId), ModelError> {
    let w2 = model.p(g, "gsa.w2")?;
    let v = model.p(g, "gsa.v")?;
    let q = g.matmul(z, w2)?;
    record_additive_attention(g, nodes, nodes_w1, q, v)
}

/// Token attention conditioned on the graph context:
/// `e_i = vᵀ tanh(W₁ henc_i + W₂ z + W₃ c_G)`. Without a graph context
/// the `W₃` term is absent.
pub fn record_token_attention(
    g: &mut CompGraph,
    model: &Model,
    henc: NodeId,
    henc_w1: NodeId,
    z: NodeId,
    c_graph: Option<NodeId>,
) -> Result<(NodeId, NodeId), ModelError> {
    let w2 = model.p(g, "tok.w2")?;
    let v = model.p(g, "tok.v")?;
    let mut q = g.matmul(z, w2)?;
    if let Some(cg) = c_graph {
        let w3 = model.p(g, "tok.w3")?;
        let qc = g.matmul(cg, w3)?;
        q = g.add(q, qc)?;
    }
    record_additive_attention(g, henc, henc_w1, q, v)
}

/// `c_f = tanh(W_f·[c_G; c_T] + b_f)`.
pub fn record_fuse_contexts(
    g: &mut CompGraph,
    model: &Model,
    c_graph: NodeId,
    c_token: NodeId,
) -> Result<NodeId, ModelError> {
    let w = model.p(g, "ctx.w")?;
    let b = model.p(g, "ctx.b")?;
    let both = g.concat_cols(&[c_graph, c_token])?;
    let pre = g.affine(both, w, b)?;
    Ok(g.tanh(pre)?)
}

/// Decoder-side nodes shared by every step.
#[derive(Debug, Clone, Copy)]
pub struct DecoderContext {
    pub henc: NodeId,
    pub henc_w1: NodeId,
    pub nodes: Option<NodeId>,
    pub nodes_w1: Option<NodeId>,
}

/// Recurrent state carried between steps: `z` and the previous fused
/// context, both 1×d.
#[derive(Debug, Clone, Copy)]
pub struct StateNodes {
    pub z: NodeId,
    pub c_fused: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    pub z: NodeId,
    pub a_graph: Option<NodeId>,
    pub c_graph: Option<NodeId>,
    pub a_token: NodeId,
    pub c_token: NodeId,
    pub c_fused: NodeId,
    pub log_probs: NodeId,
}

pub fn record_decoder_context(
    g: &mut CompGraph,
    model: &Model,
    enc: &EncodedNodes,
) -> Result<DecoderContext, ModelError> {
    let tw1 = model.p(g, "tok.w1")?;
    let henc_w1 = g.matmul(enc.henc, tw1)?;
    let (nodes, nodes_w1) = match enc.attend {
        Some(nodes) => {
            let gw1 = model.p(g, "gsa.w1")?;
            (Some(nodes), Some(g.matmul(nodes, gw1)?))
        }
        None => (None, None),
    };
    Ok(DecoderContext {
        henc: enc.henc,
        henc_w1,
        nodes,
        nodes_w1,
    })
}

/// `z_0 = tanh(mean(henc)·W + b)`, previous context zero.
pub fn record_initial_state(g: &mut CompGraph, model: &Model, henc: NodeId) -> Result<StateNodes, ModelError> {
    let n = g.shape(henc).0;
    let mean = g.constant(Matrix::filled(1, n, 1.0 / n as f64));
    let pooled = g.matmul(mean, henc)?;
    let w = model.p(g, "dec.init.w")?;
    let b = model.p(g, "dec.init.b")?;
    let pre = g.affine(pooled, w, b)?;
    let z = g.tanh(pre)?;
    let c_fused = g.constant(Matrix::zeros(1, model.config.d));
    Ok(StateNodes { z, c_fused })
}

/// One decoder step from a 1×d projected input embedding `x_in`.
pub fn record_step(
    g: &mut CompGraph,
    model: &Model,
    ctx: &DecoderContext,
    x_in: NodeId,
    state: StateNodes,
) -> Result<StepNodes, ModelError> {
    let u = model.p(g, "dec.u")?;
    let wc = model.p(g, "dec.w_ctx")?;
    let zu = g.matmul(state.z, u)?;
    let cw = g.matmul(state.c_fused, wc)?;
    let pre = g.add(x_in, zu)?;
    let pre = g.add(pre, cw)?;
    let z = g.tanh(pre)?;

    let (a_graph, c_graph) = match (ctx.nodes, ctx.nodes_w1) {
        (Some(nodes), Some(nodes_w1)) => {
            let (a, c) = record_graph_attention(g, model, nodes, nodes_w1, z)?;
            (Some(a), Some(c))
        }
        _ => (None, None),
    };
    let (a_token, c_token) = record_token_attention(g, model, ctx.henc, ctx.henc_w1, z, c_graph)?;
    let c_fused = match (model.config.context, c_graph) {
        (ContextFusion::Fused, Some(cg)) => record_fuse_contexts(g, model, cg, c_token)?,
        _ => c_token,
    };
    let w_out = model.p(g, "out.w")?;
    let zc = g.concat_cols(&[z, c_fused])?;
    let logits = g.matmul(zc, w_out)?;
    let log_probs = g.log_softmax_rows(logits)?;
    Ok(StepNodes {
        z,
        a_graph,
        c_graph,
        a_token,
        c_token,
        c_fused,
        log_probs,
    })
}

/// Projected decoder inputs `E[y]·W_in + b`, one row per id.
fn record_inputs(g: &mut CompGraph, model: &Model, ids: &[usize]) -> Result<NodeId, ModelError> {
    let embed = model.p(g, "dec.embed")?;
    let e = g.gather_rows(embed, ids)?;
    let w = model.p(g, "dec.w_in")?;
    let b = model.p(g, "dec.b")?;
    Ok(g.affine(e, w, b)?)
}

/// Teacher-forced loss graph for one example.
#[derive(Debug, Clone)]
pub struct LossNodes {
    /// Summed token NLL, 1×1.
    pub nll_sum: NodeId,
    pub n_tokens: usize,
    pub encoded: EncodedNodes,
    pub steps: Vec<StepNodes>,
}

pub fn record_nll(g: &mut CompGraph, model: &Model, ex: &Example) -> Result<LossNodes, ModelError> {
    if ex.summary.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    model.check_tokens(ex.summary.iter().copied())?;
    let encoded = record_document(g, model, &ex.sentences)?;
    let ctx = record_decoder_context(g, model, &encoded)?;
    let mut inputs = Vec::with_capacity(ex.summary.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&ex.summary[..ex.summary.len() - 1]);
    let x_in = record_inputs(g, model, &inputs)?;

    let mut state = record_initial_state(g, model, encoded.henc)?;
    let mut steps = Vec::with_capacity(inputs.len());
    let mut picks = Vec::with_capacity(inputs.len());
    for (t, &target) in ex.summary.iter().enumerate() {
        let xt = g.slice_rows(x_in, t, t + 1)?;
        let step = record_step(g, model, &ctx, xt, state)?;
        picks.push(g.pick(step.log_probs, &[(0, target)])?);
        state = StateNodes {
            z: step.z,
            c_fused: step.c_fused,
        };
        steps.push(step);
    }
    let all = g.concat_cols(&picks)?;
    let total = g.sum(all)?;
    let nll_sum = g.scale(total, -1.0)?;
    Ok(LossNodes {
        nll_sum,
        n_tokens: ex.summary.len(),
        encoded,
        steps,
    })
}

// ---- plain operations --------------------------------------------------

pub fn encode_tokens(model: &Model, sentences: &[Vec<usize>]) -> Result<TokenStates, ModelError> {
    let spans = spans_of(sentences)?;
    let tokens: Vec<usize> = sentences.iter().flatten().copied().collect();
    let mut g = CompGraph::new();
    let h = record_encode(&mut g, model, &tokens)?;
    Ok(TokenStates {
        henc: g.value(h).clone(),
        sent_spans: spans,
    })
}

pub fn pool_sentences(model: &Model, ts: &TokenStates) -> Result<SentenceStates, ModelError> {
    let mut g = CompGraph::new();
    let h = g.input("henc", ts.henc.clone());
    let s = record_pool(&mut g, model, h, &ts.sent_spans)?;
    Ok(SentenceStates::new(g.value(s).clone())?)
}

/// Graph attention weights (length M) and context (1×d).
pub fn graph_attention(model: &Model, nodes: &Matrix, z: &Matrix) -> Result<(Vec<f64>, Matrix), ModelError> {
    let mut g = CompGraph::new();
    let nn = g.input("nodes", nodes.clone());
    let zn = g.input("z", z.clone());
    let w1 = model.p(&mut g, "gsa.w1")?;
    let nw = g.matmul(nn, w1)?;
    let (a, c) = record_graph_attention(&mut g, model, nn, nw, zn)?;
    Ok((g.value(a).row(0).to_vec(), g.value(c).clone()))
}

/// Token attention weights (length N) and context (1×d).
pub fn token_attention_with_graph(
    model: &Model,
    ts: &TokenStates,
    z: &Matrix,
    c_graph: Option<&Matrix>,
) -> Result<(Vec<f64>, Matrix), ModelError> {
    let mut g = CompGraph::new();
    let h = g.input("henc", ts.henc.clone());
    let zn = g.input("z", z.clone());
    let cg = c_graph.map(|c| g.input("c_graph", c.clone()));
    let w1 = model.p(&mut g, "tok.w1")?;
    let hw = g.matmul(h, w1)?;
    let (a, c) = record_token_attention(&mut g, model, h, hw, zn, cg)?;
    Ok((g.value(a).row(0).to_vec(), g.value(c).clone()))
}

pub fn fuse_contexts(model: &Model, c_graph: &Matrix, c_token: &Matrix) -> Result<Matrix, ModelError> {
    let mut g = CompGraph::new();
    let a = g.input("c_graph", c_graph.clone());
    let b = g.input("c_token", c_token.clone());
    let c = record_fuse_contexts(&mut g, model, a, b)?;
    Ok(g.value(c).clone())
}

/// Encoder-side values the plain decoder reads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDocument {
    pub tokens: TokenStates,
    pub h0: Matrix,
    /// States graph-selection attention reads, when the stack is enabled.
    pub nodes: Option<Matrix>,
    pub per_layer: Vec<Matrix>,
    pub fused: Option<Matrix>,
    pub graphs: Vec<LatentGraph>,
    /// Score sets behind each induced structure.
    pub scores: Vec<mtc::ScoreSet>,
}

pub fn encode_document(model: &Model, sentences: &[Vec<usize>]) -> Result<EncodedDocument, ModelError> {
    let spans = spans_of(sentences)?;
    let mut g = CompGraph::new();
    let enc = record_document(&mut g, model, sentences)?;
    let (per_layer, graphs, scores) = match &enc.stack {
        Some(stack) => (
            stack.per_layer.iter().map(|&n| g.value(n).clone()).collect(),
            stack
                .graphs
                .iter()
                .map(|n| n.latent_graph(&g))
                .collect::<Result<Vec<_>, _>>()?,
            stack
                .graphs
                .iter()
                .map(|n| n.score_set(&g, model.config.epsilon))
                .collect(),
        ),
        None => (vec![], vec![], vec![]),
    };
    Ok(EncodedDocument {
        tokens: TokenStates {
            henc: g.value(enc.henc).clone(),
            sent_spans: spans,
        },
        h0: g.value(enc.h0).clone(),
        nodes: enc.attend.map(|n| g.value(n).clone()),
        per_layer,
        fused: enc.fused.map(|n| g.value(n).clone()),
        graphs,
        scores,
    })
}

/// Decoder recurrent state between plain steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub z: Matrix,
    pub c_fused: Matrix,
}

/// Values produced by one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStep {
    pub z: Vec<f64>,
    pub a_graph: Vec<f64>,
    pub c_graph: Vec<f64>,
    pub a_token: Vec<f64>,
    pub c_token: Vec<f64>,
    pub c_fused: Vec<f64>,
    pub vocab_dist: Vec<f64>,
}

pub fn initial_state(model: &Model, doc: &EncodedDocument) -> Result<DecoderState, ModelError> {
    let mut g = CompGraph::new();
    let h = g.input("henc", doc.tokens.henc.clone());
    let s = record_initial_state(&mut g, model, h)?;
    Ok(DecoderState {
        z: g.value(s.z).clone(),
        c_fused: g.value(s.c_fused).clone(),
    })
}

pub fn decode_step(
    model: &Model,
    doc: &EncodedDocument,
    prev_token: usize,
    state: &DecoderState,
) -> Result<(DecoderStep, DecoderState), ModelError> {
    model.check_tokens([prev_token])?;
    let mut g = CompGraph::new();
    let henc = g.input("henc", doc.tokens.henc.clone());
    let tw1 = model.p(&mut g, "tok.w1")?;
    let henc_w1 = g.matmul(henc, tw1)?;
    let (nodes, nodes_w1) = match &doc.nodes {
        Some(m) => {
            let nn = g.input("nodes", m.clone());
            let gw1 = model.p(&mut g, "gsa.w1")?;
            (Some(nn), Some(g.matmul(nn, gw1)?))
        }
        None => (None, None),
    };
    let ctx = DecoderContext {
        henc,
        henc_w1,
        nodes,
        nodes_w1,
    };
    let z = g.input("z", state.z.clone());
    let c_fused = g.input("c_fused", state.c_fused.clone());
    let x_in = record_inputs(&mut g, model, &[prev_token])?;
    let step = record_step(&mut g, model, &ctx, x_in, StateNodes { z, c_fused })?;
    let row = |id: Option<NodeId>| id.map(|n| g.value(n).row(0).to_vec()).unwrap_or_default();
    let vocab_dist = g.value(step.log_probs).row(0).iter().map(|lp| libm::exp(*lp)).collect();
    let out = DecoderStep {
        z: row(Some(step.z)),
        a_graph: row(step.a_graph),
        c_graph: row(step.c_graph),
        a_token: row(Some(step.a_token)),
        c_token: row(Some(step.c_token)),
        c_fused: row(Some(step.c_fused)),
        vocab_dist,
    };
    let next = DecoderState {
        z: g.value(step.z).clone(),
        c_fused: g.value(step.c_fused).clone(),
    };
    Ok((out, next))
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated ids, without the terminating end-of-sequence id.
    pub tokens: Vec<usize>,
    pub steps: Vec<DecoderStep>,
    pub encoded: EncodedDocument,
}

/// Greedy argmax decoding (lowest id wins ties) until end-of-sequence or
/// `max_len` tokens.
pub fn greedy_decode(model: &Model, sentences: &[Vec<usize>], max_len: usize) -> Result<Decoded, ModelError> {
    let encoded = encode_document(model, sentences)?;
    let mut state = initial_state(model, &encoded)?;
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    for _ in 0..max_len {
        let (step, next) = decode_step(model, &encoded, prev, &state)?;
        let best = step
            .vocab_dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc })
            .0;
        steps.push(step);
        state = next;
        if best == EOS {
            break;
        }
        tokens.push(best);
        prev = best;
    }
    Ok(Decoded {
        tokens,
        steps,
        encoded,
    })
}

// ---- training -----------------------------------------------------------

/// Plain gradient descent with global-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub lr: f64,
    pub clip: f64,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer { lr: 0.5, clip: 2.0 }
    }
}

/// Summed NLL, token count and gradient of the summed NLL for one example.
#[derive(Debug, Clone)]
pub struct ExampleGrads {
    pub nll_sum: f64,
    pub n_tokens: usize,
    pub grads: GradStore,
}

pub fn example_gradients(model: &Model, ex: &Example) -> Result<ExampleGrads, ModelError> {
    let mut g = CompGraph::new();
    let loss = record_nll(&mut g, model, ex)?;
    let nll_sum = g.value(loss.nll_sum).item();
    if !nll_sum.is_finite() {
        return Err(ModelError::NonFiniteLoss(format!("document {} loss {nll_sum}", ex.doc_id)));
    }
    let grads = g.backward(loss.nll_sum, &Matrix::scalar(1.0))?;
    Ok(ExampleGrads {
        nll_sum,
        n_tokens: loss.n_tokens,
        grads,
    })
}

/// Outcome of one parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean token NLL before the update.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Reduces per-example results in index order into the mean-token-NLL
/// gradient, clips it, and applies the update.
pub fn apply_update(
    model: &mut Model,
    results: &[ExampleGrads],
    opt: &Optimizer,
) -> Result<StepReport, ModelError> {
    let mut total = GradStore::new();
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for r in results {
        total.accumulate(&r.grads);
        nll += r.nll_sum;
        tokens += r.n_tokens;
    }
    if tokens == 0 {
        return Err(ModelError::EmptyInput);
    }
    total.scale(1.0 / tokens as f64);
    let loss = nll / tokens as f64;
    let grad_norm = total.global_norm();
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(ModelError::NonFiniteLoss(format!("loss {loss}, gradient norm {grad_norm}")));
    }
    if grad_norm > opt.clip {
        total.scale(opt.clip / grad_norm);
    }
    model.params.apply_step(&total, opt.lr);
    Ok(StepReport { loss, grad_norm })
}

/// One full-batch update, evaluated sequentially.
pub fn train_step(model: &mut Model, batch: &[Example], opt: &Optimizer) -> Result<StepReport, ModelError> {
    let results = batch
        .iter()
        .map(|ex| example_gradients(model, ex))
        .collect::<Result<Vec<_>, _>>()?;
    apply_update(model, &results, opt)
}

/// Mean token NLL without updating.
pub fn mean_nll(model: &Model, batch: &[Example]) -> Result<f64, ModelError> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for ex in batch {
        let mut g = CompGraph::new();
        let loss = record_nll(&mut g, model, ex)?;
        nll += g.value(loss.nll_sum).item();
        tokens += loss.n_tokens;
    }
    Ok(nll / tokens.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_signal_alternates_sin_and_cos() {
        let p = position_signal(3, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p[(1, 0)] - libm::sin(1.0)).abs() < 1e-15);
        assert!((p[(2, 3)] - libm::cos(2.0 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn output_projection_starts_at_zero() {
        let m = Model::new(ModelConfig::new(4, 1, Mode::Lsr, 10), 0).unwrap();
        assert!(m.params.get("out.w").unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(m.params.get("out.w").unwrap().shape(), (8, 10));
    }

    #[test]
    fn lir_registers_one_scorer_per_layer() {
        let shapes = Model::expected_shapes(&ModelConfig::new(4, 3, Mode::Lir, 10)).unwrap();
        let scorers = shapes.iter().filter(|(n, _)| n.ends_with(".w_bi")).count();
        assert_eq!(scorers, 3);
    }

    #[test]
    fn config_round_trips_through_serde_defaults() {
        let c = ModelConfig::new(4, 2, Mode::Lir, 10);
        assert!(c.use_hiergnn);
        assert_eq!(c.gsa_source, GsaSource::Last);
        assert_eq!(c.stack_config().layers, 2);
    }
}
