//! Hierarchy-aware message passing over induced structures.
//!
//! A block updates node `i` by mixing its own transform with the
//! marginal-weighted transforms of its children, where the mix is set by
//! the node's root probability. A sigmoid gate then decides how much of
//! the update replaces the old state before layer normalization. Blocks
//! are stacked either over one shared induced structure (LSR) or over a
//! fresh structure per layer (LIR), and a fusion layer with a residual
//! connection merges every layer's output.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{CompGraph, NodeId};
use crate::linalg::Matrix;
use crate::mtc::{self, GraphNodes, LatentGraph, MtcError, SentenceStates};
use crate::params::ParamStore;

/// How induced structures are shared across reasoning layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One structure induced from `H^(0)`, reused by every block.
    #[default]
    Lsr,
    /// A fresh structure induced from `h^(l)` before block `l+1`.
    Lir,
}

/// Nonlinearity applied to the update before gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Phi {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Phi {
    fn record(self, g: &mut CompGraph, x: NodeId) -> Result<NodeId, MtcError> {
        Ok(match self {
            Phi::Tanh => g.tanh(x)?,
            Phi::Relu => g.relu(x)?,
            Phi::Identity => x,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub layers: usize,
    pub mode: Mode,
    pub d: usize,
    pub epsilon: f64,
    pub phi: Phi,
    /// In LIR mode, reuse one scorer for every layer's structure.
    pub lir_shared_scorer: bool,
}

impl StackConfig {
    pub fn new(layers: usize, mode: Mode, d: usize) -> Self {
        StackConfig {
            layers,
            mode,
            d,
            epsilon: mtc::DEFAULT_EPSILON,
            phi: Phi::Tanh,
            lir_shared_scorer: false,
        }
    }

    pub fn validate(&self) -> Result<(), MtcError> {
        if self.layers == 0 {
            return Err(MtcError::ShapeMismatch("reasoning stack needs at least one layer".into()));
        }
        if self.d == 0 {
            return Err(MtcError::ShapeMismatch("width must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(MtcError::InvalidScores(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }

    /// Parameter prefix of the scorer that induces the structure used by
    /// block `layer`.
    pub fn scorer_prefix(&self, layer: usize) -> String {
        match self.mode {
            Mode::Lir if !self.lir_shared_scorer => format!("mtc.{layer}"),
            _ => String::from("mtc.0"),
        }
    }

    pub fn scorer_count(&self) -> usize {
        match self.mode {
            Mode::Lir if !self.lir_shared_scorer => self.layers,
            _ => 1,
        }
    }

    pub fn block_prefix(layer: usize) -> String {
        format!("block.{layer}")
    }
}

/// Handle on one block's parameters: `F_r`, `F_n` (d→d), `F_g` (2d→d)
/// and the layer-norm gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams<'a> {
    pub store: &'a ParamStore,
    pub prefix: &'a str,
    pub phi: Phi,
}

const BLOCK_PARAMS: [(&str, usize, usize); 8] = [
    ("f_r.w", 1, 1),
    ("f_r.b", 0, 1),
    ("f_n.w", 1, 1),
    ("f_n.b", 0, 1),
    ("f_g.w", 2, 1),
    ("f_g.b", 0, 1),
    ("ln.gain", 0, 1),
    ("ln.bias", 0, 1),
];

impl<'a> BlockParams<'a> {
    /// Checks that every block tensor exists with the expected shape.
    pub fn new(store: &'a ParamStore, prefix: &'a str, d: usize, phi: Phi) -> Result<Self, MtcError> {
        for (name, rows_in_d, cols_in_d) in BLOCK_PARAMS {
            let full = format!("{prefix}.{name}");
            let t = store.get(&full).ok_or_else(|| MtcError::MissingParam(full.clone()))?;
            let rows = if rows_in_d == 0 { 1 } else { rows_in_d * d };
            if t.shape() != (rows, cols_in_d * d) {
                return Err(MtcError::ShapeMismatch(format!("{full} has shape {:?}", t.shape())));
            }
        }
        Ok(BlockParams { store, prefix, phi })
    }

    fn node(&self, g: &mut CompGraph, name: &str) -> Result<NodeId, MtcError> {
        Ok(g.param_from(self.store, &format!("{}.{name}", self.prefix))?)
    }
}

pub fn init_block(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    store.init_uniform(&format!("{prefix}.f_r.w"), d, d, rng);
    store.init_zeros(&format!("{prefix}.f_r.b"), 1, d);
    store.init_uniform(&format!("{prefix}.f_n.w"), d, d, rng);
    store.init_zeros(&format!("{prefix}.f_n.b"), 1, d);
    store.init_uniform(&format!("{prefix}.f_g.w"), 2 * d, d, rng);
    store.init_zeros(&format!("{prefix}.f_g.b"), 1, d);
    store.init_filled(&format!("{prefix}.ln.gain"), 1, d, 1.0);
    store.init_zeros(&format!("{prefix}.ln.bias"), 1, d);
}

/// Registers scorers, blocks and the fusion layer for `cfg`.
pub fn init_params(store: &mut ParamStore, cfg: &StackConfig, rng: &mut ChaCha8Rng) {
    for s in 0..cfg.scorer_count() {
        mtc::init_params(store, &format!("mtc.{s}"), cfg.d, rng);
    }
    for l in 0..cfg.layers {
        init_block(store, &StackConfig::block_prefix(l), cfg.d, rng);
    }
    store.init_uniform("fuse.w", cfg.layers * cfg.d, cfg.d, rng);
    store.init_zeros("fuse.b", 1, cfg.d);
}

/// `u_i = (1 − p^r_i)·F_r(h_i) + p^r_i · Σ_k A(i,k)·F_n(h_k)`, summing over
/// every node. `root` is an M×1 column.
pub fn record_node_update(
    g: &mut CompGraph,
    p: &BlockParams<'_>,
    h: NodeId,
    adj: NodeId,
    root: NodeId,
) -> Result<NodeId, MtcError> {
    let m = g.shape(h).0;
    if g.shape(adj) != (m, m) || g.shape(root) != (m, 1) {
        return Err(MtcError::ShapeMismatch(format!(
            "states {:?}, adj {:?}, root {:?}",
            g.shape(h),
            g.shape(adj),
            g.shape(root)
        )));
    }
    let (wr, br) = (p.node(g, "f_r.w")?, p.node(g, "f_r.b")?);
    let (wn, bn) = (p.node(g, "f_n.w")?, p.node(g, "f_n.b")?);
    let self_term = g.affine(h, wr, br)?;
    let neigh = g.affine(h, wn, bn)?;
    let aggregated = g.matmul(adj, neigh)?;
    let keep = g.one_minus(root)?;
    let self_part = g.mul_col(self_term, keep)?;
    let neigh_part = g.mul_col(aggregated, root)?;
    Ok(g.add(self_part, neigh_part)?)
}

/// `g_i = sigmoid(F_g([u_i; h_i]))`, `h'_i = LN(g_i ⊙ φ(u_i) + (1 − g_i) ⊙ h_i)`.
pub fn record_gated_merge(
    g: &mut CompGraph,
    p: &BlockParams<'_>,
    u: NodeId,
    h: NodeId,
) -> Result<NodeId, MtcError> {
    if g.shape(u) != g.shape(h) {
        return Err(MtcError::ShapeMismatch(format!("{:?} vs {:?}", g.shape(u), g.shape(h))));
    }
    let (wg, bg) = (p.node(g, "f_g.w")?, p.node(g, "f_g.b")?);
    let (gain, bias) = (p.node(g, "ln.gain")?, p.node(g, "ln.bias")?);
    let uh = g.concat_cols(&[u, h])?;
    let gate_pre = g.affine(uh, wg, bg)?;
    let gate = g.sigmoid(gate_pre)?;
    let phi_u = p.phi.record(g, u)?;
    let take = g.mul(gate, phi_u)?;
    let inv_gate = g.one_minus(gate)?;
    let keep = g.mul(inv_gate, h)?;
    let mixed = g.add(take, keep)?;
    Ok(g.layer_norm(mixed, gain, bias)?)
}

/// Nodes produced by a recorded stack.
#[derive(Debug, Clone)]
pub struct StackNodes {
    pub per_layer: Vec<NodeId>,
    /// One entry in LSR mode, `layers` entries in LIR mode.
    pub graphs: Vec<GraphNodes>,
}

pub fn record_stack(
    g: &mut CompGraph,
    store: &ParamStore,
    cfg: &StackConfig,
    h0: NodeId,
) -> Result<StackNodes, MtcError> {
    cfg.validate()?;
    let mut per_layer = Vec::with_capacity(cfg.layers);
    let mut graphs = Vec::new();
    let mut h = h0;
    for l in 0..cfg.layers {
        let structure = match cfg.mode {
            Mode::Lsr if l > 0 => graphs[0],
            _ => {
                let nodes = mtc::record_induce(g, store, &cfg.scorer_prefix(l), h, cfg.epsilon)?;
                graphs.push(nodes);
                nodes
            }
        };
        let prefix = StackConfig::block_prefix(l);
        let block = BlockParams::new(store, &prefix, cfg.d, cfg.phi)?;
        let u = record_node_update(g, &block, h, structure.adj, structure.root)?;
        h = record_gated_merge(g, &block, u, h)?;
        per_layer.push(h);
    }
    Ok(StackNodes { per_layer, graphs })
}

/// `h^(G)_i = W_g[h^(1)_i; …; h^(L)_i] + b_g + h^(0)_i`.
pub fn record_fuse(
    g: &mut CompGraph,
    store: &ParamStore,
    per_layer: &[NodeId],
    h0: NodeId,
) -> Result<NodeId, MtcError> {
    if per_layer.is_empty() {
        return Err(MtcError::ShapeMismatch("no layer outputs to fuse".into()));
    }
    let w = g.param_from(store, "fuse.w")?;
    let b = g.param_from(store, "fuse.b")?;
    let stacked = g.concat_cols(per_layer)?;
    let mixed = g.affine(stacked, w, b)?;
    Ok(g.add(mixed, h0)?)
}

// ---- plain wrappers ----------------------------------------------------

fn graph_leaves(g: &mut CompGraph, graph: &LatentGraph) -> (NodeId, NodeId) {
    let adj = g.input("adj", graph.adj.clone());
    let root = g.input("root", Matrix::col_vector(&graph.root));
    (adj, root)
}

pub fn node_update(h: &Matrix, graph: &LatentGraph, p: &BlockParams<'_>) -> Result<Matrix, MtcError> {
    if graph.m() != h.rows() {
        return Err(MtcError::ShapeMismatch(format!("graph over {} nodes, {} states", graph.m(), h.rows())));
    }
    let mut g = CompGraph::new();
    let hn = g.input("h", h.clone());
    let (adj, root) = graph_leaves(&mut g, graph);
    let u = record_node_update(&mut g, p, hn, adj, root)?;
    Ok(g.value(u).clone())
}

pub fn gated_merge(u: &Matrix, h: &Matrix, p: &BlockParams<'_>) -> Result<Matrix, MtcError> {
    let mut g = CompGraph::new();
    let un = g.input("u", u.clone());
    let hn = g.input("h", h.clone());
    let out = record_gated_merge(&mut g, p, un, hn)?;
    Ok(g.value(out).clone())
}

/// Per-layer states, fused output and induced structures.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub per_layer: Vec<Matrix>,
    pub fused: Matrix,
    pub graphs: Vec<LatentGraph>,
}

pub fn stack_forward(h0: &SentenceStates, cfg: &StackConfig, store: &ParamStore) -> Result<NodeStates, MtcError> {
    let mut g = CompGraph::new();
    let h = g.input("h0", h0.h0().clone());
    let stack = record_stack(&mut g, store, cfg, h)?;
    let fused = record_fuse(&mut g, store, &stack.per_layer, h)?;
    Ok(NodeStates {
        per_layer: stack.per_layer.iter().map(|&n| g.value(n).clone()).collect(),
        fused: g.value(fused).clone(),
        graphs: stack
            .graphs
            .iter()
            .map(|n| n.latent_graph(&g))
            .collect::<Result<_, _>>()?,
    })
}

pub fn fuse_layers(ns: &NodeStates, h0: &Matrix, store: &ParamStore) -> Result<Matrix, MtcError> {
    let mut g = CompGraph::new();
    let layers: Vec<NodeId> = ns
        .per_layer
        .iter()
        .enumerate()
        .map(|(l, m)| g.input(&format!("h{}", l + 1), m.clone()))
        .collect();
    let h = g.input("h0", h0.clone());
    let out = record_fuse(&mut g, store, &layers, h)?;
    Ok(g.value(out).clone())
}
