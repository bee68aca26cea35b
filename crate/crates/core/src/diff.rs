//! Reverse-mode differentiation over a recorded composition graph.
//!
//! Operations are evaluated eagerly as they are recorded, so callers can
//! inspect intermediate values while building (greedy decoding needs
//! this). The recorded graph can then be replayed with new leaf values
//! through [`CompGraph::forward_eval`], which is what the finite-difference
//! verifier does, and differentiated with [`CompGraph::backward`].
//!
//! All tensors are 2-D [`Matrix`] values; vectors are 1×n rows or n×1
//! columns. Every primitive carries a hand-written vector-Jacobian rule.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::params::ParamStore;

/// Variance epsilon used by [`CompGraph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward called before a forward pass over the current leaf values")]
    NoForwardPass,
    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),
    #[error("output must be a 1x1 scalar, got {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        detail: alloc::format!("{a:?} vs {b:?}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Input,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// x (r×c) + b (1×c) on every row
    AddRow(NodeId, NodeId),
    /// x (r×c) scaled row-wise by s (r×1)
    MulCol(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Inverse(NodeId),
    LogDet(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Sum(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Pick(NodeId, Vec<(usize, usize)>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Param | Input | Const => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddRow(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | AddScalar(a, _) | Transpose(a) | Relu(a) | Sigmoid(a) | Tanh(a)
            | SoftmaxRows(a) | LogSoftmaxRows(a) | Inverse(a) | LogDet(a) | Sum(a)
            | SliceRows(a, _, _) | SliceCols(a, _, _) | GatherRows(a, _) | Pick(a, _) => vec![*a],
            LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            ConcatCols(xs) | ConcatRows(xs) => xs.clone(),
        }
    }
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore {
    grads: BTreeMap<String, Matrix>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Matrix) {
        self.grads.insert(name, grad);
    }

    /// Adds `other` into `self`, entry by entry, creating missing entries.
    pub fn accumulate(&mut self, other: &GradStore) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.scale_in_place(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.grads.values().map(Matrix::frobenius_norm_sq).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: (usize, usize),
}

/// A recorded composition of primitive operations.
#[derive(Debug, Clone, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
    values: Vec<Matrix>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    stale: bool,
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// Node id of a named parameter or input leaf.
    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).or_else(|| self.inputs.get(name)).copied()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape: value.shape(),
        });
        self.values.push(value);
        id
    }

    fn record(&mut self, op: Op) -> Result<NodeId, DiffError> {
        let value = self.eval(&op)?;
        Ok(self.push(op, value))
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the existing node, so every use of a parameter feeds one
    /// gradient accumulator.
    pub fn param(&mut self, name: &str, value: &Matrix) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(Op::Param, value.clone());
        self.params.insert(name.to_string(), id);
        id
    }

    /// Registers `name` from a parameter store.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, DiffError> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| DiffError::UnknownLeaf(name.to_string()))?;
        Ok(self.param(name, value))
    }

    /// Registers a named non-trainable leaf that may be rebound in
    /// [`forward_eval`](Self::forward_eval).
    pub fn input(&mut self, name: &str, value: Matrix) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input, value);
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Const, value)
    }

    /// Names a node so [`forward_eval`](Self::forward_eval) reports it.
    pub fn name_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    /// Replaces the value of a named parameter or input leaf. Cached
    /// values become stale until the next `forward_eval`.
    pub fn set_leaf(&mut self, name: &str, value: Matrix) -> Result<(), DiffError> {
        let id = self
            .params
            .get(name)
            .or_else(|| self.inputs.get(name))
            .copied()
            .ok_or_else(|| DiffError::UnknownLeaf(name.to_string()))?;
        if value.shape() != self.nodes[id.0].shape {
            return Err(mismatch("set_leaf", self.nodes[id.0].shape, value.shape()));
        }
        self.values[id.0] = value;
        self.stale = true;
        Ok(())
    }

    /// Rebinds any named leaves in `bindings`, recomputes every node and
    /// returns the named outputs.
    pub fn forward_eval(
        &mut self,
        bindings: &BTreeMap<String, Matrix>,
    ) -> Result<BTreeMap<String, Matrix>, DiffError> {
        for (name, value) in bindings {
            self.set_leaf(name, value.clone())?;
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Param | Op::Input | Op::Const) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.values[i] = self.eval(&op)?;
        }
        self.stale = false;
        Ok(self
            .outputs
            .iter()
            .map(|(k, &id)| (k.clone(), self.values[id.0].clone()))
            .collect())
    }

    // ---- primitive constructors -------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, DiffError> {
        self.record(Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId, DiffError> {
        self.record(Op::AddScalar(a, offset))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Transpose(a))
    }

    /// Adds the 1×c row `b` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::AddRow(x, b))
    }

    /// Scales row `r` of `x` by `s[r]`, with `s` an r×1 column.
    pub fn mul_col(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::MulCol(x, s))
    }

    /// `x·w + b` with `w` stored input-major (in×out) and `b` a 1×out row.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with 1×c gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::LayerNorm { x, gain, bias })
    }

    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Inverse(a))
    }

    /// `ln |det a|` as a 1×1 node.
    pub fn log_det(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::LogDet(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, DiffError> {
        self.record(Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, DiffError> {
        self.record(Op::SliceCols(a, start, end))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Sum(a))
    }

    /// Rows of `table` selected by `ids`, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, DiffError> {
        self.record(Op::GatherRows(table, ids.to_vec()))
    }

    /// Entries of `a` at `positions`, as a 1×k row.
    pub fn pick(&mut self, a: NodeId, positions: &[(usize, usize)]) -> Result<NodeId, DiffError> {
        self.record(Op::Pick(a, positions.to_vec()))
    }

    // ---- forward rules ----------------------------------------------

    fn eval(&self, op: &Op) -> Result<Matrix, DiffError> {
        let v = |id: &NodeId| &self.values[id.0];
        Ok(match op {
            Op::Param | Op::Input | Op::Const => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => v(a)
                .zip_map(v(b), |x, y| x + y)
                .map_err(|_| mismatch("add", v(a).shape(), v(b).shape()))?,
            Op::Sub(a, b) => v(a)
                .zip_map(v(b), |x, y| x - y)
                .map_err(|_| mismatch("sub", v(a).shape(), v(b).shape()))?,
            Op::Mul(a, b) => v(a)
                .zip_map(v(b), |x, y| x * y)
                .map_err(|_| mismatch("mul", v(a).shape(), v(b).shape()))?,
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::AddScalar(a, c) => v(a).map(|x| x + c),
            Op::MatMul(a, b) => v(a)
                .matmul(v(b))
                .map_err(|_| mismatch("matmul", v(a).shape(), v(b).shape()))?,
            Op::Transpose(a) => v(a).transpose(),
            Op::AddRow(x, b) => {
                let (x, b) = (v(x), v(b));
                if b.shape() != (1, x.cols()) {
                    return Err(mismatch("add_row", x.shape(), b.shape()));
                }
                Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] + b[(0, c)])
            }
            Op::MulCol(x, s) => {
                let (x, s) = (v(x), v(s));
                if s.shape() != (x.rows(), 1) {
                    return Err(mismatch("mul_col", x.shape(), s.shape()));
                }
                Matrix::from_fn(x.rows(), x.cols(), |r, c| x[(r, c)] * s[(r, 0)])
            }
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Tanh(a) => v(a).map(libm::tanh),
            Op::SoftmaxRows(a) => softmax_rows(v(a)),
            Op::LogSoftmaxRows(a) => {
                let x = v(a);
                let mut out = x.clone();
                for r in 0..x.rows() {
                    let lse = log_sum_exp(x.row(r));
                    for o in out.row_mut(r) {
                        *o -= lse;
                    }
                }
                out
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (v(x), v(gain), v(bias));
                if gain.shape() != (1, x.cols()) || bias.shape() != (1, x.cols()) {
                    return Err(mismatch("layer_norm", x.shape(), gain.shape()));
                }
                let (xhat, _) = normalize_rows(x);
                Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    gain[(0, c)] * xhat[(r, c)] + bias[(0, c)]
                })
            }
            Op::Inverse(a) => v(a).inverse()?,
            Op::LogDet(a) => {
                let f = linalg::lu_decompose(v(a))?;
                Matrix::scalar(linalg::log_abs_determinant(&f).0)
            }
            Op::ConcatCols(parts) => {
                let rows = parts.first().map_or(0, |p| v(p).rows());
                if let Some(p) = parts.iter().find(|p| v(p).rows() != rows) {
                    return Err(mismatch("concat_cols", (rows, 0), v(p).shape()));
                }
                let cols: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(v(p).row(r));
                    }
                }
                Matrix::from_raw(rows, cols, data)
            }
            Op::ConcatRows(parts) => {
                let cols = parts.first().map_or(0, |p| v(p).cols());
                if let Some(p) = parts.iter().find(|p| v(p).cols() != cols) {
                    return Err(mismatch("concat_rows", (0, cols), v(p).shape()));
                }
                let mut data = Vec::new();
                for p in parts {
                    data.extend_from_slice(v(p).as_slice());
                }
                Matrix::from_raw(data.len() / cols.max(1), cols, data)
            }
            Op::SliceRows(a, s, e) => {
                let x = v(a);
                if s >= e || *e > x.rows() {
                    return Err(mismatch("slice_rows", x.shape(), (*s, *e)));
                }
                Matrix::from_raw(e - s, x.cols(), x.as_slice()[s * x.cols()..e * x.cols()].to_vec())
            }
            Op::SliceCols(a, s, e) => {
                let x = v(a);
                if s >= e || *e > x.cols() {
                    return Err(mismatch("slice_cols", x.shape(), (*s, *e)));
                }
                Matrix::from_fn(x.rows(), e - s, |r, c| x[(r, s + c)])
            }
            Op::Sum(a) => Matrix::scalar(v(a).sum()),
            Op::GatherRows(t, ids) => {
                let t = v(t);
                if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
                    return Err(mismatch("gather_rows", t.shape(), (bad, 0)));
                }
                let mut data = Vec::with_capacity(ids.len() * t.cols());
                for &i in ids {
                    data.extend_from_slice(t.row(i));
                }
                Matrix::from_raw(ids.len(), t.cols(), data)
            }
            Op::Pick(a, positions) => {
                let x = v(a);
                if let Some(&bad) = positions
                    .iter()
                    .find(|&&(r, c)| r >= x.rows() || c >= x.cols())
                {
                    return Err(mismatch("pick", x.shape(), bad));
                }
                Matrix::from_raw(1, positions.len(), positions.iter().map(|&p| x[p]).collect())
            }
        })
    }

    // ---- backward ---------------------------------------------------

    /// Propagates `seed` (same shape as `output`) back through the graph
    /// and returns the gradient of every registered parameter.
    ///
    /// Nodes are visited in decreasing id order and each node's incoming
    /// contributions are summed in that same fixed order, so identical
    /// graphs give bit-identical gradients.
    pub fn backward(&self, output: NodeId, seed: &Matrix) -> Result<GradStore, DiffError> {
        let grads = self.backward_nodes(output, seed)?;
        let mut store = GradStore::new();
        for (name, &id) in &self.params {
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Matrix::zeros(self.nodes[id.0].shape.0, self.nodes[id.0].shape.1));
            store.insert(name.clone(), g);
        }
        Ok(store)
    }

    /// Gradient of `output` with respect to an arbitrary node (zero if
    /// the node does not feed `output`).
    pub fn grad_wrt(&self, output: NodeId, seed: &Matrix, wrt: NodeId) -> Result<Matrix, DiffError> {
        let grads = self.backward_nodes(output, seed)?;
        let (r, c) = self.nodes[wrt.0].shape;
        Ok(grads[wrt.0].clone().unwrap_or_else(|| Matrix::zeros(r, c)))
    }

    fn backward_nodes(&self, output: NodeId, seed: &Matrix) -> Result<Vec<Option<Matrix>>, DiffError> {
        if self.stale {
            return Err(DiffError::NoForwardPass);
        }
        if seed.shape() != self.nodes[output.0].shape {
            return Err(mismatch("backward seed", self.nodes[output.0].shape, seed.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn vjp(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<(), DiffError> {
        let v = |id: &NodeId| &self.values[id.0];
        let y = &self.values[i];
        let mut acc = |id: NodeId, delta: Matrix| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[i].op {
            Op::Param | Op::Input | Op::Const => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(v(b), |x, y| x * y)?);
                acc(*b, g.zip_map(v(a), |x, y| x * y)?);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                acc(*a, g.matmul(&v(b).transpose())?);
                acc(*b, v(a).transpose().matmul(g)?);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                acc(*b, column_sums(g));
            }
            Op::MulCol(x, s) => {
                let (xv, sv) = (v(x), v(s));
                acc(*x, Matrix::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * sv[(r, 0)]));
                acc(
                    *s,
                    Matrix::from_fn(g.rows(), 1, |r, _| {
                        g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum()
                    }),
                );
            }
            Op::Relu(a) => acc(*a, g.zip_map(v(a), |gv, x| if x > 0.0 { gv } else { 0.0 })?),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))?),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |gv, t| gv * (1.0 - t * t))?),
            Op::SoftmaxRows(a) => {
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..g.cols() {
                        out[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                acc(*a, out);
            }
            Op::LogSoftmaxRows(a) => {
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for c in 0..g.cols() {
                        out[(r, c)] = g[(r, c)] - libm::exp(y[(r, c)]) * total;
                    }
                }
                acc(*a, out);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (xv, gv) = (v(x), v(gain));
                let (xhat, inv_std) = normalize_rows(xv);
                let (rows, cols) = xv.shape();
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                let n = cols as f64;
                for r in 0..rows {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let up = g[(r, c)];
                        dgain[(0, c)] += up * xhat[(r, c)];
                        dbias[(0, c)] += up;
                        let dxh = up * gv[(0, c)];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[(r, c)];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for c in 0..cols {
                        let dxh = g[(r, c)] * gv[(0, c)];
                        dx[(r, c)] = inv_std[r] * (dxh - mean_dxhat - xhat[(r, c)] * mean_dxhat_xhat);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Inverse(a) => {
                // Y = A^{-1}:  dA = -Y^T G Y^T
                let yt = y.transpose();
                acc(*a, yt.matmul(g)?.matmul(&yt)?.map(|x| -x));
            }
            Op::LogDet(a) => {
                let inv_t = v(a).inverse()?.transpose();
                let s = g.item();
                acc(*a, inv_t.map(|x| x * s));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape.1;
                    acc(*p, Matrix::from_fn(g.rows(), w, |r, c| g[(r, offset + c)]));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.nodes[p.0].shape.0;
                    acc(*p, Matrix::from_fn(h, g.cols(), |r, c| g[(offset + r, c)]));
                    offset += h;
                }
            }
            Op::SliceRows(a, s, _) => {
                let (rows, cols) = self.nodes[a.0].shape;
                let mut out = Matrix::zeros(rows, cols);
                out.as_mut_slice()[s * cols..s * cols + g.as_slice().len()]
                    .copy_from_slice(g.as_slice());
                acc(*a, out);
            }
            Op::SliceCols(a, s, _) => {
                let (rows, cols) = self.nodes[a.0].shape;
                let mut out = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..g.cols() {
                        out[(r, s + c)] = g[(r, c)];
                    }
                }
                acc(*a, out);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.nodes[a.0].shape;
                acc(*a, Matrix::filled(rows, cols, g.item()));
            }
            Op::GatherRows(t, ids) => {
                let (rows, cols) = self.nodes[t.0].shape;
                let mut out = Matrix::zeros(rows, cols);
                for (k, &id) in ids.iter().enumerate() {
                    for (o, gv) in out.row_mut(id).iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                acc(*t, out);
            }
            Op::Pick(a, positions) => {
                let (rows, cols) = self.nodes[a.0].shape;
                let mut out = Matrix::zeros(rows, cols);
                for (k, &p) in positions.iter().enumerate() {
                    out[p] += g[(0, k)];
                }
                acc(*a, out);
            }
        }
        Ok(())
    }

    /// Ids of the nodes an op reads, for structural inspection.
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }
}

/// Central-difference check of the analytic gradient of the scalar
/// `output` with respect to parameter `param`.
///
/// Returns the maximum elementwise relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator. The graph is
/// left evaluated at the original parameter value.
pub fn finite_diff_check(
    g: &mut CompGraph,
    output: NodeId,
    param: &str,
    step: f64,
) -> Result<f64, DiffError> {
    if g.shape(output) != (1, 1) {
        return Err(DiffError::NonScalarOutput(g.shape(output)));
    }
    let id = *g
        .params
        .get(param)
        .ok_or_else(|| DiffError::UnknownLeaf(param.to_string()))?;
    let original = g.value(id).clone();
    g.forward_eval(&BTreeMap::new())?;
    let analytic = g
        .backward(output, &Matrix::scalar(1.0))?
        .get(param)
        .cloned()
        .expect("registered parameter has a gradient");

    let mut worst: f64 = 0.0;
    for k in 0..original.as_slice().len() {
        let mut plus = original.clone();
        plus.as_mut_slice()[k] += step;
        g.set_leaf(param, plus)?;
        g.forward_eval(&BTreeMap::new())?;
        let f_plus = g.value(output).item();

        let mut minus = original.clone();
        minus.as_mut_slice()[k] -= step;
        g.set_leaf(param, minus)?;
        g.forward_eval(&BTreeMap::new())?;
        let f_minus = g.value(output).item();

        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic.as_slice()[k];
        let denom = libm::fabs(a).max(libm::fabs(numeric)).max(1e-8);
        worst = worst.max(libm::fabs(a - numeric) / denom);
    }
    g.set_leaf(param, original)?;
    g.forward_eval(&BTreeMap::new())?;
    Ok(worst)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(xs.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| libm::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(&softmax(x.row(r)));
    }
    out
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Per-row standardization with biased variance; returns the normalized
/// rows and each row's `1/sqrt(var + eps)`.
fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let n = cols as f64;
    let mut out = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}
