//! Sparse matrix-tree computation.
//!
//! Sentence states are projected into parent and child views, scored with
//! ReLU plus a small additive constant instead of an exponential, and the
//! resulting non-negative weights are marginalized exactly over all
//! single-root spanning arborescences.
//!
//! The Laplacian row that is replaced by the root weights is row 0, i.e.
//! the first sentence in document order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diff::{CompGraph, DiffError, NodeId};
use crate::linalg::{self, LinalgError, Matrix};
use crate::params::ParamStore;

/// Additive floor on every edge and root weight.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Slack allowed on marginals before they are treated as a numerical failure.
pub const MARGINAL_TOLERANCE: f64 = 1e-8;

/// Largest document the brute-force enumerator accepts.
pub const BRUTE_FORCE_MAX_M: usize = 7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MtcError {
    #[error("singular Laplacian: {0}")]
    SingularLaplacian(LinalgError),
    #[error("marginal {value:e} outside [0, 1] beyond tolerance at {location}")]
    NumericalQuality { value: f64, location: String },
    #[error("brute-force enumeration limited to M <= {BRUTE_FORCE_MAX_M}, got {0}")]
    TooLarge(usize),
    #[error("invalid scores: {0}")]
    InvalidScores(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl From<LinalgError> for MtcError {
    fn from(e: LinalgError) -> Self {
        MtcError::SingularLaplacian(e)
    }
}

/// Initial node states `H^(0)`, one row per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceStates {
    h0: Matrix,
}

impl SentenceStates {
    pub fn new(h0: Matrix) -> Result<Self, MtcError> {
        if h0.rows() == 0 || h0.cols() == 0 {
            return Err(MtcError::ShapeMismatch("need at least one sentence and feature".into()));
        }
        if !h0.is_finite() {
            return Err(MtcError::InvalidScores("non-finite sentence state".into()));
        }
        Ok(SentenceStates { h0 })
    }

    pub fn m(&self) -> usize {
        self.h0.rows()
    }

    pub fn d(&self) -> usize {
        self.h0.cols()
    }

    pub fn h0(&self) -> &Matrix {
        &self.h0
    }
}

/// Borrowed scoring parameters. Weights are stored input-major, so the
/// parent view is `ReLU(H·W_p + b_p)` with `W_p` of shape d×d, and the
/// root scorer `W_r` is a d×1 column.
#[derive(Debug, Clone, Copy)]
pub struct MtcParams<'a> {
    pub w_p: &'a Matrix,
    pub b_p: &'a Matrix,
    pub w_c: &'a Matrix,
    pub b_c: &'a Matrix,
    pub w_r: &'a Matrix,
    pub b_r: &'a Matrix,
    pub w_bi: &'a Matrix,
}

pub const MTC_PARAM_NAMES: [&str; 7] = ["w_p", "b_p", "w_c", "b_c", "w_r", "b_r", "w_bi"];

impl<'a> MtcParams<'a> {
    pub fn from_store(store: &'a ParamStore, prefix: &str) -> Result<Self, MtcError> {
        let get = |n: &str| {
            let name = format!("{prefix}.{n}");
            store.get(&name).ok_or(MtcError::MissingParam(name))
        };
        Ok(MtcParams {
            w_p: get("w_p")?,
            b_p: get("b_p")?,
            w_c: get("w_c")?,
            b_c: get("b_c")?,
            w_r: get("w_r")?,
            b_r: get("b_r")?,
            w_bi: get("w_bi")?,
        })
    }

    pub fn d(&self) -> usize {
        self.w_p.rows()
    }
}

/// Registers freshly initialized scoring parameters under `prefix`.
pub fn init_params(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    store.init_uniform(&format!("{prefix}.w_p"), d, d, rng);
    store.init_zeros(&format!("{prefix}.b_p"), 1, d);
    store.init_uniform(&format!("{prefix}.w_c"), d, d, rng);
    store.init_zeros(&format!("{prefix}.b_c"), 1, d);
    store.init_uniform(&format!("{prefix}.w_r"), d, 1, rng);
    store.init_zeros(&format!("{prefix}.b_r"), 1, 1);
    store.init_uniform(&format!("{prefix}.w_bi"), d, d, rng);
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParentChildViews {
    pub sp: Matrix,
    pub sc: Matrix,
}

/// Non-negative edge and root weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    /// `f_edge[(i, j)]` weights the edge from parent `i` to child `j`.
    pub f_edge: Matrix,
    pub f_root: Vec<f64>,
    pub epsilon: f64,
}

impl ScoreSet {
    /// Validates weights; the diagonal is forced to zero.
    pub fn new(mut f_edge: Matrix, f_root: Vec<f64>, epsilon: f64) -> Result<Self, MtcError> {
        let m = f_root.len();
        if f_edge.shape() != (m, m) || m == 0 {
            return Err(MtcError::ShapeMismatch(format!(
                "edge matrix {:?} vs {m} roots",
                f_edge.shape()
            )));
        }
        if !(epsilon > 0.0) {
            return Err(MtcError::InvalidScores(format!("epsilon {epsilon} must be positive")));
        }
        for i in 0..m {
            f_edge[(i, i)] = 0.0;
            for j in 0..m {
                let w = f_edge[(i, j)];
                if i != j && !(w >= epsilon && w.is_finite()) {
                    return Err(MtcError::InvalidScores(format!("edge ({i},{j}) weight {w:e} < epsilon")));
                }
            }
        }
        if let Some((i, w)) = f_root.iter().enumerate().find(|(_, w)| !(**w >= epsilon && w.is_finite())) {
            return Err(MtcError::InvalidScores(format!("root {i} weight {w:e} < epsilon")));
        }
        Ok(ScoreSet { f_edge, f_root, epsilon })
    }

    pub fn m(&self) -> usize {
        self.f_root.len()
    }

    /// Multiplies every weight (edges and roots) by `c`.
    pub fn scaled(&self, c: f64) -> ScoreSet {
        ScoreSet {
            f_edge: self.f_edge.map(|w| w * c),
            f_root: self.f_root.iter().map(|w| w * c).collect(),
            epsilon: self.epsilon * c,
        }
    }
}

/// Edge and root marginals of the arborescence distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGraph {
    /// `adj[(i, j)]` = probability that `i` is the parent of `j`.
    pub adj: Matrix,
    pub root: Vec<f64>,
    pub log_z: f64,
}

impl LatentGraph {
    /// Checks raw marginals against `[0, 1]` with [`MARGINAL_TOLERANCE`]
    /// slack, then clamps them. Larger violations are errors.
    pub fn from_raw(mut adj: Matrix, mut root: Vec<f64>, log_z: f64) -> Result<Self, MtcError> {
        let m = root.len();
        if adj.shape() != (m, m) {
            return Err(MtcError::ShapeMismatch(format!("adj {:?} vs {m} roots", adj.shape())));
        }
        let check = |v: f64, location: String| -> Result<f64, MtcError> {
            if !v.is_finite() || !(-MARGINAL_TOLERANCE..=1.0 + MARGINAL_TOLERANCE).contains(&v) {
                return Err(MtcError::NumericalQuality { value: v, location });
            }
            Ok(v.clamp(0.0, 1.0))
        };
        for (j, r) in root.iter_mut().enumerate() {
            *r = check(*r, format!("root[{j}]"))?;
        }
        for i in 0..m {
            for j in 0..m {
                adj[(i, j)] = if i == j { 0.0 } else { check(adj[(i, j)], format!("adj[{i},{j}]"))? };
            }
        }
        Ok(LatentGraph { adj, root, log_z })
    }

    pub fn m(&self) -> usize {
        self.root.len()
    }

    /// `p^r_j + Σ_i A(i, j)` for every node `j`; each should be 1.
    pub fn parent_mass(&self) -> Vec<f64> {
        (0..self.m())
            .map(|j| self.root[j] + (0..self.m()).map(|i| self.adj[(i, j)]).sum::<f64>())
            .collect()
    }
}

/// `sp = ReLU(H·W_p + b_p)`, `sc = ReLU(H·W_c + b_c)`.
pub fn project_parent_child(h: &SentenceStates, p: &MtcParams<'_>) -> Result<ParentChildViews, MtcError> {
    let relu_affine = |w: &Matrix, b: &Matrix| -> Result<Matrix, MtcError> {
        let hw = h.h0().matmul(w).map_err(|e| MtcError::ShapeMismatch(format!("{e}")))?;
        if b.shape() != (1, hw.cols()) {
            return Err(MtcError::ShapeMismatch(format!("bias {:?}", b.shape())));
        }
        Ok(Matrix::from_fn(hw.rows(), hw.cols(), |r, c| (hw[(r, c)] + b[(0, c)]).max(0.0)))
    };
    Ok(ParentChildViews {
        sp: relu_affine(p.w_p, p.b_p)?,
        sc: relu_affine(p.w_c, p.b_c)?,
    })
}

/// ReLU-plus-epsilon edge and root weights.
pub fn score(views: &ParentChildViews, p: &MtcParams<'_>, epsilon: f64) -> Result<ScoreSet, MtcError> {
    let shape_err = |e: LinalgError| MtcError::ShapeMismatch(format!("{e}"));
    let m = views.sp.rows();
    let root_pre = views.sp.matmul(p.w_r).map_err(shape_err)?;
    if root_pre.cols() != 1 || p.b_r.shape() != (1, 1) {
        return Err(MtcError::ShapeMismatch("root scorer must be d×1 with scalar bias".into()));
    }
    let f_root = (0..m)
        .map(|i| (root_pre[(i, 0)] + p.b_r[(0, 0)]).max(0.0) + epsilon)
        .collect();
    let bilinear = views
        .sp
        .matmul(p.w_bi)
        .and_then(|x| x.matmul(&views.sc.transpose()))
        .map_err(shape_err)?;
    let f_edge = Matrix::from_fn(m, m, |i, j| {
        if i == j {
            0.0
        } else {
            bilinear[(i, j)].max(0.0) + epsilon
        }
    });
    Ok(ScoreSet { f_edge, f_root, epsilon })
}

/// Root-replaced Laplacian: `L_jj = Σ_i f_ij`, `L_ij = -f_ij`, then row 0
/// overwritten with the root weights.
pub fn root_replaced_laplacian(s: &ScoreSet) -> Matrix {
    let m = s.m();
    let mut l = Matrix::zeros(m, m);
    for j in 0..m {
        let mut incoming = 0.0;
        for i in 0..m {
            if i != j {
                l[(i, j)] = -s.f_edge[(i, j)];
                incoming += s.f_edge[(i, j)];
            }
        }
        l[(j, j)] = incoming;
    }
    for j in 0..m {
        l[(0, j)] = s.f_root[j];
    }
    l
}

/// Exact edge and root marginals over single-root arborescences.
pub fn marginalize(s: &ScoreSet) -> Result<LatentGraph, MtcError> {
    let m = s.m();
    let l_hat = root_replaced_laplacian(s);
    let lu = linalg::lu_decompose(&l_hat)?;
    let (log_z, sign) = linalg::log_abs_determinant(&lu);
    if sign <= 0.0 {
        return Err(MtcError::NumericalQuality {
            value: sign,
            location: "partition function sign".into(),
        });
    }
    let b = linalg::inverse(&lu);
    let root: Vec<f64> = (0..m).map(|j| s.f_root[j] * b[(j, 0)]).collect();
    let adj = Matrix::from_fn(m, m, |i, j| {
        if i == j {
            return 0.0;
        }
        let f = s.f_edge[(i, j)];
        let into_j = if j != 0 { f * b[(j, j)] } else { 0.0 };
        let via_i = if i != 0 { f * b[(j, i)] } else { 0.0 };
        into_j - via_i
    });
    LatentGraph::from_raw(adj, root, log_z)
}

/// Marginals by enumerating every parent assignment with exactly one root
/// and no cycle. Exponential; an oracle for small `M` only.
pub fn brute_force_marginals(s: &ScoreSet) -> Result<LatentGraph, MtcError> {
    let m = s.m();
    if m > BRUTE_FORCE_MAX_M {
        return Err(MtcError::TooLarge(m));
    }
    // parent[j] == j encodes "j hangs off ROOT"
    let mut parent = vec![0usize; m];
    let mut z = 0.0;
    let mut root_w = vec![0.0; m];
    let mut edge_w = Matrix::zeros(m, m);
    loop {
        let roots: Vec<usize> = (0..m).filter(|&j| parent[j] == j).collect();
        if roots.len() == 1 && is_acyclic(&parent) {
            let r = roots[0];
            let mut w = s.f_root[r];
            for j in 0..m {
                if j != r {
                    w *= s.f_edge[(parent[j], j)];
                }
            }
            z += w;
            root_w[r] += w;
            for j in 0..m {
                if j != r {
                    edge_w[(parent[j], j)] += w;
                }
            }
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == m {
                let adj = edge_w.map(|w| w / z);
                let root = root_w.iter().map(|w| w / z).collect();
                return LatentGraph::from_raw(adj, root, libm::log(z));
            }
            parent[k] += 1;
            if parent[k] < m {
                break;
            }
            parent[k] = 0;
            k += 1;
        }
    }
}

fn is_acyclic(parent: &[usize]) -> bool {
    let m = parent.len();
    (0..m).all(|start| {
        let mut node = start;
        for _ in 0..m {
            if parent[node] == node {
                return true;
            }
            node = parent[node];
        }
        false
    })
}

/// Projection, scoring and marginalization in one call.
pub fn induce(h: &SentenceStates, p: &MtcParams<'_>, epsilon: f64) -> Result<LatentGraph, MtcError> {
    let views = project_parent_child(h, p)?;
    let scores = score(&views, p, epsilon)?;
    marginalize(&scores)
}

// ---- differentiable route ---------------------------------------------

/// Graph nodes for one induced structure. `f_root` and `root` are M×1.
#[derive(Debug, Clone, Copy)]
pub struct GraphNodes {
    pub f_edge: NodeId,
    pub f_root: NodeId,
    pub adj: NodeId,
    pub root: NodeId,
    pub log_z: NodeId,
}

impl GraphNodes {
    pub fn latent_graph(&self, g: &CompGraph) -> Result<LatentGraph, MtcError> {
        LatentGraph::from_raw(
            g.value(self.adj).clone(),
            g.value(self.root).col(0),
            g.value(self.log_z).item(),
        )
    }

    pub fn score_set(&self, g: &CompGraph, epsilon: f64) -> ScoreSet {
        ScoreSet {
            f_edge: g.value(self.f_edge).clone(),
            f_root: g.value(self.f_root).col(0),
            epsilon,
        }
    }
}

/// Records the scoring maps on `h` (M×d) and returns `(f_edge, f_root)`.
pub fn record_scores(
    g: &mut CompGraph,
    store: &ParamStore,
    prefix: &str,
    h: NodeId,
    epsilon: f64,
) -> Result<(NodeId, NodeId), MtcError> {
    let p = |g: &mut CompGraph, n: &str| g.param_from(store, &format!("{prefix}.{n}"));
    let m = g.shape(h).0;
    let (w_p, b_p) = (p(g, "w_p")?, p(g, "b_p")?);
    let (w_c, b_c) = (p(g, "w_c")?, p(g, "b_c")?);
    let (w_r, b_r, w_bi) = (p(g, "w_r")?, p(g, "b_r")?, p(g, "w_bi")?);

    let sp_pre = g.affine(h, w_p, b_p)?;
    let sp = g.relu(sp_pre)?;
    let sc_pre = g.affine(h, w_c, b_c)?;
    let sc = g.relu(sc_pre)?;

    let root_pre = g.affine(sp, w_r, b_r)?;
    let root_relu = g.relu(root_pre)?;
    let f_root = g.add_scalar(root_relu, epsilon)?;

    let spw = g.matmul(sp, w_bi)?;
    let sct = g.transpose(sc)?;
    let bilinear = g.matmul(spw, sct)?;
    let edge_relu = g.relu(bilinear)?;
    let edge_eps = g.add_scalar(edge_relu, epsilon)?;
    let off_diag = g.constant(Matrix::from_fn(m, m, |i, j| if i == j { 0.0 } else { 1.0 }));
    let f_edge = g.mul(edge_eps, off_diag)?;
    Ok((f_edge, f_root))
}

/// Records the marginalization of `f_edge` (M×M, zero diagonal) and
/// `f_root` (M×1) with differentiable primitives.
pub fn record_marginalize(
    g: &mut CompGraph,
    f_edge: NodeId,
    f_root: NodeId,
) -> Result<GraphNodes, MtcError> {
    let m = g.shape(f_edge).0;
    if g.shape(f_edge) != (m, m) || g.shape(f_root) != (m, 1) {
        return Err(MtcError::ShapeMismatch(format!(
            "edges {:?}, roots {:?}",
            g.shape(f_edge),
            g.shape(f_root)
        )));
    }
    let ones = g.constant(Matrix::filled(m, m, 1.0));
    let eye = g.constant(Matrix::identity(m));
    let drop_row0 = g.constant(Matrix::from_fn(m, m, |i, _| if i == 0 { 0.0 } else { 1.0 }));
    let drop_col0 = g.constant(Matrix::from_fn(m, m, |_, j| if j == 0 { 0.0 } else { 1.0 }));
    let e0 = g.constant(Matrix::from_fn(m, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }));

    // Laplacian
    let col_sums = g.matmul(ones, f_edge)?;
    let degree = g.mul(eye, col_sums)?;
    let lap = g.sub(degree, f_edge)?;
    let lap_rest = g.mul(drop_row0, lap)?;
    let root_t = g.transpose(f_root)?;
    let root_row = g.matmul(e0, root_t)?;
    let l_hat = g.add(lap_rest, root_row)?;

    let log_z = g.log_det(l_hat)?;
    let b = g.inverse(l_hat)?;

    // p^r_j = f_root_j · B_j0
    let b_col0 = g.matmul(b, e0)?;
    let root = g.mul(f_root, b_col0)?;

    // A(i,j) = [j≠0] f_ij B_jj − [i≠0] f_ij B_ji
    let b_diag = g.mul(eye, b)?;
    let b_jj = g.matmul(ones, b_diag)?;
    let into = g.mul(f_edge, b_jj)?;
    let into = g.mul(into, drop_col0)?;
    let bt = g.transpose(b)?;
    let via = g.mul(f_edge, bt)?;
    let via = g.mul(via, drop_row0)?;
    let adj = g.sub(into, via)?;

    Ok(GraphNodes {
        f_edge,
        f_root,
        adj,
        root,
        log_z,
    })
}

/// Differentiable projection → scoring → marginalization.
pub fn record_induce(
    g: &mut CompGraph,
    store: &ParamStore,
    prefix: &str,
    h: NodeId,
    epsilon: f64,
) -> Result<GraphNodes, MtcError> {
    let (f_edge, f_root) = record_scores(g, store, prefix, h, epsilon)?;
    record_marginalize(g, f_edge, f_root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scores(edges: &[&[f64]], roots: &[f64]) -> ScoreSet {
        ScoreSet::new(Matrix::from_rows(edges).unwrap(), roots.to_vec(), DEFAULT_EPSILON).unwrap()
    }

    #[test]
    fn symmetric_pair() {
        let s = scores(&[&[0.0, 1.0], &[1.0, 0.0]], &[1.0, 1.0]);
        let g = marginalize(&s).unwrap();
        assert!((g.root[0] - 0.5).abs() < 1e-15 && (g.root[1] - 0.5).abs() < 1e-15);
        assert!((g.adj[(0, 1)] - 0.5).abs() < 1e-15 && (g.adj[(1, 0)] - 0.5).abs() < 1e-15);
        let bf = brute_force_marginals(&s).unwrap();
        assert!(bf.adj.max_abs_diff(&g.adj) < 1e-15);
    }

    #[test]
    fn asymmetric_pair_matches_enumeration() {
        // trees: root=0 with 0→1 (2·3=6), root=1 with 1→0 (1·1=1)
        let s = scores(&[&[0.0, 3.0], &[1.0, 0.0]], &[2.0, 1.0]);
        let g = marginalize(&s).unwrap();
        assert!((g.root[0] - 6.0 / 7.0).abs() < 1e-14);
        assert!((g.root[1] - 1.0 / 7.0).abs() < 1e-14);
        assert!((g.adj[(0, 1)] - 6.0 / 7.0).abs() < 1e-14);
        assert!((g.adj[(1, 0)] - 1.0 / 7.0).abs() < 1e-14);
        assert!((g.log_z - libm::log(7.0)).abs() < 1e-14);
    }

    #[test]
    fn single_node_is_root() {
        let s = scores(&[&[0.0]], &[0.3]);
        let bf = brute_force_marginals(&s).unwrap();
        assert_eq!(bf.root, vec![1.0]);
        assert_eq!(bf.adj, Matrix::zeros(1, 1));
        let g = marginalize(&s).unwrap();
        assert!((g.root[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn brute_force_refuses_large_inputs() {
        let m = 8;
        let s = ScoreSet::new(Matrix::filled(m, m, 1.0), vec![1.0; m], DEFAULT_EPSILON).unwrap();
        assert_eq!(brute_force_marginals(&s), Err(MtcError::TooLarge(8)));
    }

    #[test]
    fn score_set_validation() {
        assert!(ScoreSet::new(Matrix::filled(2, 2, 1.0), vec![1.0, 0.0], DEFAULT_EPSILON).is_err());
        assert!(ScoreSet::new(Matrix::filled(2, 2, 1e-9), vec![1.0, 1.0], DEFAULT_EPSILON).is_err());
        assert!(ScoreSet::new(Matrix::filled(2, 3, 1.0), vec![1.0, 1.0], DEFAULT_EPSILON).is_err());
        let s = ScoreSet::new(Matrix::filled(2, 2, 1.0), vec![1.0, 1.0], DEFAULT_EPSILON).unwrap();
        assert_eq!(s.f_edge[(0, 0)], 0.0);
    }

    #[test]
    fn marginal_quality_violations_are_errors() {
        let bad = LatentGraph::from_raw(Matrix::zeros(1, 1), vec![1.0 + 1e-6], 0.0);
        assert!(matches!(bad, Err(MtcError::NumericalQuality { .. })));
        let ok = LatentGraph::from_raw(Matrix::zeros(1, 1), vec![1.0 + 1e-10], 0.0).unwrap();
        assert_eq!(ok.root[0], 1.0);
    }
}
