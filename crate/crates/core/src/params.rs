//! Named parameter storage shared by the model, the trainer and the
//! checkpoint format.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::GradStore;
use crate::linalg::Matrix;

/// Half-width of the uniform initializer for weight matrices.
pub const INIT_SCALE: f64 = 0.08;

/// Parameters keyed by dotted name, iterated in sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|m| m.as_slice().len()).sum()
    }

    /// Uniform `[-INIT_SCALE, INIT_SCALE]` weights.
    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-INIT_SCALE..=INIT_SCALE));
        self.insert(name, m);
    }

    /// Uniform `[-scale, scale]` weights.
    pub fn init_uniform_scaled(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale));
        self.insert(name, m);
    }

    /// Glorot-uniform weights, `scale = sqrt(6 / (rows + cols))`.
    pub fn init_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let scale = libm::sqrt(6.0 / (rows + cols) as f64);
        self.init_uniform_scaled(name, rows, cols, scale, rng);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::zeros(rows, cols));
    }

    pub fn init_filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Matrix::filled(rows, cols, value));
    }

    /// `θ ← θ − lr·g` for every parameter that has a gradient.
    pub fn apply_step(&mut self, grads: &GradStore, lr: f64) {
        for (name, g) in grads.iter() {
            if let Some(p) = self.tensors.get_mut(name) {
                for (pv, gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *pv -= lr * gv;
                }
            }
        }
    }

    /// True when every entry of every tensor has the same bit pattern.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.as_slice()
                        .iter()
                        .zip(b.as_slice())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
