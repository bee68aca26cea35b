#![allow(dead_code)]

use hiergnn_core::linalg::Matrix;
use hiergnn_core::params::ParamStore;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Standard normal draw via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Normal entries pushed at least `gap` away from zero.
pub fn normal_matrix_off_kink(rows: usize, cols: usize, gap: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let x = normal(rng);
        if x.abs() < gap {
            gap.copysign(x) * 2.0
        } else {
            x
        }
    })
}

/// Replaces every parameter with uniform noise in `±scale`, keeping shapes.
pub fn randomize(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        for v in t.as_mut_slice() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}
