//! Parameter initialization helpers.

use rand::Rng;

use crate::linalg::Matrix;

/// Xavier/Glorot uniform init.
pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

pub(crate) fn constant(rows: usize, cols: usize, value: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| value)
}
