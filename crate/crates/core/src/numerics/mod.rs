//! Foundation numerics: dense matrices, the seeded generator, Gaussian
//! sampling, softmax, SiLU and rotary embeddings. Everything is `f64`.

mod gaussian;
mod matrix;
mod rng;
mod rope;

pub use gaussian::{sample_gaussian, Covariance, GaussianSampler};
pub use matrix::{dot, Matrix};
pub use rng::Rng;
pub use rope::{
    apply_rope, apply_rope_sequential, rotate_in_place, rotation_matrix, RopeConfig,
    DEFAULT_ROPE_BASE,
};

use crate::error::{Error, Result};

/// Row-wise softmax. Entries rejected by `mask` (row-major, same shape as
/// `m`) or equal to `-inf` get weight exactly 0.
pub fn softmax_rows(m: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.len() != m.rows() * m.cols() {
            return Err(Error::shape(format!(
                "mask has {} entries for a {}x{} matrix",
                mask.len(),
                m.rows(),
                m.cols()
            )));
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let allowed = |j: usize| mask.is_none_or(|mk| mk[i * m.cols() + j]);
        let row = m.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, &x) in row.iter().enumerate() {
            if x.is_nan() || x == f64::INFINITY {
                return Err(Error::Distribution(format!("non-finite logit at ({i}, {j})")));
            }
            if allowed(j) && x > max {
                max = x;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptySoftmaxRow { row: i });
        }
        let out_row = out.row_mut(i);
        let mut denom = 0.0;
        for (j, (&x, o)) in row.iter().zip(out_row.iter_mut()).enumerate() {
            if allowed(j) {
                *o = (x - max).exp();
                denom += *o;
            }
        }
        for o in out_row.iter_mut() {
            *o /= denom;
        }
    }
    Ok(out)
}

/// Softmax of a single vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let denom: f64 = out.iter().sum();
    for o in &mut out {
        *o /= denom;
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx of `silu`.
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
