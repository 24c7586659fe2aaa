use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rotary embedding configuration. Dimension pairs are interleaved:
/// plane `p` rotates coordinates `(2p, 2p + 1)` by angle `t * theta_p`, with
/// `theta_p = base^(-2p / head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    base: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "rope head_dim must be even and >= 2, got {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::config(format!("rope base must be > 1, got {base}")));
        }
        Ok(Self { head_dim, base })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, DEFAULT_ROPE_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn planes(&self) -> usize {
        self.head_dim / 2
    }

    pub fn theta(&self, plane: usize) -> f64 {
        self.base.powf(-2.0 * plane as f64 / self.head_dim as f64)
    }

    pub fn thetas(&self) -> Vec<f64> {
        (0..self.planes()).map(|p| self.theta(p)).collect()
    }
}

/// Rotates `x` in place by `R(position)`.
pub fn rotate_in_place(x: &mut [f64], position: f64, thetas: &[f64]) {
    debug_assert_eq!(x.len(), 2 * thetas.len());
    for (pair, &theta) in x.chunks_exact_mut(2).zip(thetas) {
        let (sin, cos) = (position * theta).sin_cos();
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = cos * x0 - sin * x1;
        pair[1] = sin * x0 + cos * x1;
    }
}

/// Rotates row `t` of `x` by `R(positions[t])`.
pub fn apply_rope(x: &Matrix, positions: &[usize], cfg: &RopeConfig) -> Result<Matrix> {
    if x.cols() != cfg.head_dim() {
        return Err(Error::shape(format!(
            "rope expects {} columns, got {}",
            cfg.head_dim(),
            x.cols()
        )));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let thetas = cfg.thetas();
    let mut out = x.clone();
    for (t, &pos) in positions.iter().enumerate() {
        rotate_in_place(out.row_mut(t), pos as f64, &thetas);
    }
    Ok(out)
}

/// Convenience for the common case `positions = 0..n`.
pub fn apply_rope_sequential(x: &Matrix, cfg: &RopeConfig) -> Result<Matrix> {
    let positions: Vec<usize> = (0..x.rows()).collect();
    apply_rope(x, &positions, cfg)
}

/// Explicit block-diagonal `R(t)`.
pub fn rotation_matrix(t: f64, cfg: &RopeConfig) -> Matrix {
    let mut r = Matrix::zeros(cfg.head_dim(), cfg.head_dim());
    for p in 0..cfg.planes() {
        let (sin, cos) = (t * cfg.theta(p)).sin_cos();
        r.set(2 * p, 2 * p, cos);
        r.set(2 * p, 2 * p + 1, -sin);
        r.set(2 * p + 1, 2 * p, sin);
        r.set(2 * p + 1, 2 * p + 1, cos);
    }
    r
}
