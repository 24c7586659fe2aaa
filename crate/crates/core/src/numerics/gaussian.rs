use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Covariance of a multivariate normal.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    /// Independent coordinates with the given variances.
    Diagonal(Vec<f64>),
    /// Full symmetric positive-semidefinite matrix.
    Full(Matrix),
}

impl Covariance {
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Covariance::Diagonal(vec![variance; dim])
    }

    pub fn zero(dim: usize) -> Self {
        Covariance::Diagonal(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Full(m) => m.rows(),
        }
    }
}

#[derive(Clone, Debug)]
enum Factor {
    Diagonal(Vec<f64>),
    /// `L` with `L L^T = Sigma`, row-major.
    Dense(Matrix),
}

/// Draws `x = mean + L z` with `z ~ N(0, I)`, where `L` is a symmetric
/// square-root factor of the covariance (eigendecomposition, so singular
/// PSD matrices are accepted).
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: Vec<f64>,
    factor: Factor,
}

impl GaussianSampler {
    pub fn new(mean: &[f64], cov: &Covariance) -> Result<Self> {
        let dim = mean.len();
        if cov.dim() != dim {
            return Err(Error::shape(format!(
                "mean has {dim} entries, covariance is {}-dimensional",
                cov.dim()
            )));
        }
        let factor = match cov {
            Covariance::Diagonal(var) => {
                if let Some(v) = var.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Err(Error::Decomposition(format!("negative or non-finite variance {v}")));
                }
                Factor::Diagonal(var.iter().map(|v| v.sqrt()).collect())
            }
            Covariance::Full(m) => Factor::Dense(psd_sqrt(m)?),
        };
        Ok(Self {
            mean: mean.to_vec(),
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Writes one draw into `out`.
    pub fn draw_into(&self, rng: &mut Rng, out: &mut [f64]) {
        match &self.factor {
            Factor::Diagonal(sd) => {
                for ((o, &m), &s) in out.iter_mut().zip(&self.mean).zip(sd) {
                    *o = m + s * rng.normal();
                }
            }
            Factor::Dense(l) => {
                let z: Vec<f64> = (0..self.dim()).map(|_| rng.normal()).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = self.mean[i] + crate::numerics::dot(l.row(i), &z);
                }
            }
        }
    }

    pub fn sample(&self, count: usize, rng: &mut Rng) -> Matrix {
        let mut out = Matrix::zeros(count, self.dim());
        for i in 0..count {
            self.draw_into(rng, out.row_mut(i));
        }
        out
    }
}

pub fn sample_gaussian(mean: &[f64], cov: &Covariance, count: usize, rng: &mut Rng) -> Result<Matrix> {
    Ok(GaussianSampler::new(mean, cov)?.sample(count, rng))
}

fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let dim = m.rows();
    if m.cols() != dim {
        return Err(Error::Decomposition(format!(
            "covariance must be square, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Decomposition("covariance has non-finite entries".into()));
    }
    let scale = m.data().iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
    for i in 0..dim {
        for j in 0..i {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 * scale {
                return Err(Error::Decomposition(format!(
                    "covariance is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let sym = DMatrix::from_fn(dim, dim, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let eig = SymmetricEigen::new(sym);
    let tol = 1e-10 * scale;
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < -tol) {
        return Err(Error::Decomposition(format!(
            "covariance is not positive semidefinite (eigenvalue {l:e})"
        )));
    }
    Ok(Matrix::from_fn(dim, dim, |i, j| {
        eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_stats(m: &Matrix, j: usize) -> (f64, f64) {
        let col = m.column(j);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let mean = [1.5, -2.0, 0.25];
        let mut rng = Rng::new(1);
        let s = sample_gaussian(&mean, &Covariance::zero(3), 10, &mut rng).unwrap();
        for row in s.row_iter() {
            assert_eq!(row, &mean);
        }
        let full = Covariance::Full(Matrix::zeros(3, 3));
        let s = sample_gaussian(&mean, &full, 10, &mut rng).unwrap();
        for row in s.row_iter() {
            assert_eq!(row, &mean);
        }
    }

    #[test]
    fn standard_normal_means_within_clt_band() {
        let count = 100_000;
        let mut rng = Rng::new(2);
        let s = sample_gaussian(&[0.0; 4], &Covariance::isotropic(4, 1.0), count, &mut rng).unwrap();
        let band = 4.0 / (count as f64).sqrt();
        for j in 0..4 {
            let (mean, _) = column_stats(&s, j);
            assert!(mean.abs() < band, "dim {j}: {mean}");
        }
    }

    #[test]
    fn diagonal_variances_recovered() {
        let mut rng = Rng::new(3);
        let s = sample_gaussian(&[0.0, 0.0], &Covariance::Diagonal(vec![4.0, 1.0]), 100_000, &mut rng)
            .unwrap();
        let (_, v0) = column_stats(&s, 0);
        let (_, v1) = column_stats(&s, 1);
        assert!((v0 - 4.0).abs() < 0.4, "{v0}");
        assert!((v1 - 1.0).abs() < 0.1, "{v1}");
    }

    #[test]
    fn full_covariance_recovered() {
        let cov = Matrix::from_rows(&[vec![2.0, 0.8], vec![0.8, 1.0]]).unwrap();
        let mut rng = Rng::new(4);
        let s = sample_gaussian(&[1.0, -1.0], &Covariance::Full(cov), 100_000, &mut rng).unwrap();
        let (m0, v0) = column_stats(&s, 0);
        let (m1, v1) = column_stats(&s, 1);
        let c01 = s
            .row_iter()
            .map(|r| (r[0] - m0) * (r[1] - m1))
            .sum::<f64>()
            / 99_999.0;
        assert!((v0 - 2.0).abs() < 0.1 && (v1 - 1.0).abs() < 0.05);
        assert!((c01 - 0.8).abs() < 0.05, "{c01}");
    }

    #[test]
    fn singular_psd_accepted() {
        let cov = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let mut rng = Rng::new(5);
        let s = sample_gaussian(&[0.0, 0.0], &Covariance::Full(cov), 100, &mut rng).unwrap();
        for r in s.row_iter() {
            assert!((r[0] - r[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_rejected() {
        let cov = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let err = GaussianSampler::new(&[0.0, 0.0], &Covariance::Full(cov)).unwrap_err();
        assert!(matches!(err, Error::Decomposition(_)));
        let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(GaussianSampler::new(&[0.0, 0.0], &Covariance::Full(asym)).is_err());
        assert!(GaussianSampler::new(&[0.0], &Covariance::Diagonal(vec![-1.0])).is_err());
    }
}
