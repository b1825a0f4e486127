use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned Gaussian stored as mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Dimension(format!("mean has {} entries, std has {}", mean.len(), std.len())));
        }
        if mean.iter().any(|m| !m.is_finite()) || std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Numerical("Gaussian parameters must be finite with positive std".into()));
        }
        Ok(DiagonalGaussian { mean, std })
    }

    /// From the mean head and the raw log-variance head: `std = exp(0.5 * raw)`.
    pub fn from_log_variance(mean: Vec<f64>, log_var: &[f64]) -> Result<Self> {
        DiagonalGaussian::new(mean, log_var.iter().map(|r| (0.5 * r).exp()).collect())
    }

    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn variance(&self) -> Vec<f64> {
        self.std.iter().map(|s| s * s).collect()
    }

    pub(crate) fn check_same_dim(&self, other: &DiagonalGaussian) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!("Gaussians of dimension {} and {}", self.dim(), other.dim())));
        }
        Ok(())
    }
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `|mu1 - mu2|^2 + sum_i (s1_i - s2_i)^2`.
pub fn w2_diag_gauss(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<f64> {
    a.check_same_dim(b)?;
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let spread: f64 = a.std.iter().zip(&b.std).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(mean + spread)
}
