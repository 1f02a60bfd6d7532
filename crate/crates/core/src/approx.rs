//! Gaussian radial basis vector used by the adaptive approximator.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Default number of basis functions.
pub const DEFAULT_COUNT: usize = 10;

/// Isotropic Gaussian basis `π_k(x) = exp(−‖x − c_k‖² / (2σ²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfConfig {
    pub centers: Vec<Vec<f64>>,
    pub width: f64,
}

impl RbfConfig {
    pub fn new(centers: Vec<Vec<f64>>, width: f64) -> Result<Self> {
        let cfg = Self { centers, width };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `count` centers evenly spaced on the diagonal of `[lo, hi]^dim`, width equal
    /// to the distance between neighboring centers.
    pub fn diagonal(dim: usize, count: usize, lo: f64, hi: f64) -> Result<Self> {
        if dim == 0 || count == 0 || !(hi > lo) {
            return Err(config_err(format!(
                "RBF layout needs dim >= 1, count >= 1 and lo < hi (got dim={dim}, count={count}, [{lo}, {hi}])"
            )));
        }
        let centers: Vec<Vec<f64>> = (0..count)
            .map(|k| {
                let s = if count == 1 {
                    0.5
                } else {
                    k as f64 / (count - 1) as f64
                };
                vec![lo + s * (hi - lo); dim]
            })
            .collect();
        let width = if count == 1 {
            (hi - lo) * (dim as f64).sqrt()
        } else {
            (hi - lo) * (dim as f64).sqrt() / (count - 1) as f64
        };
        Self::new(centers, width)
    }

    pub fn default_for(dim: usize) -> Result<Self> {
        Self::diagonal(dim, DEFAULT_COUNT, -1.0, 1.0)
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(config_err("RBF needs at least one center"));
        }
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(config_err(format!("RBF width must be > 0, got {}", self.width)));
        }
        let dim = self.dim();
        if dim == 0 || self.centers.iter().any(|c| c.len() != dim) {
            return Err(config_err("RBF centers must share one nonzero dimension"));
        }
        for (a, ca) in self.centers.iter().enumerate() {
            for cb in &self.centers[a + 1..] {
                if ca == cb {
                    return Err(config_err("RBF centers must be pairwise distinct"));
                }
            }
        }
        Ok(())
    }

    pub fn basis(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.count()];
        self.basis_into(x, &mut out);
        out
    }

    pub fn basis_into(&self, x: &[f64], out: &mut [f64]) {
        let inv = 1.0 / (2.0 * self.width * self.width);
        for (o, c) in out.iter_mut().zip(&self.centers) {
            let d2: f64 = c.iter().zip(x).map(|(ci, xi)| (xi - ci) * (xi - ci)).sum();
            *o = (-d2 * inv).exp();
        }
    }

    /// Gradient of component `k`.
    pub fn gradient(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let c = &self.centers[k];
        let s2 = self.width * self.width;
        let d2: f64 = c.iter().zip(x).map(|(ci, xi)| (xi - ci) * (xi - ci)).sum();
        let g = (-d2 / (2.0 * s2)).exp();
        x.iter().zip(c).map(|(xi, ci)| -(xi - ci) / s2 * g).collect()
    }

    /// `θᵀπ(x)`.
    pub fn weighted(&self, theta: &[f64], x: &[f64]) -> f64 {
        let inv = 1.0 / (2.0 * self.width * self.width);
        theta
            .iter()
            .zip(&self.centers)
            .map(|(w, c)| {
                let d2: f64 = c.iter().zip(x).map(|(ci, xi)| (xi - ci) * (xi - ci)).sum();
                w * (-d2 * inv).exp()
            })
            .sum()
    }

    /// Certified Lipschitz constant of `x ↦ π(x)` in the Euclidean norm.
    ///
    /// Each Gaussian's gradient norm `r/σ² · exp(−r²/2σ²)` peaks at `r = σ`
    /// with value `e^{−1/2}/σ`; stacking `p` of them costs a factor `√p`.
    pub fn lipschitz(&self) -> f64 {
        basis_lipschitz(self.count(), self.width)
    }
}

pub fn basis_lipschitz(count: usize, width: f64) -> f64 {
    (count as f64).sqrt() * (-0.5f64).exp() / width
}
