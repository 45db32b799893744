use serde::{Deserialize, Serialize};

use crate::error::{CpcError, Result};
use crate::rng::{normal, Rng};

/// `c ~ N(0, I_d)`, `x = ρ·c + √(1−ρ²)·ε` independently per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPairTask {
    pub dim: usize,
    pub rho: f64,
}

impl GaussianPairTask {
    pub fn new(dim: usize, rho: f64) -> Result<Self> {
        let t = Self { dim, rho };
        t.validate()?;
        Ok(t)
    }

    /// Per-dimension correlation giving a total MI of `mi` nats in `dim` dims.
    pub fn with_mi(dim: usize, mi: f64) -> Result<Self> {
        let rho = (1.0 - (-2.0 * mi / dim as f64).exp()).sqrt();
        Self::new(dim, rho)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.dim == 0 {
            errs.push("task.dim must be at least 1".to_string());
        }
        if !(self.rho.abs() < 1.0) {
            errs.push(format!("task.rho must lie in (-1, 1), got {}", self.rho));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CpcError::Config(errs))
        }
    }

    pub fn true_mi(&self) -> f64 {
        -(self.dim as f64) / 2.0 * (1.0 - self.rho * self.rho).ln()
    }

    /// `log p(x|c) − log p(x)`.
    pub fn log_density_ratio(&self, x: &[f64], c: &[f64]) -> f64 {
        let v = 1.0 - self.rho * self.rho;
        let per_dim_const = -0.5 * v.ln();
        x.iter()
            .zip(c)
            .map(|(&xi, &ci)| {
                let r = xi - self.rho * ci;
                per_dim_const - r * r / (2.0 * v) + xi * xi / 2.0
            })
            .sum()
    }

    pub fn density_ratio(&self, x: &[f64], c: &[f64]) -> f64 {
        self.log_density_ratio(x, c).exp()
    }

    /// Draws `(x, c)` into two flat row-major `n×dim` buffers.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let s = (1.0 - self.rho * self.rho).sqrt();
        let mut xs = Vec::with_capacity(n * self.dim);
        let mut cs = Vec::with_capacity(n * self.dim);
        for _ in 0..n * self.dim {
            let c = normal(rng);
            let x = self.rho * c + s * normal(rng);
            cs.push(c);
            xs.push(x);
        }
        (xs, cs)
    }
}
