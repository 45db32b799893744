use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CpcError, Result};
use crate::rng::Rng;

/// Joint distribution over a finite alphabet pair.
///
/// `table[c][x] = p(x, c)`: rows index the context symbol, columns the
/// target symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteJointTask {
    pub table: Vec<Vec<f64>>,
}

impl DiscreteJointTask {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self { table };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let cols = self.table.first().map_or(0, Vec::len);
        if self.table.is_empty() || cols == 0 {
            errs.push("task.table must be non-empty".to_string());
        }
        if self.table.iter().any(|r| r.len() != cols) {
            errs.push("task.table rows must have equal length".to_string());
        }
        if self.table.iter().flatten().any(|&p| !(p > 0.0) || !p.is_finite()) {
            errs.push("task.table entries must be positive".to_string());
        }
        let total: f64 = self.table.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-9 {
            errs.push(format!("task.table must sum to 1, sums to {total}"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CpcError::Config(errs))
        }
    }

    pub fn context_size(&self) -> usize {
        self.table.len()
    }

    pub fn target_size(&self) -> usize {
        self.table[0].len()
    }

    pub fn joint(&self, x: usize, c: usize) -> f64 {
        self.table[c][x]
    }

    pub fn target_marginal(&self) -> Vec<f64> {
        (0..self.target_size())
            .map(|x| self.table.iter().map(|r| r[x]).sum())
            .collect()
    }

    pub fn context_marginal(&self) -> Vec<f64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    /// `p(x|c) / p(x) = p(x,c) / (p(x) p(c))`.
    pub fn density_ratio(&self, x: usize, c: usize) -> f64 {
        let px = self.target_marginal()[x];
        let pc = self.context_marginal()[c];
        self.joint(x, c) / (px * pc)
    }

    /// Full `A_c × A_x` ratio table.
    pub fn ratio_table(&self) -> Vec<Vec<f64>> {
        let px = self.target_marginal();
        let pc = self.context_marginal();
        self.table
            .iter()
            .zip(&pc)
            .map(|(row, &pcv)| row.iter().zip(&px).map(|(&j, &pxv)| j / (pxv * pcv)).collect())
            .collect()
    }

    /// `Σ p(x,c) log(p(x,c) / (p(x) p(c)))`.
    pub fn true_mi(&self) -> f64 {
        let ratios = self.ratio_table();
        self.table
            .iter()
            .zip(&ratios)
            .flat_map(|(row, rrow)| row.iter().zip(rrow).map(|(&p, &r)| p * r.ln()))
            .sum()
    }

    /// Draws `n` i.i.d. `(x, c)` symbol pairs.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
        let ax = self.target_size();
        let flat: Vec<f64> = self.table.iter().flatten().copied().collect();
        let mut xs = Vec::with_capacity(n);
        let mut cs = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = sample_index(&flat, rng);
            cs.push(idx / ax);
            xs.push(idx % ax);
        }
        (xs, cs)
    }

    /// Symbols drawn from the target marginal.
    pub fn sample_targets(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let px = self.target_marginal();
        (0..n).map(|_| sample_index(&px, rng)).collect()
    }
}

/// Inverse-CDF draw from unnormalized-safe probabilities summing to ~1.
pub(crate) fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
