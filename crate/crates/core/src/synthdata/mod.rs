//! Synthetic tasks with exact ground truth: analytic or enumerable mutual
//! information, exact density ratios, and per-frame latent labels.

mod discrete;
pub mod dump;
mod gaussian;
mod markov;

use serde::{Deserialize, Serialize};

pub use discrete::DiscreteJointTask;
pub use gaussian::GaussianPairTask;
pub use markov::{LabeledSequence, LatentMarkovSequenceTask, MarkovWorld};

use crate::autodiff::Tensor;
use crate::error::{CpcError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Gaussian(GaussianPairTask),
    Discrete(DiscreteJointTask),
    Markov(LatentMarkovSequenceTask),
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Markov(LatentMarkovSequenceTask::default())
    }
}

/// `n` i.i.d. pairs as feature rows. Discrete symbols are one-hot encoded.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x: Tensor,
    pub c: Tensor,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn one_hot(symbols: &[usize], size: usize) -> Tensor {
    let mut t = Tensor::zeros(&[symbols.len(), size]);
    for (i, &s) in symbols.iter().enumerate() {
        t.values_mut()[i * size + s] = 1.0;
    }
    t
}

fn symbol_of(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

impl TaskConfig {
    /// The `kind` value in config JSON.
    pub fn tag(&self) -> &'static str {
        match self {
            TaskConfig::Gaussian(_) => "gaussian",
            TaskConfig::Discrete(_) => "discrete",
            TaskConfig::Markov(_) => "markov",
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            TaskConfig::Gaussian(_) => "gaussian task",
            TaskConfig::Discrete(_) => "discrete task",
            TaskConfig::Markov(_) => "markov task",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskConfig::Gaussian(t) => t.validate(),
            TaskConfig::Discrete(t) => t.validate(),
            TaskConfig::Markov(t) => t.validate(),
        }
    }

    /// Exact mutual information in nats.
    pub fn true_mi(&self) -> Result<f64> {
        match self {
            TaskConfig::Gaussian(t) => Ok(t.true_mi()),
            TaskConfig::Discrete(t) => Ok(t.true_mi()),
            TaskConfig::Markov(_) => Err(CpcError::UnsupportedTask(self.kind_name())),
        }
    }

    /// Feature widths `(x, c)` of pair samples.
    pub fn pair_dims(&self) -> Result<(usize, usize)> {
        match self {
            TaskConfig::Gaussian(t) => Ok((t.dim, t.dim)),
            TaskConfig::Discrete(t) => Ok((t.target_size(), t.context_size())),
            TaskConfig::Markov(_) => Err(CpcError::UnsupportedTask(self.kind_name())),
        }
    }

    pub fn sample_pairs(&self, n: usize, rng: &mut Rng) -> Result<PairBatch> {
        if n == 0 {
            return Err(CpcError::invalid("sample_pairs: n must be at least 1"));
        }
        self.validate()?;
        match self {
            TaskConfig::Gaussian(t) => {
                let (x, c) = t.sample(n, rng);
                Ok(PairBatch {
                    x: Tensor::new(vec![n, t.dim], x)?,
                    c: Tensor::new(vec![n, t.dim], c)?,
                })
            }
            TaskConfig::Discrete(t) => {
                let (x, c) = t.sample(n, rng);
                Ok(PairBatch {
                    x: one_hot(&x, t.target_size()),
                    c: one_hot(&c, t.context_size()),
                })
            }
            TaskConfig::Markov(_) => Err(CpcError::UnsupportedTask(self.kind_name())),
        }
    }

    /// `log p(x|c)/p(x)` for feature rows as produced by [`Self::sample_pairs`].
    pub fn true_log_density_ratio(&self, x: &[f64], c: &[f64]) -> Result<f64> {
        match self {
            TaskConfig::Gaussian(t) => Ok(t.log_density_ratio(x, c)),
            TaskConfig::Discrete(t) => Ok(t.density_ratio(symbol_of(x), symbol_of(c)).ln()),
            TaskConfig::Markov(_) => Err(CpcError::UnsupportedTask(self.kind_name())),
        }
    }

    pub fn true_density_ratio(&self, x: &[f64], c: &[f64]) -> Result<f64> {
        Ok(self.true_log_density_ratio(x, c)?.exp())
    }

    /// Row `i`, column `j`: true log ratio of candidate `x_j` under context `c_i`.
    pub fn log_ratio_matrix(&self, batch: &PairBatch) -> Result<Tensor> {
        let n = batch.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.true_log_density_ratio(batch.x.row(j), batch.c.row(i))?;
            }
        }
        Tensor::new(vec![n, n], out)
    }
}
