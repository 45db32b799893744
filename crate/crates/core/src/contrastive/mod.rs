//! InfoNCE, the mutual-information lower bound, the optimal posterior over
//! candidates, the MINE estimator, and negative sampling.
//!
//! Scores are always handled in log space: a log-score `F(x, c)` stands for
//! the unnormalized density-ratio estimate `f = exp(F)`.

pub mod enumerate;
mod negatives;

use serde::{Deserialize, Serialize};

pub use negatives::{draw_negatives, FramePool, FrameRef, NegativeSampler, NegativeSamplingStrategy};

use crate::autodiff::{logsumexp, Tape, Tensor, Var};
use crate::error::{CpcError, Result};

/// One positive and `N − 1` negatives scored against a single context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub context: Vec<f64>,
    pub horizon: usize,
    /// Candidates in scoring order; `candidates[positive_index]` is the positive.
    pub candidates: Vec<Vec<f64>>,
    pub positive_index: usize,
    pub provenance: Vec<FrameRef>,
}

impl ContrastiveBatch {
    /// Batch with the positive first, followed by the negatives.
    pub fn new(
        context: Vec<f64>,
        horizon: usize,
        positive: (Vec<f64>, FrameRef),
        negatives: Vec<(Vec<f64>, FrameRef)>,
    ) -> Result<Self> {
        let dim = positive.0.len();
        if negatives.iter().any(|(z, _)| z.len() != dim) {
            return Err(CpcError::invalid("contrastive batch: latent vectors differ in length"));
        }
        let mut candidates = vec![positive.0];
        let mut provenance = vec![positive.1];
        for (z, f) in negatives {
            candidates.push(z);
            provenance.push(f);
        }
        Ok(Self {
            context,
            horizon,
            candidates,
            positive_index: 0,
            provenance,
        })
    }

    /// Total candidate count `N`.
    pub fn size(&self) -> usize {
        self.candidates.len()
    }

    pub fn negatives(&self) -> impl Iterator<Item = (&Vec<f64>, &FrameRef)> {
        let pos = self.positive_index;
        self.candidates
            .iter()
            .zip(&self.provenance)
            .enumerate()
            .filter(move |(i, _)| *i != pos)
            .map(|(_, p)| p)
    }
}

fn check_scores(log_scores: &[f64], positive: usize, op: &'static str) -> Result<()> {
    if log_scores.is_empty() {
        return Err(CpcError::Empty(op));
    }
    if positive >= log_scores.len() {
        return Err(CpcError::IndexOutOfRange {
            op,
            index: positive,
            len: log_scores.len(),
        });
    }
    Ok(())
}

/// `−(F_pos − logsumexp(F))`: cross-entropy of picking the positive.
pub fn infonce_loss(log_scores: &[f64], positive: usize) -> Result<f64> {
    check_scores(log_scores, positive, "infonce_loss")?;
    let lse = logsumexp(log_scores).expect("non-empty");
    Ok((lse - log_scores[positive]).max(0.0))
}

/// Differentiable InfoNCE on a tape, for a vector of log-scores.
pub fn infonce_loss_on_tape(tape: &mut Tape, log_scores: Var, positive: usize) -> Result<Var> {
    let n = tape.value(log_scores).len();
    if n == 0 {
        return Err(CpcError::Empty("infonce_loss"));
    }
    let lse = tape.logsumexp(log_scores)?;
    let pos = tape.pick(log_scores, positive)?;
    tape.sub(lse, pos)
}

/// `log(N) − L_N`, in nats.
pub fn mi_lower_bound(mean_loss: f64, n: usize) -> Result<f64> {
    if n < 1 {
        return Err(CpcError::invalid("mi_lower_bound: N must be at least 1"));
    }
    Ok((n as f64).ln() - mean_loss)
}

/// Probability that each candidate is the positive, given exact density
/// ratios: `r_i / Σ_j r_j`.
pub fn optimal_posterior(density_ratios: &[f64]) -> Result<Vec<f64>> {
    if density_ratios.is_empty() {
        return Err(CpcError::Empty("optimal_posterior"));
    }
    if let Some(r) = density_ratios.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
        return Err(CpcError::invalid(format!(
            "optimal_posterior: density ratios must be positive and finite, got {r}"
        )));
    }
    let total: f64 = density_ratios.iter().sum();
    Ok(density_ratios.iter().map(|r| r / total).collect())
}

/// Softmax of log-scores; `optimal_posterior` in log space.
pub fn softmax(log_scores: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(log_scores).ok_or(CpcError::Empty("softmax"))?;
    Ok(log_scores.iter().map(|s| (s - lse).exp()).collect())
}

/// Empirical MINE-style value: `mean(F_pos) − mean_c log((1/(N−1)) Σ_neg e^F)`.
///
/// `negative_scores[i]` holds the negative log-scores for context `i`.
pub fn mine_estimate(positive_scores: &[f64], negative_scores: &[Vec<f64>]) -> Result<f64> {
    if positive_scores.is_empty() {
        return Err(CpcError::Empty("mine_estimate"));
    }
    if positive_scores.len() != negative_scores.len() {
        return Err(CpcError::shape(
            "mine_estimate",
            &[positive_scores.len()],
            &[negative_scores.len()],
        ));
    }
    let mut neg_term = 0.0;
    for negs in negative_scores {
        let lse = logsumexp(negs).ok_or_else(|| CpcError::invalid("mine_estimate: context without negatives"))?;
        neg_term += lse - (negs.len() as f64).ln();
    }
    let n = positive_scores.len() as f64;
    Ok(positive_scores.iter().sum::<f64>() / n - neg_term / n)
}

/// 1 when the positive strictly beats every negative, else 0. Ties fail.
pub fn prediction_accuracy(log_scores: &[f64], positive: usize) -> Result<f64> {
    check_scores(log_scores, positive, "prediction_accuracy")?;
    if log_scores.len() < 2 {
        return Err(CpcError::invalid("prediction_accuracy needs at least 2 candidates"));
    }
    let p = log_scores[positive];
    let wins = log_scores
        .iter()
        .enumerate()
        .all(|(i, &s)| i == positive || p > s);
    Ok(if wins { 1.0 } else { 0.0 })
}

/// Mean InfoNCE loss, accuracy and MINE value for an `N × N` score matrix
/// whose row `i` scores every candidate against context `i`, with the
/// positive on the diagonal and the other entries as negatives.
pub fn square_batch_stats(scores: &Tensor) -> Result<(f64, f64, f64)> {
    let n = match scores.shape() {
        [r, c] if r == c => *r,
        other => return Err(CpcError::shape("square_batch_stats", other, &[other[0], other[0]])),
    };
    if n < 2 {
        return Err(CpcError::invalid("square_batch_stats needs at least 2 candidates"));
    }
    let (mut loss, mut acc) = (0.0, 0.0);
    let mut pos = Vec::with_capacity(n);
    let mut negs = Vec::with_capacity(n);
    for i in 0..n {
        let row = scores.row(i);
        loss += infonce_loss(row, i)?;
        acc += prediction_accuracy(row, i)?;
        pos.push(row[i]);
        negs.push(row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| v).collect::<Vec<_>>());
    }
    Ok((loss / n as f64, acc / n as f64, mine_estimate(&pos, &negs)?))
}

/// Summary of a mutual-information evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Mean InfoNCE loss over batches, nats.
    pub loss: f64,
    /// Candidates per context.
    pub n: usize,
    /// `log(N) − loss`.
    pub lower_bound: f64,
    /// Standard error of the batch-mean loss (and therefore of the bound).
    pub standard_error: f64,
    pub mine: f64,
    pub mine_standard_error: f64,
    pub batches: usize,
}

impl MiEstimate {
    /// Aggregates per-batch `(loss, mine)` values.
    pub fn from_batches(n: usize, per_batch: &[(f64, f64)]) -> Result<Self> {
        if per_batch.is_empty() {
            return Err(CpcError::Empty("MiEstimate::from_batches"));
        }
        let losses: Vec<f64> = per_batch.iter().map(|b| b.0).collect();
        let mines: Vec<f64> = per_batch.iter().map(|b| b.1).collect();
        let (loss, se) = mean_and_se(&losses);
        let (mine, mse) = mean_and_se(&mines);
        Ok(Self {
            loss,
            n,
            lower_bound: mi_lower_bound(loss, n)?,
            standard_error: se,
            mine,
            mine_standard_error: mse,
            batches: per_batch.len(),
        })
    }
}

/// Sample mean and standard error of the mean (0 for a single value).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
