//! Exact expectations over a discrete joint task.
//!
//! A context `c ~ p(c)`, a positive `x ~ p(x|c)`, and `N − 1` negatives drawn
//! i.i.d. from the marginal `p(x)`. Two independent routes compute the same
//! expectation: [`by_tuples`] walks every ordered negative tuple, and
//! [`by_counts`] groups tuples by their symbol counts with multinomial
//! weights, which stays tractable for large `N`.

use serde::Serialize;

use super::{infonce_loss, prediction_accuracy};
use crate::autodiff::logsumexp;
use crate::error::{CpcError, Result};
use crate::synthdata::DiscreteJointTask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Expectation {
    pub loss: f64,
    pub accuracy: f64,
}

impl Expectation {
    pub fn lower_bound(&self, n: usize) -> f64 {
        (n as f64).ln() - self.loss
    }
}

/// Log-score table indexed `[c][x]`.
pub type ScoreTable = Vec<Vec<f64>>;

pub fn true_ratio_scores(task: &DiscreteJointTask) -> ScoreTable {
    task.ratio_table()
        .into_iter()
        .map(|row| row.into_iter().map(f64::ln).collect())
        .collect()
}

/// True log ratios with target labels relabelled by `perm`.
pub fn permuted_ratio_scores(task: &DiscreteJointTask, perm: &[usize]) -> ScoreTable {
    true_ratio_scores(task)
        .into_iter()
        .map(|row| perm.iter().map(|&p| row[p]).collect())
        .collect()
}

pub fn constant_scores(task: &DiscreteJointTask) -> ScoreTable {
    vec![vec![0.0; task.target_size()]; task.context_size()]
}

fn check(task: &DiscreteJointTask, n: usize, scores: &ScoreTable) -> Result<()> {
    if n < 1 {
        return Err(CpcError::invalid("exact expectation: N must be at least 1"));
    }
    if scores.len() != task.context_size() || scores.iter().any(|r| r.len() != task.target_size()) {
        return Err(CpcError::shape(
            "exact expectation",
            &[task.context_size(), task.target_size()],
            &[scores.len(), scores.first().map_or(0, Vec::len)],
        ));
    }
    Ok(())
}

/// Enumerates all `A_x^(N−1)` ordered negative tuples.
pub fn by_tuples(task: &DiscreteJointTask, n: usize, scores: &ScoreTable) -> Result<Expectation> {
    check(task, n, scores)?;
    let ax = task.target_size();
    let px = task.target_marginal();
    let m = n - 1;
    let tuples = ax.checked_pow(m as u32).filter(|&t| t <= 50_000_000).ok_or_else(|| {
        CpcError::invalid("by_tuples: too many tuples, use by_counts")
    })?;
    let mut loss = 0.0;
    let mut acc = 0.0;
    let mut row = vec![0.0; n];
    for c in 0..task.context_size() {
        for x in 0..ax {
            let pxc = task.joint(x, c);
            for code in 0..tuples {
                let mut k = code;
                let mut prob = pxc;
                row[0] = scores[c][x];
                for slot in row.iter_mut().skip(1) {
                    let sym = k % ax;
                    k /= ax;
                    prob *= px[sym];
                    *slot = scores[c][sym];
                }
                loss += prob * infonce_loss(&row, 0)?;
                if n >= 2 {
                    acc += prob * prediction_accuracy(&row, 0)?;
                }
            }
        }
    }
    Ok(Expectation {
        loss,
        accuracy: if n >= 2 { acc } else { 1.0 },
    })
}

fn compositions(total: usize, parts: usize, cur: &mut Vec<usize>, out: &mut dyn FnMut(&[usize])) {
    if parts == 1 {
        cur.push(total);
        out(cur);
        cur.pop();
        return;
    }
    for k in 0..=total {
        cur.push(k);
        compositions(total - k, parts - 1, cur, out);
        cur.pop();
    }
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Groups negative tuples by symbol counts with multinomial weights.
pub fn by_counts(task: &DiscreteJointTask, n: usize, scores: &ScoreTable) -> Result<Expectation> {
    check(task, n, scores)?;
    let ax = task.target_size();
    let px = task.target_marginal();
    let m = n - 1;
    let lnm = ln_factorial(m);
    let mut loss = 0.0;
    let mut acc = 0.0;
    let mut cur = Vec::with_capacity(ax);
    compositions(m, ax, &mut cur, &mut |counts: &[usize]| {
        let mut lnw = lnm;
        for (i, &k) in counts.iter().enumerate() {
            lnw += k as f64 * px[i].ln() - ln_factorial(k);
        }
        let w = lnw.exp();
        for c in 0..task.context_size() {
            // log Σ_neg e^F, over the negatives with these counts.
            let terms: Vec<f64> = counts
                .iter()
                .enumerate()
                .filter(|(_, &k)| k > 0)
                .map(|(i, &k)| scores[c][i] + (k as f64).ln())
                .collect();
            let neg_max = counts
                .iter()
                .enumerate()
                .filter(|(_, &k)| k > 0)
                .map(|(i, _)| scores[c][i])
                .fold(f64::NEG_INFINITY, f64::max);
            for x in 0..ax {
                let pxc = task.joint(x, c);
                let f = scores[c][x];
                let mut all = terms.clone();
                all.push(f);
                let l = logsumexp(&all).expect("non-empty") - f;
                loss += w * pxc * l;
                if f > neg_max {
                    acc += w * pxc;
                }
            }
        }
    });
    Ok(Expectation {
        loss,
        accuracy: if n >= 2 { acc } else { 1.0 },
    })
}
