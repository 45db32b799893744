use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::discrete::sample_index;
use crate::autodiff::Tensor;
use crate::error::{CpcError, Result};
use crate::rng::{derive_seed, normal, seeded, streams, Rng};

/// Slowly switching hidden chain ("phoneme" analog) observed through
/// additive Gaussian emissions with a per-source offset ("speaker" analog).
///
/// The chain advances once every `hold` raw samples; it stays put with
/// probability `stay_prob` and otherwise jumps to another state according to
/// a fixed random jump table. Observation at raw time `t` is
/// `embedding[state] + offset[source] + noise·ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentMarkovSequenceTask {
    pub states: usize,
    pub stay_prob: f64,
    pub sources: usize,
    /// Standard deviation of each source's offset vector entries.
    pub source_offset: f64,
    pub dim: usize,
    pub noise: f64,
    /// Raw samples per sequence.
    pub length: usize,
    /// Raw samples per chain step.
    pub hold: usize,
    /// Seed for the fixed embeddings, offsets and jump table.
    pub seed: u64,
}

impl Default for LatentMarkovSequenceTask {
    fn default() -> Self {
        Self {
            states: 8,
            stay_prob: 0.9,
            sources: 10,
            source_offset: 1.0,
            dim: 16,
            noise: 3.0,
            length: 256,
            hold: 4,
            seed: 0,
        }
    }
}

/// One generated sequence with per-raw-sample labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub id: usize,
    pub source: usize,
    /// `dim × length`, channel-major.
    pub observations: Tensor,
    pub states: Vec<usize>,
}

/// Fixed quantities realized from the task seed.
#[derive(Debug, Clone)]
pub struct MarkovWorld {
    pub embeddings: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
    pub transition: Vec<Vec<f64>>,
}

impl LatentMarkovSequenceTask {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.states < 2 {
            errs.push("task.states must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.stay_prob) {
            errs.push(format!("task.stay_prob must lie in [0, 1), got {}", self.stay_prob));
        }
        if self.sources == 0 {
            errs.push("task.sources must be at least 1".into());
        }
        if self.dim == 0 {
            errs.push("task.dim must be at least 1".into());
        }
        if !(self.noise >= 0.0) {
            errs.push("task.noise must be non-negative".into());
        }
        if !(self.source_offset >= 0.0) {
            errs.push("task.source_offset must be non-negative".into());
        }
        if self.length == 0 {
            errs.push("task.length must be at least 1".into());
        }
        if self.hold == 0 {
            errs.push("task.hold must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CpcError::Config(errs))
        }
    }

    /// Mean number of chain steps spent in a state before leaving.
    pub fn expected_dwell(&self) -> f64 {
        1.0 / (1.0 - self.stay_prob)
    }

    pub fn world(&self) -> MarkovWorld {
        let task_seed = derive_seed(self.seed, streams::TASK);
        let mut rng = seeded(derive_seed(task_seed, 0));
        let embeddings = (0..self.states)
            .map(|_| (0..self.dim).map(|_| normal(&mut rng)).collect())
            .collect();
        let mut rng = seeded(derive_seed(task_seed, 1));
        let offsets = (0..self.sources)
            .map(|_| (0..self.dim).map(|_| self.source_offset * normal(&mut rng)).collect())
            .collect();
        let mut rng = seeded(derive_seed(task_seed, 2));
        let transition = (0..self.states)
            .map(|i| {
                let w: Vec<f64> = (0..self.states)
                    .map(|j| if i == j { 0.0 } else { rng.random_range(0.2..1.0) })
                    .collect();
                let total: f64 = w.iter().sum();
                w.iter()
                    .enumerate()
                    .map(|(j, &wj)| {
                        if i == j {
                            self.stay_prob
                        } else {
                            (1.0 - self.stay_prob) * wj / total
                        }
                    })
                    .collect()
            })
            .collect();
        MarkovWorld {
            embeddings,
            offsets,
            transition,
        }
    }

    /// Stationary distribution of the chain by power iteration.
    pub fn stationary_distribution(&self) -> Vec<f64> {
        stationary(&self.world().transition)
    }

    /// Generates `n` sequences with ids `first_id..first_id + n`. Sources are
    /// assigned round-robin so every source is equally represented.
    pub fn sample_sequences(&self, n: usize, first_id: usize, rng: &mut Rng) -> Result<Vec<LabeledSequence>> {
        if n == 0 {
            return Err(CpcError::invalid("sample_sequences: n must be at least 1"));
        }
        let specs: Vec<(usize, usize)> = (first_id..first_id + n).map(|id| (id, id % self.sources.max(1))).collect();
        self.sample_with_sources(&specs, rng)
    }

    /// Generates one sequence per `(id, source)` pair.
    pub fn sample_with_sources(&self, specs: &[(usize, usize)], rng: &mut Rng) -> Result<Vec<LabeledSequence>> {
        self.validate()?;
        if let Some(&(_, src)) = specs.iter().find(|(_, s)| *s >= self.sources) {
            return Err(CpcError::IndexOutOfRange {
                op: "sample_with_sources",
                index: src,
                len: self.sources,
            });
        }
        let world = self.world();
        let pi = stationary(&world.transition);
        let mut out = Vec::with_capacity(specs.len());
        for &(id, source) in specs {
            let mut obs = vec![0.0; self.dim * self.length];
            let mut states = Vec::with_capacity(self.length);
            let mut s = sample_index(&pi, rng);
            for t in 0..self.length {
                if t > 0 && t % self.hold == 0 {
                    s = sample_index(&world.transition[s], rng);
                }
                states.push(s);
                for ch in 0..self.dim {
                    obs[ch * self.length + t] = world.embeddings[s][ch]
                        + world.offsets[source][ch]
                        + self.noise * normal(rng);
                }
            }
            out.push(LabeledSequence {
                id,
                source,
                observations: Tensor::new(vec![self.dim, self.length], obs)?,
                states,
            });
        }
        Ok(out)
    }
}

pub(crate) fn stationary(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transition.iter().enumerate() {
            for (j, &t) in row.iter().enumerate() {
                next[j] += p[i] * t;
            }
        }
        let delta: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        p = next;
        if delta < 1e-15 {
            break;
        }
    }
    p
}
